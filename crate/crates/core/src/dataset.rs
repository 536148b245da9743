//! Tokenization, vocabularies, corpus ingestion and generation.
//!
//! A [`Corpus`] holds id-encoded QA examples plus the word and character
//! vocabularies that encode them. Corpora come from three places: SQuAD-style
//! JSON ([`load_squad_json`]), the synthetic generator
//! ([`generate_synthetic`]), or a previously saved cache file
//! ([`Corpus::load`]).
//!
//! # Cache format
//!
//! `Corpus::save` writes JSON lines: the first line is a header
//! `{"format":"corpus","version":1,"vocab":[...],"char_vocab":[...]}` with
//! tokens listed in id order (ids 0 and 1 are the PAD and UNK reserves), and
//! every following line is one serialized [`Example`]. The layout is stable
//! across runs of the same build.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

const CACHE_VERSION: u32 = 1;

/// Bijective token/id map with PAD and UNK reserved at ids 0 and 1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Vocabulary {
        let mut v = Vocabulary {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    /// Restore from an id-ordered token list (cache loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::contract(
                "vocabulary must start with the PAD and UNK reserves",
            ));
        }
        let mut v = Vocabulary {
            tokens,
            index: HashMap::new(),
        };
        v.rebuild_index();
        Ok(v)
    }

    /// Insert a token if absent and return its id.
    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Id of a token, or UNK when absent.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the reserves are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new()
    }
}

/// One tokenized QA instance. `answer_start..=answer_end` index context
/// tokens and always satisfy `0 <= answer_start <= answer_end < m`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Example {
    pub question_tokens: Vec<u32>,
    pub context_tokens: Vec<u32>,
    pub question_chars: Vec<Vec<u32>>,
    pub context_chars: Vec<Vec<u32>>,
    pub answer_start: usize,
    pub answer_end: usize,
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        let m = self.context_tokens.len();
        let n = self.question_tokens.len();
        if n == 0 || m == 0 {
            return Err(Error::contract("example with empty question or context"));
        }
        if self.answer_start > self.answer_end || self.answer_end >= m {
            return Err(Error::contract(format!(
                "invalid answer span [{}, {}] for context of length {m}",
                self.answer_start, self.answer_end
            )));
        }
        if self.question_chars.len() != n || self.context_chars.len() != m {
            return Err(Error::contract("char sequences out of step with tokens"));
        }
        Ok(())
    }

    pub fn answer_span(&self) -> (usize, usize) {
        (self.answer_start, self.answer_end)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub vocab: Vocabulary,
    pub char_vocab: Vocabulary,
    /// Examples whose answers could not be mapped to token spans.
    pub dropped: usize,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        let v = self.vocab.len() as u32;
        let cv = self.char_vocab.len() as u32;
        for (i, ex) in self.examples.iter().enumerate() {
            ex.validate()
                .map_err(|e| Error::contract(format!("example {i}: {e}")))?;
            let ids_ok = ex
                .question_tokens
                .iter()
                .chain(&ex.context_tokens)
                .all(|&id| id < v);
            let chars_ok = ex
                .question_chars
                .iter()
                .chain(&ex.context_chars)
                .flatten()
                .all(|&id| id < cv);
            if !ids_ok || !chars_ok {
                return Err(Error::contract(format!("example {i}: id out of vocabulary")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Decode a context token span back to strings (diagnostics output).
    pub fn span_text(&self, ex: &Example, span: (usize, usize)) -> String {
        ex.context_tokens[span.0..=span.1]
            .iter()
            .map(|&id| self.vocab.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = serde_json::json!({
            "format": "corpus",
            "version": CACHE_VERSION,
            "vocab": self.vocab.tokens(),
            "char_vocab": self.char_vocab.tokens(),
            "dropped": self.dropped,
        });
        writeln!(file, "{header}")?;
        for ex in &self.examples {
            writeln!(file, "{}", serde_json::to_string(ex)?)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let display = path.display().to_string();
        let file = std::fs::File::open(path)
            .map_err(|e| Error::ingest(&display, format!("cannot open: {e}")))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::ingest(&display, "empty corpus file"))??;
        let header: serde_json::Value = serde_json::from_str(&header_line)
            .map_err(|e| Error::ingest(&display, format!("bad header: {e}")))?;
        if header["format"] != "corpus" {
            return Err(Error::ingest(&display, "not a corpus file"));
        }
        if header["version"] != CACHE_VERSION {
            return Err(Error::ingest(
                &display,
                format!("unsupported corpus version {}", header["version"]),
            ));
        }
        let tok = |v: &serde_json::Value| -> Result<Vec<String>> {
            serde_json::from_value(v.clone())
                .map_err(|e| Error::ingest(&display, format!("bad vocabulary: {e}")))
        };
        let vocab = Vocabulary::from_tokens(tok(&header["vocab"])?)?;
        let char_vocab = Vocabulary::from_tokens(tok(&header["char_vocab"])?)?;
        let dropped = header["dropped"].as_u64().unwrap_or(0) as usize;
        let mut examples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Example = serde_json::from_str(&line)
                .map_err(|e| Error::ingest(&display, format!("example line {}: {e}", i + 2)))?;
            examples.push(ex);
        }
        let corpus = Corpus {
            examples,
            vocab,
            char_vocab,
            dropped,
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

/// Lowercased alphanumeric-run tokenization; everything else separates.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text)
        .into_iter()
        .map(|(t, _, _)| t)
        .collect()
}

/// Tokens plus their `[start, end)` byte offsets in the original text.
pub fn tokenize_with_offsets(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            out.push((text[s..i].to_lowercase(), s, i));
        }
    }
    if let Some(s) = start {
        out.push((text[s..].to_lowercase(), s, text.len()));
    }
    out
}

fn char_ids(token: &str, chars: &mut Vocabulary) -> Vec<u32> {
    token
        .chars()
        .map(|c| chars.intern(&c.to_string()))
        .collect()
}

fn char_ids_readonly(token: &str, chars: &Vocabulary) -> Vec<u32> {
    token
        .chars()
        .map(|c| chars.id(&c.to_string()))
        .collect()
}

/// Encode raw question/context token strings against existing vocabularies,
/// mapping unknown tokens to UNK.
pub fn encode_example(
    question: &[String],
    context: &[String],
    span: (usize, usize),
    vocab: &Vocabulary,
    char_vocab: &Vocabulary,
) -> Example {
    Example {
        question_tokens: question.iter().map(|t| vocab.id(t)).collect(),
        context_tokens: context.iter().map(|t| vocab.id(t)).collect(),
        question_chars: question
            .iter()
            .map(|t| char_ids_readonly(t, char_vocab))
            .collect(),
        context_chars: context
            .iter()
            .map(|t| char_ids_readonly(t, char_vocab))
            .collect(),
        answer_start: span.0,
        answer_end: span.1,
    }
}

// ---------------------------------------------------------------------------
// SQuAD-style JSON ingestion
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Deserialize)]
struct SquadQa {
    question: String,
    answers: Vec<SquadAnswer>,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: i64,
}

/// Map a character interval to the covering token span. Partial overlaps
/// snap outward to whole tokens.
fn covering_span(
    offsets: &[(String, usize, usize)],
    char_start: usize,
    char_end: usize,
) -> Option<(usize, usize)> {
    let mut first = None;
    let mut last = None;
    for (i, (_, s, e)) in offsets.iter().enumerate() {
        if *s < char_end && *e > char_start {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    Some((first?, last?))
}

/// Read a SQuAD v1.1 style JSON file. Answers whose character offsets cannot
/// be located in the context are dropped and counted.
pub fn load_squad_json(path: &Path) -> Result<Corpus> {
    let display = path.display().to_string();
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::ingest(&display, format!("cannot read: {e}")))?;
    let file: SquadFile = serde_json::from_str(&raw).map_err(|e| {
        Error::ingest(
            &display,
            format!("does not parse as SQuAD JSON (data -> paragraphs -> qas): {e}"),
        )
    })?;

    let mut vocab = Vocabulary::new();
    let mut char_vocab = Vocabulary::new();
    let mut examples = Vec::new();
    let mut dropped = 0usize;

    for (ai, article) in file.data.iter().enumerate() {
        for (pi, para) in article.paragraphs.iter().enumerate() {
            let offsets = tokenize_with_offsets(&para.context);
            for (qi, qa) in para.qas.iter().enumerate() {
                let at = format!("data[{ai}].paragraphs[{pi}].qas[{qi}]");
                let answer = qa.answers.first().ok_or_else(|| {
                    Error::ingest(&display, format!("{at}: no answers present"))
                })?;
                let question = tokenize(&qa.question);
                if question.is_empty() || offsets.is_empty() {
                    dropped += 1;
                    continue;
                }
                let span = locate_answer(&para.context, &offsets, answer);
                let Some(span) = span else {
                    dropped += 1;
                    continue;
                };
                let context: Vec<String> = offsets.iter().map(|(t, _, _)| t.clone()).collect();
                for t in question.iter().chain(&context) {
                    vocab.intern(t);
                    char_ids(t, &mut char_vocab);
                }
                examples.push(Example {
                    question_tokens: question.iter().map(|t| vocab.id(t)).collect(),
                    context_tokens: context.iter().map(|t| vocab.id(t)).collect(),
                    question_chars: question
                        .iter()
                        .map(|t| char_ids_readonly(t, &char_vocab))
                        .collect(),
                    context_chars: context
                        .iter()
                        .map(|t| char_ids_readonly(t, &char_vocab))
                        .collect(),
                    answer_start: span.0,
                    answer_end: span.1,
                });
            }
        }
    }

    let corpus = Corpus {
        examples,
        vocab,
        char_vocab,
        dropped,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Find the token span for an answer: trust the stated offset when the text
/// matches there, otherwise search for the answer text, otherwise give up.
fn locate_answer(
    context: &str,
    offsets: &[(String, usize, usize)],
    answer: &SquadAnswer,
) -> Option<(usize, usize)> {
    if answer.text.is_empty() {
        return None;
    }
    let stated = usize::try_from(answer.answer_start).ok();
    let char_start = match stated {
        Some(s) if context.get(s..s + answer.text.len()) == Some(answer.text.as_str()) => s,
        _ => context.find(&answer.text)?,
    };
    covering_span(offsets, char_start, char_start + answer.text.len())
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation
// ---------------------------------------------------------------------------

/// Knobs for the synthetic QA templates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrammarParams {
    /// Sentences per context; each extra sentence is a distractor.
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Probability an object gets an adjective, making the answer for
    /// what-questions a two-token span.
    pub adjective_prob: f64,
}

impl Default for GrammarParams {
    fn default() -> Self {
        GrammarParams {
            min_sentences: 2,
            max_sentences: 4,
            adjective_prob: 0.3,
        }
    }
}

const PEOPLE: &[&str] = &[
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi",
];
const OBJECTS: &[&str] = &[
    "book", "lamp", "coin", "map", "key", "violin", "hat", "stone",
];
const PLACES: &[&str] = &[
    "paris", "london", "berlin", "oslo", "cairo", "tokyo", "quito", "delhi",
];
const VERBS: &[&str] = &["kept", "found", "sold", "hid", "borrowed", "carried"];
const ADJECTIVES: &[&str] = &["red", "old", "tiny", "blue"];

struct Sentence {
    person: &'static str,
    verb: &'static str,
    adjective: Option<&'static str>,
    object: &'static str,
    place: &'static str,
}

impl Sentence {
    fn tokens(&self) -> Vec<String> {
        let mut t = vec![self.person.to_string(), self.verb.to_string(), "the".to_string()];
        if let Some(adj) = self.adjective {
            t.push(adj.to_string());
        }
        t.push(self.object.to_string());
        t.push("in".to_string());
        t.push(self.place.to_string());
        t
    }
}

/// Deterministic templated who/what/where corpus. Within one context every
/// person, object and place is distinct, so each question has exactly one
/// matching answer span; the remaining sentences act as distractors.
pub fn generate_synthetic(
    seed: u64,
    num_examples: usize,
    grammar: &GrammarParams,
) -> Result<Corpus> {
    if num_examples == 0 {
        return Err(Error::config("num_examples must be >= 1"));
    }
    if grammar.min_sentences == 0 || grammar.min_sentences > grammar.max_sentences {
        return Err(Error::config("invalid sentence count range"));
    }
    if grammar.max_sentences > PEOPLE.len().min(OBJECTS.len()).min(PLACES.len()) {
        return Err(Error::config(format!(
            "max_sentences must be <= {}",
            PEOPLE.len().min(OBJECTS.len()).min(PLACES.len())
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = Vocabulary::new();
    let mut char_vocab = Vocabulary::new();
    let mut examples = Vec::with_capacity(num_examples);

    for _ in 0..num_examples {
        let k = rng.gen_range(grammar.min_sentences..=grammar.max_sentences);
        let mut people: Vec<&str> = PEOPLE.to_vec();
        let mut objects: Vec<&str> = OBJECTS.to_vec();
        let mut places: Vec<&str> = PLACES.to_vec();
        people.shuffle(&mut rng);
        objects.shuffle(&mut rng);
        places.shuffle(&mut rng);

        let sentences: Vec<Sentence> = (0..k)
            .map(|i| Sentence {
                person: people[i],
                verb: VERBS[rng.gen_range(0..VERBS.len())],
                adjective: if rng.gen_range(0.0..1.0) < grammar.adjective_prob {
                    Some(ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())])
                } else {
                    None
                },
                object: objects[i],
                place: places[i],
            })
            .collect();

        let mut context: Vec<String> = Vec::new();
        let mut sentence_start = Vec::new();
        for s in &sentences {
            sentence_start.push(context.len());
            context.extend(s.tokens());
        }

        let target = rng.gen_range(0..k);
        let s = &sentences[target];
        let base = sentence_start[target];
        let object_pos = base + if s.adjective.is_some() { 4 } else { 3 };
        let (question, span) = match rng.gen_range(0..3) {
            0 => {
                // who <verb> the <object> -> the person token
                let q = vec![
                    "who".to_string(),
                    s.verb.to_string(),
                    "the".to_string(),
                    s.object.to_string(),
                ];
                (q, (base, base))
            }
            1 => {
                // what was <verb> by <person> -> [adjective] object
                let q = vec![
                    "what".to_string(),
                    "was".to_string(),
                    s.verb.to_string(),
                    "by".to_string(),
                    s.person.to_string(),
                ];
                let start = if s.adjective.is_some() {
                    object_pos - 1
                } else {
                    object_pos
                };
                (q, (start, object_pos))
            }
            _ => {
                // where was the <object> <verb> -> the place token
                let q = vec![
                    "where".to_string(),
                    "was".to_string(),
                    "the".to_string(),
                    s.object.to_string(),
                    s.verb.to_string(),
                ];
                let place_pos = object_pos + 2;
                (q, (place_pos, place_pos))
            }
        };

        for t in question.iter().chain(&context) {
            vocab.intern(t);
            char_ids(t, &mut char_vocab);
        }
        examples.push(Example {
            question_tokens: question.iter().map(|t| vocab.id(t)).collect(),
            context_tokens: context.iter().map(|t| vocab.id(t)).collect(),
            question_chars: question
                .iter()
                .map(|t| char_ids_readonly(t, &char_vocab))
                .collect(),
            context_chars: context
                .iter()
                .map(|t| char_ids_readonly(t, &char_vocab))
                .collect(),
            answer_start: span.0,
            answer_end: span.1,
        });
    }

    let corpus = Corpus {
        examples,
        vocab,
        char_vocab,
        dropped: 0,
    };
    corpus.validate()?;
    Ok(corpus)
}
