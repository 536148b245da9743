//! Contextual encoding of question and context token sequences.
//!
//! Each token is embedded as the concatenation of a trainable word vector
//! and a character-level feature built by running a BiLSTM over the token's
//! characters and concatenating the two final hidden states. A single
//! weight-shared BiLSTM then encodes the question and the context, yielding
//! `V` (`[2d, n]`) and `U` (`[2d, m]`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::tensor::{bilstm, BiLstmParams, Tape, Tensor};

/// Inverted dropout: kept activations are scaled by `1/(1-rate)` during
/// training so inference applies no rescaling.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Dropout {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn on(rate: f64, seed: u64) -> Dropout {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} out of range");
        if rate == 0.0 {
            return Dropout::off();
        }
        Dropout {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn apply(&mut self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x.clone());
        };
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| {
                if rng.gen_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Tensor::constant(x.shape(), mask)?;
        tape.mul(x, &mask)
    }
}

pub struct EncoderParams {
    /// `[vocab, e_w]`, Gaussian init, trainable (UNK included).
    pub word_embedding: Tensor,
    /// `[chars, e_c]`.
    pub char_embedding: Tensor,
    pub char_bilstm: BiLstmParams,
    /// Shared between the question and context paths.
    pub main_bilstm: BiLstmParams,
}

impl EncoderParams {
    pub fn init(
        vocab_size: usize,
        char_vocab_size: usize,
        word_dim: usize,
        char_size: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> EncoderParams {
        EncoderParams {
            word_embedding: Tensor::param_gaussian(vec![vocab_size, word_dim], 0.1, rng),
            char_embedding: Tensor::param_gaussian(vec![char_vocab_size, char_size], 0.1, rng),
            char_bilstm: BiLstmParams::init(char_size, char_size, rng),
            main_bilstm: BiLstmParams::init(word_dim + 2 * char_size, hidden, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.main_bilstm.hidden_size()
    }

    pub fn char_size(&self) -> usize {
        self.char_bilstm.hidden_size()
    }

    pub fn vocab_size(&self) -> usize {
        self.word_embedding.dims2().0
    }

    pub fn char_vocab_size(&self) -> usize {
        self.char_embedding.dims2().0
    }

    pub fn collect_named(&self, out: &mut Vec<(String, Tensor)>) {
        out.push(("encoder.word_embedding".into(), self.word_embedding.clone()));
        out.push(("encoder.char_embedding".into(), self.char_embedding.clone()));
        self.char_bilstm.collect_named("encoder.char_bilstm", out);
        self.main_bilstm.collect_named("encoder.main_bilstm", out);
    }
}

/// Contextual representations: question columns `V`, context columns `U`.
pub struct Encoded {
    pub v: Tensor,
    pub u: Tensor,
}

/// Character-level embedding of one token: run the char BiLSTM over the
/// character ids and concatenate the two final hidden states, giving a
/// `[2 * char_size]` vector.
pub fn embed_chars(tape: &Tape, char_ids: &[u32], params: &EncoderParams) -> Result<Tensor> {
    if char_ids.is_empty() {
        return Err(Error::contract("embed_chars on a token with no characters"));
    }
    let ids: Vec<usize> = char_ids.iter().map(|&c| c as usize).collect();
    let rows = tape.gather_rows(&params.char_embedding, &ids)?;
    let cols = tape.transpose(&rows)?; // [e_c, len]
    let inputs: Vec<Tensor> = (0..ids.len())
        .map(|j| tape.slice_col(&cols, j))
        .collect::<Result<Vec<_>>>()?;
    let out = bilstm(tape, &inputs, &params.char_bilstm)?;
    tape.concat(&[out.fwd_final, out.bwd_final], 0)
}

fn encode_sequence(
    tape: &Tape,
    tokens: &[u32],
    chars: &[Vec<u32>],
    params: &EncoderParams,
    dropout: &mut Dropout,
) -> Result<Tensor> {
    let vocab = params.vocab_size();
    for &id in tokens {
        if id as usize >= vocab {
            return Err(Error::contract(format!(
                "token id {id} outside vocabulary of size {vocab}; map unknowns to UNK first"
            )));
        }
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let word_cols = tape.transpose(&tape.gather_rows(&params.word_embedding, &ids)?)?;

    let mut inputs = Vec::with_capacity(tokens.len());
    for (j, char_seq) in chars.iter().enumerate() {
        let word = tape.slice_col(&word_cols, j)?;
        let ch = embed_chars(tape, char_seq, params)?;
        let x = tape.concat(&[word, ch], 0)?;
        inputs.push(dropout.apply(tape, &x)?);
    }
    let out = bilstm(tape, &inputs, &params.main_bilstm)?;
    let matrix = out.matrix(tape)?;
    dropout.apply(tape, &matrix)
}

/// Encode one example into `V` (`[2d, n]`) and `U` (`[2d, m]`) with the
/// weight-shared main BiLSTM.
pub fn encode(
    tape: &Tape,
    example: &Example,
    params: &EncoderParams,
    dropout: &mut Dropout,
) -> Result<Encoded> {
    example.validate()?;
    let v = encode_sequence(
        tape,
        &example.question_tokens,
        &example.question_chars,
        params,
        dropout,
    )?;
    let u = encode_sequence(
        tape,
        &example.context_tokens,
        &example.context_chars,
        params,
        dropout,
    )?;
    Ok(Encoded { v, u })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_params(seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderParams::init(10, 8, 4, 3, 5, &mut rng)
    }

    fn example(q: &[u32], c: &[u32]) -> Example {
        let chars = |ids: &[u32]| -> Vec<Vec<u32>> {
            ids.iter().map(|&t| vec![t % 8, (t + 1) % 8]).collect()
        };
        Example {
            question_tokens: q.to_vec(),
            context_tokens: c.to_vec(),
            question_chars: chars(q),
            context_chars: chars(c),
            answer_start: 0,
            answer_end: 0,
        }
    }

    #[test]
    fn char_embedding_has_twice_char_size_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::init(10, 8, 4, 50, 5, &mut rng);
        let tape = Tape::new();
        let e = embed_chars(&tape, &[3], &params).unwrap();
        assert_eq!(e.numel(), 100);
    }

    #[test]
    fn identical_tokens_embed_identically() {
        let params = tiny_params(1);
        let tape = Tape::new();
        let a = embed_chars(&tape, &[2, 5, 1], &params).unwrap();
        let b = embed_chars(&tape, &[2, 5, 1], &params).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn reversed_token_embeds_differently() {
        let params = tiny_params(2);
        let tape = Tape::new();
        let a = embed_chars(&tape, &[2, 5, 1], &params).unwrap();
        let b = embed_chars(&tape, &[1, 5, 2], &params).unwrap();
        assert_ne!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn empty_char_sequence_is_a_contract_error() {
        let params = tiny_params(3);
        let tape = Tape::new();
        assert!(matches!(
            embed_chars(&tape, &[], &params),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn encode_shapes_for_single_tokens() {
        let params = tiny_params(4);
        let tape = Tape::new();
        let ex = example(&[2], &[3]);
        let enc = encode(&tape, &ex, &params, &mut Dropout::off()).unwrap();
        assert_eq!(enc.v.shape(), vec![10, 1]);
        assert_eq!(enc.u.shape(), vec![10, 1]);
    }

    #[test]
    fn question_order_matters() {
        let params = tiny_params(5);
        let tape = Tape::new();
        let a = encode(&tape, &example(&[2, 3, 4], &[5]), &params, &mut Dropout::off()).unwrap();
        let b = encode(&tape, &example(&[4, 3, 2], &[5]), &params, &mut Dropout::off()).unwrap();
        assert_ne!(a.v.to_vec(), b.v.to_vec());
    }

    #[test]
    fn encode_is_deterministic_without_dropout() {
        let params = tiny_params(6);
        let ex = example(&[2, 3], &[4, 5, 6]);
        let run = || {
            let tape = Tape::new();
            let enc = encode(&tape, &ex, &params, &mut Dropout::off()).unwrap();
            (enc.v.to_vec(), enc.u.to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_masks_and_rescales() {
        let tape = Tape::new();
        let x = Tensor::ones(vec![1000]);
        let mut d = Dropout::on(0.3, 42);
        let y = d.apply(&tape, &x).unwrap();
        let vals = y.to_vec();
        let zeros = vals.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 200 && zeros < 400, "{zeros} zeros");
        for v in vals {
            assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn main_bilstm_is_shared_between_question_and_context() {
        let params = tiny_params(7);
        let ex = example(&[2, 3], &[4, 5]);
        let run = |p: &EncoderParams| {
            let tape = Tape::new();
            let enc = encode(&tape, &ex, p, &mut Dropout::off()).unwrap();
            (enc.v.to_vec(), enc.u.to_vec())
        };
        let (v0, u0) = run(&params);
        params.main_bilstm.fwd.w_x.set_elem(0, 5.0);
        let (v1, u1) = run(&params);
        assert_ne!(v0, v1, "question path must see the perturbation");
        assert_ne!(u0, u1, "context path must see the perturbation");
    }

    #[test]
    fn unknown_token_id_is_a_contract_error() {
        let params = tiny_params(8);
        let tape = Tape::new();
        let ex = example(&[99], &[3]);
        assert!(matches!(
            encode(&tape, &ex, &params, &mut Dropout::off()),
            Err(Error::Contract(_))
        ));
    }
}
