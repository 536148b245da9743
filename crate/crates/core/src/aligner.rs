//! The iterative aligner: interactive alignment, self alignment, fusion and
//! evidence collection, stacked in blocks.
//!
//! Block `t` aligns the fixed question representation `V` against the
//! context representation produced by block `t-1`. Blocks after the first
//! refine their raw similarity scores with dot products of the previous
//! block's attention distributions, scaled by trainable `gamma` parameters:
//! two words are treated as more similar when their past attentions overlap.
//! The final block's evidence BiLSTM reads the concatenation of every
//! block's self-aware vectors as a residual connection.
//!
//! Self-alignment scores carry a masked diagonal: the mask drives the
//! self-weight of each context word to exactly zero after normalization,
//! and the masked entries contribute zero probability to the reattention
//! dot products.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{bilstm, BiLstmParams, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// `f(x, y) = relu(W_x x)^T relu(W_y y)`
    MulNonlinear,
    /// `f(x, y) = x . y`
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Gated interpolation `o = g . x~ + (1 - g) . x`.
    Full,
    /// `o = g . x~`
    Gate,
    /// `o = x~`
    Mlp,
}

/// Architecture switches for the aligner stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignerConfig {
    pub attention: AttentionKind,
    pub fusion: FusionKind,
    pub num_blocks: usize,
    pub reattention: bool,
    /// Drop the `x - y` slot from fusion features.
    pub drop_sub: bool,
    /// Drop the `x . y` slot from fusion features.
    pub drop_mul: bool,
    /// Reuse block 1's attention projections in every block.
    pub share_attention: bool,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            attention: AttentionKind::MulNonlinear,
            fusion: FusionKind::Full,
            num_blocks: 3,
            reattention: true,
            drop_sub: false,
            drop_mul: false,
            share_attention: false,
        }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(Error::config("num_blocks must be >= 1"));
        }
        Ok(())
    }

    fn fusion_slots(&self) -> usize {
        2 + usize::from(!self.drop_mul) + usize::from(!self.drop_sub)
    }
}

/// Projections for the similarity function; `Dot` needs none.
#[derive(Clone)]
pub struct AttentionParams {
    proj: Option<(Tensor, Tensor)>,
}

impl AttentionParams {
    fn init(kind: AttentionKind, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let proj = match kind {
            AttentionKind::Dot => None,
            AttentionKind::MulNonlinear => {
                let limit = (6.0 / (dim + hidden) as f64).sqrt();
                Some((
                    Tensor::param_uniform(vec![hidden, dim], limit, rng),
                    Tensor::param_uniform(vec![hidden, dim], limit, rng),
                ))
            }
        };
        AttentionParams { proj }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        AttentionParams {
            proj: Some((
                Tensor::param(vec![hidden, dim], vec![0.0; hidden * dim]).unwrap(),
                Tensor::param(vec![hidden, dim], vec![0.0; hidden * dim]).unwrap(),
            )),
        }
    }

    /// Score every column of `x` against every column of `y`:
    /// result `[a, b]` for `x: [dim, a]`, `y: [dim, b]`.
    pub fn score_matrix(&self, tape: &Tape, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        match &self.proj {
            Some((w_x, w_y)) => {
                let left = tape.relu(&tape.matmul(w_x, x)?);
                let right = tape.relu(&tape.matmul(w_y, y)?);
                tape.matmul(&tape.transpose(&left)?, &right)
            }
            None => tape.matmul(&tape.transpose(x)?, y),
        }
    }

    fn collect_named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some((w_x, w_y)) = &self.proj {
            out.push((format!("{prefix}.w_x"), w_x.clone()));
            out.push((format!("{prefix}.w_y"), w_y.clone()));
        }
    }
}

/// Scalar similarity between two vectors (column matrices of width 1).
pub fn attention_score(
    tape: &Tape,
    x: &Tensor,
    y: &Tensor,
    params: &AttentionParams,
) -> Result<f64> {
    let xc = if x.rank() == 1 {
        tape.transpose(&tape.transpose(x)?)?
    } else {
        x.clone()
    };
    let yc = if y.rank() == 1 {
        tape.transpose(&tape.transpose(y)?)?
    } else {
        y.clone()
    };
    Ok(params.score_matrix(tape, &xc, &yc)?.item())
}

#[derive(Clone)]
pub struct FusionParams {
    pub w_r: Tensor,
    /// Absent for the MLP variant.
    pub w_g: Option<Tensor>,
}

impl FusionParams {
    fn init(config: &AlignerConfig, dim: usize, rng: &mut impl Rng) -> Self {
        let feat = config.fusion_slots() * dim;
        let limit = (6.0 / (feat + dim) as f64).sqrt();
        FusionParams {
            w_r: Tensor::param_uniform(vec![dim, feat], limit, rng),
            w_g: match config.fusion {
                FusionKind::Mlp => None,
                _ => Some(Tensor::param_uniform(vec![dim, feat], limit, rng)),
            },
        }
    }

    fn collect_named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w_r"), self.w_r.clone()));
        if let Some(w_g) = &self.w_g {
            out.push((format!("{prefix}.w_g"), w_g.clone()));
        }
    }
}

/// Gated fusion of `x` with attended information `y` (columnwise for
/// matrices). The bias term is omitted.
pub fn fusion(
    tape: &Tape,
    x: &Tensor,
    y: &Tensor,
    params: &FusionParams,
    config: &AlignerConfig,
) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "fusion",
            lhs: x.shape(),
            rhs: y.shape(),
        });
    }
    let mut slots = vec![x.clone(), y.clone()];
    if !config.drop_mul {
        slots.push(tape.mul(x, y)?);
    }
    if !config.drop_sub {
        slots.push(tape.sub(x, y)?);
    }
    let feats = tape.concat(&slots, 0)?;
    let x_tilde = tape.relu(&tape.matmul(&params.w_r, &feats)?);
    match config.fusion {
        FusionKind::Mlp => Ok(x_tilde),
        FusionKind::Gate => {
            let w_g = params.w_g.as_ref().expect("gate fusion requires w_g");
            let g = tape.sigmoid(&tape.matmul(w_g, &feats)?);
            tape.mul(&g, &x_tilde)
        }
        FusionKind::Full => {
            let w_g = params.w_g.as_ref().expect("full fusion requires w_g");
            let g = tape.sigmoid(&tape.matmul(w_g, &feats)?);
            let gated = tape.mul(&g, &x_tilde)?;
            let ones = Tensor::ones(g.shape());
            let carry = tape.mul(&tape.sub(&ones, &g)?, x)?;
            tape.add(&gated, &carry)
        }
    }
}

/// Parameters of one aligning block.
#[derive(Clone)]
pub struct BlockParams {
    pub interactive_attention: AttentionParams,
    pub interactive_fusion: FusionParams,
    pub self_attention: AttentionParams,
    pub self_fusion: FusionParams,
    pub evidence: BiLstmParams,
    /// Reattention scales; present only in blocks after the first when
    /// reattention is enabled.
    pub gamma_e: Option<Tensor>,
    pub gamma_b: Option<Tensor>,
}

#[derive(Clone)]
pub struct AlignerParams {
    pub blocks: Vec<BlockParams>,
}

impl AlignerParams {
    pub fn init(
        hidden: usize,
        config: &AlignerConfig,
        gamma_init: f64,
        rng: &mut impl Rng,
    ) -> Result<AlignerParams> {
        config.validate()?;
        let dim = 2 * hidden;
        let total = config.num_blocks;
        let mut blocks = Vec::with_capacity(total);
        for t in 0..total {
            let (interactive_attention, self_attention) = if config.share_attention && t > 0 {
                let first: &BlockParams = &blocks[0];
                (
                    first.interactive_attention.clone(),
                    first.self_attention.clone(),
                )
            } else {
                (
                    AttentionParams::init(config.attention, dim, hidden, rng),
                    AttentionParams::init(config.attention, dim, hidden, rng),
                )
            };
            let evidence_in = if t + 1 == total { dim * total } else { dim };
            let reattends = config.reattention && t > 0;
            blocks.push(BlockParams {
                interactive_attention,
                interactive_fusion: FusionParams::init(config, dim, rng),
                self_attention,
                self_fusion: FusionParams::init(config, dim, rng),
                evidence: BiLstmParams::init(evidence_in, hidden, rng),
                gamma_e: reattends.then(|| Tensor::scalar_param(gamma_init)),
                gamma_b: reattends.then(|| Tensor::scalar_param(gamma_init)),
            });
        }
        Ok(AlignerParams { blocks })
    }

    pub fn collect_named(&self, out: &mut Vec<(String, Tensor)>) {
        for (t, b) in self.blocks.iter().enumerate() {
            let p = format!("aligner.block{}", t + 1);
            b.interactive_attention
                .collect_named(&format!("{p}.interactive_attention"), out);
            b.interactive_fusion
                .collect_named(&format!("{p}.interactive_fusion"), out);
            b.self_attention
                .collect_named(&format!("{p}.self_attention"), out);
            b.self_fusion.collect_named(&format!("{p}.self_fusion"), out);
            b.evidence.collect_named(&format!("{p}.evidence"), out);
            if let Some(g) = &b.gamma_e {
                out.push((format!("{p}.gamma_e"), g.clone()));
            }
            if let Some(g) = &b.gamma_b {
                out.push((format!("{p}.gamma_b"), g.clone()));
            }
        }
    }
}

/// Per-block memory: similarity matrices and context representations.
pub struct AlignmentState {
    /// `[n, m]` raw interactive similarity scores.
    pub e: Tensor,
    /// `[m, m]` self similarity scores with the diagonal masked out.
    pub b: Tensor,
    /// `[2d, m]` question-aware context vectors.
    pub h: Tensor,
    /// `[2d, m]` self-aware context vectors.
    pub z: Tensor,
    /// `[2d, m]` fully-aware context vectors (evidence BiLSTM output).
    pub r: Tensor,
}

/// Dot products of the previous block's interactive row distributions with
/// its self-attention column distributions; entries lie in `[0, 1]`.
pub fn e_reattention(tape: &Tape, prev: &AlignmentState) -> Result<Tensor> {
    let rows = tape.softmax(&prev.e, 1)?;
    let cols = tape.softmax(&prev.b, 0)?;
    tape.matmul(&rows, &cols)
}

/// Same construction over the self-attention matrix alone.
pub fn b_reattention(tape: &Tape, prev: &AlignmentState) -> Result<Tensor> {
    let rows = tape.softmax(&prev.b, 1)?;
    let cols = tape.softmax(&prev.b, 0)?;
    tape.matmul(&rows, &cols)
}

/// Attend the question into the context. Returns the question-aware
/// context `H` and the (possibly reattention-refined) score matrix `E`.
pub fn interactive_align(
    tape: &Tape,
    v: &Tensor,
    u_t: &Tensor,
    prev: Option<&AlignmentState>,
    block: &BlockParams,
    config: &AlignerConfig,
) -> Result<(Tensor, Tensor)> {
    let mut e = block.interactive_attention.score_matrix(tape, v, u_t)?;
    if let Some(gamma) = &block.gamma_e {
        let prev = prev.ok_or_else(|| {
            Error::contract("interactive_align: reattention block needs the previous state")
        })?;
        let refined = tape.mul_scalar(&e_reattention(tape, prev)?, gamma)?;
        e = tape.add(&e, &refined)?;
    }
    let attn = tape.softmax(&e, 0)?;
    let v_attended = tape.matmul(v, &attn)?;
    let h = fusion(tape, u_t, &v_attended, &block.interactive_fusion, config)?;
    Ok((h, e))
}

/// Attend the context against itself with the self position excluded.
/// Returns the self-aware context `Z` and the masked score matrix `B`.
/// A single-word context has no other words to attend to, so `Z = H`.
pub fn self_align(
    tape: &Tape,
    h: &Tensor,
    prev: Option<&AlignmentState>,
    block: &BlockParams,
    config: &AlignerConfig,
) -> Result<(Tensor, Tensor)> {
    let (_, m) = h.dims2();
    if m == 1 {
        return Ok((h.clone(), Tensor::zeros(vec![1, 1])));
    }
    let mut scores = block.self_attention.score_matrix(tape, h, h)?;
    if let Some(gamma) = &block.gamma_b {
        let prev = prev.ok_or_else(|| {
            Error::contract("self_align: reattention block needs the previous state")
        })?;
        let refined = tape.mul_scalar(&b_reattention(tape, prev)?, gamma)?;
        scores = tape.add(&scores, &refined)?;
    }
    let b = tape.mask_diag(&scores)?;
    let attn = tape.softmax(&b, 0)?;
    let h_attended = tape.matmul(h, &attn)?;
    let z = fusion(tape, h, &h_attended, &block.self_fusion, config)?;
    Ok((z, b))
}

/// BiLSTM over the columns of `Z`, producing fully-aware vectors `R`.
pub fn evidence_collect(tape: &Tape, z: &Tensor, params: &BiLstmParams) -> Result<Tensor> {
    let (_, m) = z.dims2();
    let inputs: Vec<Tensor> = (0..m)
        .map(|j| tape.slice_col(z, j))
        .collect::<Result<Vec<_>>>()?;
    bilstm(tape, &inputs, params)?.matrix(tape)
}

/// Run the full aligner stack. Returns the final fully-aware context and
/// every block's state for diagnostics.
pub fn run_aligner(
    tape: &Tape,
    v: &Tensor,
    u: &Tensor,
    params: &AlignerParams,
    config: &AlignerConfig,
) -> Result<(Tensor, Vec<AlignmentState>)> {
    config.validate()?;
    if params.blocks.len() != config.num_blocks {
        return Err(Error::config(format!(
            "aligner has {} blocks but config requests {}",
            params.blocks.len(),
            config.num_blocks
        )));
    }
    let total = config.num_blocks;
    let mut states: Vec<AlignmentState> = Vec::with_capacity(total);
    let mut zs: Vec<Tensor> = Vec::with_capacity(total);

    for (t, block) in params.blocks.iter().enumerate() {
        let u_t = if t == 0 {
            u.clone()
        } else {
            states[t - 1].r.clone()
        };
        let prev = if t == 0 { None } else { Some(&states[t - 1]) };
        let (h, e) = interactive_align(tape, v, &u_t, prev, block, config)?;
        let (z, b) = self_align(tape, &h, prev, block, config)?;
        zs.push(z.clone());
        let r = if t + 1 == total {
            let residual = tape.concat(&zs, 0)?;
            evidence_collect(tape, &residual, &block.evidence)?
        } else {
            evidence_collect(tape, &z, &block.evidence)?
        };
        states.push(AlignmentState { e, b, h, z, r });
    }
    let r_final = states.last().expect("at least one block").r.clone();
    Ok((r_final, states))
}

/// Column-normalized attention matrices of one block, for export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedAttention {
    /// `n x m`, column `j` is the question attention of context word `j`.
    pub e: Vec<Vec<f64>>,
    /// `m x m`, column `j` is the self attention of context word `j`
    /// (zero on the diagonal).
    pub b: Vec<Vec<f64>>,
}

fn column_softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = t.dims2();
    let mut data = t.to_vec();
    crate::tensor::softmax_raw_pub(&mut data, r, c, 0);
    (0..r).map(|i| data[i * c..(i + 1) * c].to_vec()).collect()
}

/// Normalize the stored score matrices of every block for dumping.
pub fn normalized_states(states: &[AlignmentState]) -> Vec<NormalizedAttention> {
    states
        .iter()
        .map(|s| NormalizedAttention {
            e: column_softmax_rows(&s.e),
            b: column_softmax_rows(&s.b),
        })
        .collect()
}
