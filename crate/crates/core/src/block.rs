//! Pre-norm transformer block shared by the encoder and the decoder.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::snt1::TensorMap;
use crate::tensor::{gelu_in_place, layernorm, linear, rng_normal, softmax_row, Tensor, LN_EPS};

/// Standard deviation of randomly initialised weights.
pub const INIT_STD: f32 = 0.02;

pub(crate) fn random_matrix(rng: &mut Rng, dims: &[usize]) -> Tensor {
    let mut t = rng_normal(rng, dims);
    t.scale(INIT_STD);
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const NAMES: [&str; 16] = [
    "ln1.weight",
    "ln1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "ln2.weight",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl BlockWeights {
    /// Gaussian weights, zero biases, unit layer-norm gains.
    pub fn random(rng: &mut Rng, dim: usize, mlp_ratio: usize) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            ln1_g: Tensor::full(&[dim], 1.0),
            ln1_b: Tensor::zeros(&[dim]),
            wq: random_matrix(rng, &[dim, dim]),
            bq: Tensor::zeros(&[dim]),
            wk: random_matrix(rng, &[dim, dim]),
            bk: Tensor::zeros(&[dim]),
            wv: random_matrix(rng, &[dim, dim]),
            bv: Tensor::zeros(&[dim]),
            wo: random_matrix(rng, &[dim, dim]),
            bo: Tensor::zeros(&[dim]),
            ln2_g: Tensor::full(&[dim], 1.0),
            ln2_b: Tensor::zeros(&[dim]),
            w1: random_matrix(rng, &[dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: random_matrix(rng, &[hidden, dim]),
            b2: Tensor::zeros(&[dim]),
        }
    }

    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        NAMES
            .iter()
            .zip(self.fields())
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect()
    }

    pub fn load(map: &mut TensorMap, prefix: &str, dim: usize, mlp_ratio: usize) -> Result<Self> {
        let hidden = dim * mlp_ratio;
        let mut take = |name: &str, dims: &[usize]| map.take(&format!("{prefix}.{name}"), dims);
        Ok(Self {
            ln1_g: take(NAMES[0], &[dim])?,
            ln1_b: take(NAMES[1], &[dim])?,
            wq: take(NAMES[2], &[dim, dim])?,
            bq: take(NAMES[3], &[dim])?,
            wk: take(NAMES[4], &[dim, dim])?,
            bk: take(NAMES[5], &[dim])?,
            wv: take(NAMES[6], &[dim, dim])?,
            bv: take(NAMES[7], &[dim])?,
            wo: take(NAMES[8], &[dim, dim])?,
            bo: take(NAMES[9], &[dim])?,
            ln2_g: take(NAMES[10], &[dim])?,
            ln2_b: take(NAMES[11], &[dim])?,
            w1: take(NAMES[12], &[dim, hidden])?,
            b1: take(NAMES[13], &[hidden])?,
            w2: take(NAMES[14], &[hidden, dim])?,
            b2: take(NAMES[15], &[dim])?,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.dims()[0]
    }
}

/// Additive bias on attention logits.
#[derive(Debug, Clone, Copy)]
pub enum AttnBias<'a> {
    None,
    /// Query `i` sees keys `0..=i` only.
    Causal,
    /// `ln(size_j)` added to every logit towards key `j` (proportional
    /// attention for merged tokens).
    LogSize(&'a [Vec<f32>]),
}

/// Attention of one query (all heads, packed `[C]`) over `t` packed key and
/// value rows. Writes the per-head context into `out` and, when given, the
/// probabilities into `probs` (`[H, t]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_one(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    t: usize,
    heads: usize,
    log_bias: Option<&[f32]>,
    mut probs: Option<&mut [f32]>,
    out: &mut [f32],
) {
    let c = q.len();
    let dh = c / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut logits = vec![0.0f32; t];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, l) in logits.iter_mut().enumerate() {
            let kh = &keys[j * c + h * dh..j * c + (h + 1) * dh];
            *l = qh.iter().zip(kh).fold(0.0f32, |acc, (a, b)| acc + a * b) * scale;
            if let Some(bias) = log_bias {
                *l += bias[j].ln();
            }
        }
        softmax_row(&mut logits);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.fill(0.0);
        for (j, p) in logits.iter().enumerate() {
            let vh = &values[j * c + h * dh..j * c + (h + 1) * dh];
            for (o, v) in oh.iter_mut().zip(vh) {
                *o += p * v;
            }
        }
        if let Some(pr) = probs.as_deref_mut() {
            pr[h * t..(h + 1) * t].copy_from_slice(&logits);
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnOutput {
    /// Output projection of the attention context, `[B, N, C]` (no residual).
    pub out: Tensor,
    /// Packed keys `[B, N, C]`.
    pub keys: Tensor,
    /// Packed values `[B, N, C]`.
    pub values: Tensor,
    /// Probabilities `[B, H, N, N]` when requested.
    pub probs: Option<Tensor>,
}

/// Layer-norm, QKV projection, multi-head attention, output projection.
pub fn self_attention(
    x: &Tensor,
    w: &BlockWeights,
    heads: usize,
    bias: AttnBias<'_>,
    record_probs: bool,
) -> Result<AttnOutput> {
    let (b, n, c) = x.dims3()?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(
            "self_attention",
            format!("width {c} not divisible by {heads}"),
        ));
    }
    if let AttnBias::LogSize(s) = bias {
        if s.len() != b || s.iter().any(|r| r.len() != n) {
            return Err(Error::shape("self_attention", "token sizes do not match input"));
        }
    }
    let h = layernorm(x, &w.ln1_g, &w.ln1_b, LN_EPS)?;
    let q = linear(&h, &w.wq, Some(&w.bq))?;
    let k = linear(&h, &w.wk, Some(&w.bk))?;
    let v = linear(&h, &w.wv, Some(&w.bv))?;

    let mut ctx = Tensor::zeros(&[b, n, c]);
    let mut probs = record_probs.then(|| Tensor::zeros(&[b, heads, n, n]));
    let mut row_probs = vec![0.0f32; heads * n];
    for bi in 0..b {
        let (qb, kb, vb) = (q.outer(bi), k.outer(bi), v.outer(bi));
        for i in 0..n {
            let t = match bias {
                AttnBias::Causal => i + 1,
                _ => n,
            };
            let log_bias = match bias {
                AttnBias::LogSize(s) => Some(s[bi].as_slice()),
                _ => None,
            };
            let out = &mut ctx.outer_mut(bi)[i * c..(i + 1) * c];
            attend_one(
                &qb[i * c..(i + 1) * c],
                kb,
                vb,
                t,
                heads,
                log_bias,
                probs.is_some().then_some(&mut row_probs[..heads * t]),
                out,
            );
            if let Some(p) = probs.as_mut() {
                let pd = p.data_mut();
                for hh in 0..heads {
                    let base = ((bi * heads + hh) * n + i) * n;
                    pd[base..base + t].copy_from_slice(&row_probs[hh * t..(hh + 1) * t]);
                }
            }
        }
    }
    let out = linear(&ctx, &w.wo, Some(&w.bo))?;
    Ok(AttnOutput {
        out,
        keys: k,
        values: v,
        probs,
    })
}

/// `fc2(gelu(fc1(ln2(x))))`, the residual delta of the MLP.
pub fn feed_forward(x: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    let h = layernorm(x, &w.ln2_g, &w.ln2_b, LN_EPS)?;
    let mut h = linear(&h, &w.w1, Some(&w.b1))?;
    gelu_in_place(&mut h);
    linear(&h, &w.w2, Some(&w.b2))
}
