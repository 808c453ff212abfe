//! Token-dynamics metrics: key similarity, CLS and token attention entropy,
//! and mean attention paid to the CLS position. All accumulate in f64.

mod flops;

pub use flops::{decode_step_flops, flops_model, FlopsArch, FlopsLedger, LayerFlops, LayerTokens, PatchStem};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on row sums when checking that attention rows are distributions.
const STOCHASTIC_TOL: f64 = 1e-5;

/// Head-averaged keys, `[B, N, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySet(Tensor);

impl KeySet {
    pub fn new(keys: Tensor) -> Result<Self> {
        keys.dims3()?;
        Ok(Self(keys))
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn len(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn key(&self, b: usize, i: usize) -> &[f32] {
        let (n, d) = (self.len(), self.dim());
        let start = (b * n + i) * d;
        &self.0.data()[start..start + d]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Gathers `positions[b]` for every batch item; all lists must share a length.
    pub fn gather(&self, positions: &[Vec<usize>]) -> Result<KeySet> {
        let n_out = positions.first().map_or(0, Vec::len);
        if positions.len() != self.batch() || positions.iter().any(|p| p.len() != n_out) {
            return Err(Error::shape(
                "KeySet::gather",
                "ragged or mismatched position lists",
            ));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(self.batch() * n_out * d);
        for (b, pos) in positions.iter().enumerate() {
            for &i in pos {
                data.extend_from_slice(self.key(b, i));
            }
        }
        KeySet::new(Tensor::new(vec![self.batch(), n_out, d], data)?)
    }
}

/// Mean over heads of `[B, H, N, Dh]` keys. Heads are summed in index order
/// and the sum divided by `H`; the result is not normalised.
pub fn head_avg_keys(keys_per_head: &Tensor) -> Result<KeySet> {
    let (b, h, n, d) = match keys_per_head.dims()[..] {
        [b, h, n, d] => (b, h, n, d),
        _ => {
            return Err(Error::shape(
                "head_avg_keys",
                format!("{:?}", keys_per_head.dims()),
            ))
        }
    };
    if h == 0 {
        return Err(Error::shape("head_avg_keys", "zero heads"));
    }
    let src = keys_per_head.data();
    let mut out = vec![0.0f32; b * n * d];
    for bi in 0..b {
        for hi in 0..h {
            let base = (bi * h + hi) * n * d;
            let dst = &mut out[bi * n * d..(bi + 1) * n * d];
            for (o, v) in dst.iter_mut().zip(&src[base..base + n * d]) {
                *o += v;
            }
        }
    }
    let inv = h as f32;
    for v in &mut out {
        *v /= inv;
    }
    KeySet::new(Tensor::new(vec![b, n, d], out)?)
}

/// Same as [`head_avg_keys`] for keys packed as `[B, N, H·Dh]` (head-major
/// within each token), which is how the projection layers emit them.
pub fn head_avg_packed(keys: &Tensor, heads: usize) -> Result<KeySet> {
    let (b, n, c) = keys.dims3()?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(
            "head_avg_packed",
            format!("width {c} not divisible by {heads}"),
        ));
    }
    let d = c / heads;
    let mut out = vec![0.0f32; b * n * d];
    for (tok, dst) in keys.data().chunks_exact(c).zip(out.chunks_exact_mut(d)) {
        for head in tok.chunks_exact(d) {
            for (o, v) in dst.iter_mut().zip(head) {
                *o += v;
            }
        }
        for o in dst.iter_mut() {
            *o /= heads as f32;
        }
    }
    KeySet::new(Tensor::new(vec![b, n, d], out)?)
}

fn unit(v: &[f32]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    (norm > 0.0).then(|| v.iter().map(|x| *x as f64 / norm).collect())
}

/// Mean pairwise cosine similarity of the keys, diagonal included, one value
/// per batch item. A zero-norm key is reported as degenerate input.
pub fn key_similarity_score(keys: &KeySet) -> Result<Vec<f32>> {
    let n = keys.len();
    if n == 0 {
        return Err(Error::Degenerate("key similarity of an empty token set".into()));
    }
    (0..keys.batch())
        .map(|b| {
            let units = (0..n)
                .map(|i| {
                    unit(keys.key(b, i))
                        .ok_or_else(|| Error::Degenerate(format!("zero-norm key at batch {b}, token {i}")))
                })
                .collect::<Result<Vec<_>>>()?;
            // sum_ij u_i.u_j == |sum_i u_i|^2
            let d = keys.dim();
            let mut acc = vec![0.0f64; d];
            for u in &units {
                for (a, x) in acc.iter_mut().zip(u) {
                    *a += x;
                }
            }
            let total: f64 = acc.iter().map(|a| a * a).sum();
            Ok((total / (n * n) as f64).clamp(-1.0, 1.0) as f32)
        })
        .collect()
}

fn check_distribution(row: &[f32], what: &str) -> Result<()> {
    if let Some(v) = row.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain(format!("{what}: invalid probability {v}")));
    }
    let sum: f64 = row.iter().map(|v| *v as f64).sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Domain(format!("{what}: row sums to {sum}, not 1")));
    }
    Ok(())
}

fn entropy(row: &[f32]) -> f64 {
    row.iter()
        .filter(|p| **p > 0.0)
        .map(|p| {
            let p = *p as f64;
            -p * p.ln()
        })
        .sum()
}

/// Natural-log entropy of the CLS attention row.
pub fn cls_attention_entropy(attn_row: &[f32]) -> Result<f32> {
    check_distribution(attn_row, "cls_attention_entropy")?;
    Ok(entropy(attn_row) as f32)
}

fn square(attn: &Tensor, op: &'static str) -> Result<usize> {
    match attn.dims()[..] {
        [n, m] if n == m => Ok(n),
        _ => Err(Error::shape(
            op,
            format!("expected square matrix, got {:?}", attn.dims()),
        )),
    }
}

/// Mean row entropy of a head-averaged `[N, N]` attention matrix. With a CLS
/// token present its row (index 0) is excluded and the mean runs over the
/// remaining `N - 1` rows.
pub fn token_attention_entropy(attn: &Tensor, cls_present: bool) -> Result<f32> {
    let n = square(attn, "token_attention_entropy")?;
    let skip = usize::from(cls_present);
    if n <= skip {
        return Ok(0.0);
    }
    let mut total = 0.0f64;
    for row in attn.rows().skip(skip) {
        check_distribution(row, "token_attention_entropy")?;
        total += entropy(row);
    }
    Ok((total / (n - skip) as f64) as f32)
}

/// Average attention every token pays to position 0.
pub fn mean_cls_attention(attn: &Tensor) -> Result<f32> {
    let n = square(attn, "mean_cls_attention")?;
    if n == 0 {
        return Err(Error::Degenerate("mean_cls_attention of empty matrix".into()));
    }
    let mut total = 0.0f64;
    for row in attn.rows() {
        check_distribution(row, "mean_cls_attention")?;
        total += row[0] as f64;
    }
    Ok((total / n as f64) as f32)
}

/// Mean over heads of `[B, H, N, N]` attention probabilities.
pub fn head_avg_attention(attn: &Tensor) -> Result<Tensor> {
    let (b, h, n) = match attn.dims()[..] {
        [b, h, n, m] if n == m => (b, h, n),
        _ => return Err(Error::shape("head_avg_attention", format!("{:?}", attn.dims()))),
    };
    let mut out = Tensor::zeros(&[b, n, n]);
    let stride = n * n;
    for bi in 0..b {
        let dst = out.outer_mut(bi);
        for hi in 0..h {
            let src = &attn.data()[(bi * h + hi) * stride..(bi * h + hi + 1) * stride];
            for (o, v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
        for o in dst.iter_mut() {
            *o /= h as f32;
        }
    }
    Ok(out)
}

/// Per-layer snapshot of the four dynamics metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicsRecord {
    pub layer_index: usize,
    pub token_count: usize,
    pub key_similarity: f32,
    pub cls_entropy: f32,
    pub token_entropy: f32,
    pub mean_cls_attention: f32,
}

impl DynamicsRecord {
    /// Metrics for batch item `b`, from one layer's head-averaged keys and
    /// head-averaged `[B, N, N]` attention.
    pub fn compute(
        layer_index: usize,
        keys: &KeySet,
        attn: &Tensor,
        b: usize,
        cls_present: bool,
    ) -> Result<Self> {
        let n = keys.len();
        let key_similarity = key_similarity_score(keys)?[b];
        let mat = Tensor::new(vec![n, n], attn.outer(b).to_vec())?;
        Ok(Self {
            layer_index,
            token_count: n,
            key_similarity,
            cls_entropy: cls_attention_entropy(&mat.data()[..n])?,
            token_entropy: token_attention_entropy(&mat, cls_present)?,
            mean_cls_attention: mean_cls_attention(&mat)?,
        })
    }
}
