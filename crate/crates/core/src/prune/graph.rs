use crate::dynamics::KeySet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits positions `protected..n` into alternating src (even offsets) and dst
/// (odd offsets) sets, returned as absolute positions.
pub fn split_bipartite(n: usize, protected: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let unprotected = n.saturating_sub(protected);
    if unprotected < 2 {
        return Err(Error::TooFewTokens { unprotected });
    }
    let src = (protected..n).step_by(2).collect();
    let dst = (protected + 1..n).step_by(2).collect();
    Ok((src, dst))
}

/// Divides every key by its L2 norm. Zero-norm keys become zero vectors and
/// their `(batch, index)` is reported.
pub fn normalize_keys(keys: &KeySet) -> (Tensor, Vec<(usize, usize)>) {
    let d = keys.dim();
    let mut out = keys.tensor().clone();
    let mut zero = Vec::new();
    for (row_idx, row) in out.data_mut().chunks_exact_mut(d.max(1)).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        } else {
            row.fill(0.0);
            zero.push((row_idx / keys.len().max(1), row_idx % keys.len().max(1)));
        }
    }
    (out, zero)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

/// Cosine similarity of every src key against every dst key, `[B, Ns, Nd]`.
pub fn similarity_matrix(src: &KeySet, dst: &KeySet) -> Result<Tensor> {
    if src.batch() != dst.batch() || src.dim() != dst.dim() {
        return Err(Error::shape(
            "similarity_matrix",
            format!("src {:?} vs dst {:?}", src.tensor().dims(), dst.tensor().dims()),
        ));
    }
    let (a, _) = normalize_keys(src);
    let (b, _) = normalize_keys(dst);
    Ok(cosine_scores(
        &a,
        &b,
        src.batch(),
        src.len(),
        dst.len(),
        src.dim(),
    ))
}

fn cosine_scores(a: &Tensor, b: &Tensor, batch: usize, ns: usize, nd: usize, d: usize) -> Tensor {
    let mut out = Vec::with_capacity(batch * ns * nd);
    for bi in 0..batch {
        let (a_item, b_item) = (a.outer(bi), b.outer(bi));
        for i in 0..ns {
            let ka = &a_item[i * d..(i + 1) * d];
            for j in 0..nd {
                out.push(dot(ka, &b_item[j * d..(j + 1) * d]));
            }
        }
    }
    Tensor::new(vec![batch, ns, nd], out).expect("sized above")
}

/// `d(v_i) = #{ j : S_ij >= tau }` for every src token, per batch item.
pub fn node_degrees(scores: &Tensor, tau: f32) -> Result<Vec<Vec<usize>>> {
    let (b, ns, nd) = scores.dims3()?;
    Ok((0..b)
        .map(|bi| {
            let item = scores.outer(bi);
            (0..ns)
                .map(|i| item[i * nd..(i + 1) * nd].iter().filter(|s| **s >= tau).count())
                .collect()
        })
        .collect())
}

/// Batch vote: each item counts its src tokens with degree >= `k`, and the
/// shared prune count is the floor of the mean of those counts.
pub fn vote_prune_rate(degrees: &[Vec<usize>], k: usize) -> usize {
    if degrees.is_empty() {
        return 0;
    }
    let total: usize = degrees
        .iter()
        .map(|d| d.iter().filter(|&&x| x >= k).count())
        .sum();
    total / degrees.len()
}

/// Closed form of the redundancy score for a connected token:
/// `degree · exp(gamma · (mean_valid - tau))`.
pub fn redundancy_score(degree: usize, mean_valid: f32, tau: f32, gamma: f32) -> f32 {
    degree as f32 * (gamma * (mean_valid - tau)).exp()
}

/// Redundancy score of every src token.
///
/// Connected tokens score `d · exp(γ(m − τ))` with `m` the mean similarity over
/// valid edges (degree clamped to at least one). Tokens with no valid edge
/// fall back to their mean similarity over all dst tokens.
pub fn redundancy_scores(
    scores: &Tensor,
    valid_mask: &[bool],
    degrees: &[Vec<usize>],
    tau: f32,
    gamma: f32,
) -> Result<Vec<Vec<f32>>> {
    let (b, ns, nd) = scores.dims3()?;
    if valid_mask.len() != b * ns * nd || degrees.len() != b || degrees.iter().any(|d| d.len() != ns) {
        return Err(Error::shape(
            "redundancy_scores",
            "mask/degree shapes disagree with scores",
        ));
    }
    Ok((0..b)
        .map(|bi| {
            let item = scores.outer(bi);
            let mask = &valid_mask[bi * ns * nd..(bi + 1) * ns * nd];
            (0..ns)
                .map(|i| {
                    let row = &item[i * nd..(i + 1) * nd];
                    let row_mask = &mask[i * nd..(i + 1) * nd];
                    let count = degrees[bi][i];
                    if count > 0 {
                        let valid_sum = row
                            .iter()
                            .zip(row_mask)
                            .fold(0.0f32, |acc, (s, &v)| if v { acc + s } else { acc });
                        let mean_valid = valid_sum / count.max(1) as f32;
                        redundancy_score(count, mean_valid, tau, gamma)
                    } else {
                        row.iter().sum::<f32>() / nd as f32
                    }
                })
                .collect()
        })
        .collect())
}

/// Thresholded bipartite similarity graph over the unprotected tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteSimGraph {
    /// `[B, Ns, Nd]` cosine similarities.
    pub scores: Tensor,
    /// Flat `[B, Ns, Nd]`, true where `score >= tau`.
    pub valid_mask: Vec<bool>,
    /// `[B][Ns]`.
    pub degrees: Vec<Vec<usize>>,
    pub src_positions: Vec<usize>,
    pub dst_positions: Vec<usize>,
    /// `(batch, absolute position)` of keys that had zero norm.
    pub zero_norm_keys: Vec<(usize, usize)>,
}

impl BipartiteSimGraph {
    pub fn build(keys: &KeySet, protected: usize, tau: f32) -> Result<Self> {
        let (src_positions, dst_positions) = split_bipartite(keys.len(), protected)?;
        let (unit, zero) = normalize_keys(keys);
        let unit = KeySet::new(unit)?;
        let batch = keys.batch();
        let src = unit.gather(&vec![src_positions.clone(); batch])?;
        let dst = unit.gather(&vec![dst_positions.clone(); batch])?;
        let scores = cosine_scores(
            src.tensor(),
            dst.tensor(),
            batch,
            src_positions.len(),
            dst_positions.len(),
            keys.dim(),
        );
        let valid_mask: Vec<bool> = scores.data().iter().map(|s| *s >= tau).collect();
        let degrees = node_degrees(&scores, tau)?;
        let zero_norm_keys = zero.into_iter().filter(|&(_, i)| i >= protected).collect();
        Ok(Self {
            scores,
            valid_mask,
            degrees,
            src_positions,
            dst_positions,
            zero_norm_keys,
        })
    }

    pub fn batch(&self) -> usize {
        self.degrees.len()
    }

    pub fn src_count(&self) -> usize {
        self.src_positions.len()
    }

    pub fn dst_count(&self) -> usize {
        self.dst_positions.len()
    }

    pub fn score(&self, b: usize, i: usize, j: usize) -> f32 {
        self.scores.data()[(b * self.src_count() + i) * self.dst_count() + j]
    }

    pub fn redundancy(&self, tau: f32, gamma: f32) -> Result<Vec<Vec<f32>>> {
        redundancy_scores(&self.scores, &self.valid_mask, &self.degrees, tau, gamma)
    }
}
