use std::cmp::Ordering;

use super::decision::{apply_decision, decide_with_r, descending_order, OrderPolicy, PruneDecision};
use super::graph::{normalize_keys, split_bipartite, BipartiteSimGraph};
use super::{gather_tokens, PruneConfig, Pruned};
use crate::dynamics::KeySet;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn check_r(op: &'static str, r: usize, limit: usize) -> Result<()> {
    if r > limit {
        return Err(Error::PruneTooLarge { op, r, limit });
    }
    Ok(())
}

fn keep_complement(n: usize, dropped: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in dropped {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

/// Drops the `r` unprotected tokens receiving the least CLS attention.
/// Ties go to the lower position first; survivors stay in positional order.
pub fn baseline_attention_drop(
    tokens: &Tensor,
    cls_rows: &[Vec<f32>],
    r: usize,
    protected: usize,
) -> Result<Pruned> {
    let (b, n, _) = tokens.dims3()?;
    check_r("attention_drop", r, n.saturating_sub(protected))?;
    if cls_rows.len() != b || cls_rows.iter().any(|row| row.len() != n) {
        return Err(Error::shape(
            "attention_drop",
            "CLS attention rows do not match tokens",
        ));
    }
    if r == 0 {
        return Pruned::identity(tokens, None);
    }
    let positions: Vec<Vec<usize>> = cls_rows
        .iter()
        .map(|row| {
            let mut cand: Vec<usize> = (protected..n).collect();
            cand.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal));
            keep_complement(n, &cand[..r])
        })
        .collect();
    Ok(Pruned {
        tokens: gather_tokens(tokens, &positions)?,
        positions,
        sizes: None,
        r,
    })
}

/// Drops `r` unprotected tokens chosen uniformly without replacement.
pub fn baseline_random_drop(tokens: &Tensor, r: usize, protected: usize, seed: u64) -> Result<Pruned> {
    let (b, n, _) = tokens.dims3()?;
    let unprotected = n.saturating_sub(protected);
    check_r("random_drop", r, unprotected)?;
    if r == 0 {
        return Pruned::identity(tokens, None);
    }
    let mut rng = Rng::new(seed);
    let positions: Vec<Vec<usize>> = (0..b)
        .map(|_| {
            let dropped: Vec<usize> = rng
                .sample_indices(unprotected, r)
                .into_iter()
                .map(|i| i + protected)
                .collect();
            keep_complement(n, &dropped)
        })
        .collect();
    Ok(Pruned {
        tokens: gather_tokens(tokens, &positions)?,
        positions,
        sizes: None,
        r,
    })
}

/// Similarity-ranked decision with a fixed drop count instead of the vote.
pub fn constant_decide(keys: &KeySet, cfg: &PruneConfig, r: usize) -> Result<PruneDecision> {
    cfg.validate()?;
    let (batch, n) = (keys.batch(), keys.len());
    if r == 0 {
        return Ok(PruneDecision::identity(batch, n, cfg.protected_count));
    }
    let graph = BipartiteSimGraph::build(keys, cfg.protected_count, cfg.tau)?;
    check_r("constant_drop", r, graph.src_count())?;
    decide_with_r(&graph, n, cfg, r)
}

/// Drops exactly `cfg.constant_r` src tokens ranked by redundancy score.
pub fn constant_drop(
    tokens: &Tensor,
    keys: &KeySet,
    cfg: &PruneConfig,
    policy: OrderPolicy,
) -> Result<Pruned> {
    let decision = constant_decide(keys, cfg, cfg.constant_r)?;
    let positions = (0..decision.batch)
        .map(|b| decision.kept_positions(b, policy))
        .collect();
    Ok(Pruned {
        tokens: apply_decision(tokens, &decision, policy)?,
        positions,
        sizes: None,
        r: decision.r,
    })
}

/// Bipartite soft matching: each of the `r` src tokens with the highest
/// best-match similarity is folded into its most similar dst token by a
/// size-weighted average. Sizes accumulate so later layers can use
/// proportional attention. Survivors stay in positional order.
pub fn baseline_merge(
    tokens: &Tensor,
    keys: &KeySet,
    sizes: Option<&[Vec<f32>]>,
    r: usize,
    protected: usize,
) -> Result<Pruned> {
    let (b, n, c) = tokens.dims3()?;
    if keys.batch() != b || keys.len() != n {
        return Err(Error::shape("merge", "keys do not match tokens"));
    }
    let sizes: Vec<Vec<f32>> = match sizes {
        Some(s) if s.len() == b && s.iter().all(|x| x.len() == n) => s.to_vec(),
        Some(_) => return Err(Error::shape("merge", "sizes do not match tokens")),
        None => vec![vec![1.0; n]; b],
    };
    if r == 0 {
        return Ok(Pruned {
            tokens: tokens.clone(),
            positions: vec![(0..n).collect(); b],
            sizes: Some(sizes),
            r: 0,
        });
    }
    let (src, dst) = split_bipartite(n, protected)?;
    check_r("merge", r, src.len())?;
    let (unit, _) = normalize_keys(keys);
    let d = keys.dim();

    let mut out_tokens = Vec::with_capacity(b * (n - r) * c);
    let mut out_positions = Vec::with_capacity(b);
    let mut out_sizes = Vec::with_capacity(b);
    for (bi, size) in sizes.iter().enumerate() {
        let key = |i: usize| &unit.outer(bi)[i * d..(i + 1) * d];
        let (best, best_sim): (Vec<usize>, Vec<f32>) = src
            .iter()
            .map(|&s| {
                let mut arg = 0;
                let mut max = f32::NEG_INFINITY;
                for (j, &t) in dst.iter().enumerate() {
                    let sim = key(s).iter().zip(key(t)).fold(0.0f32, |acc, (x, y)| acc + x * y);
                    if sim > max {
                        max = sim;
                        arg = j;
                    }
                }
                (arg, max)
            })
            .unzip();
        let order = descending_order(&best_sim);
        let merged = &order[..r];

        let item = tokens.outer(bi);
        let mut acc: Vec<Option<(Vec<f32>, f32)>> = vec![None; dst.len()];
        for &si in merged {
            let j = best[si];
            let entry = acc[j].get_or_insert_with(|| {
                let t = dst[j];
                (
                    item[t * c..(t + 1) * c].iter().map(|v| v * size[t]).collect(),
                    size[t],
                )
            });
            let s = src[si];
            for (a, v) in entry.0.iter_mut().zip(&item[s * c..(s + 1) * c]) {
                *a += v * size[s];
            }
            entry.1 += size[s];
        }

        let mut gone = vec![false; n];
        for &si in merged {
            gone[src[si]] = true;
        }
        let dst_slot: std::collections::HashMap<usize, usize> =
            dst.iter().enumerate().map(|(j, &t)| (t, j)).collect();
        let mut positions = Vec::with_capacity(n - r);
        let mut new_sizes = Vec::with_capacity(n - r);
        for i in (0..n).filter(|&i| !gone[i]) {
            positions.push(i);
            match dst_slot.get(&i).and_then(|&j| acc[j].as_ref()) {
                Some((sum, total)) => {
                    out_tokens.extend(sum.iter().map(|v| v / total));
                    new_sizes.push(*total);
                }
                None => {
                    out_tokens.extend_from_slice(&item[i * c..(i + 1) * c]);
                    new_sizes.push(size[i]);
                }
            }
        }
        out_positions.push(positions);
        out_sizes.push(new_sizes);
    }
    Ok(Pruned {
        tokens: Tensor::new(vec![b, n - r, c], out_tokens)?,
        positions: out_positions,
        sizes: Some(out_sizes),
        r,
    })
}
