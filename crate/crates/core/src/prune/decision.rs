use std::cmp::Ordering;

use super::graph::BipartiteSimGraph;
use super::{gather_tokens, PruneConfig, PruneMode};
use crate::dynamics::KeySet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How surviving src tokens are laid out after a drop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrderPolicy {
    /// `[protected, kept src by descending score, dst]`. Safe for encoders,
    /// where attention is permutation-equivariant once positions are embedded.
    #[default]
    ScoreOrder,
    /// Survivors keep their original relative order. Required under causal
    /// masking.
    PositionalOrder,
}

/// Which src tokens a prune step drops, shared shape across the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneDecision {
    pub batch: usize,
    pub n_tokens: usize,
    pub protected: usize,
    /// Src tokens dropped per item; identical for the whole batch.
    pub r: usize,
    pub src_positions: Vec<usize>,
    pub dst_positions: Vec<usize>,
    /// Per item, src indices (into `src_positions`) ordered by descending
    /// redundancy score; the first `r` are dropped.
    pub ranking: Vec<Vec<usize>>,
    pub scores_snapshot: Option<Vec<Vec<f32>>>,
    pub zero_norm_keys: Vec<(usize, usize)>,
}

impl PruneDecision {
    pub fn identity(batch: usize, n_tokens: usize, protected: usize) -> Self {
        let unprotected = n_tokens.saturating_sub(protected);
        let src_positions: Vec<usize> = (protected..n_tokens).step_by(2).collect();
        let dst_positions = (protected + 1..n_tokens).step_by(2).collect();
        let ranking = vec![(0..src_positions.len()).collect(); batch];
        debug_assert!(unprotected >= src_positions.len());
        Self {
            batch,
            n_tokens,
            protected,
            r: 0,
            src_positions,
            dst_positions,
            ranking,
            scores_snapshot: None,
            zero_norm_keys: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.r == 0
    }

    /// Src ranks `r..Ns` of item `b`, in score order.
    pub fn kept_src_ranks(&self, b: usize) -> &[usize] {
        &self.ranking[b][self.r..]
    }

    pub fn dropped_src_ranks(&self, b: usize) -> &[usize] {
        &self.ranking[b][..self.r]
    }

    /// Absolute positions dropped for item `b`, ascending.
    pub fn dropped_positions(&self, b: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .dropped_src_ranks(b)
            .iter()
            .map(|&i| self.src_positions[i])
            .collect();
        out.sort_unstable();
        out
    }

    /// Input positions of the output rows of item `b` under `policy`.
    pub fn kept_positions(&self, b: usize, policy: OrderPolicy) -> Vec<usize> {
        if self.is_identity() {
            return (0..self.n_tokens).collect();
        }
        let mut out: Vec<usize> = (0..self.protected).collect();
        let kept_src = self.kept_src_ranks(b).iter().map(|&i| self.src_positions[i]);
        match policy {
            OrderPolicy::ScoreOrder => {
                out.extend(kept_src);
                out.extend_from_slice(&self.dst_positions);
            }
            OrderPolicy::PositionalOrder => {
                let mut rest: Vec<usize> = kept_src.chain(self.dst_positions.iter().copied()).collect();
                rest.sort_unstable();
                out.extend(rest);
            }
        }
        out
    }
}

/// Descending stable order of `scores`; equal scores keep ascending index.
pub(crate) fn descending_order(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Ranks src tokens of an already built graph and drops the top `r`.
pub(crate) fn decide_with_r(
    graph: &BipartiteSimGraph,
    n_tokens: usize,
    cfg: &PruneConfig,
    r: usize,
) -> Result<PruneDecision> {
    let scores = graph.redundancy(cfg.tau, cfg.gamma)?;
    let ranking = scores.iter().map(|s| descending_order(s)).collect();
    Ok(PruneDecision {
        batch: graph.batch(),
        n_tokens,
        protected: cfg.protected_count,
        r,
        src_positions: graph.src_positions.clone(),
        dst_positions: graph.dst_positions.clone(),
        ranking,
        scores_snapshot: Some(scores),
        zero_norm_keys: graph.zero_norm_keys.clone(),
    })
}

/// Full adaptive decision: build the thresholded graph over unprotected keys,
/// vote a shared `r`, rank src tokens by redundancy and drop the top `r`.
///
/// Returns the identity decision when pruning is off, when fewer than two
/// unprotected tokens remain, or when the vote yields zero.
pub fn saint_decide(keys: &KeySet, cfg: &PruneConfig) -> Result<PruneDecision> {
    cfg.validate()?;
    let (batch, n) = (keys.batch(), keys.len());
    let identity = PruneDecision::identity(batch, n, cfg.protected_count);
    if cfg.mode == PruneMode::Off {
        return Ok(identity);
    }
    let graph = match BipartiteSimGraph::build(keys, cfg.protected_count, cfg.tau) {
        Ok(g) => g,
        Err(Error::TooFewTokens { .. }) => return Ok(identity),
        Err(e) => return Err(e),
    };
    let r = super::graph::vote_prune_rate(&graph.degrees, cfg.k_neighbors);
    if r == 0 {
        return Ok(PruneDecision {
            zero_norm_keys: graph.zero_norm_keys,
            ..identity
        });
    }
    decide_with_r(&graph, n, cfg, r)
}

/// Materialises a decision: `[B, N, C]` in, `[B, N - r, C]` out.
pub fn apply_decision(tokens: &Tensor, decision: &PruneDecision, policy: OrderPolicy) -> Result<Tensor> {
    let (b, n, _) = tokens.dims3()?;
    if b != decision.batch || n != decision.n_tokens {
        return Err(Error::shape(
            "apply_decision",
            format!(
                "tokens [{b}, {n}] vs decision [{}, {}]",
                decision.batch, decision.n_tokens
            ),
        ));
    }
    if decision.is_identity() {
        return Ok(tokens.clone());
    }
    let positions: Vec<Vec<usize>> = (0..b).map(|bi| decision.kept_positions(bi, policy)).collect();
    gather_tokens(tokens, &positions)
}
