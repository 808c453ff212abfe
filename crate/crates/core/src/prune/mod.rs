//! Similarity-aware token dropping and the baseline strategies it is compared
//! against (attention-ranked drop, similarity merge, random drop, and
//! similarity-ranked drop with a fixed count).
//!
//! Every strategy is a pure function from (tokens, keys, config) to a pruned
//! token set. Protected tokens (CLS, distillation) sit at the front of the
//! sequence, never enter the similarity graph and are copied through first.

mod baselines;
mod decision;
mod graph;

pub use baselines::{
    baseline_attention_drop, baseline_merge, baseline_random_drop, constant_decide, constant_drop,
};
pub use decision::{apply_decision, saint_decide, OrderPolicy, PruneDecision};
pub use graph::{
    node_degrees, normalize_keys, redundancy_score, redundancy_scores, similarity_matrix, split_bipartite,
    vote_prune_rate, BipartiteSimGraph,
};

use serde::{Deserialize, Serialize};

use crate::dynamics::KeySet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    Off,
    Saint,
    AttentionDrop,
    Merge,
    RandomDrop,
    ConstantDrop,
}

impl PruneMode {
    pub const ALL: [PruneMode; 6] = [
        PruneMode::Off,
        PruneMode::Saint,
        PruneMode::AttentionDrop,
        PruneMode::Merge,
        PruneMode::RandomDrop,
        PruneMode::ConstantDrop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PruneMode::Off => "off",
            PruneMode::Saint => "saint",
            PruneMode::AttentionDrop => "attention_drop",
            PruneMode::Merge => "merge",
            PruneMode::RandomDrop => "random_drop",
            PruneMode::ConstantDrop => "constant_drop",
        }
    }
}

impl std::str::FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PruneMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prune mode `{s}`")))
    }
}

/// Per-layer pruning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Similarity threshold; an edge exists when cosine similarity >= tau.
    pub tau: f32,
    /// Minimum degree for a src token to count as highly redundant.
    pub k_neighbors: usize,
    /// Sharpness of the mean-similarity term in the redundancy score.
    pub gamma: f32,
    pub protected_count: usize,
    pub mode: PruneMode,
    /// Fixed drop count for the non-voting strategies.
    pub constant_r: usize,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            tau: 0.75,
            k_neighbors: 5,
            gamma: 10.0,
            protected_count: 0,
            mode: PruneMode::Saint,
            constant_r: 0,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau out of [-1,1]: {}", self.tau)));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be >= 1".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be finite and >= 0: {}",
                self.gamma
            )));
        }
        Ok(())
    }

    pub fn off() -> Self {
        Self {
            mode: PruneMode::Off,
            ..Self::default()
        }
    }
}

/// Result of any pruning strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Pruned {
    /// `[B, N - r, C]`.
    pub tokens: Tensor,
    /// For each batch item, the input index of every output row.
    pub positions: Vec<Vec<usize>>,
    /// Token sizes after merging; `None` for drop strategies.
    pub sizes: Option<Vec<Vec<f32>>>,
    pub r: usize,
}

impl Pruned {
    pub fn identity(tokens: &Tensor, sizes: Option<&[Vec<f32>]>) -> Result<Self> {
        let (b, n, _) = tokens.dims3()?;
        Ok(Self {
            tokens: tokens.clone(),
            positions: vec![(0..n).collect(); b],
            sizes: sizes.map(<[_]>::to_vec),
            r: 0,
        })
    }
}

/// Copies rows `positions[b]` of each batch item into a new `[B, M, C]` tensor.
pub fn gather_tokens(tokens: &Tensor, positions: &[Vec<usize>]) -> Result<Tensor> {
    let (b, n, c) = tokens.dims3()?;
    let m = positions.first().map_or(0, Vec::len);
    if positions.len() != b || positions.iter().any(|p| p.len() != m) {
        return Err(Error::shape(
            "gather_tokens",
            "ragged or mismatched position lists",
        ));
    }
    let mut data = Vec::with_capacity(b * m * c);
    for (bi, pos) in positions.iter().enumerate() {
        let item = tokens.outer(bi);
        for &i in pos {
            if i >= n {
                return Err(Error::shape("gather_tokens", format!("position {i} >= {n}")));
            }
            data.extend_from_slice(&item[i * c..(i + 1) * c]);
        }
    }
    Tensor::new(vec![b, m, c], data)
}

/// Auxiliary per-layer signals some strategies need.
#[derive(Debug, Clone, Copy, Default)]
pub struct PruneAux<'a> {
    /// Head-averaged attention each token receives from CLS, per batch item.
    pub cls_attention: Option<&'a [Vec<f32>]>,
    /// Current token sizes (merge bookkeeping).
    pub sizes: Option<&'a [Vec<f32>]>,
}

/// Runs whichever strategy `cfg.mode` names on one layer's tokens.
pub fn prune_with_mode(
    tokens: &Tensor,
    keys: &KeySet,
    cfg: &PruneConfig,
    aux: PruneAux<'_>,
    policy: OrderPolicy,
) -> Result<Pruned> {
    let sizes = aux.sizes;
    let carry_sizes = |mut p: Pruned| -> Pruned {
        if let (Some(s), None) = (sizes, &p.sizes) {
            p.sizes = Some(
                p.positions
                    .iter()
                    .zip(s)
                    .map(|(pos, sz)| pos.iter().map(|&i| sz[i]).collect())
                    .collect(),
            );
        }
        p
    };
    match cfg.mode {
        PruneMode::Off => Pruned::identity(tokens, sizes),
        PruneMode::Saint => {
            let decision = saint_decide(keys, cfg)?;
            let out = apply_decision(tokens, &decision, policy)?;
            Ok(carry_sizes(Pruned {
                tokens: out,
                positions: (0..decision.batch)
                    .map(|b| decision.kept_positions(b, policy))
                    .collect(),
                sizes: None,
                r: decision.r,
            }))
        }
        PruneMode::ConstantDrop => constant_drop(tokens, keys, cfg, policy).map(carry_sizes),
        PruneMode::AttentionDrop => {
            let rows = aux
                .cls_attention
                .ok_or_else(|| Error::Config("attention_drop needs CLS attention rows".into()))?;
            baseline_attention_drop(tokens, rows, cfg.constant_r, cfg.protected_count).map(carry_sizes)
        }
        PruneMode::RandomDrop => {
            baseline_random_drop(tokens, cfg.constant_r, cfg.protected_count, cfg.seed).map(carry_sizes)
        }
        PruneMode::Merge => baseline_merge(tokens, keys, sizes, cfg.constant_r, cfg.protected_count),
    }
}
