//! Analytic FLOP accounting for pre-norm transformer stacks.
//!
//! Per layer, with `Na` tokens entering attention, `Nf` tokens entering the
//! FFN (they differ when a prune step sits between the two), width `C` and
//! MLP ratio `m`, the multiply-accumulate counts are
//!
//! ```text
//! attention = 4·Na·C²  (Q, K, V, output projections)
//!           + 2·Na²·C  (scores and weighted sum)
//! ffn       = 2·m·Nf·C²
//! ```
//!
//! The patch-embedding stem adds `P·(ch·p²)·C` and the optional classifier
//! head `C·classes`. Layer norms, softmax and residual adds are not counted.
//! `flops_per_mac` scales everything: 1 reports MACs (the fvcore convention
//! that published ViT GFLOP tables use), 2 counts multiply and add separately.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchStem {
    pub channels: usize,
    pub patch: usize,
    pub num_patches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsArch {
    pub dim: usize,
    pub mlp_ratio: usize,
    pub stem: Option<PatchStem>,
    pub head_classes: Option<usize>,
    pub flops_per_mac: u64,
}

impl FlopsArch {
    /// Bare transformer stack: no stem, no head, MAC convention.
    pub fn stack(dim: usize, mlp_ratio: usize) -> Self {
        Self {
            dim,
            mlp_ratio,
            stem: None,
            head_classes: None,
            flops_per_mac: 1,
        }
    }

    /// ViT at `image` px with square patches, CLS token, MAC convention and
    /// the classifier head excluded.
    pub fn vit(dim: usize, patch: usize, image: usize) -> Self {
        let side = image / patch;
        Self {
            dim,
            mlp_ratio: 4,
            stem: Some(PatchStem {
                channels: 3,
                patch,
                num_patches: side * side,
            }),
            head_classes: None,
            flops_per_mac: 1,
        }
    }

    /// ViT-H/14 at 224 px: 32 layers, width 1280, 257 tokens.
    pub fn vit_h14_224() -> (Self, usize, usize) {
        (Self::vit(1280, 14, 224), 32, 257)
    }

    /// ViT-L/16 at 224 px: 24 layers, width 1024, 197 tokens.
    pub fn vit_l16_224() -> (Self, usize, usize) {
        (Self::vit(1024, 16, 224), 24, 197)
    }

    /// ViT-B/16 at 224 px: 12 layers, width 768, 197 tokens.
    pub fn vit_b16_224() -> (Self, usize, usize) {
        (Self::vit(768, 16, 224), 12, 197)
    }

    pub fn attention_macs(&self, tokens: usize) -> u64 {
        let (n, c) = (tokens as u64, self.dim as u64);
        4 * n * c * c + 2 * n * n * c
    }

    pub fn ffn_macs(&self, tokens: usize) -> u64 {
        let (n, c) = (tokens as u64, self.dim as u64);
        2 * self.mlp_ratio as u64 * n * c * c
    }
}

/// Token counts seen by one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerTokens {
    /// Tokens entering self-attention.
    pub attn: usize,
    /// Tokens entering the FFN, after any prune step.
    pub ffn: usize,
    /// Extra MACs attributed to the layer (e.g. the similarity graph of a
    /// prune step); zero unless the caller opts in.
    pub extra_macs: u64,
}

impl LayerTokens {
    pub fn uniform(n: usize) -> Self {
        Self {
            attn: n,
            ffn: n,
            extra_macs: 0,
        }
    }

    pub fn pruned(attn: usize, ffn: usize) -> Self {
        Self {
            attn,
            ffn,
            extra_macs: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub attention: u64,
    pub ffn: u64,
    pub other: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.attention + self.ffn + self.other
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsLedger {
    pub layers: Vec<LayerFlops>,
    pub stem: u64,
    pub head: u64,
    pub total: u64,
}

impl FlopsLedger {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

pub fn flops_model(arch: &FlopsArch, schedule: &[LayerTokens]) -> Result<FlopsLedger> {
    if schedule.is_empty() {
        return Err(Error::Config("flops_model: empty token schedule".into()));
    }
    let k = arch.flops_per_mac;
    let layers: Vec<LayerFlops> = schedule
        .iter()
        .map(|t| LayerFlops {
            attention: k * arch.attention_macs(t.attn),
            ffn: k * arch.ffn_macs(t.ffn),
            other: k * t.extra_macs,
        })
        .collect();
    let stem = arch.stem.map_or(0, |s| {
        k * (s.num_patches * s.channels * s.patch * s.patch * arch.dim) as u64
    });
    let head = arch
        .head_classes
        .map_or(0, |classes| k * (arch.dim * classes) as u64);
    let total = stem + head + layers.iter().map(LayerFlops::total).sum::<u64>();
    Ok(FlopsLedger {
        layers,
        stem,
        head,
        total,
    })
}

/// FLOPs of one cached decode step: a single query token per layer attending
/// to `cache_lens[l] + 1` keys (the cache plus itself).
pub fn decode_step_flops(arch: &FlopsArch, cache_lens: &[usize]) -> u64 {
    let c = arch.dim as u64;
    cache_lens
        .iter()
        .map(|&t| {
            let proj = 4 * c * c;
            let attn = 2 * (t as u64 + 1) * c;
            proj + attn + arch.ffn_macs(1)
        })
        .sum::<u64>()
        * arch.flops_per_mac
}
