//! Decoder-only LM with a per-layer KV cache and prefill-time visual pruning.

use std::collections::{BTreeMap, BTreeSet};

use crate::block::{attend_one, feed_forward, random_matrix, self_attention, AttnBias, BlockWeights};
use crate::dynamics::{flops_model, head_avg_packed, FlopsArch, FlopsLedger, KeySet, LayerTokens};
use crate::error::{Error, Result};
use crate::prune::{
    constant_decide, gather_tokens, saint_decide, OrderPolicy, PruneConfig, PruneDecision, PruneMode, Pruned,
};
use crate::rng::Rng;
use crate::snt1::{NamedTensors, TensorMap};
use crate::tensor::{layernorm, linear, Tensor, LN_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Width of the visual features fed to the projection.
    pub vision_dim: usize,
    pub prune_layers: BTreeSet<usize>,
    /// Shared prune parameters. Only `saint`, `constant_drop` and `off` apply
    /// inside the LM.
    pub prune: PruneConfig,
    /// Per-layer threshold overrides.
    pub tau_table: BTreeMap<usize, f32>,
    /// Prompt positions `[start, end)` holding visual tokens.
    pub visual_span: Option<(usize, usize)>,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 20,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: 128,
            max_seq: 256,
            vision_dim: 64,
            prune_layers: (8..=16).collect(),
            prune: PruneConfig::default(),
            tau_table: BTreeMap::new(),
            visual_span: None,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "lm: dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::Config(
                "lm: vocab_size and max_seq must be positive".into(),
            ));
        }
        if let Some(&l) = self.prune_layers.iter().find(|&&l| l >= self.layers) {
            return Err(Error::Config(format!(
                "lm: prune layer {l} >= layer count {}",
                self.layers
            )));
        }
        if let Some((s, e)) = self.visual_span {
            if s > e {
                return Err(Error::Config(format!("lm: visual span {s}..{e} is reversed")));
            }
        }
        if !matches!(
            self.prune.mode,
            PruneMode::Off | PruneMode::Saint | PruneMode::ConstantDrop
        ) {
            return Err(Error::Config(format!(
                "lm: prune mode `{}` is not supported during prefill",
                self.prune.mode.as_str()
            )));
        }
        self.prune.validate()?;
        for (&l, &tau) in &self.tau_table {
            PruneConfig { tau, ..self.prune }
                .validate()
                .map_err(|e| Error::Config(format!("lm: tau_table[{l}]: {e}")))?;
        }
        Ok(())
    }

    /// Prune parameters of `layer` over the visual keys, or `None` when the
    /// layer does not prune.
    pub fn layer_prune(&self, layer: usize) -> Option<PruneConfig> {
        if self.prune.mode == PruneMode::Off || !self.prune_layers.contains(&layer) {
            return None;
        }
        let tau = self.tau_table.get(&layer).copied().unwrap_or(self.prune.tau);
        Some(PruneConfig {
            tau,
            protected_count: 0,
            ..self.prune
        })
    }

    pub fn flops_arch(&self) -> FlopsArch {
        FlopsArch::stack(self.dim, self.mlp_ratio)
    }

    pub fn unpruned(&self) -> Self {
        Self {
            prune: PruneConfig {
                mode: PruneMode::Off,
                ..self.prune
            },
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmWeights {
    /// `[vocab, dim]`.
    pub tok_embed: Tensor,
    /// `[max_seq, dim]`, indexed by original position id.
    pub pos_embed: Tensor,
    /// `[vision_dim, dim]`.
    pub mm_proj_w: Tensor,
    pub mm_proj_b: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    /// `[dim, vocab]`.
    pub lm_head: Tensor,
}

impl LmWeights {
    pub fn random(cfg: &LmConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let c = cfg.dim;
        let tok_embed = random_matrix(&mut rng, &[cfg.vocab_size, c]);
        let pos_embed = random_matrix(&mut rng, &[cfg.max_seq, c]);
        let mm_proj_w = random_matrix(&mut rng, &[cfg.vision_dim, c]);
        let blocks = (0..cfg.layers)
            .map(|_| BlockWeights::random(&mut rng, c, cfg.mlp_ratio))
            .collect();
        let lm_head = random_matrix(&mut rng, &[c, cfg.vocab_size]);
        Self {
            tok_embed,
            pos_embed,
            mm_proj_w,
            mm_proj_b: Tensor::zeros(&[c]),
            blocks,
            norm_g: Tensor::full(&[c], 1.0),
            norm_b: Tensor::zeros(&[c]),
            lm_head,
        }
    }

    pub fn named(&self) -> NamedTensors {
        let mut out = vec![
            ("tok_embed.weight".to_owned(), self.tok_embed.clone()),
            ("pos_embed".to_owned(), self.pos_embed.clone()),
            ("mm_proj.weight".to_owned(), self.mm_proj_w.clone()),
            ("mm_proj.bias".to_owned(), self.mm_proj_b.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("blocks.{i}")));
        }
        out.extend([
            ("norm.weight".to_owned(), self.norm_g.clone()),
            ("norm.bias".to_owned(), self.norm_b.clone()),
            ("lm_head.weight".to_owned(), self.lm_head.clone()),
        ]);
        out
    }

    pub fn load(named: NamedTensors, cfg: &LmConfig) -> Result<Self> {
        let mut map = TensorMap::from(named);
        let c = cfg.dim;
        let w = Self {
            tok_embed: map.take("tok_embed.weight", &[cfg.vocab_size, c])?,
            pos_embed: map.take("pos_embed", &[cfg.max_seq, c])?,
            mm_proj_w: map.take("mm_proj.weight", &[cfg.vision_dim, c])?,
            mm_proj_b: map.take("mm_proj.bias", &[c])?,
            blocks: (0..cfg.layers)
                .map(|i| BlockWeights::load(&mut map, &format!("blocks.{i}"), c, cfg.mlp_ratio))
                .collect::<Result<_>>()?,
            norm_g: map.take("norm.weight", &[c])?,
            norm_b: map.take("norm.bias", &[c])?,
            lm_head: map.take("lm_head.weight", &[c, cfg.vocab_size])?,
        };
        map.finish()?;
        Ok(w)
    }

    /// `[1, len, dim]` token embeddings, without positions.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        let (vocab, c) = (self.tok_embed.dims()[0], self.tok_embed.dims()[1]);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Domain(format!("token id {id} >= vocab {vocab}")));
            }
            data.extend_from_slice(&self.tok_embed.data()[id * c..(id + 1) * c]);
        }
        Tensor::new(vec![1, ids.len(), c], data)
    }

    /// Maps `[B, N, vision_dim]` features into the LM width.
    pub fn project_visual(&self, visual: &Tensor) -> Result<Tensor> {
        linear(visual, &self.mm_proj_w, Some(&self.mm_proj_b))
    }

    fn logits(&self, row: &[f32]) -> Result<Vec<f32>> {
        let x = Tensor::new(vec![1, row.len()], row.to_vec())?;
        let h = layernorm(&x, &self.norm_g, &self.norm_b, LN_EPS)?;
        Ok(linear(&h, &self.lm_head, None)?.into_data())
    }
}

/// Keys and values of one layer for the tokens that survive it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    /// `[T, dim]`, heads packed along the last axis.
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    /// Original position id of every cached row, strictly increasing.
    pub positions: Vec<usize>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn remove_rows(&mut self, rows: &[usize], c: usize) {
        let drop: BTreeSet<usize> = rows.iter().copied().collect();
        let keep: Vec<usize> = (0..self.len()).filter(|i| !drop.contains(i)).collect();
        let pick = |src: &[f32]| {
            keep.iter()
                .flat_map(|&i| src[i * c..(i + 1) * c].iter().copied())
                .collect()
        };
        self.keys = pick(&self.keys);
        self.values = pick(&self.values);
        self.positions = keep.iter().map(|&i| self.positions[i]).collect();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    /// Position id the next decoded token receives.
    pub next_pos: usize,
    pub dim: usize,
}

impl KvCache {
    pub fn lengths(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }
}

/// What one prefill layer saw and removed.
#[derive(Debug, Clone)]
pub struct LmLayerTrace {
    pub layer_index: usize,
    /// Position ids of the rows entering the layer.
    pub positions_in: Vec<usize>,
    /// Position ids removed at this layer, ascending.
    pub dropped: Vec<usize>,
    /// Visual tokens left after this layer.
    pub visual_out: usize,
    /// `[H, T, T]` causal attention probabilities when recorded.
    pub attention: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Prefill {
    pub cache: KvCache,
    pub logits: Vec<f32>,
    pub traces: Vec<LmLayerTrace>,
    pub flops: FlopsLedger,
    pub diagnostics: Vec<String>,
}

fn check_weights(cfg: &LmConfig, w: &LmWeights) -> Result<()> {
    cfg.validate()?;
    if w.blocks.len() != cfg.layers || w.tok_embed.dims() != [cfg.vocab_size, cfg.dim] {
        return Err(Error::Config("lm weights do not match config".into()));
    }
    if w.pos_embed.dims()[0] != cfg.max_seq {
        return Err(Error::Config("lm positional table does not match max_seq".into()));
    }
    Ok(())
}

fn prune_decision(keys: &KeySet, cfg: &PruneConfig) -> Result<PruneDecision> {
    match cfg.mode {
        PruneMode::ConstantDrop => {
            let ns = keys.len().div_ceil(2);
            constant_decide(keys, cfg, cfg.constant_r.min(ns))
        }
        _ => saint_decide(keys, cfg),
    }
}

/// Runs the prompt through every layer, building a per-layer KV cache. At each
/// prune layer the visual span's head-averaged keys vote on which visual
/// tokens to drop; those rows leave the residual stream and that layer's
/// cache. Text tokens are never candidates. Survivors keep their position ids.
///
/// `prompt` is `[1, T, dim]` without positional embeddings.
pub fn prefill(prompt: &Tensor, cfg: &LmConfig, w: &LmWeights, record_attention: bool) -> Result<Prefill> {
    check_weights(cfg, w)?;
    let (b, t, c) = prompt.dims3()?;
    if b != 1 || c != cfg.dim {
        return Err(Error::shape(
            "prefill",
            format!("prompt {:?}, expected [1, T, {}]", prompt.dims(), cfg.dim),
        ));
    }
    if t == 0 || t > cfg.max_seq {
        return Err(Error::MaxSeq {
            pos: t,
            max_seq: cfg.max_seq,
        });
    }
    let span = cfg.visual_span.unwrap_or((0, 0));
    if span.1 > t {
        return Err(Error::Config(format!(
            "visual span {}..{} exceeds prompt length {t}",
            span.0, span.1
        )));
    }
    let mut diagnostics = Vec::new();
    if span.0 == span.1 && cfg.prune.mode != PruneMode::Off && !cfg.prune_layers.is_empty() {
        diagnostics.push("pruning requested but the visual span is empty; prefill runs unpruned".into());
    }

    let mut x = prompt.clone();
    for (o, p) in x.data_mut().iter_mut().zip(w.pos_embed.data()) {
        *o += p;
    }
    let mut positions: Vec<usize> = (0..t).collect();
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut traces = Vec::with_capacity(cfg.layers);
    let mut schedule = Vec::with_capacity(cfg.layers);

    for (l, block) in w.blocks.iter().enumerate() {
        let n_in = positions.len();
        let attn = self_attention(&x, block, cfg.heads, AttnBias::Causal, record_attention)?;
        x.add_assign(&attn.out)?;
        let mut cache = LayerCache {
            keys: attn.keys.data().to_vec(),
            values: attn.values.data().to_vec(),
            positions: positions.clone(),
        };
        let visual_rows: Vec<usize> = (0..n_in)
            .filter(|&i| (span.0..span.1).contains(&positions[i]))
            .collect();
        let mut dropped_rows = Vec::new();
        if let Some(pcfg) = cfg.layer_prune(l) {
            if visual_rows.len() >= 2 {
                let keys =
                    head_avg_packed(&attn.keys, cfg.heads)?.gather(std::slice::from_ref(&visual_rows))?;
                let decision = prune_decision(&keys, &pcfg)?;
                dropped_rows = decision
                    .dropped_positions(0)
                    .iter()
                    .map(|&i| visual_rows[i])
                    .collect();
            }
        }
        let dropped: Vec<usize> = dropped_rows.iter().map(|&i| positions[i]).collect();
        if !dropped_rows.is_empty() {
            cache.remove_rows(&dropped_rows, c);
            let keep: Vec<usize> = (0..n_in).filter(|i| !dropped_rows.contains(i)).collect();
            x = gather_tokens(&x, &[keep])?;
            positions = cache.positions.clone();
        }
        x.add_assign(&feed_forward(&x, block)?)?;
        schedule.push(LayerTokens::pruned(n_in, positions.len()));
        traces.push(LmLayerTrace {
            layer_index: l,
            positions_in: cache_positions_in(&traces, t),
            dropped,
            visual_out: visual_rows.len() - dropped_rows.len(),
            attention: attn.probs.map(|p| {
                let (h, n) = (p.dims()[1], p.dims()[2]);
                p.reshape(&[h, n, n]).expect("batch of one")
            }),
        });
        layers.push(cache);
    }
    let last = x.outer(0);
    let logits = w.logits(&last[(positions.len() - 1) * c..])?;
    let flops = flops_model(&cfg.flops_arch(), &schedule)?;
    Ok(Prefill {
        cache: KvCache {
            layers,
            next_pos: t,
            dim: c,
        },
        logits,
        traces,
        flops,
        diagnostics,
    })
}

fn cache_positions_in(traces: &[LmLayerTrace], t: usize) -> Vec<usize> {
    match traces.last() {
        None => (0..t).collect(),
        Some(prev) => prev
            .positions_in
            .iter()
            .copied()
            .filter(|p| !prev.dropped.contains(p))
            .collect(),
    }
}

/// One cached decode step for an embedding row (without position). Appends
/// this token's keys and values to every layer and returns its logits.
pub fn decode_step(cache: &mut KvCache, embed: &[f32], cfg: &LmConfig, w: &LmWeights) -> Result<Vec<f32>> {
    check_weights(cfg, w)?;
    let c = cfg.dim;
    if embed.len() != c || cache.layers.len() != cfg.layers {
        return Err(Error::shape(
            "decode_step",
            format!("embed width {} / cache depth {}", embed.len(), cache.layers.len()),
        ));
    }
    let pos = cache.next_pos;
    if pos >= cfg.max_seq {
        return Err(Error::MaxSeq {
            pos,
            max_seq: cfg.max_seq,
        });
    }
    let pe = &w.pos_embed.data()[pos * c..(pos + 1) * c];
    let mut x = Tensor::new(vec![1, 1, c], embed.iter().zip(pe).map(|(a, b)| a + b).collect())?;
    for (block, layer) in w.blocks.iter().zip(cache.layers.iter_mut()) {
        let h = layernorm(&x, &block.ln1_g, &block.ln1_b, LN_EPS)?;
        let q = linear(&h, &block.wq, Some(&block.bq))?;
        let k = linear(&h, &block.wk, Some(&block.bk))?;
        let v = linear(&h, &block.wv, Some(&block.bv))?;
        layer.keys.extend_from_slice(k.data());
        layer.values.extend_from_slice(v.data());
        layer.positions.push(pos);
        let mut ctx = vec![0.0f32; c];
        attend_one(
            q.data(),
            &layer.keys,
            &layer.values,
            layer.len(),
            cfg.heads,
            None,
            None,
            &mut ctx,
        );
        let ctx = Tensor::new(vec![1, 1, c], ctx)?;
        x.add_assign(&linear(&ctx, &block.wo, Some(&block.bo))?)?;
        x.add_assign(&feed_forward(&x, block)?)?;
    }
    cache.next_pos += 1;
    w.logits(x.data())
}

/// Index of the first maximum.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub prefill: Prefill,
    pub tokens: Vec<usize>,
    /// Logits that produced each generated token (the first comes from prefill).
    pub step_logits: Vec<Vec<f32>>,
    /// FLOPs summed over the decode steps.
    pub decode_flops: u64,
}

/// Prefill then greedy-decode `steps` tokens.
pub fn greedy_generate(prompt: &Tensor, steps: usize, cfg: &LmConfig, w: &LmWeights) -> Result<Generation> {
    let prefill = prefill(prompt, cfg, w, false)?;
    let mut cache = prefill.cache.clone();
    let mut logits = prefill.logits.clone();
    let mut tokens = Vec::with_capacity(steps);
    let mut step_logits = Vec::with_capacity(steps);
    let mut decode_flops = 0;
    let arch = cfg.flops_arch();
    for step in 0..steps {
        let tok = argmax(&logits);
        tokens.push(tok);
        step_logits.push(std::mem::take(&mut logits));
        if step + 1 == steps {
            break;
        }
        decode_flops += crate::dynamics::decode_step_flops(&arch, &cache.lengths());
        let embed = w.embed_tokens(&[tok])?;
        logits = decode_step(&mut cache, embed.data(), cfg, w)?;
    }
    Ok(Generation {
        prefill: Prefill { cache, ..prefill },
        tokens,
        step_logits,
        decode_flops,
    })
}

/// Layer-weighted mean of retained visual tokens: each LM layer contributes
/// the visual count it carries after its own prune step.
pub fn average_retained_tokens(per_layer: &[usize]) -> f64 {
    if per_layer.is_empty() {
        return 0.0;
    }
    per_layer.iter().sum::<usize>() as f64 / per_layer.len() as f64
}

/// One SAINT application over visual tokens before the projection.
///
/// With `target = Some(t)` exactly `t` tokens survive: `r = N - t` is forced,
/// spread over as many rounds as needed since a single round can drop at most
/// the src half. Survivors keep their original order.
pub fn pre_llm_prune(
    tokens: &Tensor,
    keys: &KeySet,
    cfg: &PruneConfig,
    target: Option<usize>,
) -> Result<Pruned> {
    let (b, n, _) = tokens.dims3()?;
    if keys.batch() != b || keys.len() != n {
        return Err(Error::shape("pre_llm_prune", "keys do not match tokens"));
    }
    if cfg.mode == PruneMode::Off {
        return Pruned::identity(tokens, None);
    }
    let policy = OrderPolicy::PositionalOrder;
    let mut positions: Vec<Vec<usize>> = vec![(0..n).collect(); b];
    match target {
        None => {
            let d = saint_decide(keys, cfg)?;
            positions = (0..b).map(|bi| d.kept_positions(bi, policy)).collect();
        }
        Some(t) => {
            if t < cfg.protected_count + 1 {
                return Err(Error::PruneTooLarge {
                    op: "pre_llm_prune",
                    r: n.saturating_sub(t),
                    limit: n - cfg.protected_count - 1,
                });
            }
            let mut cur = keys.clone();
            while cur.len() > t {
                let ns = (cur.len() - cfg.protected_count).div_ceil(2);
                let r = (cur.len() - t).min(ns);
                let d = constant_decide(&cur, cfg, r)?;
                let kept: Vec<Vec<usize>> = (0..b).map(|bi| d.kept_positions(bi, policy)).collect();
                positions = positions
                    .iter()
                    .zip(&kept)
                    .map(|(p, k)| k.iter().map(|&i| p[i]).collect())
                    .collect();
                cur = cur.gather(&kept)?;
            }
        }
    }
    let r = n - positions[0].len();
    if r == 0 {
        return Pruned::identity(tokens, None);
    }
    Ok(Pruned {
        tokens: gather_tokens(tokens, &positions)?,
        positions,
        sizes: None,
        r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LmConfig {
        LmConfig {
            layers: 3,
            dim: 16,
            heads: 2,
            vocab_size: 20,
            max_seq: 32,
            vision_dim: 8,
            prune_layers: [1].into(),
            ..Default::default()
        }
    }

    #[test]
    fn average_retained_example() {
        let mut per_layer = vec![576; 8];
        per_layer.extend([288; 24]);
        assert_eq!(average_retained_tokens(&per_layer), 360.0);
    }

    #[test]
    fn weights_round_trip() {
        let cfg = tiny();
        let w = LmWeights::random(&cfg, 1);
        assert_eq!(LmWeights::load(w.named(), &cfg).unwrap(), w);
    }

    #[test]
    fn unpruned_cache_lengths_equal_prompt() {
        let cfg = tiny().unpruned();
        let w = LmWeights::random(&cfg, 2);
        let p = w.embed_tokens(&[1, 2, 3, 4, 5]).unwrap();
        let out = prefill(&p, &cfg, &w, false).unwrap();
        assert_eq!(out.cache.lengths(), vec![5; 3]);
    }

    #[test]
    fn decode_matches_prefill_of_longer_prompt() {
        let cfg = tiny().unpruned();
        let w = LmWeights::random(&cfg, 3);
        let ids = [3, 1, 4, 1, 5, 9];
        let short = prefill(&w.embed_tokens(&ids[..5]).unwrap(), &cfg, &w, false).unwrap();
        let mut cache = short.cache.clone();
        let logits = decode_step(&mut cache, w.embed_tokens(&ids[5..]).unwrap().data(), &cfg, &w).unwrap();
        let full = prefill(&w.embed_tokens(&ids).unwrap(), &cfg, &w, false).unwrap();
        assert_eq!(logits, full.logits);
        assert_eq!(cache, full.cache);
    }

    #[test]
    fn decode_past_max_seq_errors() {
        let cfg = LmConfig {
            max_seq: 4,
            ..tiny().unpruned()
        };
        let w = LmWeights::random(&cfg, 4);
        let mut cache = prefill(&w.embed_tokens(&[1, 2, 3, 4]).unwrap(), &cfg, &w, false)
            .unwrap()
            .cache;
        let e = w.embed_tokens(&[1]).unwrap();
        assert!(matches!(
            decode_step(&mut cache, e.data(), &cfg, &w),
            Err(Error::MaxSeq { pos: 4, max_seq: 4 })
        ));
    }

    #[test]
    fn duplicated_visual_tokens_are_pruned_only_inside_span() {
        let mut cfg = tiny();
        cfg.prune = PruneConfig {
            tau: 0.9,
            k_neighbors: 1,
            ..Default::default()
        };
        cfg.visual_span = Some((2, 10));
        let mut w = LmWeights::random(&cfg, 5);
        w.pos_embed = Tensor::zeros(w.pos_embed.dims());
        let mut ids = vec![1, 2];
        ids.extend([7; 8]);
        ids.extend([3, 4]);
        let out = prefill(&w.embed_tokens(&ids).unwrap(), &cfg, &w, false).unwrap();
        let lens = out.cache.lengths();
        assert_eq!(lens[0], 12);
        assert!(lens[1] < 12, "{lens:?}");
        for t in &out.traces {
            assert!(t.dropped.iter().all(|p| (2..10).contains(p)));
        }
        for layer in &out.cache.layers {
            assert!(layer.positions.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn empty_span_is_a_no_op_with_diagnostic() {
        let cfg = tiny();
        let w = LmWeights::random(&cfg, 6);
        let p = w.embed_tokens(&[1, 2, 3]).unwrap();
        let out = prefill(&p, &cfg, &w, false).unwrap();
        assert_eq!(out.diagnostics.len(), 1);
        assert_eq!(
            out.logits,
            prefill(&p, &cfg.unpruned(), &w, false).unwrap().logits
        );
    }

    #[test]
    fn pre_llm_target_count_is_exact() {
        let mut rng = Rng::new(9);
        let tokens = crate::tensor::rng_normal(&mut rng, &[1, 16, 4]);
        let keys = KeySet::new(crate::tensor::rng_normal(&mut rng, &[1, 16, 4])).unwrap();
        for t in [16, 12, 8, 5, 1] {
            let out = pre_llm_prune(&tokens, &keys, &PruneConfig::default(), Some(t)).unwrap();
            assert_eq!(out.tokens.dims()[1], t);
            assert!(out.positions[0].windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn identical_visual_tokens_lose_src_half() {
        let tokens = Tensor::from_fn(&[1, 16, 3], |i| i as f32);
        let keys = KeySet::new(Tensor::full(&[1, 16, 3], 0.5)).unwrap();
        let out = pre_llm_prune(&tokens, &keys, &PruneConfig::default(), None).unwrap();
        assert_eq!(out.r, 8);
        assert_eq!(out.positions[0], (1..16).step_by(2).collect::<Vec<_>>());
    }
}
