//! Small ViT-style encoder with a prune hook between attention and FFN.

use std::collections::{BTreeMap, BTreeSet};

use crate::block::{feed_forward, random_matrix, self_attention, AttnBias, BlockWeights};
use crate::dynamics::{flops_model, head_avg_packed, FlopsArch, FlopsLedger, KeySet, LayerTokens};
use crate::error::{Error, Result};
use crate::prune::{prune_with_mode, OrderPolicy, PruneAux, PruneConfig, PruneMode};
use crate::rng::Rng;
use crate::snt1::{NamedTensors, TensorMap};
use crate::tensor::{layernorm, linear, Tensor, LN_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub image_size: usize,
    pub channels: usize,
    pub cls_token: bool,
    pub distill_token: bool,
    pub num_classes: usize,
    /// Layers that run a prune step.
    pub prune_layers: BTreeSet<usize>,
    /// Prune parameters for every layer in `prune_layers` without an override.
    pub prune: PruneConfig,
    pub overrides: BTreeMap<usize, PruneConfig>,
    pub order_policy: OrderPolicy,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            patch: 8,
            image_size: 64,
            channels: 3,
            cls_token: true,
            distill_token: false,
            num_classes: 10,
            prune_layers: (0..4).collect(),
            prune: PruneConfig::default(),
            overrides: BTreeMap::new(),
            order_policy: OrderPolicy::ScoreOrder,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "vit: dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "vit: image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if let Some(&l) = self.prune_layers.iter().find(|&&l| l >= self.layers) {
            return Err(Error::Config(format!(
                "vit: prune layer {l} >= layer count {}",
                self.layers
            )));
        }
        self.prune.validate()?;
        self.overrides.values().try_for_each(PruneConfig::validate)
    }

    pub fn protected(&self) -> usize {
        usize::from(self.cls_token) + usize::from(self.distill_token)
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + self.protected()
    }

    /// Effective prune config of `layer`, with the protected count filled in.
    pub fn layer_prune(&self, layer: usize) -> PruneConfig {
        if !self.prune_layers.contains(&layer) {
            return PruneConfig {
                protected_count: self.protected(),
                ..PruneConfig::off()
            };
        }
        let base = self.overrides.get(&layer).unwrap_or(&self.prune);
        PruneConfig {
            protected_count: self.protected(),
            seed: base.seed.wrapping_add(layer as u64),
            ..*base
        }
    }

    pub fn flops_arch(&self) -> FlopsArch {
        let mut arch = FlopsArch::vit(self.dim, self.patch, self.image_size);
        arch.mlp_ratio = self.mlp_ratio;
        if let Some(stem) = arch.stem.as_mut() {
            stem.channels = self.channels;
        }
        arch
    }

    /// Same model with pruning disabled everywhere.
    pub fn unpruned(&self) -> Self {
        Self {
            prune_layers: BTreeSet::new(),
            overrides: BTreeMap::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights {
    /// `[channels·patch², dim]`, flattened in (channel, row, col) order.
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Option<Tensor>,
    pub dist: Option<Tensor>,
    /// `[num_tokens, dim]`, protected tokens first.
    pub pos: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl VitWeights {
    pub fn random(cfg: &VitConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let c = cfg.dim;
        let patch_in = cfg.channels * cfg.patch * cfg.patch;
        let patch_w = random_matrix(&mut rng, &[patch_in, c]);
        let cls = cfg.cls_token.then(|| random_matrix(&mut rng, &[c]));
        let dist = cfg.distill_token.then(|| random_matrix(&mut rng, &[c]));
        let pos = random_matrix(&mut rng, &[cfg.num_tokens(), c]);
        let blocks = (0..cfg.layers)
            .map(|_| BlockWeights::random(&mut rng, c, cfg.mlp_ratio))
            .collect();
        let head_w = random_matrix(&mut rng, &[c, cfg.num_classes]);
        Self {
            patch_w,
            patch_b: Tensor::zeros(&[c]),
            cls,
            dist,
            pos,
            blocks,
            norm_g: Tensor::full(&[c], 1.0),
            norm_b: Tensor::zeros(&[c]),
            head_w,
            head_b: Tensor::zeros(&[cfg.num_classes]),
        }
    }

    /// Canonical tensor names, in file order.
    pub fn named(&self) -> NamedTensors {
        let mut out = vec![
            ("patch_embed.weight".to_owned(), self.patch_w.clone()),
            ("patch_embed.bias".to_owned(), self.patch_b.clone()),
        ];
        if let Some(t) = &self.cls {
            out.push(("cls_token".to_owned(), t.clone()));
        }
        if let Some(t) = &self.dist {
            out.push(("dist_token".to_owned(), t.clone()));
        }
        out.push(("pos_embed".to_owned(), self.pos.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("blocks.{i}")));
        }
        out.extend([
            ("norm.weight".to_owned(), self.norm_g.clone()),
            ("norm.bias".to_owned(), self.norm_b.clone()),
            ("head.weight".to_owned(), self.head_w.clone()),
            ("head.bias".to_owned(), self.head_b.clone()),
        ]);
        out
    }

    pub fn load(named: NamedTensors, cfg: &VitConfig) -> Result<Self> {
        let mut map = TensorMap::from(named);
        let c = cfg.dim;
        let patch_in = cfg.channels * cfg.patch * cfg.patch;
        let w = Self {
            patch_w: map.take("patch_embed.weight", &[patch_in, c])?,
            patch_b: map.take("patch_embed.bias", &[c])?,
            cls: if cfg.cls_token {
                Some(map.take("cls_token", &[c])?)
            } else {
                None
            },
            dist: if cfg.distill_token {
                Some(map.take("dist_token", &[c])?)
            } else {
                None
            },
            pos: map.take("pos_embed", &[cfg.num_tokens(), c])?,
            blocks: (0..cfg.layers)
                .map(|i| BlockWeights::load(&mut map, &format!("blocks.{i}"), c, cfg.mlp_ratio))
                .collect::<Result<_>>()?,
            norm_g: map.take("norm.weight", &[c])?,
            norm_b: map.take("norm.bias", &[c])?,
            head_w: map.take("head.weight", &[c, cfg.num_classes])?,
            head_b: map.take("head.bias", &[cfg.num_classes])?,
        };
        map.finish()?;
        Ok(w)
    }
}

/// Patchify, project, prepend CLS/distill tokens and add positional
/// embeddings. Output is `[B, num_tokens, dim]`.
pub fn patch_embed(image: &Tensor, cfg: &VitConfig, w: &VitWeights) -> Result<Tensor> {
    let (b, ch, s) = match image.dims()[..] {
        [b, ch, s, s2] if s == s2 => (b, ch, s),
        _ => {
            return Err(Error::shape(
                "patch_embed",
                format!("image dims {:?}", image.dims()),
            ))
        }
    };
    if ch != cfg.channels || s != cfg.image_size {
        return Err(Error::shape(
            "patch_embed",
            format!("image {ch}x{s}x{s} vs config {}x{}", cfg.channels, cfg.image_size),
        ));
    }
    let p = cfg.patch;
    let side = s / p;
    let np = side * side;
    let patch_in = ch * p * p;
    let mut patches = Vec::with_capacity(b * np * patch_in);
    for bi in 0..b {
        let img = image.outer(bi);
        for py in 0..side {
            for px in 0..side {
                for c in 0..ch {
                    for y in 0..p {
                        let row = (c * s + py * p + y) * s + px * p;
                        patches.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    let patches = Tensor::new(vec![b, np, patch_in], patches)?;
    let emb = linear(&patches, &w.patch_w, Some(&w.patch_b))?;

    let c = cfg.dim;
    let prefix: Vec<&Tensor> = w.cls.iter().chain(w.dist.iter()).collect();
    let n = np + prefix.len();
    let mut out = Vec::with_capacity(b * n * c);
    for bi in 0..b {
        for t in &prefix {
            out.extend_from_slice(t.data());
        }
        out.extend_from_slice(emb.outer(bi));
    }
    let mut out = Tensor::new(vec![b, n, c], out)?;
    for bi in 0..b {
        for (o, pe) in out.outer_mut(bi).iter_mut().zip(w.pos.data()) {
            *o += pe;
        }
    }
    Ok(out)
}

/// Per-layer record of what the prune hook saw and did.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub layer_index: usize,
    /// Head-averaged keys of the tokens entering the layer.
    pub keys_head_avg: KeySet,
    /// `[B, H, N, N]` attention probabilities when recorded.
    pub attention: Option<Tensor>,
    pub token_count_in: usize,
    pub token_count_out: usize,
    pub prune_r: usize,
    /// Original token ids of the rows leaving the layer, per batch item.
    pub kept_ids: Vec<Vec<usize>>,
}

/// Identity and merge size of every live token, per batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenState {
    pub ids: Vec<Vec<usize>>,
    pub sizes: Option<Vec<Vec<f32>>>,
}

impl TokenState {
    pub fn new(batch: usize, n: usize) -> Self {
        Self {
            ids: vec![(0..n).collect(); batch],
            sizes: None,
        }
    }
}

/// Attention received from CLS (row 0, head-averaged), or the mean attention
/// each token receives when there is no CLS token.
fn cls_attention_rows(probs: &Tensor, cls_present: bool) -> Vec<Vec<f32>> {
    let (b, h, n) = (probs.dims()[0], probs.dims()[1], probs.dims()[2]);
    (0..b)
        .map(|bi| {
            let mut row = vec![0.0f32; n];
            for hi in 0..h {
                let base = (bi * h + hi) * n * n;
                if cls_present {
                    for (r, p) in row.iter_mut().zip(&probs.data()[base..base + n]) {
                        *r += p;
                    }
                } else {
                    for i in 0..n {
                        for (r, p) in row
                            .iter_mut()
                            .zip(&probs.data()[base + i * n..base + (i + 1) * n])
                        {
                            *r += p / n as f32;
                        }
                    }
                }
            }
            row.iter_mut().for_each(|r| *r /= h as f32);
            row
        })
        .collect()
}

/// One pre-norm block: attention, then the prune step on the post-attention
/// residual stream (using this layer's head-averaged keys), then the FFN.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer(
    x: &Tensor,
    state: &mut TokenState,
    w: &BlockWeights,
    heads: usize,
    layer_index: usize,
    prune: &PruneConfig,
    policy: OrderPolicy,
    record_attention: bool,
) -> Result<(Tensor, LayerTrace)> {
    let (batch, n_in, _) = x.dims3()?;
    let cls_present = prune.protected_count > 0;
    let need_probs = record_attention || prune.mode == PruneMode::AttentionDrop;
    let bias = match &state.sizes {
        Some(s) => AttnBias::LogSize(s),
        None => AttnBias::None,
    };
    let attn = self_attention(x, w, heads, bias, need_probs)?;
    let mut x = x.add(&attn.out)?;
    let keys = head_avg_packed(&attn.keys, heads)?;

    let mut r = 0;
    if prune.mode != PruneMode::Off {
        if prune.mode == PruneMode::Merge && state.sizes.is_none() {
            state.sizes = Some(vec![vec![1.0; n_in]; batch]);
        }
        let cls_rows = attn.probs.as_ref().map(|p| cls_attention_rows(p, cls_present));
        let aux = PruneAux {
            cls_attention: cls_rows.as_deref(),
            sizes: state.sizes.as_deref(),
        };
        let pruned = prune_with_mode(&x, &keys, prune, aux, policy)?;
        if pruned.r > 0 {
            state.ids = state
                .ids
                .iter()
                .zip(&pruned.positions)
                .map(|(ids, pos)| pos.iter().map(|&p| ids[p]).collect())
                .collect();
            x = pruned.tokens;
        }
        if pruned.sizes.is_some() {
            state.sizes = pruned.sizes;
        }
        r = pruned.r;
    }
    x.add_assign(&feed_forward(&x, w)?)?;
    let trace = LayerTrace {
        layer_index,
        keys_head_avg: keys,
        attention: if record_attention { attn.probs } else { None },
        token_count_in: n_in,
        token_count_out: n_in - r,
        prune_r: r,
        kept_ids: state.ids.clone(),
    };
    Ok((x, trace))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub record_attention: bool,
    /// Keep every layer's output hidden state.
    pub keep_hidden: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum VitInput<'a> {
    /// `[B, channels, S, S]` pixels.
    Image(&'a Tensor),
    /// `[B, N, C]` token embeddings with positional embeddings already added.
    Embeds(&'a Tensor),
}

#[derive(Debug, Clone)]
pub struct VitOutput {
    /// `[B, num_classes]`.
    pub logits: Tensor,
    /// `[B, dim]` normalised CLS (or mean-pooled) embedding.
    pub pooled: Tensor,
    pub traces: Vec<LayerTrace>,
    pub flops: FlopsLedger,
    /// Original ids of the tokens surviving the last layer.
    pub final_ids: Vec<Vec<usize>>,
    /// Output of every layer, when requested.
    pub hidden: Vec<Tensor>,
}

impl VitOutput {
    /// Token count entering each layer followed by the final count.
    pub fn token_schedule(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.traces.iter().map(|t| t.token_count_in).collect();
        s.extend(self.traces.last().map(|t| t.token_count_out));
        s
    }

    pub fn r_schedule(&self) -> Vec<usize> {
        self.traces.iter().map(|t| t.prune_r).collect()
    }
}

pub fn vit_forward(
    input: VitInput<'_>,
    cfg: &VitConfig,
    w: &VitWeights,
    opts: ForwardOptions,
) -> Result<VitOutput> {
    cfg.validate()?;
    if w.blocks.len() != cfg.layers {
        return Err(Error::Config(format!(
            "weights have {} blocks, config {}",
            w.blocks.len(),
            cfg.layers
        )));
    }
    let mut x = match input {
        VitInput::Image(img) => patch_embed(img, cfg, w)?,
        VitInput::Embeds(e) => {
            let (_, n, c) = e.dims3()?;
            if c != cfg.dim || n < cfg.protected() {
                return Err(Error::shape("vit_forward", format!("embeds {:?}", e.dims())));
            }
            e.clone()
        }
    };
    if !x.is_finite() {
        return Err(Error::Domain("non-finite input embeddings".into()));
    }
    let (batch, n, _) = x.dims3()?;
    let mut state = TokenState::new(batch, n);
    let mut traces = Vec::with_capacity(cfg.layers);
    let mut hidden = Vec::new();
    for (l, block) in w.blocks.iter().enumerate() {
        let prune = cfg.layer_prune(l);
        let (next, trace) = encoder_layer(
            &x,
            &mut state,
            block,
            cfg.heads,
            l,
            &prune,
            cfg.order_policy,
            opts.record_attention,
        )?;
        x = next;
        if opts.keep_hidden {
            hidden.push(x.clone());
        }
        traces.push(trace);
    }

    let (_, n_out, c) = x.dims3()?;
    let pooled_raw = if cfg.cls_token {
        Tensor::from_fn(&[batch, c], |i| x.outer(i / c)[i % c])
    } else {
        Tensor::from_fn(&[batch, c], |i| {
            let item = x.outer(i / c);
            (0..n_out).map(|t| item[t * c + i % c]).sum::<f32>() / n_out as f32
        })
    };
    let pooled = layernorm(&pooled_raw, &w.norm_g, &w.norm_b, LN_EPS)?;
    let logits = linear(&pooled, &w.head_w, Some(&w.head_b))?;

    let schedule: Vec<LayerTokens> = traces
        .iter()
        .map(|t| LayerTokens::pruned(t.token_count_in, t.token_count_out))
        .collect();
    let flops = flops_model(&cfg.flops_arch(), &schedule)?;
    Ok(VitOutput {
        logits,
        pooled,
        traces,
        flops,
        final_ids: state.ids,
        hidden,
    })
}
