use std::collections::BTreeMap;

use super::config::{ExperimentConfig, ModelKind, ScheduleKind};
use super::csvout::{join_list, Cell, Table};
use super::layers::LayerSpec;
use crate::dynamics::{head_avg_attention, DynamicsRecord, FlopsArch, FlopsLedger, LayerTokens};
use crate::error::{Error, Result};
use crate::prune::{PruneConfig, PruneMode};
use crate::rng::Rng;
use crate::snt1::{read_snt1, NamedTensors};
use crate::synth::synth_images;
use crate::tensor::Tensor;
use crate::vit::{vit_forward, ForwardOptions, VitConfig, VitInput, VitOutput, VitWeights};
use crate::vlm::{run_mode, VlmInputs, VlmMode, VlmWeights};

const VISION_PREFIX: &str = "vision.";

/// Seeded random weights under their canonical names. An LM file also holds
/// its vision tower, prefixed `vision.`.
pub fn gen_model(kind: ModelKind, cfg: &ExperimentConfig, seed: u64) -> Result<NamedTensors> {
    match kind {
        ModelKind::Vit => Ok(VitWeights::random(&cfg.vit_config()?, seed).named()),
        ModelKind::Lm => {
            let w = VlmWeights::random(&cfg.vlm_config()?, seed);
            let mut out: NamedTensors = w
                .encoder
                .named()
                .into_iter()
                .map(|(n, t)| (format!("{VISION_PREFIX}{n}"), t))
                .collect();
            out.extend(w.lm.named());
            Ok(out)
        }
    }
}

pub fn load_vit_weights(cfg: &ExperimentConfig, vit: &VitConfig) -> Result<VitWeights> {
    match &cfg.model.weights {
        Some(path) => VitWeights::load(read_snt1(path)?, vit),
        None => Ok(VitWeights::random(vit, cfg.model.init_seed)),
    }
}

pub fn load_vlm_weights(cfg: &ExperimentConfig) -> Result<VlmWeights> {
    let vlm = cfg.vlm_config()?;
    match &cfg.model.weights {
        Some(path) => {
            let (vision, lm): (NamedTensors, NamedTensors) = read_snt1(path)?
                .into_iter()
                .partition(|(n, _)| n.starts_with(VISION_PREFIX));
            let vision = vision
                .into_iter()
                .map(|(n, t)| (n[VISION_PREFIX.len()..].to_owned(), t))
                .collect();
            Ok(VlmWeights {
                encoder: VitWeights::load(vision, &vlm.encoder)?,
                lm: crate::lm::LmWeights::load(lm, &vlm.lm)?,
            })
        }
        None => Ok(VlmWeights::random(&vlm, cfg.model.init_seed)),
    }
}

/// The config's synthetic image batch.
pub fn synth_batch(cfg: &ExperimentConfig) -> Tensor {
    let a = &cfg.model.vit;
    synth_images(
        cfg.data.generator,
        cfg.data.batch_size,
        a.channels,
        a.image_size,
        a.patch,
        cfg.data.seed,
    )
}

/// Mean squared difference of two equally shaped logit tensors.
pub fn logit_mse(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n
}

/// Fraction of rows whose first argmax agrees.
pub fn top1_agreement(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<(usize, usize)> = a
        .rows()
        .zip(b.rows())
        .map(|(x, y)| (crate::lm::argmax(x), crate::lm::argmax(y)))
        .collect();
    rows.iter().filter(|(x, y)| x == y).count() as f64 / rows.len().max(1) as f64
}

/// Dynamics metrics per layer, averaged over the batch. Needs recorded
/// attention.
pub fn layer_dynamics(out: &VitOutput, cls_present: bool) -> Result<Vec<DynamicsRecord>> {
    out.traces
        .iter()
        .map(|t| {
            let attn = t
                .attention
                .as_ref()
                .ok_or_else(|| Error::Config("layer dynamics need recorded attention".into()))?;
            let avg = head_avg_attention(attn)?;
            let b = t.keys_head_avg.batch();
            let recs = (0..b)
                .map(|bi| DynamicsRecord::compute(t.layer_index, &t.keys_head_avg, &avg, bi, cls_present))
                .collect::<Result<Vec<_>>>()?;
            let mean = |f: fn(&DynamicsRecord) -> f32| {
                (recs.iter().map(|r| f(r) as f64).sum::<f64>() / b as f64) as f32
            };
            Ok(DynamicsRecord {
                layer_index: t.layer_index,
                token_count: t.token_count_in,
                key_similarity: mean(|r| r.key_similarity),
                cls_entropy: mean(|r| r.cls_entropy),
                token_entropy: mean(|r| r.token_entropy),
                mean_cls_attention: mean(|r| r.mean_cls_attention),
            })
        })
        .collect()
}

fn mean_dynamics(recs: &[DynamicsRecord]) -> [f64; 4] {
    let n = recs.len().max(1) as f64;
    let mut out = [0.0; 4];
    for r in recs {
        out[0] += r.key_similarity as f64;
        out[1] += r.cls_entropy as f64;
        out[2] += r.token_entropy as f64;
        out[3] += r.mean_cls_attention as f64;
    }
    out.map(|v| v / n)
}

const DYNAMICS_COLUMNS: [&str; 4] = [
    "key_similarity",
    "cls_entropy",
    "token_entropy",
    "mean_cls_attention",
];

/// Summary of a pruned encoder run against its unpruned reference.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub table: Table,
    pub total_flops: u64,
    pub unpruned_flops: u64,
    pub logit_mse: f64,
    pub top1_agreement: f64,
    pub r_schedule: Vec<usize>,
}

pub const RUN_VIT_HEADER: [&str; 10] = [
    "layer",
    "tokens_in",
    "tokens_out",
    "prune_r",
    "key_similarity",
    "cls_entropy",
    "token_entropy",
    "mean_cls_attention",
    "layer_flops",
    "cumulative_flops",
];

/// One pruned forward pass with per-layer token counts, dynamics and FLOPs.
pub fn run_vit(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let vit = cfg.vit_config()?;
    let w = load_vit_weights(cfg, &vit)?;
    let images = synth_batch(cfg);
    let opts = ForwardOptions {
        record_attention: true,
        keep_hidden: false,
    };
    let out = vit_forward(VitInput::Image(&images), &vit, &w, opts)?;
    let base = vit_forward(
        VitInput::Image(&images),
        &vit.unpruned(),
        &w,
        ForwardOptions::default(),
    )?;
    let dyn_ = layer_dynamics(&out, vit.cls_token)?;
    let mut table = Table::new(&RUN_VIT_HEADER);
    let mut cum = out.flops.stem;
    for (t, d) in out.traces.iter().zip(&dyn_) {
        let lf = out.flops.layers[t.layer_index].total();
        cum += lf;
        table.push(vec![
            t.layer_index.into(),
            t.token_count_in.into(),
            t.token_count_out.into(),
            t.prune_r.into(),
            d.key_similarity.into(),
            d.cls_entropy.into(),
            d.token_entropy.into(),
            d.mean_cls_attention.into(),
            lf.into(),
            cum.into(),
        ]);
    }
    Ok(RunSummary {
        table,
        total_flops: out.flops.total,
        unpruned_flops: base.flops.total,
        logit_mse: logit_mse(out.logits.data(), base.logits.data()),
        top1_agreement: top1_agreement(&out.logits, &base.logits),
        r_schedule: out.r_schedule(),
    })
}

pub const METRICS_HEADER: [&str; 6] = [
    "layer",
    "token_count",
    "key_similarity",
    "cls_entropy",
    "token_entropy",
    "mean_cls_attention",
];

/// Per-layer dynamics of the unpruned encoder, batch-averaged.
pub fn metrics_table(cfg: &ExperimentConfig) -> Result<Table> {
    let vit = cfg.vit_config()?;
    let w = load_vit_weights(cfg, &vit)?;
    let images = synth_batch(cfg);
    let opts = ForwardOptions {
        record_attention: true,
        keep_hidden: false,
    };
    let out = vit_forward(VitInput::Image(&images), &vit.unpruned(), &w, opts)?;
    let mut table = Table::new(&METRICS_HEADER);
    for d in layer_dynamics(&out, vit.cls_token)? {
        table.push(vec![
            d.layer_index.into(),
            d.token_count.into(),
            d.key_similarity.into(),
            d.cls_entropy.into(),
            d.token_entropy.into(),
            d.mean_cls_attention.into(),
        ]);
    }
    Ok(table)
}

/// A config parameter a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Tau,
    K,
    Gamma,
    /// Prune layers `0..n`.
    NumLayers,
    /// Prune layers shifted to start here, keeping their count.
    StartLayer,
    ConstantR,
    Seed,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 7] = [
        SweepAxis::Tau,
        SweepAxis::K,
        SweepAxis::Gamma,
        SweepAxis::NumLayers,
        SweepAxis::StartLayer,
        SweepAxis::ConstantR,
        SweepAxis::Seed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Tau => "tau",
            SweepAxis::K => "k",
            SweepAxis::Gamma => "gamma",
            SweepAxis::NumLayers => "num_layers",
            SweepAxis::StartLayer => "start_layer",
            SweepAxis::ConstantR => "constant_r",
            SweepAxis::Seed => "seed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.as_str()).collect();
            Error::Config(format!(
                "unknown sweep axis `{s}` (expected one of {})",
                names.join(", ")
            ))
        })
    }

    /// `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let as_count = || {
            if value >= 0.0 && value.fract() == 0.0 && value < u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!(
                    "{} needs a non-negative integer, got {value}",
                    self.as_str()
                )))
            }
        };
        let mut c = cfg.clone();
        let depth = c.model.vit.layers;
        match self {
            SweepAxis::Tau => c.prune.tau = value as f32,
            SweepAxis::K => c.prune.k = as_count()?,
            SweepAxis::Gamma => c.prune.gamma = value as f32,
            SweepAxis::NumLayers => {
                c.prune.layers = LayerSpec::explicit(0..as_count()?);
                c.prune.schedule = ScheduleKind::Custom;
            }
            SweepAxis::StartLayer => {
                let count = cfg.prune.layers.resolve(depth)?.len().max(1);
                let start = as_count()?;
                c.prune.layers = LayerSpec::explicit(start..start + count);
                c.prune.schedule = ScheduleKind::Custom;
            }
            SweepAxis::ConstantR => c.prune.constant_r = as_count()?,
            SweepAxis::Seed => c.data.seed = as_count()? as u64,
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses `a,b,c` or an inclusive `start:stop:step` range. Range points are
/// rounded to nine significant digits so 0.7 + 3·0.01 prints as 0.73.
pub fn parse_value_list(s: &str) -> Result<Vec<f64>> {
    let bad = |what: &str| Error::Config(format!("bad value list `{s}`: {what}"));
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| bad(&format!("`{t}` is not a number")))
    };
    let parts: Vec<&str> = s.split(':').collect();
    let values = match parts[..] {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if step.is_nan() || step <= 0.0 || b < a {
                return Err(bad("range needs start <= stop and step > 0"));
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            (0..=n)
                .map(|i| {
                    super::csvout::fmt_g9(a + i as f64 * step)
                        .parse()
                        .expect("formatted float")
                })
                .collect()
        }
        [_] if s.trim().is_empty() => Vec::new(),
        [_] => s.split(',').map(num).collect::<Result<_>>()?,
        _ => return Err(bad("expected a comma list or start:stop:step")),
    };
    if values.iter().any(|v: &f64| !v.is_finite()) {
        return Err(bad("values must be finite"));
    }
    Ok(values)
}

pub const SWEEP_HEADER: [&str; 11] = [
    "param",
    "value",
    "r_schedule",
    "total_flops",
    "retained_tokens",
    "key_similarity",
    "cls_entropy",
    "token_entropy",
    "mean_cls_attention",
    "logit_mse",
    "top1_agreement",
];

/// One row per value: the encoder run with `axis = value`, compared against
/// the unpruned model on the same inputs. Dynamics are means over layers and
/// batch; `retained_tokens` is the token count leaving the last layer.
pub fn run_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Table> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let base_vit = cfg.vit_config()?;
    let w = load_vit_weights(cfg, &base_vit)?;
    let mut refs: BTreeMap<u64, (Tensor, Tensor)> = BTreeMap::new();
    let mut table = Table::new(&SWEEP_HEADER);
    for &value in values {
        let c = axis.apply(cfg, value)?;
        let vit = c.vit_config()?;
        let (images, base_logits) = match refs.get(&c.data.seed) {
            Some(r) => r.clone(),
            None => {
                let images = synth_batch(&c);
                let base = vit_forward(
                    VitInput::Image(&images),
                    &vit.unpruned(),
                    &w,
                    ForwardOptions::default(),
                )?;
                refs.insert(c.data.seed, (images.clone(), base.logits.clone()));
                (images, base.logits)
            }
        };
        let opts = ForwardOptions {
            record_attention: true,
            keep_hidden: false,
        };
        let out = vit_forward(VitInput::Image(&images), &vit, &w, opts)?;
        let dyn_ = mean_dynamics(&layer_dynamics(&out, vit.cls_token)?);
        let mut row: Vec<Cell> = vec![
            axis.as_str().into(),
            value.into(),
            join_list(&out.r_schedule()).into(),
            out.flops.total.into(),
            out.traces.last().map_or(0, |t| t.token_count_out).into(),
        ];
        row.extend(dyn_.iter().map(|&v| Cell::Float(v)));
        row.push(logit_mse(out.logits.data(), base_logits.data()).into());
        row.push(top1_agreement(&out.logits, &base_logits).into());
        table.push(row);
    }
    debug_assert_eq!(DYNAMICS_COLUMNS, SWEEP_HEADER[5..9]);
    Ok(table)
}

/// Token-reduction strategies compared in the layer-placement recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fig2Strategy {
    AttnDrop,
    SimMerge,
    SimDrop,
    Random,
}

impl Fig2Strategy {
    pub const ALL: [Fig2Strategy; 4] = [
        Fig2Strategy::AttnDrop,
        Fig2Strategy::SimMerge,
        Fig2Strategy::SimDrop,
        Fig2Strategy::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Fig2Strategy::AttnDrop => "attn_drop",
            Fig2Strategy::SimMerge => "sim_merge",
            Fig2Strategy::SimDrop => "sim_drop",
            Fig2Strategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }

    fn fixed_mode(self) -> PruneMode {
        match self {
            Fig2Strategy::AttnDrop => PruneMode::AttentionDrop,
            Fig2Strategy::SimMerge => PruneMode::Merge,
            Fig2Strategy::SimDrop => PruneMode::ConstantDrop,
            Fig2Strategy::Random => PruneMode::RandomDrop,
        }
    }

    /// Largest count this strategy can remove from `unprotected` tokens.
    fn limit(self, unprotected: usize) -> usize {
        match self {
            Fig2Strategy::AttnDrop | Fig2Strategy::Random => unprotected.saturating_sub(1),
            Fig2Strategy::SimMerge | Fig2Strategy::SimDrop if unprotected < 2 => 0,
            Fig2Strategy::SimMerge | Fig2Strategy::SimDrop => unprotected.div_ceil(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fig2Schedule {
    /// `pct` of the unprotected tokens at one layer.
    SingleLayer,
    /// `1/depth` of the unprotected tokens at every layer.
    Progressive,
    /// The similarity vote's r at each first-half layer, shared by all strategies.
    VotingFirstHalf,
}

impl Fig2Schedule {
    pub const ALL: [Fig2Schedule; 3] = [
        Fig2Schedule::SingleLayer,
        Fig2Schedule::Progressive,
        Fig2Schedule::VotingFirstHalf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Fig2Schedule::SingleLayer => "single_layer",
            Fig2Schedule::Progressive => "progressive",
            Fig2Schedule::VotingFirstHalf => "voting_first_half",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule `{s}`")))
    }
}

/// `floor(n · pct)`, with a small guard so products like 0.57·100 that land
/// a hair under an integer are not floored one short.
pub fn pct_to_count(n_unprotected: usize, pct: f64) -> usize {
    ((n_unprotected as f64 * pct) + 1e-9).floor().max(0.0) as usize
}

#[derive(Debug, Clone)]
pub struct Fig2Options {
    pub strategies: Vec<Fig2Strategy>,
    pub schedules: Vec<Fig2Schedule>,
    pub single_layer: usize,
    /// Fraction of unprotected tokens removed by the single-layer schedule.
    pub single_pct: f64,
}

impl Default for Fig2Options {
    fn default() -> Self {
        Self {
            strategies: Fig2Strategy::ALL.to_vec(),
            schedules: Fig2Schedule::ALL.to_vec(),
            single_layer: 0,
            single_pct: 0.4,
        }
    }
}

/// The encoder config one (strategy, schedule) cell runs with.
pub fn fig2_config(
    base: &VitConfig,
    strategy: Fig2Strategy,
    schedule: Fig2Schedule,
    opts: &Fig2Options,
    voted: &[usize],
) -> Result<VitConfig> {
    let depth = base.layers;
    let n0 = base.num_tokens() - base.protected();
    let mut cfg = base.clone();
    cfg.overrides.clear();
    let fixed = |r: usize| PruneConfig {
        mode: strategy.fixed_mode(),
        constant_r: r,
        ..base.prune
    };
    let mut per_layer: Vec<usize> = vec![0; depth];
    match schedule {
        Fig2Schedule::SingleLayer => {
            if opts.single_layer >= depth {
                return Err(Error::Config(format!(
                    "single layer {} >= depth {depth}",
                    opts.single_layer
                )));
            }
            per_layer[opts.single_layer] = pct_to_count(n0, opts.single_pct);
        }
        Fig2Schedule::Progressive => per_layer.fill(pct_to_count(n0, 1.0 / depth as f64)),
        Fig2Schedule::VotingFirstHalf => {
            if strategy == Fig2Strategy::SimDrop {
                cfg.prune = PruneConfig {
                    mode: PruneMode::Saint,
                    ..base.prune
                };
                cfg.prune_layers = (0..depth / 2).collect();
                return Ok(cfg);
            }
            per_layer[..voted.len().min(depth)].copy_from_slice(&voted[..voted.len().min(depth)]);
        }
    }
    let mut remaining = n0;
    cfg.prune_layers.clear();
    for (l, r) in per_layer.into_iter().enumerate() {
        let r = r.min(strategy.limit(remaining));
        if r > 0 {
            cfg.prune_layers.insert(l);
            cfg.overrides.insert(l, fixed(r));
            remaining -= r;
        }
    }
    cfg.prune = fixed(0);
    Ok(cfg)
}

pub const FIG2_HEADER: [&str; 11] = [
    "strategy",
    "schedule",
    "layer",
    "tokens_in",
    "tokens_out",
    "prune_r",
    "layer_flops",
    "cumulative_flops",
    "cls_drift",
    "logit_mse",
    "top1_agreement",
];

/// Pooled hidden state (CLS row, or token mean without CLS) per batch item.
fn pooled_rows(h: &Tensor, cls: bool) -> Result<Vec<Vec<f64>>> {
    let (b, n, c) = h.dims3()?;
    Ok((0..b)
        .map(|bi| {
            let item = h.outer(bi);
            if cls {
                item[..c].iter().map(|&v| v as f64).collect()
            } else {
                (0..c)
                    .map(|j| (0..n).map(|t| item[t * c + j] as f64).sum::<f64>() / n as f64)
                    .collect()
            }
        })
        .collect())
}

fn pooled_drift(a: &Tensor, b: &Tensor, cls: bool) -> Result<f64> {
    let (pa, pb) = (pooled_rows(a, cls)?, pooled_rows(b, cls)?);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        for (u, v) in x.iter().zip(y) {
            sum += (u - v).powi(2);
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Every (strategy, schedule) pair as per-layer rows: the realized drop, the
/// FLOPs, the drift of the pooled hidden state at that layer and the final
/// logit drift against the unpruned model.
pub fn recipe_fig2(cfg: &ExperimentConfig, opts: &Fig2Options) -> Result<Table> {
    let base = cfg.vit_config()?;
    let w = load_vit_weights(cfg, &base)?;
    let images = synth_batch(cfg);
    let keep = ForwardOptions {
        record_attention: false,
        keep_hidden: true,
    };
    let reference = vit_forward(VitInput::Image(&images), &base.unpruned(), &w, keep)?;
    let voting = PruneConfig {
        mode: PruneMode::Saint,
        ..base.prune
    };
    let voted_cfg = VitConfig {
        prune: voting,
        prune_layers: (0..base.layers / 2).collect(),
        overrides: BTreeMap::new(),
        ..base.clone()
    };
    let voted = vit_forward(
        VitInput::Image(&images),
        &voted_cfg,
        &w,
        ForwardOptions::default(),
    )?
    .r_schedule();

    let mut table = Table::new(&FIG2_HEADER);
    for &schedule in &opts.schedules {
        for &strategy in &opts.strategies {
            let run_cfg = fig2_config(&base, strategy, schedule, opts, &voted)?;
            let out = vit_forward(VitInput::Image(&images), &run_cfg, &w, keep)?;
            let mse = logit_mse(out.logits.data(), reference.logits.data());
            let top1 = top1_agreement(&out.logits, &reference.logits);
            let mut cum = out.flops.stem;
            for (t, h) in out.traces.iter().zip(&out.hidden) {
                let lf = out.flops.layers[t.layer_index].total();
                cum += lf;
                table.push(vec![
                    strategy.as_str().into(),
                    schedule.as_str().into(),
                    t.layer_index.into(),
                    t.token_count_in.into(),
                    t.token_count_out.into(),
                    t.prune_r.into(),
                    lf.into(),
                    cum.into(),
                    pooled_drift(h, &reference.hidden[t.layer_index], base.cls_token)?.into(),
                    mse.into(),
                    top1.into(),
                ]);
            }
        }
    }
    Ok(table)
}

/// Analytic cost models with published baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopsPreset {
    VitH14,
    VitL16,
    VitB16,
}

impl FlopsPreset {
    pub const ALL: [FlopsPreset; 3] = [FlopsPreset::VitH14, FlopsPreset::VitL16, FlopsPreset::VitB16];

    pub fn as_str(self) -> &'static str {
        match self {
            FlopsPreset::VitH14 => "vit-h14",
            FlopsPreset::VitL16 => "vit-l16",
            FlopsPreset::VitB16 => "vit-b16",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }

    /// Architecture, depth and input token count.
    pub fn arch(self) -> (FlopsArch, usize, usize) {
        match self {
            FlopsPreset::VitH14 => FlopsArch::vit_h14_224(),
            FlopsPreset::VitL16 => FlopsArch::vit_l16_224(),
            FlopsPreset::VitB16 => FlopsArch::vit_b16_224(),
        }
    }
}

/// Token schedule with `r` tokens removed (between attention and FFN) at
/// every layer in `layers`, never going below `floor` tokens.
pub fn constant_drop_schedule(
    depth: usize,
    tokens: usize,
    r: usize,
    layers: &[usize],
    floor: usize,
) -> Vec<LayerTokens> {
    let mut n = tokens;
    (0..depth)
        .map(|l| {
            let out = if layers.contains(&l) {
                n.saturating_sub(r).max(floor)
            } else {
                n
            };
            let t = LayerTokens::pruned(n, out);
            n = out;
            t
        })
        .collect()
}

pub const FLOPS_HEADER: [&str; 8] = [
    "model",
    "layer",
    "tokens_in",
    "tokens_out",
    "attention_flops",
    "ffn_flops",
    "layer_flops",
    "cumulative_flops",
];

/// Ledger as rows: `stem`, one per layer, `head`, `total`.
pub fn flops_table(model: &str, ledger: &FlopsLedger, schedule: &[LayerTokens]) -> Table {
    let mut t = Table::new(&FLOPS_HEADER);
    let blank = || Cell::Text(String::new());
    let mut cum = ledger.stem;
    t.push(vec![
        model.into(),
        "stem".into(),
        blank(),
        blank(),
        blank(),
        blank(),
        ledger.stem.into(),
        cum.into(),
    ]);
    for (l, (f, s)) in ledger.layers.iter().zip(schedule).enumerate() {
        cum += f.total();
        t.push(vec![
            model.into(),
            l.to_string().into(),
            s.attn.into(),
            s.ffn.into(),
            f.attention.into(),
            f.ffn.into(),
            f.total().into(),
            cum.into(),
        ]);
    }
    cum += ledger.head;
    t.push(vec![
        model.into(),
        "head".into(),
        blank(),
        blank(),
        blank(),
        blank(),
        ledger.head.into(),
        cum.into(),
    ]);
    t.push(vec![
        model.into(),
        "total".into(),
        blank(),
        blank(),
        blank(),
        blank(),
        ledger.total.into(),
        ledger.total.into(),
    ]);
    t
}

pub const RUN_LM_HEADER: [&str; 13] = [
    "mode",
    "visual_in",
    "visual_after_pre",
    "average_retained",
    "retained_per_layer",
    "cache_lengths",
    "encoder_flops",
    "prefill_flops",
    "decode_flops",
    "total_flops",
    "transcript",
    "logit_mse",
    "token_agreement",
];

/// Seeded system and question token ids for the LM pipeline.
pub fn lm_inputs(cfg: &ExperimentConfig) -> VlmInputs {
    let a = &cfg.model.lm;
    let v = &cfg.model.vit;
    let mut rng = Rng::new(cfg.data.seed ^ 0x5EED_7E47);
    let system_ids = (0..a.system_tokens).map(|_| rng.below(a.vocab_size)).collect();
    let question_ids = (0..a.question_tokens).map(|_| rng.below(a.vocab_size)).collect();
    VlmInputs {
        image: synth_images(
            cfg.data.generator,
            1,
            v.channels,
            v.image_size,
            v.patch,
            cfg.data.seed,
        ),
        system_ids,
        question_ids,
    }
}

/// Each configured mode, plus drift against the fully unpruned pipeline.
pub fn run_lm(cfg: &ExperimentConfig, modes: &[VlmMode]) -> Result<Table> {
    let vlm = cfg.vlm_config()?;
    let w = load_vlm_weights(cfg)?;
    let inputs = lm_inputs(cfg);
    let mut off = vlm.clone();
    off.pre_prune.mode = PruneMode::Off;
    off.lm.prune.mode = PruneMode::Off;
    let reference = run_mode(VlmMode::LlmOnly, &inputs, &off, &w)?;
    let ref_logits: Vec<f32> = reference.step_logits.concat();
    let mut table = Table::new(&RUN_LM_HEADER);
    for &mode in modes {
        let rep = run_mode(mode, &inputs, &vlm, &w)?;
        let agree = rep
            .transcript
            .iter()
            .zip(&reference.transcript)
            .filter(|(a, b)| a == b)
            .count() as f64
            / rep.transcript.len().max(1) as f64;
        table.push(vec![
            mode.as_str().into(),
            rep.visual_in.into(),
            rep.visual_after_pre.into(),
            rep.average_retained.into(),
            join_list(&rep.retained_per_layer).into(),
            join_list(&rep.cache_lengths).into(),
            rep.encoder_flops.total.into(),
            rep.prefill_flops.total.into(),
            rep.decode_flops.into(),
            rep.total_flops.into(),
            join_list(&rep.transcript).into(),
            logit_mse(&rep.step_logits.concat(), &ref_logits).into(),
            agree.into(),
        ]);
    }
    Ok(table)
}
