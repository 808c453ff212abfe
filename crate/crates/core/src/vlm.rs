//! Vision-language pipeline: encoder features, optional pre-projection prune,
//! projection into the LM, prefill (optionally pruned) and greedy decode.

use serde::{Deserialize, Serialize};

use crate::dynamics::{FlopsLedger, KeySet};
use crate::error::{Error, Result};
use crate::lm::{average_retained_tokens, greedy_generate, pre_llm_prune, LmConfig, LmWeights};
use crate::prune::{gather_tokens, PruneConfig, PruneMode};
use crate::tensor::Tensor;
use crate::vit::{vit_forward, ForwardOptions, VitConfig, VitInput, VitWeights};

/// Where visual tokens are pruned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlmMode {
    /// Once, before the projection (text-agnostic).
    VitOnly,
    /// Inside the LM during prefill.
    LlmOnly,
    /// A fixed fraction before the projection, then prefill pruning.
    Hybrid,
}

impl VlmMode {
    pub const ALL: [VlmMode; 3] = [VlmMode::VitOnly, VlmMode::LlmOnly, VlmMode::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            VlmMode::VitOnly => "vit_only",
            VlmMode::LlmOnly => "llm_only",
            VlmMode::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for VlmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VlmMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown vlm mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmConfig {
    /// Vision tower; its own pruning settings are ignored.
    pub encoder: VitConfig,
    /// Language model; `visual_span` is filled in per run.
    pub lm: LmConfig,
    /// Parameters of the pre-projection prune.
    pub pre_prune: PruneConfig,
    /// Exact visual token count kept by `vit_only`; `None` uses the vote.
    pub pre_retain: Option<usize>,
    /// Fraction of visual tokens removed before the projection in `hybrid`.
    pub hybrid_pre_ratio: f32,
    pub decode_steps: usize,
}

impl Default for VlmConfig {
    fn default() -> Self {
        let encoder = VitConfig::default();
        let lm = LmConfig {
            vision_dim: encoder.dim,
            ..LmConfig::default()
        };
        Self {
            encoder,
            lm,
            pre_prune: PruneConfig::default(),
            pre_retain: None,
            hybrid_pre_ratio: 0.3,
            decode_steps: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmWeights {
    pub encoder: VitWeights,
    pub lm: LmWeights,
}

impl VlmWeights {
    pub fn random(cfg: &VlmConfig, seed: u64) -> Self {
        Self {
            encoder: VitWeights::random(&cfg.encoder, seed),
            lm: LmWeights::random(&cfg.lm, seed.wrapping_add(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmInputs {
    /// `[1, channels, S, S]`.
    pub image: Tensor,
    pub system_ids: Vec<usize>,
    pub question_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ModeReport {
    pub mode: VlmMode,
    /// Greedy tokens.
    pub transcript: Vec<usize>,
    pub step_logits: Vec<Vec<f32>>,
    pub visual_in: usize,
    pub visual_after_pre: usize,
    /// Visual tokens each LM layer carries after its prune step.
    pub retained_per_layer: Vec<usize>,
    pub average_retained: f64,
    pub cache_lengths: Vec<usize>,
    pub encoder_flops: FlopsLedger,
    pub prefill_flops: FlopsLedger,
    pub decode_flops: u64,
    pub total_flops: u64,
    pub diagnostics: Vec<String>,
}

/// Penultimate-layer patch features `[1, Np, C]` and their head-averaged keys.
pub fn visual_features(
    cfg: &VitConfig,
    w: &VitWeights,
    image: &Tensor,
) -> Result<(Tensor, KeySet, FlopsLedger)> {
    let enc = cfg.unpruned();
    let out = vit_forward(
        VitInput::Image(image),
        &enc,
        w,
        ForwardOptions {
            keep_hidden: true,
            ..Default::default()
        },
    )?;
    let layer = cfg.layers.saturating_sub(2);
    let (b, n, _) = out.hidden[layer].dims3()?;
    let patches: Vec<Vec<usize>> = vec![(cfg.protected()..n).collect(); b];
    let feats = gather_tokens(&out.hidden[layer], &patches)?;
    let keys = out.traces[layer].keys_head_avg.gather(&patches)?;
    Ok((feats, keys, out.flops))
}

pub fn run_mode(mode: VlmMode, inputs: &VlmInputs, cfg: &VlmConfig, w: &VlmWeights) -> Result<ModeReport> {
    if cfg.lm.vision_dim != cfg.encoder.dim {
        return Err(Error::Config(format!(
            "lm vision_dim {} does not match encoder dim {}",
            cfg.lm.vision_dim, cfg.encoder.dim
        )));
    }
    if !(0.0..1.0).contains(&cfg.hybrid_pre_ratio) {
        return Err(Error::Config(format!(
            "hybrid_pre_ratio must be in [0,1): {}",
            cfg.hybrid_pre_ratio
        )));
    }
    let (feats, keys, encoder_flops) = visual_features(&cfg.encoder, &w.encoder, &inputs.image)?;
    if feats.dims()[0] != 1 {
        return Err(Error::shape("run_mode", "one image per run"));
    }
    let visual_in = feats.dims()[1];
    let pre_cfg = PruneConfig {
        protected_count: 0,
        ..cfg.pre_prune
    };
    let pre_target = match mode {
        VlmMode::VitOnly => Some(cfg.pre_retain),
        VlmMode::LlmOnly => None,
        VlmMode::Hybrid => {
            let r = (cfg.hybrid_pre_ratio as f64 * visual_in as f64).floor() as usize;
            Some(Some(visual_in - r))
        }
    };
    let visual = match pre_target {
        Some(target) => pre_llm_prune(&feats, &keys, &pre_cfg, target)?.tokens,
        None => feats,
    };
    let visual_after_pre = visual.dims()[1];

    let sys = w.lm.embed_tokens(&inputs.system_ids)?;
    let vis = w.lm.project_visual(&visual)?;
    let q = w.lm.embed_tokens(&inputs.question_ids)?;
    let c = cfg.lm.dim;
    let data: Vec<f32> = [sys.data(), vis.data(), q.data()].concat();
    let t = data.len() / c;
    let prompt = Tensor::new(vec![1, t, c], data)?;

    let start = inputs.system_ids.len();
    let mut lm = LmConfig {
        visual_span: Some((start, start + visual_after_pre)),
        ..cfg.lm.clone()
    };
    if mode == VlmMode::VitOnly {
        lm.prune.mode = PruneMode::Off;
    }
    let gen = greedy_generate(&prompt, cfg.decode_steps, &lm, &w.lm)?;
    let retained_per_layer: Vec<usize> = gen.prefill.traces.iter().map(|t| t.visual_out).collect();
    let prefill_flops = gen.prefill.flops.clone();
    let total_flops = encoder_flops.total + prefill_flops.total + gen.decode_flops;
    Ok(ModeReport {
        mode,
        transcript: gen.tokens,
        step_logits: gen.step_logits,
        visual_in,
        visual_after_pre,
        average_retained: average_retained_tokens(&retained_per_layer),
        retained_per_layer,
        cache_lengths: gen.prefill.cache.lengths(),
        encoder_flops,
        prefill_flops,
        decode_flops: gen.decode_flops,
        total_flops,
        diagnostics: gen.prefill.diagnostics,
    })
}
