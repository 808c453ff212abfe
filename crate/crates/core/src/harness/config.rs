use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::layers::LayerSpec;
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::prune::{OrderPolicy, PruneConfig, PruneMode};
use crate::synth::InputGenerator;
use crate::vit::VitConfig;
use crate::vlm::{VlmConfig, VlmMode};

/// Top-level experiment description. Every field has a default, so `{}` is a
/// complete config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub prune: PruneSection,
    pub data: DataSection,
    pub output: OutputSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Vit,
    Lm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Vit => "vit",
            ModelKind::Lm => "lm",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(ModelKind::Vit),
            "lm" => Ok(ModelKind::Lm),
            _ => Err(Error::Config(format!(
                "unknown model kind `{s}` (expected vit or lm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Encoder shape; also the vision tower of the LM pipeline.
    pub vit: VitArch,
    pub lm: LmArch,
    /// SNT1 weights file; random weights from `init_seed` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitArch {
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
}

impl Default for VitArch {
    fn default() -> Self {
        let d = VitConfig::default();
        Self {
            layers: d.layers,
            dim: d.dim,
            heads: d.heads,
            mlp_ratio: d.mlp_ratio,
            patch: d.patch,
            image_size: d.image_size,
            channels: d.channels,
            cls_token: d.cls_token,
            distill_token: d.distill_token,
            num_classes: d.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmArch {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Prefill prune layers.
    pub prune_layers: LayerSpec,
    pub system_tokens: usize,
    pub question_tokens: usize,
    pub decode_steps: usize,
    /// Fraction of visual tokens removed before the projection in hybrid mode.
    pub hybrid_pre_ratio: f32,
    /// Exact pre-projection retention for vit_only; the vote decides when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pre_retain: Option<usize>,
    pub modes: Vec<VlmMode>,
}

impl Default for LmArch {
    fn default() -> Self {
        let d = LmConfig::default();
        let v = VlmConfig::default();
        Self {
            layers: d.layers,
            dim: d.dim,
            heads: d.heads,
            mlp_ratio: d.mlp_ratio,
            vocab_size: d.vocab_size,
            max_seq: d.max_seq,
            prune_layers: LayerSpec::Explicit(d.prune_layers),
            system_tokens: 4,
            question_tokens: 8,
            decode_steps: v.decode_steps,
            hybrid_pre_ratio: v.hybrid_pre_ratio,
            pre_retain: None,
            modes: VlmMode::ALL.to_vec(),
        }
    }
}

/// How the per-layer drop count is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// One layer drops `constant_r` tokens.
    SingleLayer,
    /// Every listed layer drops `constant_r` tokens.
    ProgressiveConstant,
    /// The similarity vote sets r at each layer of the first half.
    #[default]
    VotingFirstHalf,
    /// Any combination of layers and mode.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub mode: PruneMode,
    pub tau: f32,
    pub k: usize,
    pub gamma: f32,
    pub layers: LayerSpec,
    pub schedule: ScheduleKind,
    /// Drop count for the constant schedules and non-voting strategies.
    pub constant_r: usize,
    /// Per-layer threshold overrides.
    pub tau_table: BTreeMap<usize, f32>,
}

impl Default for PruneSection {
    fn default() -> Self {
        let d = PruneConfig::default();
        Self {
            mode: d.mode,
            tau: d.tau,
            k: d.k_neighbors,
            gamma: d.gamma,
            layers: LayerSpec::FirstHalf,
            schedule: ScheduleKind::VotingFirstHalf,
            constant_r: 0,
            tau_table: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: u64,
    pub batch_size: usize,
    pub generator: InputGenerator,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 4,
            generator: InputGenerator::Blocks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    None,
    #[default]
    Summary,
    Layers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    pub trace: TraceLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub param: String,
    pub values: Vec<f64>,
}

fn at(path: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Parse { .. } => e,
        e => Error::Parse {
            path: path.to_owned(),
            detail: e.to_string(),
        },
    }
}

/// Parses a JSON config, fills defaults and validates it. Errors carry the
/// JSON path of the offending field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        detail: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Canonical JSON: every field present (optional ones only when set),
    /// fixed key order, pretty-printed.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.prune_config().validate().map_err(at("prune.tau"))?;
        for (&l, &tau) in &self.prune.tau_table {
            PruneConfig {
                tau,
                ..self.prune_config()
            }
            .validate()
            .map_err(at(&format!("prune.tau_table.{l}")))?;
        }
        let layers = self
            .prune
            .layers
            .resolve(self.model.vit.layers)
            .map_err(at("prune.layers"))?;
        let half: std::collections::BTreeSet<usize> = (0..self.model.vit.layers / 2).collect();
        let schedule_err = |msg: &str| Error::Parse {
            path: "prune.schedule".into(),
            detail: msg.into(),
        };
        match self.prune.schedule {
            ScheduleKind::SingleLayer if layers.len() != 1 => {
                return Err(schedule_err(
                    "single_layer needs exactly one layer in prune.layers",
                ))
            }
            ScheduleKind::SingleLayer | ScheduleKind::ProgressiveConstant
                if matches!(self.prune.mode, PruneMode::Saint) =>
            {
                return Err(schedule_err(
                    "constant schedules need a fixed-count mode, not saint",
                ))
            }
            ScheduleKind::VotingFirstHalf if layers != half => {
                return Err(schedule_err("voting_first_half needs prune.layers = first_half"))
            }
            ScheduleKind::VotingFirstHalf
                if !matches!(self.prune.mode, PruneMode::Saint | PruneMode::Off) =>
            {
                return Err(schedule_err("voting_first_half needs mode saint or off"))
            }
            _ => {}
        }
        self.vit_config().map_err(at("model.vit"))?;
        if self.model.kind == ModelKind::Lm {
            self.vlm_config().map_err(at("model.lm"))?;
        }
        if self.data.batch_size == 0 {
            return Err(Error::Parse {
                path: "data.batch_size".into(),
                detail: "must be >= 1".into(),
            });
        }
        if let Some(s) = &self.sweep {
            super::recipes::SweepAxis::parse(&s.param).map_err(at("sweep.param"))?;
        }
        Ok(())
    }

    /// Shared prune parameters; the protected count is set by each model.
    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            tau: self.prune.tau,
            k_neighbors: self.prune.k,
            gamma: self.prune.gamma,
            protected_count: 0,
            mode: self.prune.mode,
            constant_r: self.prune.constant_r,
            seed: self.data.seed,
        }
    }

    pub fn vit_config(&self) -> Result<VitConfig> {
        let a = &self.model.vit;
        let base = self.prune_config();
        let cfg = VitConfig {
            layers: a.layers,
            dim: a.dim,
            heads: a.heads,
            mlp_ratio: a.mlp_ratio,
            patch: a.patch,
            image_size: a.image_size,
            channels: a.channels,
            cls_token: a.cls_token,
            distill_token: a.distill_token,
            num_classes: a.num_classes,
            prune_layers: self.prune.layers.resolve(a.layers)?,
            prune: base,
            overrides: self
                .prune
                .tau_table
                .iter()
                .map(|(&l, &tau)| (l, PruneConfig { tau, ..base }))
                .collect(),
            order_policy: OrderPolicy::ScoreOrder,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn vlm_config(&self) -> Result<VlmConfig> {
        let a = &self.model.lm;
        let encoder = self.vit_config()?.unpruned();
        let lm = LmConfig {
            layers: a.layers,
            dim: a.dim,
            heads: a.heads,
            mlp_ratio: a.mlp_ratio,
            vocab_size: a.vocab_size,
            max_seq: a.max_seq,
            vision_dim: encoder.dim,
            prune_layers: a.prune_layers.resolve(a.layers)?,
            prune: self.prune_config(),
            tau_table: self.prune.tau_table.clone(),
            visual_span: None,
        };
        lm.validate()?;
        let prompt = a.system_tokens + encoder.num_patches() + a.question_tokens;
        if prompt + a.decode_steps > a.max_seq {
            return Err(Error::Config(format!(
                "prompt of {prompt} tokens plus {} decode steps exceeds max_seq {}",
                a.decode_steps, a.max_seq
            )));
        }
        if a.modes.is_empty() {
            return Err(Error::Config("lm.modes is empty".into()));
        }
        Ok(VlmConfig {
            encoder,
            lm,
            pre_prune: self.prune_config(),
            pre_retain: a.pre_retain,
            hybrid_pre_ratio: a.hybrid_pre_ratio,
            decode_steps: a.decode_steps,
        })
    }
}
