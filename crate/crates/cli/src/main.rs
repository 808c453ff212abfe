use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use saint_core::dynamics::{flops_model, LayerTokens};
use saint_core::harness::{
    constant_drop_schedule, flops_table, fmt_g9, gen_model, load_vit_weights, metrics_table, parse_config,
    parse_value_list, recipe_fig2, run_lm, run_sweep, run_vit, synth_batch, ExperimentConfig, Fig2Options,
    Fig2Schedule, Fig2Strategy, FlopsPreset, LayerSpec, ModelKind, ScheduleKind, SweepAxis, Table,
    TraceLevel,
};
use saint_core::prune::PruneMode;
use saint_core::snt1::write_snt1;
use saint_core::vit::{vit_forward, ForwardOptions, VitInput};
use saint_core::vlm::VlmMode;
use saint_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "saint", version, about = "Similarity-aware token pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write seeded random weights to an SNT1 file.
    GenModel {
        #[arg(long, default_value = "vit")]
        kind: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run the encoder once; one CSV row per layer.
    RunVit {
        #[command(flatten)]
        common: Common,
    },
    /// Run the vision-language pipeline in one or all pruning placements.
    RunLm {
        /// vit_only, llm_only, hybrid or all.
        #[arg(long)]
        vlm_mode: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Vary one parameter; one CSV row per value.
    Sweep {
        /// tau, k, gamma, num_layers, start_layer, constant_r or seed.
        #[arg(long)]
        param: Option<String>,
        /// Comma list or inclusive start:stop:step.
        #[arg(long, allow_hyphen_values = true)]
        values: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Strategy x schedule comparison of where and how much to prune.
    Fig2 {
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        schedules: Vec<String>,
        /// Layer used by the single-layer schedule.
        #[arg(long, default_value_t = 0)]
        single_layer: usize,
        /// Fraction of unprotected tokens dropped by the single-layer schedule.
        #[arg(long, default_value_t = 0.4)]
        pct: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Analytic FLOP ledger of a preset or of the configured encoder.
    Flops {
        /// vit-h14, vit-l16 or vit-b16; the configured model when absent.
        #[arg(long)]
        preset: Option<String>,
        /// Tokens dropped at each layer in --layers (presets only).
        #[arg(long, default_value_t = 0)]
        drop: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Per-layer similarity and attention-entropy dynamics, unpruned.
    Metrics {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON experiment config; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (CSV, or SNT1 for gen-model); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// off, saint, attention_drop, merge, random_drop or constant_drop.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f32>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    gamma: Option<f32>,
    /// Drop count for the fixed-count modes.
    #[arg(long)]
    constant_r: Option<usize>,
    /// Prune layers, e.g. 0..6, 8..=16, 8,16,24, first_half, all, none.
    #[arg(long)]
    layers: Option<String>,
    /// SNT1 weights file.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl Common {
    /// Loads the config and applies flag overrides. Overriding the mode or
    /// layers switches the schedule to `custom`.
    fn config(&self, lm_layers: bool) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(&fs::read_to_string(p)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.data.seed = s;
        }
        if let Some(m) = &self.mode {
            cfg.prune.mode = m.parse::<PruneMode>()?;
            cfg.prune.schedule = ScheduleKind::Custom;
        }
        if let Some(t) = self.tau {
            cfg.prune.tau = t;
        }
        if let Some(k) = self.k {
            cfg.prune.k = k;
        }
        if let Some(g) = self.gamma {
            cfg.prune.gamma = g;
        }
        if let Some(r) = self.constant_r {
            cfg.prune.constant_r = r;
        }
        if let Some(l) = &self.layers {
            let spec: LayerSpec = l.parse()?;
            if lm_layers {
                cfg.model.lm.prune_layers = spec;
            } else {
                cfg.prune.layers = spec;
                cfg.prune.schedule = ScheduleKind::Custom;
            }
        }
        if let Some(w) = &self.weights {
            cfg.model.weights = Some(w.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn emit(&self, cfg: &ExperimentConfig, table: &Table) -> Result<()> {
        match self.out.as_ref().or(cfg.output.csv.as_ref()) {
            Some(p) => table.write_to(io::BufWriter::new(fs::File::create(p)?)),
            None => table.write_to(io::stdout().lock()),
        }
    }
}

fn note(cfg: &ExperimentConfig, msg: impl AsRef<str>) {
    if cfg.output.trace != TraceLevel::None {
        let _ = writeln!(io::stderr(), "{}", msg.as_ref());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenModel { kind, common } => {
            let kind: ModelKind = kind.parse()?;
            let cfg = common.config(kind == ModelKind::Lm)?;
            let out = common
                .out
                .as_ref()
                .ok_or_else(|| Error::Config("gen-model needs --out <file.snt1>".into()))?;
            let seed = common.seed.unwrap_or(cfg.model.init_seed);
            let tensors = gen_model(kind, &cfg, seed)?;
            write_snt1(out, &tensors)?;
            note(
                &cfg,
                format!("wrote {} tensors to {}", tensors.len(), out.display()),
            );
        }
        Command::RunVit { common } => {
            let cfg = common.config(false)?;
            let s = run_vit(&cfg)?;
            common.emit(&cfg, &s.table)?;
            note(
                &cfg,
                format!(
                    "total_flops={} unpruned_flops={} logit_mse={} top1_agreement={} r_schedule={:?}",
                    s.total_flops,
                    s.unpruned_flops,
                    fmt_g9(s.logit_mse),
                    fmt_g9(s.top1_agreement),
                    s.r_schedule
                ),
            );
        }
        Command::RunLm { vlm_mode, common } => {
            let mut cfg = common.config(true)?;
            cfg.model.kind = ModelKind::Lm;
            let modes = match vlm_mode.as_deref() {
                None => cfg.model.lm.modes.clone(),
                Some("all") => VlmMode::ALL.to_vec(),
                Some(m) => vec![m.parse()?],
            };
            let table = run_lm(&cfg, &modes)?;
            common.emit(&cfg, &table)?;
        }
        Command::Sweep {
            param,
            values,
            common,
        } => {
            let cfg = common.config(false)?;
            let missing = || Error::Config("sweep needs --param and --values (or a sweep section)".into());
            let section = cfg.sweep.clone();
            let param = param
                .or_else(|| section.as_ref().map(|s| s.param.clone()))
                .ok_or_else(missing)?;
            let values = match values {
                Some(v) => parse_value_list(&v)?,
                None => section
                    .filter(|s| s.param == param)
                    .map(|s| s.values)
                    .ok_or_else(missing)?,
            };
            let table = run_sweep(&cfg, SweepAxis::parse(&param)?, &values)?;
            common.emit(&cfg, &table)?;
        }
        Command::Fig2 {
            strategies,
            schedules,
            single_layer,
            pct,
            common,
        } => {
            let cfg = common.config(false)?;
            let mut opts = Fig2Options {
                single_layer,
                single_pct: pct,
                ..Default::default()
            };
            if !strategies.is_empty() {
                opts.strategies = strategies
                    .iter()
                    .map(|s| Fig2Strategy::parse(s))
                    .collect::<Result<_>>()?;
            }
            if !schedules.is_empty() {
                opts.schedules = schedules
                    .iter()
                    .map(|s| Fig2Schedule::parse(s))
                    .collect::<Result<_>>()?;
            }
            let table = recipe_fig2(&cfg, &opts)?;
            common.emit(&cfg, &table)?;
        }
        Command::Flops { preset, drop, common } => {
            // Preset layer lists refer to the preset's depth, not the config's.
            let own_layers = Common {
                layers: None,
                ..common.clone()
            };
            let cfg = if preset.is_some() {
                own_layers.config(false)?
            } else {
                common.config(false)?
            };
            let (name, ledger, schedule) = match preset {
                Some(p) => {
                    let preset = FlopsPreset::parse(&p)?;
                    let (arch, depth, n) = preset.arch();
                    let layers: Vec<usize> = match &common.layers {
                        Some(l) => l.parse::<LayerSpec>()?.resolve(depth)?.into_iter().collect(),
                        None => Vec::new(),
                    };
                    let schedule = constant_drop_schedule(depth, n, drop, &layers, 1);
                    (
                        preset.as_str().to_owned(),
                        flops_model(&arch, &schedule)?,
                        schedule,
                    )
                }
                None => {
                    let vit = cfg.vit_config()?;
                    let w = load_vit_weights(&cfg, &vit)?;
                    let images = synth_batch(&cfg);
                    let out = vit_forward(VitInput::Image(&images), &vit, &w, ForwardOptions::default())?;
                    let schedule = out
                        .traces
                        .iter()
                        .map(|t| LayerTokens::pruned(t.token_count_in, t.token_count_out))
                        .collect();
                    ("config".to_owned(), out.flops, schedule)
                }
            };
            common.emit(&cfg, &flops_table(&name, &ledger, &schedule))?;
            note(&cfg, format!("{name}: {} GFLOPs", fmt_g9(ledger.gflops())));
        }
        Command::Metrics { common } => {
            let cfg = common.config(false)?;
            common.emit(&cfg, &metrics_table(&cfg)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
