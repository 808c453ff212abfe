//! WebAssembly bindings for the browser demo. Every export returns a JSON
//! string; the page draws it on a canvas.

use saint_core::dynamics::{key_similarity_score, KeySet};
use saint_core::harness::{parse_config, run_sweep, SweepAxis};
use saint_core::prune::{saint_decide, BipartiteSimGraph, PruneConfig};
use saint_core::rng::Rng;
use saint_core::synth::{synth_images, InputGenerator};
use saint_core::tensor::Tensor;
use saint_core::vit::{vit_forward, ForwardOptions, VitConfig, VitInput, VitWeights};
use saint_core::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(value: Result<T>) -> std::result::Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[derive(Debug, Serialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub score: f32,
}

#[derive(Debug, Serialize)]
pub struct GraphView {
    /// 2-d keys, one `[x, y]` per token.
    pub points: Vec<[f32; 2]>,
    pub src_positions: Vec<usize>,
    pub dst_positions: Vec<usize>,
    /// Cross edges at or above the threshold, as token positions.
    pub edges: Vec<Edge>,
    pub degrees: Vec<usize>,
    pub redundancy: Vec<f32>,
    pub r: usize,
    pub dropped: Vec<usize>,
    pub key_similarity: f32,
}

/// 2-d keys drawn around `clusters` random directions.
fn planar_keys(seed: u64, tokens: usize, clusters: usize, spread: f32) -> Vec<[f32; 2]> {
    let mut rng = Rng::new(seed);
    let centres: Vec<f32> = (0..clusters.max(1))
        .map(|_| rng.uniform() * std::f32::consts::TAU)
        .collect();
    (0..tokens)
        .map(|_| {
            let angle = centres[rng.below(centres.len())] + spread * rng.normal();
            let radius = 0.6 + 0.4 * rng.uniform();
            [radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

/// Bipartite similarity graph and the drop decision for one set of 2-d keys.
pub fn graph_view(
    seed: u64,
    tokens: usize,
    clusters: usize,
    spread: f32,
    tau: f32,
    k: usize,
    gamma: f32,
) -> Result<GraphView> {
    let points = planar_keys(seed, tokens, clusters, spread);
    let data = points.iter().flatten().copied().collect();
    let keys = KeySet::new(Tensor::new(vec![1, tokens, 2], data)?)?;
    let cfg = PruneConfig {
        tau,
        k_neighbors: k,
        gamma,
        ..Default::default()
    };
    let graph = BipartiteSimGraph::build(&keys, 0, tau)?;
    let decision = saint_decide(&keys, &cfg)?;
    let mut edges = Vec::new();
    for (i, &s) in graph.src_positions.iter().enumerate() {
        for (j, &d) in graph.dst_positions.iter().enumerate() {
            let score = graph.score(0, i, j);
            if score >= tau {
                edges.push(Edge {
                    src: s,
                    dst: d,
                    score,
                });
            }
        }
    }
    Ok(GraphView {
        redundancy: graph.redundancy(tau, gamma)?.swap_remove(0),
        degrees: graph.degrees[0].clone(),
        src_positions: graph.src_positions,
        dst_positions: graph.dst_positions,
        edges,
        r: decision.r,
        dropped: decision.dropped_positions(0),
        key_similarity: key_similarity_score(&keys)?[0],
        points,
    })
}

#[wasm_bindgen]
pub fn similarity_graph(
    seed: u64,
    tokens: usize,
    clusters: usize,
    spread: f32,
    tau: f32,
    k: usize,
    gamma: f32,
) -> std::result::Result<String, JsError> {
    to_json(graph_view(seed, tokens, clusters, spread, tau, k, gamma))
}

#[derive(Debug, Serialize)]
pub struct LayerMap {
    pub layer: usize,
    pub tokens_in: usize,
    pub r: usize,
    /// Patch indices still alive after the layer.
    pub kept_patches: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct PruneMapView {
    pub grid: usize,
    pub image_size: usize,
    /// Channel-mean pixels, row-major.
    pub pixels: Vec<f32>,
    pub layers: Vec<LayerMap>,
    pub flops: u64,
    pub unpruned_flops: u64,
}

fn generator(name: &str) -> Result<InputGenerator> {
    match name {
        "gaussian" => Ok(InputGenerator::Gaussian),
        "blocks" => Ok(InputGenerator::Blocks),
        "background" => Ok(InputGenerator::Background),
        other => Err(Error::Config(format!("unknown generator `{other}`"))),
    }
}

/// Which patches of a synthetic image survive each encoder layer.
pub fn prune_map_view(seed: u64, input: &str, tau: f32, k: usize) -> Result<PruneMapView> {
    let base = VitConfig::default();
    let cfg = VitConfig {
        prune: PruneConfig {
            tau,
            k_neighbors: k,
            ..base.prune
        },
        ..base
    };
    let weights = VitWeights::random(&cfg, seed);
    let size = cfg.image_size;
    let image = synth_images(generator(input)?, 1, cfg.channels, size, cfg.patch, seed);
    let opts = ForwardOptions::default();
    let out = vit_forward(VitInput::Image(&image), &cfg, &weights, opts)?;
    let full = vit_forward(VitInput::Image(&image), &cfg.unpruned(), &weights, opts)?;
    let plane = size * size;
    let pixels = (0..plane)
        .map(|p| {
            (0..cfg.channels)
                .map(|c| image.data()[c * plane + p])
                .sum::<f32>()
                / cfg.channels as f32
        })
        .collect();
    let offset = cfg.protected();
    let layers = out
        .traces
        .iter()
        .map(|t| LayerMap {
            layer: t.layer_index,
            tokens_in: t.token_count_in,
            r: t.prune_r,
            kept_patches: t.kept_ids[0]
                .iter()
                .filter(|&&id| id >= offset)
                .map(|id| id - offset)
                .collect(),
        })
        .collect();
    Ok(PruneMapView {
        grid: size / cfg.patch,
        image_size: size,
        pixels,
        layers,
        flops: out.flops.total,
        unpruned_flops: full.flops.total,
    })
}

#[wasm_bindgen]
pub fn vit_prune_map(seed: u64, input: &str, tau: f32, k: usize) -> std::result::Result<String, JsError> {
    to_json(prune_map_view(seed, input, tau, k))
}

/// Threshold sweep over the default toy encoder, as CSV text.
pub fn tau_sweep_csv(seed: u64, k: usize, start: f64, stop: f64, step: f64) -> Result<String> {
    if step.is_nan() || step <= 0.0 || stop < start {
        return Err(Error::Config("need start <= stop and step > 0".into()));
    }
    let cfg = parse_config(&format!(r#"{{"data":{{"seed":{seed}}},"prune":{{"k":{k}}}}}"#))?;
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    let values: Vec<f64> = (0..count).map(|i| start + step * i as f64).collect();
    run_sweep(&cfg, SweepAxis::Tau, &values)?.to_csv_string()
}

#[wasm_bindgen]
pub fn tau_sweep(
    seed: u64,
    k: usize,
    start: f64,
    stop: f64,
    step: f64,
) -> std::result::Result<String, JsError> {
    tau_sweep_csv(seed, k, start, stop, step).map_err(|e| JsError::new(&e.to_string()))
}
