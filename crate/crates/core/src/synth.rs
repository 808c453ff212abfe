//! Deterministic synthetic inputs.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{rng_normal, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputGenerator {
    /// i.i.d. standard-normal pixels; essentially no patch redundancy.
    Gaussian,
    /// Flat-colour squares two patches wide, so neighbouring patches repeat.
    #[default]
    Blocks,
    /// Flat background over the top half, noise below.
    Background,
}

impl InputGenerator {
    pub fn as_str(self) -> &'static str {
        match self {
            InputGenerator::Gaussian => "gaussian",
            InputGenerator::Blocks => "blocks",
            InputGenerator::Background => "background",
        }
    }
}

/// `[batch, channels, size, size]` image batch.
pub fn synth_images(
    generator: InputGenerator,
    batch: usize,
    channels: usize,
    size: usize,
    patch: usize,
    seed: u64,
) -> Tensor {
    let mut rng = Rng::new(seed);
    let dims = [batch, channels, size, size];
    match generator {
        InputGenerator::Gaussian => rng_normal(&mut rng, &dims),
        InputGenerator::Blocks => {
            let block = (2 * patch).max(1);
            let cells = size.div_ceil(block);
            let colours: Vec<f32> = (0..batch * channels * cells * cells)
                .map(|_| 2.0 * rng.uniform() - 1.0)
                .collect();
            Tensor::from_fn(&dims, |idx| {
                let x = idx % size;
                let y = (idx / size) % size;
                let bc = idx / (size * size);
                colours[(bc * cells + y / block) * cells + x / block]
            })
        }
        InputGenerator::Background => {
            let flat: Vec<f32> = (0..batch * channels).map(|_| 2.0 * rng.uniform() - 1.0).collect();
            let noise = rng_normal(&mut rng, &dims);
            Tensor::from_fn(&dims, |idx| {
                let y = (idx / size) % size;
                if y < size / 2 {
                    flat[idx / (size * size)]
                } else {
                    noise.data()[idx]
                }
            })
        }
    }
}
