//! Seeded inputs shared by the kernel benchmarks.

use rand::Rng;

use radarfield::decoder::DecoderInputs;
use radarfield::rng::seeded;
use radarfield::synth::benchmark_scene;
use radarfield::{CostMatrix, DecoderConfig, DecoderVariant, PointCloud, Scene, Vec3};

/// Uniform costs in `[0, 10)` for `rows` predictions and `cols` truths.
pub fn cost_matrix(rows: usize, cols: usize, seed: u64) -> CostMatrix {
    let mut rng = seeded(seed);
    let entries = (0..rows * cols).map(|_| rng.gen_range(0.0..10.0)).collect();
    CostMatrix::new(rows, cols, entries).expect("rows >= cols")
}

pub fn cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = seeded(seed);
    PointCloud::new(
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(5.0..40.0), rng.gen_range(-10.0..10.0), rng.gen_range(0.0..3.0)))
            .collect(),
    )
}

pub fn scene() -> Scene {
    benchmark_scene(32, 7).expect("built-in scene is valid")
}

pub fn decoder_config(variant: DecoderVariant) -> DecoderConfig {
    DecoderConfig {
        variant,
        ..DecoderConfig::default()
    }
}

/// Random features and return positions for `rays` rays.
pub fn decoder_inputs(rays: usize, feature_dim: usize, seed: u64) -> DecoderInputs {
    let mut rng = seeded(seed);
    DecoderInputs {
        features: nalgebra::DMatrix::from_fn(rays, feature_dim, |_, _| rng.gen_range(-0.5..0.5)),
        positions: nalgebra::DMatrix::from_fn(rays, 3, |_, k| match k {
            0 => rng.gen_range(5.0..40.0),
            1 => rng.gen_range(-10.0..10.0),
            _ => rng.gen_range(-1.0..3.0),
        }),
    }
}
