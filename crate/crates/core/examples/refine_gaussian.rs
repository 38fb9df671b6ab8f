//! Score-distillation refinement against an analytic Gaussian prior.
//!
//! The target is a free 8x8 image; the pretrained provider is the exact
//! score of a narrow Gaussian and the second provider predicts the true
//! noise, so the image is pulled onto the Gaussian mean.
//!
//! `cargo run --release --example refine_gaussian`

use priors3d::camera::{Intrinsics, PoseDistribution};
use priors3d::refine::{
    refine_loop, AnalyticGaussian, CosineDecay, DiffusionSchedule, ExactNoise, LRSchedule, PixelTarget, Ramp, RefineConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> priors3d::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 8 * 8 * 3;
    let mean: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let mut target = PixelTarget { width: 8, height: 8, pixels: (0..n).map(|_| rng.random()).collect() };
    let distance = |p: &[f64]| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();

    let mut pre = AnalyticGaussian { mean: mean.clone(), variance: 0.0 };
    let mut lora = ExactNoise;
    let poses = PoseDistribution {
        azimuth: [0.0, 360.0],
        elevation: [-10.0, 45.0],
        radius: [2.5, 2.5],
        intrinsics: Intrinsics::square(8, 45.0),
    };
    let schedule = DiffusionSchedule::default();
    let lr = LRSchedule {
        volume: Ramp { lo: 0.05, hi: 0.05, ramp_fraction: 1.0 },
        texture: CosineDecay { hi: 0.05, lo: 0.05 },
    };

    println!("step {:>4}  distance {:.5}", 0, distance(&target.pixels));
    for block in 0..10u64 {
        let config = RefineConfig { iterations: 50, lr, seed: block, ..RefineConfig::default() };
        let trace = refine_loop(&mut target, &mut pre, &mut lora, &poses, &schedule, &config)?;
        let last = trace.rows.last().map(|r| r.vsd_norm).unwrap_or(0.0);
        println!("step {:>4}  distance {:.5}  |grad| {last:.3e}", 50 * (block + 1), distance(&target.pixels));
    }
    Ok(())
}
