//! Renders four views of a sphere, extracts per-view features and fuses
//! them into a variance cost volume.
//!
//! `cargo run --release --example build_volume -- [out_dir]`

use std::path::PathBuf;

use priors3d::camera::{sample_source_poses, Intrinsics, SamplingStrategy};
use priors3d::costvolume::{aggregate_variance, apply_conv3d, save_volume, Conv3DStack, GridSpec};
use priors3d::features::{extract_features, write_view_set, FeatureExtractor};
use priors3d::fields::{FieldConfig, FieldSet};
use priors3d::render::{render_view_set, RenderConfig};

fn main() -> priors3d::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("priors3d_volume"));

    let sphere = FieldSet::passthrough_sdf(GridSpec::cube(32, 1.5), |p| p.norm() - 0.6, 1.0, &FieldConfig::default())?;
    let views = sample_source_poses(&SamplingStrategy::mvdream_four(4, 0, Intrinsics::square(48, 45.0)))?;
    let set = render_view_set(&sphere, &views, &RenderConfig { samples_per_ray: 64, ..RenderConfig::default() })?;
    write_view_set(&out.join("views"), &set)?;

    let extractor = FeatureExtractor::GradientAug;
    let maps = set.images.iter().map(|img| extract_features(img, &extractor)).collect::<priors3d::Result<Vec<_>>>()?;
    let cameras: Vec<_> = set.views.iter().map(|v| v.camera.clone()).collect();

    let spec = GridSpec::cube(32, 1.0);
    let raw = aggregate_variance(&maps, &cameras, &spec)?;
    let volume = apply_conv3d(&raw, &Conv3DStack::identity(raw.channels))?;
    println!(
        "{:?} voxels x {} channels, {:.1}% seen by two or more views",
        volume.spec.dims,
        volume.channels,
        100.0 * volume.valid_fraction()
    );

    // variance along the x axis through the center
    let row: Vec<String> = (0..spec.dims[0])
        .step_by(4)
        .map(|i| {
            let c = spec.center(i, 16, 16);
            format!("{:+.2}:{:.4}", c.x, volume.query(&c).iter().sum::<f64>())
        })
        .collect();
    println!("{}", row.join("  "));

    let path = out.join("volume.gdvol");
    save_volume(&volume, &path)?;
    println!("-> {}", path.display());
    Ok(())
}
