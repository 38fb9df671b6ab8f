//! Volume-renders an analytic sphere and writes color, normal and depth.
//!
//! `cargo run --release --example render_sphere -- [out_dir]`

use std::path::PathBuf;

use priors3d::camera::{look_at, Intrinsics, Vec3};
use priors3d::costvolume::GridSpec;
use priors3d::fields::{FieldConfig, FieldSet};
use priors3d::render::{render_image, RenderConfig};

fn main() -> priors3d::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("priors3d_render"));

    let fields = FieldSet::passthrough_sdf(GridSpec::cube(48, 1.5), |p| p.norm() - 1.0, 1.0, &FieldConfig::default())?;
    let camera = look_at(&Vec3::new(0.0, 0.0, 3.0), &Vec3::zeros(), Intrinsics::square(96, 40.0))?;
    let config = RenderConfig { samples_per_ray: 128, ..RenderConfig::default() };

    let frame = render_image(&fields, &camera, &config)?;
    let c = frame.center_index();
    let n = frame.normal[c];
    println!("center depth {:.4} (surface at 2.0)", frame.depth[c]);
    println!("center normal ({:+.4}, {:+.4}, {:+.4})", n.x, n.y, n.z);
    let covered = frame.opacity.iter().filter(|&&o| o > 0.5).count();
    println!("{covered} of {} pixels opaque", frame.opacity.len());

    frame.save(&out)?;
    println!("-> {}", out.display());
    Ok(())
}
