//! Draws source poses with both sampling strategies and writes them as
//! `cameras.json`.
//!
//! `cargo run --example sample_views -- [out_dir]`

use std::path::PathBuf;

use priors3d::camera::{sample_source_poses, write_cameras, CameraRecord, Intrinsics, SamplingStrategy};

fn main() -> priors3d::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("priors3d_views"));
    std::fs::create_dir_all(&out)?;
    let k = Intrinsics::square(64, 45.0);

    for (name, strategy) in [
        ("sd_front", SamplingStrategy::sd_front(8, 7, k)),
        ("mvdream_four", SamplingStrategy::mvdream_four(8, 7, k)),
    ] {
        let views = sample_source_poses(&strategy)?;
        println!("{name}:");
        for v in &views {
            let p = v.camera.position();
            println!(
                "  {:<10} az {:7.2} el {:6.2} r {:.2}  eye ({:+.3}, {:+.3}, {:+.3})",
                format!("{:?}", v.role),
                v.pose.azimuth,
                v.pose.elevation,
                v.pose.radius,
                p.x,
                p.y,
                p.z
            );
        }
        let records: Vec<CameraRecord> = views.iter().map(CameraRecord::from_view).collect();
        let path = out.join(format!("{name}.json"));
        write_cameras(&path, &records)?;
        println!("  -> {}", path.display());
    }
    Ok(())
}
