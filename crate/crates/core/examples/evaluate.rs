//! Scores a mesh on the evaluation circle with the deterministic toy
//! embedders: retrieval score, point-cloud score and per-view scores.
//!
//! `cargo run --release --example evaluate -- [out_dir]`

use std::path::PathBuf;

use priors3d::camera::Vec3;
use priors3d::mesh::{init_tetgrid, marching_tetrahedra};
use priors3d::metrics::{eval_circle, evaluate, CircleConfig, Embedders, EvalSubject, Modality, ToyEmbedder};

fn main() -> priors3d::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("priors3d_eval"));
    std::fs::create_dir_all(&out)?;

    let mut grid = init_tetgrid(24, (Vec3::repeat(-1.0), Vec3::repeat(1.0)))?;
    grid.set_sdf_fn(|p| p.norm() - 0.7);
    let mesh = marching_tetrahedra(&grid)?;

    let circle = CircleConfig { count: 24, resolution: 32, ..CircleConfig::default() };
    let frames = eval_circle(&EvalSubject::Mesh(&mesh), &circle)?;
    let captions: Vec<String> = ["a sphere", "a cube", "a chair", "a car"].map(String::from).to_vec();

    let mut image = ToyEmbedder::new(Modality::Image, 64, 1)?;
    let mut text = ToyEmbedder::new(Modality::Text, 64, 1)?;
    let mut points = ToyEmbedder::new(Modality::Pointcloud, 64, 1)?;
    let embedders = Embedders { image: &mut image, text: &mut text, points: &mut points };
    let report = evaluate(&frames, Some(&mesh), &captions, 0, &[], embedders, 9)?;

    println!("r_score {:.3}", report.r_score);
    if let Some(u) = report.uni3d_score {
        println!("uni3d   {u:.4}");
    }
    for v in report.per_view_scores.iter().step_by(6) {
        println!("  view {:>3} az {:6.1}  score {:+.4}  retrieved {}", v.index, v.azimuth, v.score, captions[v.retrieved]);
    }
    let path = out.join("report.json");
    report.save(&path)?;
    println!("-> {}", path.display());
    Ok(())
}
