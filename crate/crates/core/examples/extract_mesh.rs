//! Extracts a triangle mesh from a signed distance field with marching
//! tetrahedra and writes OBJ and PLY.
//!
//! `cargo run --release --example extract_mesh -- [out_dir]`

use std::path::PathBuf;

use priors3d::camera::Vec3;
use priors3d::cli::tet_grid_for;
use priors3d::costvolume::GridSpec;
use priors3d::fields::{FieldConfig, FieldSet};
use priors3d::mesh::{init_tetgrid, marching_tetrahedra};

fn main() -> priors3d::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("priors3d_mesh"));
    std::fs::create_dir_all(&out)?;

    // analytic torus straight on the tet grid
    let mut grid = init_tetgrid(40, (Vec3::repeat(-1.2), Vec3::repeat(1.2)))?;
    grid.set_sdf_fn(|p| {
        let q = (p.x * p.x + p.z * p.z).sqrt() - 0.7;
        (q * q + p.y * p.y).sqrt() - 0.25
    });
    let torus = marching_tetrahedra(&grid)?;
    println!(
        "torus: {} vertices, {} faces, area {:.4} (exact {:.4}), watertight {}",
        torus.vertices.len(),
        torus.faces.len(),
        torus.surface_area(),
        4.0 * std::f64::consts::PI.powi(2) * 0.7 * 0.25,
        torus.is_watertight()
    );
    torus.save(&out.join("torus.obj"))?;

    // the same route the pipeline takes: SDF decoded from a field set
    let fields = FieldSet::passthrough_sdf(GridSpec::cube(32, 1.5), |p| p.abs().max() - 0.6, 1.0, &FieldConfig::default())?;
    let mut grid = tet_grid_for(&fields, 32)?;
    grid.sample_sdf(&fields);
    let cube = marching_tetrahedra(&grid)?;
    println!("cube: {} vertices, {} faces, area {:.4} (exact {:.4})", cube.vertices.len(), cube.faces.len(), cube.surface_area(), 6.0 * 1.2 * 1.2);
    cube.save(&out.join("cube.ply"))?;

    println!("-> {}", out.display());
    Ok(())
}
