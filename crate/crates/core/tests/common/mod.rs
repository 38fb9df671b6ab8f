//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::Path;

use priors3d::camera::{sample_source_poses, Intrinsics, SamplingStrategy};
use priors3d::config::PipelineConfig;
use priors3d::costvolume::GridSpec;
use priors3d::features::write_view_set;
use priors3d::fields::{FieldConfig, FieldSet};
use priors3d::render::{render_view_set, RenderConfig};

/// Sphere of radius `r` around the origin, stored directly in the volume.
pub fn sphere_fields(resolution: usize, r: f64) -> FieldSet {
    FieldSet::passthrough_sdf(GridSpec::cube(resolution, 1.5), |p| p.norm() - r, 1.0, &FieldConfig::default()).unwrap()
}

/// Writes four rendered views of a sphere with `cameras.json` into `dir`.
pub fn write_sphere_views(dir: &Path, size: u32) {
    let strategy = SamplingStrategy::mvdream_four(4, 0, Intrinsics::square(size, 45.0));
    let views = sample_source_poses(&strategy).unwrap();
    let render = RenderConfig { samples_per_ray: 48, ..RenderConfig::default() };
    let set = render_view_set(&sphere_fields(24, 0.6), &views, &render).unwrap();
    write_view_set(dir, &set).unwrap();
}

/// Pipeline settings small enough for test runtimes.
pub fn tiny_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.seed = 5;
    c.volume.resolution = 16;
    c.render.samples_per_ray = 24;
    c.refine.iterations = 3;
    c.poses.resolution = 12;
    c.mesh.tet_resolution = 12;
    c.mesh.resolution = Some(12);
    c.mesh.geometry_iterations = 2;
    c.mesh.texture_iterations = 2;
    c.metrics.circle.count = 8;
    c.metrics.circle.resolution = 16;
    c
}

pub fn write_config(path: &Path, cfg: &PipelineConfig) {
    std::fs::write(path, cfg.to_toml().unwrap()).unwrap();
}
