use priors3d::camera::{look_at, Intrinsics, PoseDistribution, Vec3};
use priors3d::costvolume::GridSpec;
use priors3d::fields::{FieldConfig, FieldSet};
use priors3d::mesh::*;
use priors3d::refine::{AnalyticGaussian, DiffusionSchedule, ExactNoise, RefineConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bounds(h: f64) -> (Vec3, Vec3) {
    (Vec3::repeat(-h), Vec3::repeat(h))
}

fn sphere_grid(res: usize, radius: f64) -> TetGrid {
    let mut g = init_tetgrid(res, bounds(1.5)).unwrap();
    g.set_sdf_fn(|p| p.norm() - radius);
    g
}

#[test]
fn flipping_signs_flips_orientation_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = init_tetgrid(5, bounds(1.0)).unwrap();
    g.sdf = (0..g.vertices.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = marching_tetrahedra(&g).unwrap();
    g.sdf.iter_mut().for_each(|s| *s = -*s);
    let b = marching_tetrahedra(&g).unwrap();
    assert_eq!(a.vertices.len(), b.vertices.len());
    let key = |v: &Vec3| [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
    let index_in_a: std::collections::HashMap<_, u32> = a.vertices.iter().enumerate().map(|(i, v)| (key(v), i as u32)).collect();
    let b_faces: Vec<[u32; 3]> = b.faces.iter().map(|f| f.map(|i| index_in_a[&key(&b.vertices[i as usize])])).collect();
    let flipped: Vec<[u32; 3]> = a.faces.iter().map(|f| [f[0], f[2], f[1]]).collect();
    let canon = |faces: &[[u32; 3]]| TriMesh { vertices: a.vertices.clone(), faces: faces.to_vec(), colors: None }.canonical_faces();
    assert_eq!(canon(&flipped), canon(&b_faces));
}

#[test]
fn welded_vertices_are_distinct() {
    let m = marching_tetrahedra(&sphere_grid(12, 0.9)).unwrap();
    let mut sorted = m.vertices.clone();
    sorted.sort_by(|a, b| a.as_slice().partial_cmp(b.as_slice()).unwrap());
    for w in sorted.windows(2) {
        assert!((w[0] - w[1]).norm() > 1e-12);
    }
    // exact lattice hits must weld too
    let mut g = init_tetgrid(4, bounds(1.0)).unwrap();
    g.set_sdf_fn(|p| p.x);
    let m = marching_tetrahedra(&g).unwrap();
    let mut sorted = m.vertices.clone();
    sorted.sort_by(|a, b| a.as_slice().partial_cmp(b.as_slice()).unwrap());
    assert!(sorted.windows(2).all(|w| (w[0] - w[1]).norm() > 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn linear_sdf_extraction_is_exact(
        nx in -1.0f64..1.0, ny in -1.0f64..1.0, nz in -1.0f64..1.0, d in -0.5f64..0.5
    ) {
        let n = Vec3::new(nx, ny, nz);
        prop_assume!(n.norm() > 0.1);
        let n = n.normalize();
        let mut g = init_tetgrid(4, bounds(1.0)).unwrap();
        g.set_sdf_fn(|p| n.dot(p) - d);
        let m = marching_tetrahedra(&g).unwrap();
        for v in &m.vertices {
            prop_assert!((n.dot(v) - d).abs() < 1e-9);
        }
        for f in 0..m.faces.len() {
            prop_assert!(m.face_normal(f).dot(&n) > 0.0);
        }
    }
}

#[test]
fn sphere_normal_map_center() {
    let m = marching_tetrahedra(&sphere_grid(48, 1.0)).unwrap();
    let cam = look_at(&Vec3::new(0.0, 0.0, 3.0), &Vec3::zeros(), Intrinsics::square(33, 40.0)).unwrap();
    let img = render_normal_map(&m, &cam, None).unwrap();
    let p = img.pixel(16, 16);
    let n = Vec3::new(2.0 * p[0] - 1.0, 2.0 * p[1] - 1.0, 2.0 * p[2] - 1.0);
    assert!((n - Vec3::z()).norm() < 0.05, "{n:?}");
    assert_eq!(img.pixel(0, 0), [BACKGROUND_GRAY; 3]);
}

#[test]
fn area_ratio_statistics() {
    let m = TriMesh {
        vertices: vec![
            Vec3::zeros(),
            Vec3::x(),
            Vec3::y(),
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::new(8.0, 0.0, 0.0),
            Vec3::new(5.0, 1.0, 0.0),
        ],
        faces: vec![[0, 1, 2], [3, 4, 5]],
        colors: None,
    };
    let n = DEFAULT_SURFACE_SAMPLES;
    let (pts, _) = sample_surface_points(&m, n, 17).unwrap();
    let first = pts.iter().filter(|p| p.x < 2.0).count() as f64;
    // p = 1/4, 99% two-sided interval
    let sd = (n as f64 * 0.25 * 0.75).sqrt();
    assert!((first - 0.25 * n as f64).abs() < 2.576 * sd, "{first}");
}

fn stable_mask(mesh_a: &TriMesh, mesh_b: &TriMesh, mesh_c: &TriMesh, cam: &priors3d::camera::Camera) -> Vec<bool> {
    let a = raycast(mesh_a, cam);
    let b = raycast(mesh_b, cam);
    let c = raycast(mesh_c, cam);
    (0..a.len())
        .map(|i| match (a[i], b[i], c[i]) {
            (Some(x), Some(y), Some(z)) => x.face == y.face && y.face == z.face,
            (None, None, None) => true,
            _ => false,
        })
        .collect()
}

#[test]
fn normal_map_gradients_match_finite_differences() {
    let mut g = sphere_grid(6, 0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    g.sdf.iter_mut().for_each(|s| *s += rng.random_range(-0.02..0.02));
    let cam = look_at(&Vec3::new(0.4, 0.5, 2.8), &Vec3::zeros(), Intrinsics::square(24, 45.0)).unwrap();
    let u: Vec<f64> = (0..24 * 24 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (mesh, sources) = extract_with_sources(&g).unwrap();
    let h = 1e-6;
    let objective = |grid: &TetGrid, mask: &[bool]| -> f64 {
        let m = marching_tetrahedra(grid).unwrap();
        normal_map_values(&m, &cam)
            .iter()
            .enumerate()
            .filter(|(i, _)| mask[i / 3])
            .map(|(i, v)| v * u[i])
            .sum()
    };
    let mut checked = 0;
    // probe sdf values of vertices touching the surface
    let mut probes: Vec<usize> = raycast(&mesh, &cam)
        .iter()
        .flatten()
        .flat_map(|h| mesh.faces[h.face])
        .map(|v| sources[v as usize])
        .filter(|s| s.a != s.b)
        .flat_map(|s| [s.a as usize, s.b as usize])
        .collect();
    probes.sort_unstable();
    probes.dedup();
    let probes: Vec<usize> = probes.into_iter().step_by(3).take(12).collect();
    for &i in &probes {
        for which in 0..2 {
            let perturb = |d: f64| {
                let mut p = g.clone();
                if which == 0 {
                    p.sdf[i] += d;
                } else {
                    p.deformation[i].y += d;
                }
                p
            };
            let (gp, gm) = (perturb(h), perturb(-h));
            let mask = stable_mask(&mesh, &marching_tetrahedra(&gp).unwrap(), &marching_tetrahedra(&gm).unwrap(), &cam);
            let masked: Vec<f64> = u.iter().enumerate().map(|(k, v)| if mask[k / 3] { *v } else { 0.0 }).collect();
            let vgrad = normal_map_backward(&mesh, &cam, &masked).unwrap();
            let (g_sdf, g_def) = vertex_grads_to_grid(&g, &sources, &vgrad);
            let analytic = if which == 0 {
                g_sdf.to_dense(g.vertices.len())[i]
            } else {
                g_def.to_dense(3 * g.vertices.len())[3 * i + 1]
            };
            let fd = (objective(&gp, &mask) - objective(&gm, &mask)) / (2.0 * h);
            if fd.abs() < 1e-6 && analytic.abs() < 1e-6 {
                continue;
            }
            assert!((analytic - fd).abs() / fd.abs().max(1e-4) < 1e-3, "probe {i}/{which}: {analytic} vs {fd}");
            checked += 1;
        }
    }
    assert!(checked >= 5, "only {checked} probes had signal");
}

fn poses(size: u32) -> PoseDistribution {
    PoseDistribution { azimuth: [0.0, 360.0], elevation: [0.0, 30.0], radius: [2.8, 2.8], intrinsics: Intrinsics::square(size, 45.0) }
}

fn texture_fields() -> FieldSet {
    FieldSet::passthrough_sdf(GridSpec::cube(4, 1.5), |p| p.norm() - 1.0, 1.0, &FieldConfig::default()).unwrap()
}

#[test]
fn finetune_zero_iterations_and_clamp() {
    let grid = sphere_grid(6, 0.9);
    let cfg = MeshFinetuneConfig {
        tet_resolution: 6,
        geometry_iterations: 0,
        texture_iterations: 0,
        resolution: Some(16),
        ..MeshFinetuneConfig::default()
    };
    let mut pre = AnalyticGaussian { mean: vec![0.5; 16 * 16 * 3], variance: 0.1 };
    let mut lora = ExactNoise;
    let out = mesh_finetune(grid.clone(), texture_fields(), &mut pre, &mut lora, &poses(16), &DiffusionSchedule::default(), &cfg).unwrap();
    assert_eq!(out.grid, grid);

    let cfg = MeshFinetuneConfig {
        geometry_iterations: 4,
        texture_iterations: 2,
        refine: RefineConfig { lr: priors3d::refine::LRSchedule { volume: priors3d::refine::Ramp { lo: 0.5, hi: 0.5, ramp_fraction: 1.0 }, ..Default::default() }, ..RefineConfig::default() },
        ..cfg
    };
    let out = mesh_finetune(grid.clone(), texture_fields(), &mut pre, &mut lora, &poses(16), &DiffusionSchedule::default(), &cfg).unwrap();
    assert_ne!(out.grid.sdf, grid.sdf);
    for (d, m) in out.grid.deformation.iter().zip(&out.grid.max_deformation) {
        assert!(d.norm() <= m + 1e-12);
    }
    assert_eq!(out.geometry_trace.rows.len(), 4);
    assert_eq!(out.texture_trace.rows.len(), 2);
    assert_eq!(out.mesh.colors.as_ref().unwrap().len(), out.mesh.vertices.len());
}
