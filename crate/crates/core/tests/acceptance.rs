//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::time::{Duration, Instant};

use priors3d::camera::*;
use priors3d::cli;
use priors3d::costvolume::{aggregate_variance, GridSpec, VoxelGrid};
use priors3d::features::FeatureMap;
use priors3d::fields::{FieldConfig, FieldSet, GeometryInit, HashConfig, PositionalEncoding};
use priors3d::mesh::{init_tetgrid, marching_tetrahedra, TriMesh, DEFAULT_SURFACE_SAMPLES};
use priors3d::metrics::*;
use priors3d::refine::*;
use priors3d::render::{backward_image, render_colors, render_image, RenderConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

// 1 ---------------------------------------------------------------------

fn brute_force_variance(maps: &[FeatureMap], cams: &[Camera], spec: &GridSpec) -> (Vec<f64>, Vec<u16>) {
    let c = maps[0].channels;
    let mut data = vec![0.0; spec.voxel_count() * c];
    let mut validity = vec![0u16; spec.voxel_count()];
    for k in 0..spec.dims[2] {
        for j in 0..spec.dims[1] {
            for i in 0..spec.dims[0] {
                let idx = i + spec.dims[0] * (j + spec.dims[1] * k);
                let x = [
                    spec.origin[0] + spec.spacing * i as f64,
                    spec.origin[1] + spec.spacing * j as f64,
                    spec.origin[2] + spec.spacing * k as f64,
                ];
                let mut seen: Vec<Vec<f64>> = Vec::new();
                for (map, cam) in maps.iter().zip(cams) {
                    let r = &cam.rotation;
                    let t = &cam.translation;
                    let pc: Vec<f64> = (0..3)
                        .map(|a| r[(a, 0)] * x[0] + r[(a, 1)] * x[1] + r[(a, 2)] * x[2] + t[a])
                        .collect();
                    let kk = &cam.intrinsics;
                    let u = kk.focal * pc[0] / pc[2] + kk.principal[0];
                    let v = kk.focal * pc[1] / pc[2] + kk.principal[1];
                    let (w, h) = (map.width as f64, map.height as f64);
                    if !(pc[2] > 0.0 && u >= 0.0 && v >= 0.0 && u <= w - 1.0 && v <= h - 1.0) {
                        continue;
                    }
                    let x0 = (u.floor() as usize).min(map.width - 2);
                    let y0 = (v.floor() as usize).min(map.height - 2);
                    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
                    let at = |xx: usize, yy: usize, ch: usize| map.data[(yy * map.width + xx) * c + ch];
                    seen.push(
                        (0..c)
                            .map(|ch| {
                                let top = at(x0, y0, ch) + fx * (at(x0 + 1, y0, ch) - at(x0, y0, ch));
                                let bot = at(x0, y0 + 1, ch) + fx * (at(x0 + 1, y0 + 1, ch) - at(x0, y0 + 1, ch));
                                top + fy * (bot - top)
                            })
                            .collect(),
                    );
                }
                validity[idx] = seen.len() as u16;
                if seen.len() < 2 {
                    continue;
                }
                for ch in 0..c {
                    let mut col: Vec<f64> = seen.iter().map(|s| s[ch]).collect();
                    col.sort_by(f64::total_cmp);
                    let n = col.len() as f64;
                    let mean = col.iter().sum::<f64>() / n;
                    let var = if col[0] == col[col.len() - 1] {
                        0.0
                    } else {
                        col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
                    };
                    data[idx * c + ch] = var;
                }
            }
        }
    }
    (data, validity)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let spec = GridSpec::cube(16, 1.0);
    let k = Intrinsics::square(32, 50.0);
    let mut voxels = 0;
    for scene in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + scene);
        let (maps, cams): (Vec<_>, Vec<_>) = (0..4)
            .map(|_| {
                let pose = SphericalPose::new(rng.random_range(0.0..360.0), rng.random_range(-40.0..40.0), 2.5).unwrap();
                let cam = look_at_pose(&pose, &Vec3::zeros(), k).unwrap();
                let map = FeatureMap::new(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.random()).collect()).unwrap();
                (map, cam)
            })
            .unzip();
        let fast = aggregate_variance(&maps, &cams, &spec).map_err(|e| e.to_string())?;
        let (data, validity) = brute_force_variance(&maps, &cams, &spec);
        ensure(fast.validity == validity, || format!("scene {scene}: validity differs"))?;
        let same = fast.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("scene {scene}: variance not bit-identical"))?;
        voxels += validity.iter().filter(|&&v| v >= 2).count();
    }
    within(start.elapsed(), 10.0)?;
    Ok(format!("5 scenes bit-identical, {voxels} multi-view voxels, {:.2}s", start.elapsed().as_secs_f64()))
}

// 2 ---------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = GridSpec {
        dims: [9, 7, 11],
        origin: [-0.7, 0.2, -1.3],
        spacing: 0.23,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let a: [f64; 4] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let b: [f64; 4] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let f = |x: &Vec3| vec![a[0] * x.x + a[1] * x.y + a[2] * x.z + a[3], b[0] * x.x + b[1] * x.y + b[2] * x.z + b[3]];
        let grid = VoxelGrid::from_fn(spec, 2, f).unwrap();
        let (lo, hi) = spec.bounds();
        for _ in 0..1000 {
            let x = Vec3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            let q = grid.query(&x);
            let e = f(&x);
            worst = worst.max((q[0] - e[0]).abs()).max((q[1] - e[1]).abs());
        }
        for idx in 0..spec.voxel_count() {
            let [i, j, k] = spec.coords(idx);
            let q = grid.query(&spec.center(i, j, k));
            ensure(q == grid.voxel(idx), || format!("voxel {idx} not exact"))?;
        }
    }
    ensure(worst < 1e-6, || format!("max error {worst:e}"))?;
    Ok(format!("5000 interior points, max error {worst:.1e}; voxel centers exact"))
}

// 3 ---------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let fields = FieldSet::passthrough_sdf(GridSpec::cube(48, 1.5), |x| x.norm() - 1.0, 1.0, &FieldConfig::default()).unwrap();
    let cam = look_at(&Vec3::new(0.0, 0.0, 3.0), &Vec3::zeros(), Intrinsics::square(64, 30.0)).unwrap();
    let cfg = RenderConfig {
        samples_per_ray: 128,
        ..RenderConfig::default()
    };
    let out = render_image(&fields, &cam, &cfg).map_err(|e| e.to_string())?;
    let c = out.center_index();
    let tol = 2.0 * (cfg.far - cfg.near) / cfg.samples_per_ray as f64;
    let depth_err = (out.depth[c] - 2.0).abs();
    let normal_err = (out.normal[c] - Vec3::z()).norm();
    ensure(depth_err <= tol, || format!("depth {} (tolerance {tol})", out.depth[c]))?;
    ensure(normal_err < 0.02, || format!("normal {:?}", out.normal[c]))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "depth {:.4} (tol {tol:.4}), normal error {normal_err:.4}, {:.2}s",
        out.depth[c],
        start.elapsed().as_secs_f64()
    ))
}

// 4 ---------------------------------------------------------------------

fn gradient_scene(seed: u64) -> FieldSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vol = VoxelGrid::from_fn(GridSpec::cube(5, 1.2), 2, |x| vec![x.norm() - 0.8, 0.0]).unwrap();
    vol.data.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    let cfg = FieldConfig {
        encoding: PositionalEncoding { levels: 2, include_input: true },
        hash: HashConfig { levels: 2, table_size: 64, features_per_level: 2, base_resolution: 3, growth_factor: 1.5 },
        geometry_hidden: vec![6],
        geometry_init: GeometryInit::Random,
        texture_hidden: vec![6],
        seed,
    };
    let mut fs = FieldSet::from_volume(vol, &cfg).unwrap();
    let enc = fs.encoding.output_dim();
    let mut l = priors3d::nn::DenseLayer::zeros(enc + 2, 1, priors3d::nn::Activation::Identity);
    l.weights[enc] = 1.0;
    l.weights[enc + 1] = 0.3;
    l.weights[0] = 0.05;
    fs.geometry = priors3d::nn::Mlp::from_layers(vec![l]).unwrap();
    fs.hash.tables.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    fs
}

fn criterion_4() -> Outcome {
    let fs = gradient_scene(4);
    let cam = look_at(&Vec3::new(0.3, 0.4, 2.5), &Vec3::zeros(), Intrinsics::square(4, 50.0)).unwrap();
    let cfg = RenderConfig { samples_per_ray: 32, sharpness: 6.0, near: 1.0, far: 4.0, ..RenderConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let h = 1e-6;
    for pixel in 0..16 {
        for ch in 0..3 {
            if checks >= 60 {
                break;
            }
            let mut up = vec![0.0; 48];
            up[pixel * 3 + ch] = 1.0;
            let g = backward_image(&fs, &cam, &cfg, &up).map_err(|e| e.to_string())?;
            let px = |f: &FieldSet| render_colors(f, &cam, &cfg).unwrap()[pixel * 3 + ch];
            let mut probe = |analytic: f64, perturb: &dyn Fn(&mut FieldSet, f64)| {
                let (mut p, mut m) = (fs.clone(), fs.clone());
                perturb(&mut p, h);
                perturb(&mut m, -h);
                let fd = (px(&p) - px(&m)) / (2.0 * h);
                let rel = (analytic - fd).abs() / fd.abs().max(1e-3);
                worst = worst.max(rel);
                checks += 1;
            };
            // θ1 volume, θ2 hash, θ3 texture
            let vol = g.fields.volume.entries.clone();
            if !vol.is_empty() {
                let (i, v) = vol[rng.random_range(0..vol.len())];
                probe(v, &|f, d| f.volume.data[i] += d);
            }
            let hash = g.fields.hash.entries.clone();
            if !hash.is_empty() {
                let (i, v) = hash[rng.random_range(0..hash.len())];
                probe(v, &|f, d| f.hash.tables[i] += d);
            }
            let t = rng.random_range(0..fs.texture_param_count());
            probe(g.fields.texture[t], &|f, d| *f.texture.param_mut(t) += d);
        }
    }
    ensure(checks >= 50, || format!("only {checks} perturbations"))?;
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("{checks} single-parameter perturbations on a 4x4 render, max rel. error {worst:.1e}"))
}

// 5 ---------------------------------------------------------------------

fn refine_poses(size: u32) -> PoseDistribution {
    PoseDistribution {
        azimuth: [0.0, 360.0],
        elevation: [-10.0, 40.0],
        radius: [2.5, 2.5],
        intrinsics: Intrinsics::square(size, 45.0),
    }
}

fn criterion_5() -> Outcome {
    let fields = gradient_scene(5);
    let mut target = FieldTarget {
        fields: fields.clone(),
        render: RenderConfig { samples_per_ray: 16, sharpness: 8.0, near: 1.2, far: 3.8, ..RenderConfig::default() },
    };
    let mean = vec![0.4; 4 * 4 * 3];
    let mut pre = AnalyticGaussian { mean: mean.clone(), variance: 0.2 };
    let mut lora = AnalyticGaussian { mean, variance: 0.2 };
    let cfg = RefineConfig { iterations: 100, seed: 5, ..RefineConfig::default() };
    let trace = refine_loop(&mut target, &mut pre, &mut lora, &refine_poses(4), &DiffusionSchedule::default(), &cfg)
        .map_err(|e| e.to_string())?;
    ensure(target.fields == fields, || "parameters changed".into())?;
    ensure(trace.rows.len() == 100, || "trace length".into())?;
    Ok("100 iterations with identical providers, all parameters bit-identical".into())
}

// 6 ---------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mu: Vec<f64> = (0..192).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut target = PixelTarget { width: 8, height: 8, pixels: (0..192).map(|_| rng.random_range(0.0..1.0)).collect() };
    let dist = |a: &[f64]| a.iter().zip(&mu).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let d0 = dist(&target.pixels);
    let mut pre = AnalyticGaussian { mean: mu.clone(), variance: 0.0 };
    let mut lora = ExactNoise;
    let lr = LRSchedule {
        volume: Ramp { lo: 0.05, hi: 0.05, ramp_fraction: 1.0 },
        texture: CosineDecay { hi: 0.05, lo: 0.05 },
    };
    let mut distances = vec![d0];
    for step in 0..2000u64 {
        let cfg = RefineConfig { iterations: 1, lr, seed: step, ..RefineConfig::default() };
        refine_loop(&mut target, &mut pre, &mut lora, &refine_poses(8), &DiffusionSchedule::default(), &cfg)
            .map_err(|e| e.to_string())?;
        distances.push(dist(&target.pixels));
    }
    let windows: Vec<f64> = distances.chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    ensure(windows.windows(2).all(|w| w[1] < w[0]), || "smoothed residual not monotone".into())?;
    let last = *distances.last().unwrap();
    ensure(last < 0.05 * d0, || format!("residual {:.3}% of initial", 100.0 * last / d0))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "residual {:.3}% of initial after 2000 steps, monotone over 10-step windows, {:.2}s",
        100.0 * last / d0,
        start.elapsed().as_secs_f64()
    ))
}

// 7 ---------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_plane: f64 = 0.0;
    for _ in 0..20 {
        let n = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let d = rng.random_range(-0.5..0.5);
        let mut g = init_tetgrid(6, (Vec3::repeat(-1.0), Vec3::repeat(1.0))).unwrap();
        g.set_sdf_fn(|p| n.dot(p) - d);
        let m = marching_tetrahedra(&g).unwrap();
        ensure(!m.is_empty(), || "plane produced no faces".into())?;
        for v in &m.vertices {
            worst_plane = worst_plane.max((n.dot(v) - d).abs());
        }
    }
    ensure(worst_plane < 1e-9, || format!("plane error {worst_plane:e}"))?;

    let mut g = init_tetgrid(24, (Vec3::repeat(-1.5), Vec3::repeat(1.5))).unwrap();
    g.set_sdf_fn(|p| p.norm() - 1.0);
    let m = marching_tetrahedra(&g).unwrap();
    let diag = 3f64.sqrt() * 3.0 / 24.0;
    let sphere_err = m.vertices.iter().map(|v| (v.norm() - 1.0).abs()).fold(0.0, f64::max);
    ensure(sphere_err < diag, || format!("sphere error {sphere_err} vs diagonal {diag}"))?;

    let mut g = init_tetgrid(6, (Vec3::repeat(-1.0), Vec3::repeat(1.0))).unwrap();
    g.sdf = (0..g.vertices.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = marching_tetrahedra(&g).unwrap();
    g.sdf.iter_mut().for_each(|s| *s = -*s);
    let b = marching_tetrahedra(&g).unwrap();
    let flipped = TriMesh { faces: a.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(), ..a.clone() };
    ensure(face_geometry(&flipped) == face_geometry(&b), || "sign flip changed more than orientation".into())?;
    Ok(format!(
        "plane error {worst_plane:.1e}, sphere max |r-1| {sphere_err:.4} < {diag:.4}, sign flip reverses {} faces exactly",
        a.faces.len()
    ))
}

/// Faces as oriented position triples, rotation- and order-independent.
fn face_geometry(m: &TriMesh) -> Vec<[[u64; 3]; 3]> {
    let key = |i: u32| {
        let v = m.vertices[i as usize];
        [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()]
    };
    let mut out: Vec<[[u64; 3]; 3]> = m
        .faces
        .iter()
        .map(|f| {
            let t = f.map(key);
            let r = (0..3).min_by_key(|&i| t[i]).unwrap();
            [t[r], t[(r + 1) % 3], t[(r + 2) % 3]]
        })
        .collect();
    out.sort();
    out
}

// 8 ---------------------------------------------------------------------

fn fit1(mean: f64, var: f64) -> GaussianFit {
    GaussianFit {
        mean: nalgebra::DVector::from_element(1, mean),
        covariance: nalgebra::DMatrix::from_element(1, 1, var),
    }
}

fn criterion_8() -> Outcome {
    let a = frechet_distance(&fit1(0.0, 1.0), &fit1(1.0, 1.0)).map_err(|e| e.to_string())?;
    let b = frechet_distance(&fit1(0.0, 1.0), &fit1(0.0, 4.0)).map_err(|e| e.to_string())?;
    ensure((a - 1.0).abs() < 1e-9 && (b - 1.0).abs() < 1e-9, || format!("FD {a}, {b}"))?;
    let onehot: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let r = r_score(&onehot, &onehot, &[0, 1, 2, 3, 4]).map_err(|e| e.to_string())?;
    ensure(r == 1.0, || format!("r_score {r}"))?;
    let mut g = init_tetgrid(8, (Vec3::repeat(-1.0), Vec3::repeat(1.0))).unwrap();
    g.set_sdf_fn(|p| p.norm() - 0.7);
    let mesh = marching_tetrahedra(&g).unwrap();
    let captions: Vec<String> = ["a ball", "a box"].map(String::from).to_vec();
    let mut p = ToyEmbedder::new(Modality::Pointcloud, 16, 0).unwrap();
    let mut t = ToyEmbedder::new(Modality::Text, 16, 0).unwrap();
    let u = uni3d_score(&mesh, &captions, &mut p, &mut t, 0, 1).map_err(|e| e.to_string())?;
    ensure(u.points == 10_000 && DEFAULT_SURFACE_SAMPLES == 10_000, || format!("{} points", u.points))?;
    Ok(format!("FD {a:.12} and {b:.12}; aligned one-hot r_score {r}; uni3d sampled {} points", u.points))
}

// 9 ---------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let grid = GridSpec::default();
    ensure(grid.dims == [150; 3], || format!("default volume {:?}", grid.dims))?;
    let cli_grid = priors3d::config::PipelineConfig::default().volume.grid();
    ensure(cli_grid.dims == [150; 3], || "pipeline default volume".into())?;
    let circle = CircleConfig::default();
    let az = circle_azimuths(circle.count, 0.0);
    ensure(az.len() == 120, || format!("{} eval views", az.len()))?;
    ensure(az.windows(2).all(|w| w[1] - w[0] == 3.0), || "eval spacing".into())?;
    let k = Intrinsics::square(32, 45.0);
    let mv = sample_source_poses(&SamplingStrategy::mvdream_four(4, 0, k)).unwrap();
    for (v, a) in mv.iter().zip([0.0, 90.0, 180.0, 270.0]) {
        ensure(v.pose.azimuth == a && v.pose.elevation == 15.0, || format!("reference pose {:?}", v.pose))?;
    }
    let sd = sample_source_poses(&SamplingStrategy::sd_front(5, 3, k)).unwrap();
    let reference = sd.iter().find(|v| v.role == ViewRole::Reference).unwrap().pose;
    let backs: Vec<_> = sd.iter().filter(|v| v.role == ViewRole::Back).collect();
    ensure(backs.len() == 1, || "back view count".into())?;
    let rel = (azimuth_delta(backs[0].pose.azimuth, reference.azimuth).abs(), backs[0].pose.elevation - reference.elevation);
    ensure(rel == (180.0, 0.0), || format!("back view relative {rel:?}"))?;
    Ok("volume 150³, 120 eval views at 3°, four references at 15° / {0,90,180,270}, back view at relative (180°, 0°)".into())
}

// 10 --------------------------------------------------------------------

fn check_render_contracts(fields: &FieldSet, cfg: &RenderConfig) -> Result<(usize, f64), String> {
    let cam = look_at(&Vec3::new(0.0, 0.4, 2.8), &Vec3::zeros(), Intrinsics::square(64, 45.0)).unwrap();
    let out = render_image(fields, &cam, cfg).map_err(|e| e.to_string())?;
    let n = out.width * out.height;
    ensure(out.color.data.len() == n * 3, || "color size".into())?;
    ensure(out.opacity.iter().all(|&o| (0.0..=1.0 + 1e-12).contains(&o)), || "opacity out of [0, 1]".into())?;
    ensure(out.color.data.iter().all(|&c| (0.0..=1.0).contains(&c)), || "color out of range".into())?;
    ensure(out.depth.iter().all(|d| d.is_finite()), || "non-finite depth".into())?;
    let covered = out.opacity.iter().filter(|&&o| o > 0.5).count() as f64 / n as f64;
    Ok((out.width, covered))
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let fields = FieldSet::passthrough_sdf(GridSpec::cube(24, 1.5), |x| x.norm() - 0.8, 1.0, &FieldConfig::default()).unwrap();
    let full = RenderConfig { resolution: Some(256), ..RenderConfig::default() };
    let (w, covered) = check_render_contracts(&fields, &full)?;
    ensure(w == 256, || format!("rendered {w} px"))?;
    let mut smoke = Vec::new();
    for preset in RenderConfig::PRESETS {
        let cfg = RenderConfig { samples_per_ray: 8, ..RenderConfig::preset(preset).map_err(|e| e.to_string())? };
        let (w, _) = check_render_contracts(&fields, &cfg)?;
        ensure(w == preset as usize, || format!("preset {preset} rendered {w} px"))?;
        smoke.push(w);
    }
    Ok(format!(
        "256² at 64 samples/ray ({:.0}% covered); presets {smoke:?} smoke-tested at 8 samples/ray; {:.1}s",
        100.0 * covered,
        start.elapsed().as_secs_f64()
    ))
}

// 11 --------------------------------------------------------------------

fn pipeline_run(root: &std::path::Path, views: &std::path::Path, cfg: &std::path::Path) -> Result<Vec<Vec<u8>>, String> {
    let out = root.to_str().unwrap();
    let base = |cmd: &[&str]| -> Vec<String> {
        ["priors3d", "--config", cfg.to_str().unwrap(), "--threads", "1", "--out", out]
            .iter()
            .chain(cmd)
            .map(|s| s.to_string())
            .collect()
    };
    let vol = root.join(cli::VOLUME_FILE);
    let ckpt = root.join(cli::CHECKPOINT_FILE);
    let mesh = root.join(cli::MESH_FILE);
    let steps: [Vec<String>; 4] = [
        base(&["build-volume", "--views", views.to_str().unwrap()]),
        base(&["refine", "--volume", vol.to_str().unwrap()]),
        base(&["extract-mesh", "--checkpoint", ckpt.to_str().unwrap()]),
        base(&["eval", "--mesh", mesh.to_str().unwrap()]),
    ];
    for s in steps {
        let code = cli::run(s.clone());
        ensure(code == 0, || format!("`{}` exited {code}", s[7..].join(" ")))?;
    }
    [vol, ckpt, mesh, root.join(cli::REPORT_FILE)]
        .iter()
        .map(|p| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display())))
        .collect()
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let views = dir.path().join("views");
    common::write_sphere_views(&views, 32);
    let cfg_path = dir.path().join("pipeline.toml");
    let mut cfg = common::tiny_config();
    cfg.providers.lora.kind = ProviderKind::TrainableSmallNet;
    common::write_config(&cfg_path, &cfg);
    let a = pipeline_run(&dir.path().join("run_a"), &views, &cfg_path)?;
    let b = pipeline_run(&dir.path().join("run_b"), &views, &cfg_path)?;
    let names = ["volume", "checkpoint", "mesh", "report"];
    for ((x, y), n) in a.iter().zip(&b).zip(names) {
        ensure(x == y, || format!("{n} differs between runs"))?;
    }
    let sizes: Vec<String> = a.iter().zip(names).map(|(x, n)| format!("{n} {}B", x.len())).collect();
    Ok(format!("two --threads 1 runs byte-identical: {}", sizes.join(", ")))
}

fn main() {
    // keep per-command logging out of the summary
    if std::env::var_os(cli::LOG_ENV).is_none() {
        std::env::set_var(cli::LOG_ENV, "error");
    }
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("variance aggregation equals brute force", criterion_1),
        ("trilinear query reproduces linear fields", criterion_2),
        ("sphere depth and normal oracle", criterion_3),
        ("pixel gradients match finite differences", criterion_4),
        ("identical providers leave parameters fixed", criterion_5),
        ("score-distillation convergence oracle", criterion_6),
        ("marching tetrahedra oracles", criterion_7),
        ("metrics oracles", criterion_8),
        ("protocol constants", criterion_9),
        ("resolution presets", criterion_10),
        ("pipeline determinism", criterion_11),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
