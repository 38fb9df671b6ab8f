use priors3d::camera::{look_at, Intrinsics, Vec3};
use priors3d::costvolume::{GridSpec, VoxelGrid};
use priors3d::fields::{FieldConfig, FieldSet, GeometryInit, HashConfig, PositionalEncoding};
use priors3d::render::{backward_image, render_colors, RenderConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(seed: u64) -> FieldSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GridSpec::cube(5, 1.2);
    let mut vol = VoxelGrid::from_fn(spec, 2, |x| vec![x.norm() - 0.8, 0.0]).unwrap();
    for v in &mut vol.data {
        *v += rng.random_range(-0.1..0.1);
    }
    let cfg = FieldConfig {
        encoding: PositionalEncoding { levels: 2, include_input: true },
        hash: HashConfig { levels: 2, table_size: 64, features_per_level: 2, base_resolution: 3, growth_factor: 1.5 },
        geometry_hidden: vec![6],
        geometry_init: GeometryInit::Random,
        texture_hidden: vec![6],
        seed,
    };
    let mut fs = FieldSet::from_volume(vol, &cfg).unwrap();
    // keep the decoder close to "channel 0 is the distance" so the scene has a surface
    let enc = fs.encoding.output_dim();
    let mut l = priors3d::nn::DenseLayer::zeros(enc + 2, 1, priors3d::nn::Activation::Identity);
    l.weights[enc] = 1.0;
    l.weights[enc + 1] = 0.3;
    l.weights[0] = 0.05;
    l.bias[0] = 0.02;
    fs.geometry = priors3d::nn::Mlp::from_layers(vec![l]).unwrap();
    for v in &mut fs.hash.tables {
        *v = rng.random_range(-1.0..1.0);
    }
    fs
}

fn objective(fs: &FieldSet, cam: &priors3d::camera::Camera, cfg: &RenderConfig, u: &[f64]) -> f64 {
    render_colors(fs, cam, cfg).unwrap().iter().zip(u).map(|(a, b)| a * b).sum()
}

#[test]
fn pixel_gradients_match_finite_differences() {
    let fs = scene(1);
    let cam = look_at(&Vec3::new(0.3, 0.4, 2.5), &Vec3::zeros(), Intrinsics::square(5, 50.0)).unwrap();
    let cfg = RenderConfig { samples_per_ray: 24, sharpness: 6.0, near: 1.0, far: 4.0, ..RenderConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u: Vec<f64> = (0..75).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = backward_image(&fs, &cam, &cfg, &u).unwrap();
    let h = 1e-6;
    let check = |analytic: f64, perturb: &dyn Fn(&mut FieldSet, f64)| {
        let mut p = fs.clone();
        perturb(&mut p, h);
        let up = objective(&p, &cam, &cfg, &u);
        let mut p = fs.clone();
        perturb(&mut p, -h);
        let dn = objective(&p, &cam, &cfg, &u);
        let fd = (up - dn) / (2.0 * h);
        let rel = (analytic - fd).abs() / fd.abs().max(1e-4);
        assert!(rel < 1e-4, "analytic {analytic} fd {fd}");
    };
    assert!(!grads.fields.volume.entries.is_empty());
    for &(i, v) in grads.fields.volume.entries.iter().step_by(7) {
        check(v, &|p, d| p.volume.data[i] += d);
    }
    assert!(!grads.fields.hash.entries.is_empty());
    for &(i, v) in grads.fields.hash.entries.iter().step_by(5) {
        check(v, &|p, d| p.hash.tables[i] += d);
    }
    for i in (0..fs.texture_param_count()).step_by(9) {
        check(grads.fields.texture[i], &|p, d| *p.texture.param_mut(i) += d);
    }
    let mut cp = cfg.clone();
    cp.sharpness += h;
    let up = objective(&fs, &cam, &cp, &u);
    cp.sharpness -= 2.0 * h;
    let dn = objective(&fs, &cam, &cp, &u);
    let fd = (up - dn) / (2.0 * h);
    assert!((grads.sharpness - fd).abs() / fd.abs().max(1e-4) < 1e-4, "{} vs {fd}", grads.sharpness);
}
