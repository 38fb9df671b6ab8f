//! Evaluation: Fréchet distance between embedding distributions, caption
//! retrieval scores for rendered views and sampled point clouds, and the
//! circular rendering protocol that produces the evaluated frames.
//!
//! Embeddings come from an [`EmbeddingProvider`]. The toy providers are fixed
//! random projections so the whole harness runs offline; real encoders are
//! reached through [`ExternalEmbedder`] using a `GDEM` frame:
//!
//! ```text
//! u32 body_len | "GDEM" | u32 modality | u32 d0 | u32 d1 | u32 d2 | payload
//! ```
//!
//! `modality` is 0 image (`d = w, h, 3`, f32 pixels), 1 text (`d = bytes, 0, 0`,
//! UTF-8) or 2 point cloud (`d = n, 3, 0`, f32 xyz). The response is a `u32`
//! byte length followed by the f32 embedding.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{self, ByteReader};
use crate::camera::{look_at_pose, Intrinsics, SphericalPose, Vec3};
use crate::error::{config_err, shape_err, Error, Result};
use crate::features::Image;
use crate::fields::FieldSet;
use crate::mesh::{raycast, render_normal_map, sample_surface_points, TriMesh, BACKGROUND_GRAY, DEFAULT_SURFACE_SAMPLES};
use crate::refine::score::Transport;
use crate::render::{render_image, RenderConfig};

pub const EMBED_MAGIC: &[u8; 4] = b"GDEM";
pub const DEFAULT_EVAL_VIEWS: usize = 120;
pub const DEFAULT_EVAL_ELEVATION: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    Image,
    Text,
    Pointcloud,
}

impl Modality {
    fn tag(self) -> u32 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
            Modality::Pointcloud => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EmbedderKind {
    ToyDeterministic,
    External,
}

#[derive(Debug, Clone, Copy)]
pub enum EmbedInput<'a> {
    Image(&'a Image),
    Text(&'a str),
    Points(&'a [Vec3]),
}

impl EmbedInput<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            EmbedInput::Image(_) => Modality::Image,
            EmbedInput::Text(_) => Modality::Text,
            EmbedInput::Points(_) => Modality::Pointcloud,
        }
    }
}

pub trait EmbeddingProvider {
    fn kind(&self) -> EmbedderKind;
    fn modality(&self) -> Modality;
    fn dimension(&self) -> usize;

    /// Unit-length embedding of one input.
    fn embed(&mut self, input: EmbedInput<'_>) -> Result<Vec<f64>>;

    fn embed_all(&mut self, inputs: &[EmbedInput<'_>]) -> Result<Vec<Vec<f64>>> {
        inputs.iter().map(|i| self.embed(*i)).collect()
    }
}

fn check_modality(expected: Modality, input: &EmbedInput<'_>) -> Result<()> {
    if input.modality() != expected {
        return Err(config_err(format!(
            "{expected:?} embedder received {:?} input",
            input.modality()
        )));
    }
    Ok(())
}

/// Scales to unit length; the zero vector maps to the first basis vector.
pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(x) = v.first_mut() {
            *x = 1.0;
        }
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Side of the thumbnail images are resampled to before projection.
const TOY_IMAGE_SIDE: usize = 16;

/// Fixed random projection per modality.
///
/// Images are resampled to 16×16 and projected; text is a sum of per-token
/// vectors keyed by a hash of the token; point clouds are the mean of random
/// Fourier features, so they ignore point order.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    modality: Modality,
    dimension: usize,
    seed: u64,
    projection: Vec<f64>,
    phases: Vec<f64>,
}

impl ToyEmbedder {
    pub fn new(modality: Modality, dimension: usize, seed: u64) -> Result<ToyEmbedder> {
        if dimension == 0 {
            return Err(config_err("embedding dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (modality.tag() as u64) << 32);
        let inputs = match modality {
            Modality::Image => TOY_IMAGE_SIDE * TOY_IMAGE_SIDE * 3 + 1,
            Modality::Pointcloud => 3,
            Modality::Text => 0,
        };
        let scale = if modality == Modality::Pointcloud { 2.0 } else { 1.0 };
        let projection = (0..dimension * inputs)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let phases = match modality {
            Modality::Pointcloud => (0..dimension).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
            _ => Vec::new(),
        };
        Ok(ToyEmbedder {
            modality,
            dimension,
            seed,
            projection,
            phases,
        })
    }

    fn embed_image(&self, img: &Image) -> Vec<f64> {
        let s = TOY_IMAGE_SIDE;
        let mut x = Vec::with_capacity(s * s * 3 + 1);
        for j in 0..s {
            for i in 0..s {
                let px = ((i as f64 + 0.5) * img.width as f64 / s as f64) as usize;
                let py = ((j as f64 + 0.5) * img.height as f64 / s as f64) as usize;
                let p = img.pixel(px.min(img.width - 1), py.min(img.height - 1));
                x.extend(p.iter().map(|v| v - 0.5));
            }
        }
        x.push(1.0);
        let n = x.len();
        (0..self.dimension)
            .map(|d| self.projection[d * n..(d + 1) * n].iter().zip(&x).map(|(w, v)| w * v).sum())
            .collect()
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(key ^ self.seed);
        (0..self.dimension).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dimension];
        let lower = text.to_lowercase();
        let mut tokens: Vec<&str> = lower.split_whitespace().collect();
        if tokens.is_empty() {
            tokens.push("");
        }
        for t in tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        acc
    }

    fn embed_points(&self, points: &[Vec3]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dimension];
        for p in points {
            for (d, a) in acc.iter_mut().enumerate() {
                let w = &self.projection[3 * d..3 * d + 3];
                *a += (w[0] * p.x + w[1] * p.y + w[2] * p.z + self.phases[d]).cos();
            }
        }
        let n = points.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    fn embed_ref(&self, input: EmbedInput<'_>) -> Result<Vec<f64>> {
        check_modality(self.modality, &input)?;
        Ok(normalize(match input {
            EmbedInput::Image(img) => self.embed_image(img),
            EmbedInput::Text(t) => self.embed_text(t),
            EmbedInput::Points(p) => self.embed_points(p),
        }))
    }
}

impl EmbeddingProvider for ToyEmbedder {
    fn kind(&self) -> EmbedderKind {
        EmbedderKind::ToyDeterministic
    }

    fn modality(&self) -> Modality {
        self.modality
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&mut self, input: EmbedInput<'_>) -> Result<Vec<f64>> {
        self.embed_ref(input)
    }

    fn embed_all(&mut self, inputs: &[EmbedInput<'_>]) -> Result<Vec<Vec<f64>>> {
        let this = &*self;
        inputs.par_iter().map(|i| this.embed_ref(*i)).collect()
    }
}

pub fn encode_embed_request(input: EmbedInput<'_>) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(EMBED_MAGIC);
    binio::put_u32(&mut body, input.modality().tag());
    match input {
        EmbedInput::Image(img) => {
            for d in [img.width, img.height, 3] {
                binio::put_u32(&mut body, d as u32);
            }
            binio::put_f32s(&mut body, img.data.iter().copied());
        }
        EmbedInput::Text(t) => {
            for d in [t.len(), 0, 0] {
                binio::put_u32(&mut body, d as u32);
            }
            body.extend_from_slice(t.as_bytes());
        }
        EmbedInput::Points(p) => {
            for d in [p.len(), 3, 0] {
                binio::put_u32(&mut body, d as u32);
            }
            binio::put_f32s(&mut body, p.iter().flat_map(|v| [v.x, v.y, v.z]));
        }
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    binio::put_u32(&mut out, body.len() as u32);
    out.extend_from_slice(&body);
    out
}

/// Embedder in another process speaking the `GDEM` frame.
pub struct ExternalEmbedder {
    transport: Transport,
    modality: Modality,
    dimension: usize,
}

impl ExternalEmbedder {
    pub fn connect(address: &str, modality: Modality, dimension: usize) -> Result<ExternalEmbedder> {
        Ok(ExternalEmbedder {
            transport: Transport::connect(address)?,
            modality,
            dimension,
        })
    }

    pub fn spawn(program: &str, args: &[String], modality: Modality, dimension: usize) -> Result<ExternalEmbedder> {
        Ok(ExternalEmbedder {
            transport: Transport::spawn(program, args)?,
            modality,
            dimension,
        })
    }
}

impl EmbeddingProvider for ExternalEmbedder {
    fn kind(&self) -> EmbedderKind {
        EmbedderKind::External
    }

    fn modality(&self) -> Modality {
        self.modality
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&mut self, input: EmbedInput<'_>) -> Result<Vec<f64>> {
        check_modality(self.modality, &input)?;
        let body = self.transport.exchange(&encode_embed_request(input))?;
        if body.len() != self.dimension * 4 {
            return Err(Error::Provider(format!(
                "external embedder answered {} bytes, expected {}",
                body.len(),
                self.dimension * 4
            )));
        }
        Ok(normalize(ByteReader::new(&body).f32s(self.dimension)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(samples: &[Vec<f64>]) -> Result<GaussianFit> {
    if samples.len() < 2 {
        return Err(shape_err(format!("need at least 2 samples, got {}", samples.len())));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(shape_err("samples must share a positive dimension"));
    }
    let n = samples.len();
    let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let covariance = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianFit { mean, covariance })
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clipped to 0.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.covariance.shape() != (d, d) || b.covariance.shape() != (d, d) {
        return Err(shape_err(format!("Fréchet distance between dimensions {d} and {}", b.mean.len())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&a.covariance);
    let cross = psd_sqrt(&(&sa * &b.covariance * &sa));
    let trace = a.covariance.trace() + b.covariance.trace() - 2.0 * cross.trace();
    Ok((diff + trace).max(0.0))
}

/// Index of the best caption by cosine similarity; the lowest index wins ties.
pub fn retrieve(item: &[f64], captions: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, c) in captions.iter().enumerate() {
        let s = cosine(item, c);
        if s > best_sim {
            best = i;
            best_sim = s;
        }
    }
    best
}

/// Fraction of items whose retrieved caption is the correct one.
pub fn r_score(items: &[Vec<f64>], captions: &[Vec<f64>], correct: &[usize]) -> Result<f64> {
    if items.is_empty() || captions.is_empty() {
        return Err(shape_err("r_score needs items and captions"));
    }
    if correct.len() != items.len() {
        return Err(shape_err(format!("{} items but {} correct indices", items.len(), correct.len())));
    }
    if let Some(c) = correct.iter().find(|&&c| c >= captions.len()) {
        return Err(shape_err(format!("correct index {c} out of range for {} captions", captions.len())));
    }
    let hits = items.iter().zip(correct).filter(|(item, &c)| retrieve(item, captions) == c).count();
    Ok(hits as f64 / items.len() as f64)
}

/// Surface points used for 3D retrieval, sampled from the face-canonical mesh
/// so that face order does not matter.
pub fn mesh_point_cloud(mesh: &TriMesh, count: usize, seed: u64) -> Result<Vec<Vec3>> {
    let canonical = TriMesh {
        vertices: mesh.vertices.clone(),
        faces: mesh.canonical_faces(),
        colors: None,
    };
    Ok(sample_surface_points(&canonical, count, seed)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Uni3dResult {
    pub score: f64,
    pub points: usize,
}

pub fn uni3d_score(
    mesh: &TriMesh,
    captions: &[String],
    points_embedder: &mut dyn EmbeddingProvider,
    text_embedder: &mut dyn EmbeddingProvider,
    correct: usize,
    seed: u64,
) -> Result<Uni3dResult> {
    if points_embedder.modality() != Modality::Pointcloud || text_embedder.modality() != Modality::Text {
        return Err(config_err("uni3d_score needs a point-cloud and a text embedder"));
    }
    let points = mesh_point_cloud(mesh, DEFAULT_SURFACE_SAMPLES, seed)?;
    let item = points_embedder.embed(EmbedInput::Points(&points))?;
    let texts: Vec<EmbedInput> = captions.iter().map(|c| EmbedInput::Text(c)).collect();
    let caps = text_embedder.embed_all(&texts)?;
    Ok(Uni3dResult {
        score: r_score(&[item], &caps, &[correct])?,
        points: points.len(),
    })
}

/// Azimuths of the evaluation circle, `360 / count` degrees apart.
pub fn circle_azimuths(count: usize, offset: f64) -> Vec<f64> {
    (0..count)
        .map(|i| (offset + i as f64 * 360.0 / count as f64).rem_euclid(360.0))
        .collect()
}

pub enum EvalSubject<'a> {
    Fields(&'a FieldSet, &'a RenderConfig),
    Mesh(&'a TriMesh),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CircleConfig {
    pub count: usize,
    pub elevation: f64,
    pub radius: f64,
    pub resolution: u32,
    pub fov: f64,
    pub azimuth_offset: f64,
}

impl Default for CircleConfig {
    fn default() -> Self {
        CircleConfig {
            count: DEFAULT_EVAL_VIEWS,
            elevation: DEFAULT_EVAL_ELEVATION,
            radius: 2.5,
            resolution: 64,
            fov: 45.0,
            azimuth_offset: 0.0,
        }
    }
}

/// Vertex colors interpolated at the hit, or the normal map for uncolored meshes.
pub fn render_mesh(mesh: &TriMesh, camera: &crate::camera::Camera) -> Result<Image> {
    let Some(colors) = &mesh.colors else {
        return render_normal_map(mesh, camera, None);
    };
    let (w, h) = (camera.intrinsics.width as usize, camera.intrinsics.height as usize);
    let data = raycast(mesh, camera)
        .iter()
        .flat_map(|hit| match hit {
            Some(hit) => {
                let [a, b, c] = mesh.faces[hit.face].map(|i| colors[i as usize]);
                let wa = 1.0 - hit.u - hit.v;
                [0, 1, 2].map(|k| wa * a[k] + hit.u * b[k] + hit.v * c[k])
            }
            None => [BACKGROUND_GRAY; 3],
        })
        .collect();
    Image::new(w, h, data)
}

/// Frames and their poses around the subject at fixed elevation and radius.
pub fn eval_circle(subject: &EvalSubject<'_>, config: &CircleConfig) -> Result<Vec<(SphericalPose, Image)>> {
    if config.count == 0 {
        return Err(config_err("eval circle needs at least one view"));
    }
    let intrinsics = Intrinsics::square(config.resolution, config.fov);
    circle_azimuths(config.count, config.azimuth_offset)
        .into_iter()
        .map(|az| {
            let pose = SphericalPose::new(az, config.elevation, config.radius)?;
            let cam = look_at_pose(&pose, &Vec3::zeros(), intrinsics)?;
            let img = match subject {
                EvalSubject::Fields(fields, render) => {
                    let cfg = RenderConfig {
                        resolution: None,
                        ..(*render).clone()
                    };
                    render_image(fields, &cam, &cfg)?.color
                }
                EvalSubject::Mesh(mesh) => render_mesh(mesh, &cam)?,
            };
            Ok((pose, img))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub index: usize,
    pub azimuth: f64,
    /// Cosine similarity between the view and the correct caption.
    pub score: f64,
    pub retrieved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: Option<f64>,
    pub r_score: f64,
    pub uni3d_score: Option<f64>,
    pub per_view_scores: Vec<ViewScore>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("metric,index,azimuth,value,retrieved\n");
        s += &format!("fid,,,{},\n", opt(self.fid));
        s += &format!("r_score,,,{},\n", self.r_score);
        s += &format!("uni3d_score,,,{},\n", opt(self.uni3d_score));
        for v in &self.per_view_scores {
            s += &format!("view,{},{},{},{}\n", v.index, v.azimuth, v.score, v.retrieved);
        }
        s
    }

    /// Writes JSON, or CSV when the path ends in `.csv`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => self.to_csv(),
            _ => self.to_json()?,
        };
        binio::write_atomic(path, text.as_bytes())
    }
}

pub struct Embedders<'a> {
    pub image: &'a mut dyn EmbeddingProvider,
    pub text: &'a mut dyn EmbeddingProvider,
    pub points: &'a mut dyn EmbeddingProvider,
}

/// Scores rendered frames (and optionally the mesh) against a caption set.
/// The Fréchet distance is reported when at least two reference images are given.
pub fn evaluate(
    frames: &[(SphericalPose, Image)],
    mesh: Option<&TriMesh>,
    captions: &[String],
    correct: usize,
    reference: &[Image],
    embedders: Embedders<'_>,
    seed: u64,
) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(shape_err("no frames to evaluate"));
    }
    if correct >= captions.len() {
        return Err(shape_err(format!("correct index {correct} out of range for {} captions", captions.len())));
    }
    let inputs: Vec<EmbedInput> = frames.iter().map(|(_, img)| EmbedInput::Image(img)).collect();
    let items = embedders.image.embed_all(&inputs)?;
    let texts: Vec<EmbedInput> = captions.iter().map(|c| EmbedInput::Text(c)).collect();
    let caps = embedders.text.embed_all(&texts)?;
    let r = r_score(&items, &caps, &vec![correct; items.len()])?;
    let per_view_scores = items
        .iter()
        .zip(frames)
        .enumerate()
        .map(|(index, (e, (pose, _)))| ViewScore {
            index,
            azimuth: pose.azimuth,
            score: cosine(e, &caps[correct]),
            retrieved: retrieve(e, &caps),
        })
        .collect();
    let fid = if reference.len() >= 2 && items.len() >= 2 {
        let refs: Vec<EmbedInput> = reference.iter().map(EmbedInput::Image).collect();
        let ref_items = embedders.image.embed_all(&refs)?;
        Some(frechet_distance(&fit_gaussian(&items)?, &fit_gaussian(&ref_items)?)?)
    } else {
        None
    };
    let uni3d = match mesh {
        Some(m) => Some(uni3d_score(m, captions, embedders.points, embedders.text, correct, seed)?.score),
        None => None,
    };
    Ok(EvalReport {
        fid,
        r_score: r,
        uni3d_score: uni3d,
        per_view_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit1(mean: f64, var: f64) -> GaussianFit {
        GaussianFit {
            mean: DVector::from_element(1, mean),
            covariance: DMatrix::from_element(1, 1, var),
        }
    }

    #[test]
    fn scalar_frechet_cases() {
        assert_eq!(frechet_distance(&fit1(0.3, 2.0), &fit1(0.3, 2.0)).unwrap(), 0.0);
        assert!((frechet_distance(&fit1(0.0, 1.0), &fit1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-9);
        assert!((frechet_distance(&fit1(0.0, 1.0), &fit1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-9);
        assert!(frechet_distance(&fit1(0.0, 1.0), &GaussianFit {
            mean: DVector::zeros(2),
            covariance: DMatrix::identity(2, 2)
        })
        .is_err());
    }

    #[test]
    fn fit_two_points() {
        let f = fit_gaussian(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(f.mean[0], 1.0);
        assert_eq!(f.covariance[(0, 0)], 2.0);
        let f = fit_gaussian(&vec![vec![1.0, 2.0]; 4]).unwrap();
        assert!(f.covariance.iter().all(|&c| c == 0.0));
        assert!(fit_gaussian(&[vec![1.0]]).is_err());
    }

    #[test]
    fn retrieval_cases() {
        let eye = |i: usize| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let caps: Vec<_> = (0..3).map(eye).collect();
        assert_eq!(r_score(&caps, &caps, &[0, 1, 2]).unwrap(), 1.0);
        let tie = normalize(vec![1.0, 1.0, 0.0]);
        assert_eq!(r_score(&[tie.clone()], &caps, &[0]).unwrap(), 1.0);
        assert_eq!(r_score(&[tie], &caps, &[1]).unwrap(), 0.0);
        let items = vec![eye(0), eye(1), normalize(vec![0.2, 0.9, 0.1])];
        assert!((r_score(&items, &caps, &[0, 1, 2]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(r_score(&items, &caps, &[0, 1, 3]).is_err());
    }

    #[test]
    fn circle_spacing() {
        let a = circle_azimuths(120, 0.0);
        assert!(a.windows(2).all(|w| w[1] - w[0] == 3.0));
        assert_eq!(circle_azimuths(4, 0.0), vec![0.0, 90.0, 180.0, 270.0]);
        assert_eq!(circle_azimuths(4, 360.0), circle_azimuths(4, 0.0));
    }

    #[test]
    fn toy_embeddings_are_unit() {
        let img = Image::filled(7, 5, [0.5; 3]);
        let mut e = ToyEmbedder::new(Modality::Image, 16, 1).unwrap();
        let v = e.embed(EmbedInput::Image(&img)).unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(e.embed(EmbedInput::Text("a cat")).is_err());
        let mut t = ToyEmbedder::new(Modality::Text, 16, 1).unwrap();
        let a = t.embed(EmbedInput::Text("A cat")).unwrap();
        assert_eq!(a, t.embed(EmbedInput::Text("a  cat")).unwrap());
    }
}
