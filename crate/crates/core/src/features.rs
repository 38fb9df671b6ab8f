//! View ingestion and 2D feature extraction.
//!
//! Predicted multi-view images arrive as `view_NNN.png` files next to a
//! `cameras.json`; any external multi-view generator can feed the pipeline
//! that way. Feature extractors turn each image into a [`FeatureMap`] that
//! the cost volume samples bilinearly.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::camera::{self, CameraRecord, PosedView};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{self, WeightLayer};

/// RGB image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Image> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(shape_err(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Image {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image::new(width, height, data).expect("positive dimensions")
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            Rgb([q(p[0]), q(p[1]), q(p[2])])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let data = img.pixels().flat_map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
        Image::new(img.width() as usize, img.height() as usize, data).expect("non-empty png")
    }

    /// Encodes as 8-bit RGB PNG.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_png_bytes()?)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let bytes = binio::read_file(path)?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| Error::from(e).at(path))?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Result of a bilinear lookup. Out-of-image queries yield zeros with
/// `valid == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub values: Vec<f64>,
    pub valid: bool,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<FeatureMap> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(shape_err("feature map dimensions do not match data length"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear sample with pixel centers at integer coordinates.
    pub fn sample(&self, u: f64, v: f64) -> FeatureSample {
        let mut values = vec![0.0; self.channels];
        let valid = self.sample_into(u, v, &mut values);
        FeatureSample { values, valid }
    }

    /// Allocation-free form of [`FeatureMap::sample`]; returns validity.
    pub fn sample_into(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        let (w, h) = (self.width, self.height);
        if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
            out.iter_mut().for_each(|o| *o = 0.0);
            return false;
        }
        let x0 = (u.floor() as usize).min(w.saturating_sub(2));
        let y0 = (v.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let (a, b, c, d) = (self.at(x0, y0), self.at(x1, y0), self.at(x0, y1), self.at(x1, y1));
        for (k, o) in out.iter_mut().enumerate() {
            let top = a[k] + fx * (b[k] - a[k]);
            let bot = c[k] + fx * (d[k] - c[k]);
            *o = top + fy * (bot - top);
        }
        true
    }
}

pub fn sample_feature(map: &FeatureMap, uv: [f64; 2]) -> FeatureSample {
    map.sample(uv[0], uv[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExtractorKind {
    Identity,
    GradientAug,
    ConvStack,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureExtractor {
    /// Features are the RGB values.
    Identity,
    /// RGB plus central-difference x/y luminance gradients.
    GradientAug,
    /// Stride-1, zero-padded 3×3 convolutions; layer shapes `[out, in, 3, 3]`.
    ConvStack(Vec<WeightLayer>),
}

impl FeatureExtractor {
    pub fn conv_stack(layers: Vec<WeightLayer>) -> Result<FeatureExtractor> {
        let mut channels = Image::CHANNELS;
        for l in &layers {
            nn::check_conv_layer(l, 4)?;
            if l.in_channels() != channels {
                return Err(shape_err(format!(
                    "conv layer expects {} input channels, previous layer yields {channels}",
                    l.in_channels()
                )));
            }
            channels = l.out_channels();
        }
        Ok(FeatureExtractor::ConvStack(layers))
    }

    pub fn load(kind: ExtractorKind, weights: Option<&Path>) -> Result<FeatureExtractor> {
        match (kind, weights) {
            (ExtractorKind::Identity, _) => Ok(FeatureExtractor::Identity),
            (ExtractorKind::GradientAug, _) => Ok(FeatureExtractor::GradientAug),
            (ExtractorKind::ConvStack, Some(p)) => {
                let layers = nn::decode_bundle(&binio::read_file(p)?).map_err(|e| e.at(p))?;
                FeatureExtractor::conv_stack(layers).map_err(|e| e.at(p))
            }
            (ExtractorKind::ConvStack, None) => Err(config_err("CONV_STACK extractor requires a weights file")),
        }
    }

    pub fn output_channels(&self) -> usize {
        match self {
            FeatureExtractor::Identity => 3,
            FeatureExtractor::GradientAug => 5,
            FeatureExtractor::ConvStack(layers) => layers.last().map_or(3, |l| l.out_channels()),
        }
    }
}

fn luminance(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn extract_features(image: &Image, extractor: &FeatureExtractor) -> Result<FeatureMap> {
    let (w, h) = (image.width, image.height);
    match extractor {
        FeatureExtractor::Identity => FeatureMap::new(w, h, 3, image.data.clone()),
        FeatureExtractor::GradientAug => {
            let lum: Vec<f64> = (0..w * h).map(|i| luminance(image.pixel(i % w, i / w))).collect();
            let l = |x: usize, y: usize| lum[y * w + x];
            let mut data = Vec::with_capacity(w * h * 5);
            for y in 0..h {
                for x in 0..w {
                    // edge-replicated central differences
                    let gx = (l((x + 1).min(w - 1), y) - l(x.saturating_sub(1), y)) / 2.0;
                    let gy = (l(x, (y + 1).min(h - 1)) - l(x, y.saturating_sub(1))) / 2.0;
                    data.extend_from_slice(&image.pixel(x, y));
                    data.push(gx);
                    data.push(gy);
                }
            }
            FeatureMap::new(w, h, 5, data)
        }
        FeatureExtractor::ConvStack(layers) => {
            let mut cur = FeatureMap::new(w, h, 3, image.data.clone())?;
            for layer in layers {
                cur = conv2d(&cur, layer)?;
            }
            Ok(cur)
        }
    }
}

fn conv2d(input: &FeatureMap, layer: &WeightLayer) -> Result<FeatureMap> {
    let (w, h) = (input.width, input.height);
    let (cout, cin) = (layer.out_channels(), layer.in_channels());
    if cin != input.channels {
        return Err(shape_err(format!(
            "conv layer expects {cin} channels, got {}",
            input.channels
        )));
    }
    let mut out = vec![0.0; w * h * cout];
    for y in 0..h {
        for x in 0..w {
            let o_px = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            for (o, ov) in o_px.iter_mut().enumerate() {
                let mut acc = layer.bias[o];
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = x as isize + kx as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let src = input.at(xx as usize, yy as usize);
                        for (i, s) in src.iter().enumerate() {
                            acc += layer.weights[((o * cin + i) * 3 + ky) * 3 + kx] * s;
                        }
                    }
                }
                *ov = layer.activation.apply(acc);
            }
        }
    }
    FeatureMap::new(w, h, cout, out)
}

#[derive(Debug, Clone)]
pub struct ViewSet {
    pub images: Vec<Image>,
    pub views: Vec<PosedView>,
}

pub fn view_file_name(index: usize) -> String {
    format!("view_{index:03}.png")
}

pub const CAMERAS_FILE: &str = "cameras.json";

/// Loads `view_NNN.png` files and `cameras.json` from `dir`, index-aligned.
pub fn load_view_set(dir: &Path) -> Result<ViewSet> {
    let cam_path = dir.join(CAMERAS_FILE);
    let records = camera::read_cameras(&cam_path)?;
    let mut pngs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::from(e).at(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("view_") && n.ends_with(".png"))
        .collect();
    pngs.sort();
    if pngs.len() != records.len() {
        return Err(config_err(format!(
            "{} view images but {} camera entries in {}",
            pngs.len(),
            records.len(),
            cam_path.display()
        )));
    }
    if pngs.len() < 2 {
        return Err(config_err(format!("need at least 2 views, found {}", pngs.len())));
    }
    let mut images = Vec::with_capacity(pngs.len());
    for (i, name) in pngs.iter().enumerate() {
        if *name != view_file_name(i) {
            return Err(config_err(format!("expected {}, found {name}", view_file_name(i))));
        }
        images.push(Image::load_png(&dir.join(name))?);
    }
    let views = records
        .iter()
        .map(CameraRecord::to_view)
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at(&cam_path))?;
    for (i, (img, v)) in images.iter().zip(&views).enumerate() {
        let k = v.camera.intrinsics;
        if img.width != k.width as usize || img.height != k.height as usize {
            return Err(shape_err(format!(
                "{}: image is {}x{} but camera says {}x{}",
                view_file_name(i),
                img.width,
                img.height,
                k.width,
                k.height
            )));
        }
    }
    Ok(ViewSet { images, views })
}

pub fn write_view_set(dir: &Path, set: &ViewSet) -> Result<()> {
    if set.images.len() != set.views.len() {
        return Err(shape_err("images and cameras are not index-aligned"));
    }
    for (i, img) in set.images.iter().enumerate() {
        img.save_png(&dir.join(view_file_name(i)))?;
    }
    let records: Vec<_> = set.views.iter().map(CameraRecord::from_view).collect();
    camera::write_cameras(&dir.join(CAMERAS_FILE), &records)
}
