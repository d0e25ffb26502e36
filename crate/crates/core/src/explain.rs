//! Grad-CAM heatmaps and overlay rendering.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{PairedSample, Pairing};
use crate::detector::{DetectorModel, Mode, Network, Real, Zone};
use crate::error::{Error, Result};
use crate::roi::resize_bilinear;

pub const OVERLAY_ALPHA: f32 = 0.4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub patient_id: String,
    pub slice_index: usize,
    pub pairing: Pairing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamHeatmap {
    /// Min-max normalised map at input resolution.
    pub values: Array2<f32>,
    /// Upsampled map before normalisation.
    pub raw: Array2<f32>,
    pub source_layer: String,
    pub sample_ref: SampleRef,
    pub prediction: f64,
}

/// Channel weights (spatial mean of d logit / d A_k) and the activation
/// `A` of the last conv block (post-ReLU, pre-pool) for a single input.
pub fn channel_weights<T: Real>(net: &Network<T>, x: &Array4<T>) -> Result<(Vec<f64>, Array3<T>, f64)> {
    if net.descriptor().conv_blocks.is_empty() {
        return Err(Error::NoConvLayer);
    }
    let cache = net.forward(x, Mode::Eval)?;
    let grad = net.last_activation_grad(&cache, Array1::ones(x.dim().0).view());
    let act = cache.last_activation().index_axis(Axis(0), 0).to_owned();
    let g = grad.index_axis(Axis(0), 0);
    let weights = g
        .outer_iter()
        .map(|plane| plane.iter().map(|v| v.f64()).sum::<f64>() / plane.len() as f64)
        .collect();
    Ok((weights, act, cache.logits[0].f64()))
}

/// `ReLU(sum_k w_k A_k)` at activation resolution.
pub fn cam_map<T: Real>(weights: &[f64], act: &Array3<T>) -> Array2<f32> {
    let (_, h, w) = act.dim();
    let mut m = Array2::<f64>::zeros((h, w));
    for (wk, a) in weights.iter().zip(act.outer_iter()) {
        m.zip_mut_with(&a, |acc, &v| *acc += wk * v.f64());
    }
    m.mapv(|v| v.max(0.0) as f32)
}

fn minmax(raw: &Array2<f32>) -> Array2<f32> {
    let max = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let min = raw.iter().copied().fold(f32::INFINITY, f32::min);
    if !(max > 0.0) {
        return Array2::zeros(raw.raw_dim());
    }
    if max - min <= 0.0 {
        return Array2::ones(raw.raw_dim());
    }
    raw.mapv(|v| ((v - min) / (max - min)).clamp(0.0, 1.0))
}

pub fn grad_cam(model: &DetectorModel, sample: &PairedSample) -> Result<CamHeatmap> {
    let shape = model.descriptor().input_shape;
    if sample.channels.dim() != shape {
        return Err(Error::ShapeMismatch(format!(
            "sample {:?} vs model input {:?}",
            sample.channels.dim(),
            shape
        )));
    }
    let x = sample.channels.clone().insert_axis(Axis(0));
    let (weights, act, logit) = channel_weights(&model.network, &x)?;
    let raw = resize_bilinear(cam_map(&weights, &act).view(), (shape.1, shape.2));
    Ok(CamHeatmap {
        values: minmax(&raw),
        raw,
        source_layer: format!("conv_block_{}", model.descriptor().conv_blocks.len() - 1),
        sample_ref: SampleRef {
            patient_id: sample.patient_id.clone(),
            slice_index: sample.slice_index,
            pairing: sample.pairing,
        },
        prediction: 1.0 / (1.0 + (-logit).exp()),
    })
}

const VIRIDIS: [[f32; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

pub fn viridis(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f32;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f32;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), a[2] + f * (b[2] - a[2])]
}

fn grayscale(bg: &Array2<f32>) -> Array2<u8> {
    let max = bg.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let min = bg.iter().copied().fold(f32::INFINITY, f32::min);
    let span = if max > min { max - min } else { 1.0 };
    bg.mapv(|v| (((v - min) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Grayscale background with the heatmap blended in at per-pixel opacity
/// `0.4 * h`; each pixel is repeated `scale` times in both directions.
pub fn overlay_scaled(heatmap: &Array2<f32>, background: &Array2<f32>, scale: u32) -> Result<RgbImage> {
    if heatmap.dim() != background.dim() {
        return Err(Error::ShapeMismatch(format!(
            "heatmap {:?} vs background {:?}",
            heatmap.dim(),
            background.dim()
        )));
    }
    let scale = scale.max(1);
    let gray = grayscale(background);
    let (h, w) = gray.dim();
    Ok(RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let (r, c) = ((y / scale) as usize, (x / scale) as usize);
        let g = gray[[r, c]];
        let a = OVERLAY_ALPHA * heatmap[[r, c]].clamp(0.0, 1.0);
        if a == 0.0 {
            return Rgb([g, g, g]);
        }
        let col = viridis(heatmap[[r, c]]);
        let mix = |k: usize| ((1.0 - a) * g as f32 + a * col[k]).round().clamp(0.0, 255.0) as u8;
        Rgb([mix(0), mix(1), mix(2)])
    }))
}

pub fn overlay(heatmap: &CamHeatmap, background: &Array2<f32>) -> Result<RgbImage> {
    overlay_scaled(&heatmap.values, background, 1)
}

pub fn cam_file_name(patient_id: &str, slice_index: usize, zone: Zone) -> String {
    format!("{patient_id}_{slice_index}_{zone}_cam.png")
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::unwritable(path, e))
}

/// Renders and writes the overlay for `cam` on the T2 channel of `sample`.
pub fn write_cam_png(cam: &CamHeatmap, sample: &PairedSample, zone: Zone, dir: &Path, scale: u32) -> Result<PathBuf> {
    let bg = sample.channels.index_axis(Axis(0), 0).to_owned();
    let img = overlay_scaled(&cam.values, &bg, scale)?;
    let path = dir.join(cam_file_name(&sample.patient_id, sample.slice_index, zone));
    save_png(&img, &path)?;
    Ok(path)
}

/// Share of the raw map's mass that falls inside `mask`.
pub fn mass_inside(raw: &Array2<f32>, mask: &Array2<f32>) -> Option<f64> {
    let total: f64 = raw.iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return None;
    }
    let inside: f64 = raw.iter().zip(mask.iter()).filter(|(_, &m)| m > 0.5).map(|(&v, _)| v as f64).sum();
    Some(inside / total)
}
