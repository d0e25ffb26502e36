//! Sequence-wide rectangular crops of PZ / CG / whole gland, and fixed-size
//! per-slice patches.
//!
//! In-plane coordinates follow the slice array: `x` is the row axis and `y`
//! the column axis.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{gaussian_blur, zscore_normalize, Normalize};
use crate::volume::{ImageVolume, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "PZ")]
    Pz,
    #[serde(rename = "CG")]
    Cg,
    #[serde(rename = "GLAND")]
    Gland,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Pz => "PZ",
            Region::Cg => "CG",
            Region::Gland => "GLAND",
        }
    }

    pub fn mask_modality(self) -> Modality {
        match self {
            Region::Pz => Modality::MaskPz,
            Region::Cg => Modality::MaskCg,
            Region::Gland => Modality::MaskGland,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PZ" => Ok(Region::Pz),
            "CG" => Ok(Region::Cg),
            "GLAND" => Ok(Region::Gland),
            other => Err(Error::InvalidConfig(format!("unknown region {other:?}"))),
        }
    }
}

/// Inclusive voxel bounds on the in-plane axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropRect {
    pub x_min: usize,
    pub x_max: usize,
    pub y_min: usize,
    pub y_max: usize,
    pub margin_px: usize,
}

impl CropRect {
    pub fn height(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn width(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    fn check_fits(&self, rows: usize, cols: usize) -> Result<()> {
        if self.x_min > self.x_max || self.y_min > self.y_max || self.x_max >= rows || self.y_max >= cols {
            return Err(Error::GridMismatch(format!(
                "rect {self:?} does not fit a {rows}x{cols} slice"
            )));
        }
        Ok(())
    }
}

/// Foreground pixels attaining the extreme row/column, as `(row, col)`.
/// Ties go to the first pixel in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtremePoints {
    pub left: (usize, usize),
    pub right: (usize, usize),
    pub top: (usize, usize),
    pub bottom: (usize, usize),
}

pub fn extreme_points(mask: ArrayView2<'_, f32>) -> Result<ExtremePoints> {
    let mut found: Option<ExtremePoints> = None;
    for ((r, c), &v) in mask.indexed_iter() {
        if v <= 0.5 {
            continue;
        }
        let p = (r, c);
        match found.as_mut() {
            None => {
                found = Some(ExtremePoints {
                    left: p,
                    right: p,
                    top: p,
                    bottom: p,
                })
            }
            Some(e) => {
                if c < e.left.1 {
                    e.left = p;
                }
                if c > e.right.1 {
                    e.right = p;
                }
                if r > e.bottom.0 {
                    e.bottom = p;
                }
            }
        }
    }
    found.ok_or_else(|| Error::EmptyMask("slice has no foreground".into()))
}

/// Union of the per-slice extreme-point boxes, dilated by `margin_px` and
/// clamped to the slice bounds. Slices without foreground are skipped.
pub fn sequence_bbox(masks: &[ArrayView2<'_, f32>], margin_px: usize) -> Result<CropRect> {
    let Some(first) = masks.first() else {
        return Err(Error::EmptyMask("empty mask sequence".into()));
    };
    let (rows, cols) = first.dim();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for m in masks {
        if m.dim() != (rows, cols) {
            return Err(Error::GridMismatch(format!(
                "mask slices differ in shape: {:?} vs {:?}",
                m.dim(),
                (rows, cols)
            )));
        }
        let e = match extreme_points(m.view()) {
            Ok(e) => e,
            Err(Error::EmptyMask(_)) => continue,
            Err(other) => return Err(other),
        };
        let b = (e.top.0, e.bottom.0, e.left.1, e.right.1);
        bounds = Some(match bounds {
            None => b,
            Some(a) => (a.0.min(b.0), a.1.max(b.1), a.2.min(b.2), a.3.max(b.3)),
        });
    }
    let (x0, x1, y0, y1) =
        bounds.ok_or_else(|| Error::EmptyMask("no slice in the sequence has foreground".into()))?;
    Ok(CropRect {
        x_min: x0.saturating_sub(margin_px),
        x_max: (x1 + margin_px).min(rows - 1),
        y_min: y0.saturating_sub(margin_px),
        y_max: (y1 + margin_px).min(cols - 1),
        margin_px,
    })
}

/// Indices of the slices of `mask` that contain foreground.
pub fn foreground_slices(mask: &ImageVolume) -> Vec<usize> {
    (0..mask.num_slices())
        .filter(|&k| mask.slice(k).iter().any(|&v| v > 0.5))
        .collect()
}

/// Sequence-wide crop rectangle for a region mask volume.
pub fn volume_bbox(mask: &ImageVolume, margin_px: usize) -> Result<CropRect> {
    let views: Vec<_> = (0..mask.num_slices()).map(|k| mask.slice(k)).collect();
    sequence_bbox(&views, margin_px)
}

/// Ordered per-slice patches of one modality for one patient and region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSequence {
    patches: Vec<Array2<f32>>,
    slice_indices: Vec<usize>,
    region: Region,
    modality: Modality,
    patient_id: String,
    crop_rect: CropRect,
}

impl PatchSequence {
    pub fn new(
        patches: Vec<Array2<f32>>,
        slice_indices: Vec<usize>,
        region: Region,
        modality: Modality,
        patient_id: impl Into<String>,
        crop_rect: CropRect,
    ) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::EmptySequence);
        }
        if patches.len() != slice_indices.len() {
            return Err(Error::SequenceMisaligned(format!(
                "{} patches but {} slice indices",
                patches.len(),
                slice_indices.len()
            )));
        }
        let dim = patches[0].dim();
        if patches.iter().any(|p| p.dim() != dim) {
            return Err(Error::ShapeMismatch("patches differ in size".into()));
        }
        if slice_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::SequenceMisaligned(
                "slice indices must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            patches,
            slice_indices,
            region,
            modality,
            patient_id: patient_id.into(),
            crop_rect,
        })
    }

    pub fn patches(&self) -> &[Array2<f32>] {
        &self.patches
    }

    pub fn slice_indices(&self) -> &[usize] {
        &self.slice_indices
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn crop_rect(&self) -> CropRect {
        self.crop_rect
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_shape(&self) -> (usize, usize) {
        self.patches[0].dim()
    }

    /// Keeps the entries at `positions` (which must be increasing).
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        Self::new(
            positions.iter().map(|&p| self.patches[p].clone()).collect(),
            positions.iter().map(|&p| self.slice_indices[p]).collect(),
            self.region,
            self.modality,
            self.patient_id.clone(),
            self.crop_rect,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchOptions {
    pub out_size: (usize, usize),
    pub margin_px: usize,
    pub blur_sigma_px: f64,
    pub normalize: Normalize,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self {
            out_size: (64, 64),
            margin_px: 5,
            blur_sigma_px: 1.0,
            normalize: Normalize::Zscore,
        }
    }
}

/// Crops every listed slice of each volume to `rect`, then blurs,
/// normalises, pads symmetrically with zeros to the output aspect ratio and
/// resizes bilinearly to `opts.out_size`.
pub fn crop_and_resize(
    vols: &[&ImageVolume],
    rect: CropRect,
    slices: &[usize],
    region: Region,
    opts: &PatchOptions,
) -> Result<Vec<PatchSequence>> {
    let Some(first) = vols.first() else {
        return Ok(Vec::new());
    };
    for v in vols {
        if !v.same_grid(first, 1e-6) || v.slice_axis() != first.slice_axis() {
            return Err(Error::GridMismatch(format!(
                "{} and {} volumes do not share a grid",
                v.modality(),
                first.modality()
            )));
        }
    }
    let (rows, cols) = first.slice_shape();
    rect.check_fits(rows, cols)?;
    if let Some(&bad) = slices.iter().find(|&&k| k >= first.num_slices()) {
        return Err(Error::GridMismatch(format!("slice {bad} out of range")));
    }
    vols.iter()
        .map(|v| {
            let patches = slices
                .iter()
                .map(|&k| process_slice(v.slice(k), rect, opts))
                .collect::<Result<Vec<_>>>()?;
            PatchSequence::new(
                patches,
                slices.to_vec(),
                region,
                v.modality(),
                v.patient_id(),
                rect,
            )
        })
        .collect()
}

fn process_slice(slice: ArrayView2<'_, f32>, rect: CropRect, opts: &PatchOptions) -> Result<Array2<f32>> {
    let crop = slice.slice(s![rect.x_min..=rect.x_max, rect.y_min..=rect.y_max]);
    let blurred = gaussian_blur(crop, opts.blur_sigma_px);
    let normalized = match opts.normalize {
        Normalize::Zscore => zscore_normalize(&blurred, None)?,
        Normalize::None => blurred,
    };
    Ok(pad_and_resize(normalized.view(), opts.out_size))
}

/// Crop of a binary mask through the same pad/resize geometry (no blur or
/// normalisation), thresholded back to {0, 1}.
pub fn crop_mask(
    mask: &ImageVolume,
    rect: CropRect,
    slices: &[usize],
    out_size: (usize, usize),
) -> Result<Vec<Array2<f32>>> {
    let (rows, cols) = mask.slice_shape();
    rect.check_fits(rows, cols)?;
    slices
        .iter()
        .map(|&k| {
            if k >= mask.num_slices() {
                return Err(Error::GridMismatch(format!("slice {k} out of range")));
            }
            let crop = mask.slice(k).slice(s![rect.x_min..=rect.x_max, rect.y_min..=rect.y_max]).to_owned();
            Ok(pad_and_resize(crop.view(), out_size).mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
        })
        .collect()
}

/// Symmetric zero padding to the aspect ratio of `out` (extra row/column on
/// the bottom/right when the difference is odd).
pub fn pad_to_aspect(img: ArrayView2<'_, f32>, out: (usize, usize)) -> Array2<f32> {
    let (h, w) = img.dim();
    let (oh, ow) = out;
    let (ph, pw) = if h * ow >= w * oh {
        (h, ((h * ow) as f64 / oh as f64).round() as usize)
    } else {
        (((w * oh) as f64 / ow as f64).round() as usize, w)
    };
    let (ph, pw) = (ph.max(h), pw.max(w));
    let top = (ph - h) / 2;
    let left = (pw - w) / 2;
    let mut padded = Array2::zeros((ph, pw));
    padded.slice_mut(s![top..top + h, left..left + w]).assign(&img);
    padded
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: ArrayView2<'_, f32>, out: (usize, usize)) -> Array2<f32> {
    let (h, w) = img.dim();
    if (h, w) == out {
        return img.to_owned();
    }
    let (oh, ow) = out;
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = axis(h, oh);
    let cols = axis(w, ow);
    Array2::from_shape_fn(out, |(r, c)| {
        let (r0, r1, fr) = rows[r];
        let (c0, c1, fc) = cols[c];
        let top = img[[r0, c0]] as f64 * (1.0 - fc) + img[[r0, c1]] as f64 * fc;
        let bottom = img[[r1, c0]] as f64 * (1.0 - fc) + img[[r1, c1]] as f64 * fc;
        (top * (1.0 - fr) + bottom * fr) as f32
    })
}

pub fn pad_and_resize(img: ArrayView2<'_, f32>, out: (usize, usize)) -> Array2<f32> {
    let padded = pad_to_aspect(img, out);
    resize_bilinear(padded.view(), out)
}
