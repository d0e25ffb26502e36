//! Grid resampling driven purely by header affines.

use nalgebra::{Matrix4, Vector4};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::ImageVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Trilinear,
    Nearest,
}

fn check_interp(vol: &ImageVolume, interp: Interp) -> Result<()> {
    if vol.modality().is_mask() && interp == Interp::Trilinear {
        return Err(Error::InterpMismatch(vol.modality().to_string()));
    }
    Ok(())
}

/// Resamples onto a grid with `target_spacing`, keeping the world position of
/// voxel (0,0,0) and the axis directions. Output dims are
/// `ceil(n_i * s_i / t_i)`; samples past the last input voxel centre take the
/// edge value.
pub fn resample_isotropic(
    vol: &ImageVolume,
    target_spacing: [f64; 3],
    interp: Interp,
) -> Result<ImageVolume> {
    check_interp(vol, interp)?;
    if target_spacing.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let shape = vol.shape();
    let spacing = vol.spacing();
    let mut out_shape = [0usize; 3];
    let mut ratio = [0.0; 3];
    for a in 0..3 {
        ratio[a] = target_spacing[a] / spacing[a];
        // Guard against 10.000000002 style round-up from float noise.
        let exact = shape[a] as f64 * spacing[a] / target_spacing[a];
        out_shape[a] = ((exact - 1e-9).ceil() as usize).max(1);
    }
    let mut affine = *vol.affine();
    for a in 0..3 {
        for r in 0..3 {
            affine[(r, a)] *= ratio[a];
        }
    }
    let src = vol.data();
    let data = Array3::from_shape_fn(out_shape, |(i, j, k)| {
        let p = [i as f64 * ratio[0], j as f64 * ratio[1], k as f64 * ratio[2]];
        match interp {
            Interp::Trilinear => trilinear_clamped(src, p),
            Interp::Nearest => nearest_clamped(src, p),
        }
    });
    ImageVolume::new(data, affine, vol.modality(), vol.patient_id())?
        .with_slice_axis(vol.slice_axis())
}

/// Samples `moving` at the world position of every `reference` voxel.
/// Positions outside the moving field of view yield 0.
pub fn resample_to_reference(
    moving: &ImageVolume,
    reference: &ImageVolume,
    interp: Interp,
) -> Result<ImageVolume> {
    check_interp(moving, interp)?;
    // reference voxel -> world -> moving voxel
    let map: Matrix4<f64> = moving.inverse_affine() * reference.affine();
    let src = moving.data();
    let data = Array3::from_shape_fn(reference.shape(), |(i, j, k)| {
        let v = map * Vector4::new(i as f64, j as f64, k as f64, 1.0);
        let p = [v[0], v[1], v[2]];
        if !inside(src.shape(), p) {
            return 0.0;
        }
        match interp {
            Interp::Trilinear => trilinear_clamped(src, p),
            Interp::Nearest => nearest_clamped(src, p),
        }
    });
    ImageVolume::new(data, *reference.affine(), moving.modality(), moving.patient_id())?
        .with_slice_axis(reference.slice_axis())
}

const FOV_EPS: f64 = 1e-6;

fn inside(shape: &[usize], p: [f64; 3]) -> bool {
    (0..3).all(|a| p[a] >= -FOV_EPS && p[a] <= (shape[a] - 1) as f64 + FOV_EPS)
}

pub(crate) fn trilinear_clamped(src: &Array3<f32>, p: [f64; 3]) -> f32 {
    let s = src.shape();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let max = (s[a] - 1) as f64;
        let x = p[a].clamp(0.0, max);
        let f = x.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(s[a] - 1);
        frac[a] = x - f;
    }
    let mut acc = 0.0f64;
    for (dz, wz) in [(false, 1.0 - frac[2]), (true, frac[2])] {
        if wz == 0.0 {
            continue;
        }
        let k = if dz { hi[2] } else { lo[2] };
        for (dy, wy) in [(false, 1.0 - frac[1]), (true, frac[1])] {
            if wy == 0.0 {
                continue;
            }
            let j = if dy { hi[1] } else { lo[1] };
            for (dx, wx) in [(false, 1.0 - frac[0]), (true, frac[0])] {
                if wx == 0.0 {
                    continue;
                }
                let i = if dx { hi[0] } else { lo[0] };
                acc += wx * wy * wz * src[[i, j, k]] as f64;
            }
        }
    }
    acc as f32
}

fn nearest_clamped(src: &Array3<f32>, p: [f64; 3]) -> f32 {
    let s = src.shape();
    let idx = |a: usize| (p[a].round().max(0.0) as usize).min(s[a] - 1);
    src[[idx(0), idx(1), idx(2)]]
}
