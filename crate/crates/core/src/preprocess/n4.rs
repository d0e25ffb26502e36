//! Single-level N4 bias-field correction.
//!
//! Each iteration sharpens the histogram of the current log-corrected image by
//! Wiener deconvolution of a Gaussian, takes the residual between the
//! log-corrected intensities and their sharpened conditional expectation, fits
//! that residual with a tensor-product cubic B-spline (least squares over the
//! mask) and accumulates it into the log-bias estimate.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array3, Axis, Zip};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::PreprocessConfig;
use crate::error::{Error, Result};
use crate::volume::ImageVolume;

/// Histogram sharpening settings; fixed, not part of the search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SharpenConfig {
    pub bins: usize,
    pub wiener_noise: f64,
    pub fwhm: f64,
}

impl Default for SharpenConfig {
    fn default() -> Self {
        Self {
            bins: 200,
            wiener_noise: 0.01,
            fwhm: 0.15,
        }
    }
}

/// Multiplicative gain estimated by [`n4_bias_correct`].
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    pub field: Array3<f32>,
    pub control_spacing: f64,
    pub iterations_run: usize,
}

impl BiasField {
    pub fn mean_log(&self) -> f64 {
        self.field.iter().map(|&g| (g as f64).ln()).sum::<f64>() / self.field.len() as f64
    }

    /// Largest |second finite difference| of log(field) along any axis.
    pub fn max_log_curvature(&self) -> f64 {
        let log = self.field.mapv(|g| (g as f64).ln());
        let mut worst = 0.0f64;
        for axis in 0..3 {
            for lane in log.lanes(Axis(axis)) {
                for w in lane.to_vec().windows(3) {
                    worst = worst.max((w[0] - 2.0 * w[1] + w[2]).abs());
                }
            }
        }
        worst
    }
}

/// Cubic B-spline basis along one axis: for each voxel, the first control
/// index it touches and the four weights.
struct AxisBasis {
    n_ctrl: usize,
    start: Vec<usize>,
    weights: Vec<[f64; 4]>,
}

impl AxisBasis {
    fn new(n: usize, spacing: f64, control_spacing: f64) -> Self {
        let extent = (n.saturating_sub(1)) as f64 * spacing;
        let spans = ((extent / control_spacing).ceil() as usize).max(1);
        let mut start = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let t = if extent > 0.0 {
                i as f64 * spacing / extent * spans as f64
            } else {
                0.0
            };
            let j = (t.floor() as usize).min(spans - 1);
            let u = t - j as f64;
            start.push(j);
            weights.push(cubic_weights(u));
        }
        Self {
            n_ctrl: spans + 3,
            start,
            weights,
        }
    }
}

fn cubic_weights(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        (1.0 - u).powi(3) / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Tensor-product B-spline on a voxel grid.
struct SplineGrid {
    axes: [AxisBasis; 3],
}

impl SplineGrid {
    fn ctrl_shape(&self) -> [usize; 3] {
        [self.axes[0].n_ctrl, self.axes[1].n_ctrl, self.axes[2].n_ctrl]
    }

    fn n_ctrl(&self) -> usize {
        self.ctrl_shape().iter().product()
    }

    /// Control lattice -> voxel values.
    fn evaluate(&self, coeffs: &Array3<f64>) -> Array3<f64> {
        let mut cur = coeffs.clone();
        for (a, basis) in self.axes.iter().enumerate() {
            let mut shape = [cur.shape()[0], cur.shape()[1], cur.shape()[2]];
            shape[a] = basis.start.len();
            let mut out = Array3::zeros(shape);
            for (src, mut dst) in cur.lanes(Axis(a)).into_iter().zip(out.lanes_mut(Axis(a))) {
                for (i, (s, w)) in basis.start.iter().zip(&basis.weights).enumerate() {
                    dst[i] = (0..4).map(|q| w[q] * src[s + q]).sum();
                }
            }
            cur = out;
        }
        cur
    }

    /// Adjoint of [`Self::evaluate`]: voxel values -> control lattice.
    fn adjoint(&self, values: &Array3<f64>) -> Array3<f64> {
        let mut cur = values.clone();
        for (a, basis) in self.axes.iter().enumerate() {
            let mut shape = [cur.shape()[0], cur.shape()[1], cur.shape()[2]];
            shape[a] = basis.n_ctrl;
            let mut out = Array3::zeros(shape);
            for (src, mut dst) in cur.lanes(Axis(a)).into_iter().zip(out.lanes_mut(Axis(a))) {
                for (i, (s, w)) in basis.start.iter().zip(&basis.weights).enumerate() {
                    let v = src[i];
                    if v != 0.0 {
                        for q in 0..4 {
                            dst[s + q] += w[q] * v;
                        }
                    }
                }
            }
            cur = out;
        }
        cur
    }

    /// Cholesky factor of the masked normal matrix `Phi^T M Phi + ridge I`.
    fn normal_factor(&self, mask: &Array3<bool>) -> nalgebra::Cholesky<f64, nalgebra::Dyn> {
        let [c0, c1, c2] = self.ctrl_shape();
        let p = c0 * c1 * c2;
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut idx = [0usize; 64];
        let mut wts = [0.0f64; 64];
        for ((i, j, k), &inside) in mask.indexed_iter() {
            if !inside {
                continue;
            }
            let (s0, w0) = (self.axes[0].start[i], &self.axes[0].weights[i]);
            let (s1, w1) = (self.axes[1].start[j], &self.axes[1].weights[j]);
            let (s2, w2) = (self.axes[2].start[k], &self.axes[2].weights[k]);
            let mut n = 0;
            for a in 0..4 {
                for b in 0..4 {
                    for c in 0..4 {
                        idx[n] = ((s0 + a) * c1 + (s1 + b)) * c2 + (s2 + c);
                        wts[n] = w0[a] * w1[b] * w2[c];
                        n += 1;
                    }
                }
            }
            for x in 0..64 {
                let wx = wts[x];
                for y in x..64 {
                    gram[(idx[x], idx[y])] += wx * wts[y];
                }
            }
        }
        // Only the upper triangle was accumulated.
        for r in 0..p {
            for c in 0..r {
                gram[(r, c)] = gram[(c, r)];
            }
        }
        let mean_diag = (0..p).map(|d| gram[(d, d)]).sum::<f64>() / p as f64;
        let ridge = 1e-6 * mean_diag.max(1e-12);
        for d in 0..p {
            gram[(d, d)] += ridge;
        }
        gram.cholesky().expect("ridge-regularised Gram matrix is positive definite")
    }
}

struct Sharpener {
    cfg: SharpenConfig,
    planner: FftPlanner<f64>,
}

impl Sharpener {
    /// Maps each log intensity to its sharpened expectation.
    fn sharpen(&mut self, values: &[f64]) -> Vec<f64> {
        let bins = self.cfg.bins.max(2);
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let slope = (hi - lo) / (bins - 1) as f64;
        if !(slope > 1e-12) {
            return values.to_vec();
        }
        let mut hist = vec![0.0f64; bins];
        for &v in values {
            let c = (v - lo) / slope;
            let i = c.floor() as usize;
            let off = c - i as f64;
            if i >= bins - 1 {
                hist[bins - 1] += 1.0;
            } else {
                hist[i] += 1.0 - off;
                hist[i + 1] += off;
            }
        }
        let exponent = (bins as f64).log2().ceil() as u32 + 1;
        let padded = 1usize << exponent;
        let offset = (0.5 * (padded - bins) as f64).floor() as usize;
        let fft = self.planner.plan_fft_forward(padded);
        let ifft = self.planner.plan_fft_inverse(padded);
        let forward = |buf: &mut Vec<Complex64>| fft.process(buf);
        let inverse = |buf: &mut Vec<Complex64>| {
            ifft.process(buf);
            let scale = 1.0 / padded as f64;
            buf.iter_mut().for_each(|z| *z *= scale);
        };

        let mut v = vec![Complex64::new(0.0, 0.0); padded];
        for (n, &h) in hist.iter().enumerate() {
            v[n + offset] = Complex64::new(h, 0.0);
        }
        forward(&mut v);

        let scaled_fwhm = self.cfg.fwhm / slope;
        let exp_factor = 4.0 * std::f64::consts::LN_2 / (scaled_fwhm * scaled_fwhm);
        let scale_factor = 2.0 * (std::f64::consts::LN_2 / std::f64::consts::PI).sqrt() / scaled_fwhm;
        let mut f = vec![Complex64::new(0.0, 0.0); padded];
        f[0] = Complex64::new(scale_factor, 0.0);
        for n in 1..=padded / 2 {
            let g = scale_factor * (-((n * n) as f64) * exp_factor).exp();
            f[n] = Complex64::new(g, 0.0);
            f[padded - n] = Complex64::new(g, 0.0);
        }
        forward(&mut f);

        let mut u: Vec<Complex64> = v
            .iter()
            .zip(&f)
            .map(|(vf, ff)| vf * ff.conj() / (ff.conj() * ff + self.cfg.wiener_noise))
            .collect();
        inverse(&mut u);
        let u: Vec<f64> = u.iter().map(|z| z.re.max(0.0)).collect();

        let mut num: Vec<Complex64> = u
            .iter()
            .enumerate()
            .map(|(n, &un)| Complex64::new((lo + (n as f64 - offset as f64) * slope) * un, 0.0))
            .collect();
        let mut den: Vec<Complex64> = u.iter().map(|&un| Complex64::new(un, 0.0)).collect();
        forward(&mut num);
        forward(&mut den);
        for ((a, b), ff) in num.iter_mut().zip(den.iter_mut()).zip(&f) {
            *a *= ff;
            *b *= ff;
        }
        inverse(&mut num);
        inverse(&mut den);
        let expect: Vec<f64> = (0..bins)
            .map(|n| {
                let d = den[n + offset].re;
                if d != 0.0 {
                    num[n + offset].re / d
                } else {
                    0.0
                }
            })
            .collect();

        values
            .iter()
            .map(|&val| {
                let c = (val - lo) / slope;
                let i = c.floor() as usize;
                if i < bins - 1 {
                    expect[i] + (expect[i + 1] - expect[i]) * (c - i as f64)
                } else {
                    expect[bins - 1]
                }
            })
            .collect()
    }
}

/// N4 correction of `vol`, optionally restricted to `mask`. Voxels with zero
/// intensity are excluded from the fit. Outside the mask the corrected volume
/// equals the input.
pub fn n4_bias_correct(
    vol: &ImageVolume,
    cfg: &PreprocessConfig,
    mask: Option<&ImageVolume>,
) -> Result<(ImageVolume, BiasField)> {
    cfg.validate()?;
    let data = vol.data();
    let negative = data.iter().filter(|&&v| v < 0.0).count();
    if negative > 0 {
        return Err(Error::NegativeIntensity(negative));
    }
    let region: Array3<bool> = match mask {
        Some(m) => {
            if m.shape() != vol.shape() {
                return Err(Error::GridMismatch(format!(
                    "mask {:?} vs volume {:?}",
                    m.shape(),
                    vol.shape()
                )));
            }
            m.data().mapv(|v| v > 0.5)
        }
        None => Array3::from_elem(data.raw_dim(), true),
    };
    let fit_mask = Zip::from(&region)
        .and(data)
        .map_collect(|&r, &v| r && v > 0.0);
    let n_fit = fit_mask.iter().filter(|&&b| b).count();
    if n_fit == 0 {
        return Err(Error::EmptyMask("no positive voxels inside the N4 mask".into()));
    }

    let spacing = vol.spacing();
    let shape = vol.shape();
    let spline = SplineGrid {
        axes: [0, 1, 2].map(|a| AxisBasis::new(shape[a], spacing[a], cfg.n4_control_spacing_mm)),
    };
    let factor = spline.normal_factor(&fit_mask);

    let log_input = data.mapv(|v| if v > 0.0 { (v as f64).ln() } else { 0.0 });
    let mut coeffs = Array3::<f64>::zeros(spline.ctrl_shape());
    let mut log_bias = Array3::<f64>::zeros(data.raw_dim());
    let mut sharpener = Sharpener {
        cfg: cfg.sharpen,
        planner: FftPlanner::new(),
    };
    let mut iterations = 0;
    while iterations < cfg.n4_iterations {
        iterations += 1;
        let corrected: Vec<f64> = Zip::from(&log_input)
            .and(&log_bias)
            .and(&fit_mask)
            .fold(Vec::with_capacity(n_fit), |mut acc, &u, &b, &m| {
                if m {
                    acc.push(u - b);
                }
                acc
            });
        let sharpened = sharpener.sharpen(&corrected);
        let mut residual = Array3::<f64>::zeros(data.raw_dim());
        let mut it = corrected.iter().zip(&sharpened);
        Zip::from(&mut residual).and(&fit_mask).for_each(|r, &m| {
            if m {
                let (c, s) = it.next().expect("one sharpened value per masked voxel");
                *r = c - s;
            }
        });
        let rhs = spline.adjoint(&residual);
        let delta = factor.solve(&DVector::from_iterator(
            spline.n_ctrl(),
            rhs.iter().copied(),
        ));
        let delta = Array3::from_shape_vec(spline.ctrl_shape(), delta.iter().copied().collect())
            .expect("control lattice shape");
        coeffs += &delta;
        let increment = spline.evaluate(&delta);
        log_bias += &increment;

        // Coefficient of variation of exp(new - old) over the fit region.
        let (mut s, mut ss) = (0.0, 0.0);
        Zip::from(&increment).and(&fit_mask).for_each(|&d, &m| {
            if m {
                let r = d.exp();
                s += r;
                ss += r * r;
            }
        });
        let mean = s / n_fit as f64;
        let var = (ss / n_fit as f64 - mean * mean).max(0.0);
        let cv = var.sqrt() / mean;
        if cv < cfg.n4_convergence_tol {
            break;
        }
    }

    let mut log_field = spline.evaluate(&coeffs);
    let mean = log_field.mean().unwrap_or(0.0);
    log_field -= mean;
    let field = log_field.mapv(|l| l.exp() as f32);
    let corrected = Zip::from(data)
        .and(&field)
        .and(&region)
        .map_collect(|&v, &g, &r| if r { v / g } else { v });
    let corrected = vol.with_data(corrected)?;
    Ok((
        corrected,
        BiasField {
            field,
            control_spacing: cfg.n4_control_spacing_mm,
            iterations_run: iterations,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;

    fn cfg() -> PreprocessConfig {
        PreprocessConfig::default()
    }

    #[test]
    fn spline_adjoint_matches_evaluate() {
        let spline = SplineGrid {
            axes: [AxisBasis::new(7, 1.0, 3.0), AxisBasis::new(5, 2.0, 4.0), AxisBasis::new(4, 1.5, 10.0)],
        };
        let c = Array3::from_shape_fn(spline.ctrl_shape(), |(a, b, c)| ((a * 7 + b * 3 + c) % 5) as f64 - 2.0);
        let v = Array3::from_shape_fn((7, 5, 4), |(a, b, c)| ((a + 2 * b + 3 * c) % 7) as f64 * 0.3);
        let lhs: f64 = (spline.evaluate(&c) * &v).sum();
        let rhs: f64 = (spline.adjoint(&v) * &c).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn basis_partition_of_unity() {
        let b = AxisBasis::new(50, 1.0, 13.0);
        for w in &b.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_volume_has_unit_field() {
        let v = ImageVolume::from_spacing(Array3::from_elem((12, 12, 6), 100.0), [1.0, 1.0, 2.0], Modality::T2, "p")
            .unwrap();
        let (corrected, bias) = n4_bias_correct(&v, &cfg(), None).unwrap();
        assert!(bias.field.iter().all(|&g| (g - 1.0).abs() < 1e-3));
        assert!(corrected.data().iter().all(|&x| (x - 100.0).abs() < 0.1));
    }

    #[test]
    fn rejects_negative_and_empty_mask() {
        let mut data = Array3::from_elem((4, 4, 4), 1.0f32);
        data[[0, 0, 0]] = -1.0;
        let v = ImageVolume::from_spacing(data, [1.0; 3], Modality::T2, "p").unwrap();
        assert!(matches!(n4_bias_correct(&v, &cfg(), None), Err(Error::NegativeIntensity(1))));

        let v = ImageVolume::from_spacing(Array3::from_elem((4, 4, 4), 1.0), [1.0; 3], Modality::T2, "p").unwrap();
        let m = ImageVolume::from_spacing(Array3::zeros((4, 4, 4)), [1.0; 3], Modality::MaskGland, "p").unwrap();
        assert!(matches!(n4_bias_correct(&v, &cfg(), Some(&m)), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn identity_outside_mask_and_reconstruction_inside() {
        let data = Array3::from_shape_fn((16, 16, 4), |(i, j, _)| {
            let base = if (i / 4 + j / 4) % 2 == 0 { 80.0 } else { 160.0 };
            base * (1.0 + 0.02 * i as f32)
        });
        let v = ImageVolume::from_spacing(data.clone(), [2.0, 2.0, 3.0], Modality::T2, "p").unwrap();
        let mask = Array3::from_shape_fn((16, 16, 4), |(i, _, _)| if i < 12 { 1.0 } else { 0.0 });
        let m = ImageVolume::from_spacing(mask.clone(), [2.0, 2.0, 3.0], Modality::MaskGland, "p").unwrap();
        let (corrected, bias) = n4_bias_correct(&v, &cfg(), Some(&m)).unwrap();
        assert!(bias.iterations_run >= 1 && bias.iterations_run <= cfg().n4_iterations);
        assert!(bias.field.iter().all(|&g| g > 0.0));
        assert!(bias.mean_log().abs() < 1e-3);
        for (((&c, &g), &x), &mk) in corrected.data().iter().zip(&bias.field).zip(&data).zip(&mask) {
            if mk > 0.5 {
                assert!(((c * g - x) / x).abs() < 1e-5);
            } else {
                assert_eq!(c, x);
            }
        }
    }
}
