use ndarray::{Array, Array1, Array2, ArrayView2, Axis, Dimension, Zip};

use crate::error::{Error, Result};

/// Normalised 1D Gaussian taps, truncated at 4 sigma.
pub fn gaussian_kernel(sigma: f64) -> Array1<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as i64;
    let mut k = Array1::from_shape_fn((2 * radius + 1) as usize, |i| {
        let x = i as f64 - radius as f64;
        (-0.5 * x * x / (sigma * sigma)).exp()
    });
    let sum = k.sum();
    k /= sum;
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
#[inline]
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

fn convolve_axis(src: &Array2<f64>, kernel: &Array1<f64>, axis: usize) -> Array2<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut out = Array2::zeros(src.raw_dim());
    let n = src.len_of(Axis(axis));
    for (mut o, line) in out
        .lanes_mut(Axis(axis))
        .into_iter()
        .zip(src.lanes(Axis(axis)))
    {
        for i in 0..n {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                acc += w * line[reflect(i as i64 + t as i64 - radius, n)];
            }
            o[i] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with reflect boundary. `sigma_px == 0` returns an
/// exact copy.
pub fn gaussian_blur(image: ArrayView2<'_, f32>, sigma_px: f64) -> Array2<f32> {
    assert!(sigma_px >= 0.0, "sigma must be non-negative");
    if sigma_px == 0.0 {
        return image.to_owned();
    }
    let kernel = gaussian_kernel(sigma_px);
    let src = image.mapv(f64::from);
    let rows = convolve_axis(&src, &kernel, 0);
    convolve_axis(&rows, &kernel, 1).mapv(|v| v as f32)
}

/// Standardises to zero mean and unit (population) standard deviation over
/// the masked region. Values outside the mask are transformed with the same
/// affine map.
pub fn zscore_normalize<D: Dimension>(
    patch: &Array<f32, D>,
    mask: Option<&Array<bool, D>>,
) -> Result<Array<f32, D>> {
    let (mut n, mut sum) = (0usize, 0.0f64);
    let visit = |f: &mut dyn FnMut(f64)| match mask {
        Some(m) => Zip::from(patch).and(m).for_each(|&v, &keep| {
            if keep {
                f(v as f64)
            }
        }),
        None => patch.iter().for_each(|&v| f(v as f64)),
    };
    visit(&mut |v| {
        n += 1;
        sum += v;
    });
    if n < 2 {
        return Err(Error::DegenerateIntensity(format!(
            "need more than one voxel, got {n}"
        )));
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    visit(&mut |v| ss += (v - mean) * (v - mean));
    let std = (ss / n as f64).sqrt();
    if !(std > 1e-12 * mean.abs().max(1e-12)) || !std.is_finite() {
        return Err(Error::DegenerateIntensity("zero variance".into()));
    }
    Ok(patch.mapv(|v| ((v as f64 - mean) / std) as f32))
}
