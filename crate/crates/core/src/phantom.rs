//! Synthetic T2/ADC cohorts with known anatomy, lesions and labels.
//!
//! The gland is an ellipsoid whose inner 60% (by normalised radius) is the
//! central gland and whose outer shell is the peripheral zone. Lesions are
//! hypointense in both T2 and ADC with contrast growing with the grade
//! group.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CohortManifest, CohortSource, ManifestEntry};
use crate::detector::Zone;
use crate::error::{Error, Result};
use crate::roi::Region;
use crate::volume::{save_volume, ImageVolume, Modality};

/// Tissue baselines (arbitrary units for T2, 1e-6 mm^2/s for ADC).
pub const T2_BACKGROUND: f32 = 250.0;
pub const T2_PZ: f32 = 600.0;
pub const T2_CG: f32 = 400.0;
pub const ADC_BACKGROUND: f32 = 1400.0;
pub const ADC_PZ: f32 = 1700.0;
pub const ADC_CG: f32 = 1300.0;
pub const CG_FRACTION: f64 = 0.6;
const PZ_CONTRAST: f64 = 1.6;
const CG_CONTRAST: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionExtent {
    /// Lesion spans the host region through the stack.
    Region,
    /// Lesion is confined to a single native slice.
    SingleSlice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub n_patients: usize,
    pub lesion_prevalence: f64,
    pub slice_count_range: (usize, usize),
    /// Noise standard deviation relative to each modality's PZ baseline.
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    pub seed: u64,
    pub spacing: [f64; 3],
    pub in_plane: usize,
    pub lesion_extent: LesionExtent,
    /// Half-width of the per-patient multiplicative baseline jitter.
    pub baseline_jitter: f64,
    /// Lesion intensity drop at GGG 2 (fraction of host intensity).
    pub lesion_contrast: f64,
    pub lesion_radius_mm: (f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_patients: 60,
            lesion_prevalence: 0.5,
            slice_count_range: (8, 24),
            noise_sigma: 0.06,
            bias_amplitude: 0.3,
            seed: 0,
            spacing: [0.5, 0.5, 3.6],
            in_plane: 96,
            lesion_extent: LesionExtent::Region,
            baseline_jitter: 0.12,
            lesion_contrast: 0.45,
            lesion_radius_mm: (4.5, 6.5),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.slice_count_range;
        let bad = |m: &str| Err(Error::InvalidConfig(format!("phantom: {m}")));
        if lo < 1 || hi < lo {
            return bad("slice_count_range must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.lesion_prevalence) {
            return bad("lesion_prevalence must lie in [0, 1]");
        }
        if !(self.bias_amplitude >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("bias_amplitude and noise_sigma must be >= 0");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) || self.in_plane < 16 {
            return bad("spacing must be > 0 and in_plane >= 16");
        }
        if !(0.0..1.0).contains(&self.baseline_jitter) || !(0.0..1.0).contains(&self.lesion_contrast) {
            return bad("baseline_jitter and lesion_contrast must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPatient {
    pub patient_id: String,
    pub t2: ImageVolume,
    pub adc: ImageVolume,
    pub pz_mask: ImageVolume,
    pub cg_mask: ImageVolume,
    pub lesion_mask: ImageVolume,
    /// Highest grade group in the patient.
    pub ggg: i64,
    pub pz_ggg: i64,
    pub cg_ggg: i64,
    pub lesion_zone: Option<Zone>,
    /// Native slice holding the lesion for single-slice lesions.
    pub lesion_slice: Option<usize>,
}

impl PhantomPatient {
    pub fn gland_mask(&self) -> ImageVolume {
        let data = ndarray::Zip::from(self.pz_mask.data())
            .and(self.cg_mask.data())
            .map_collect(|&a, &b| if a > 0.5 || b > 0.5 { 1.0 } else { 0.0 });
        self.pz_mask
            .with_data(data)
            .and_then(|v| v.with_modality(Modality::MaskGland))
            .expect("union of binary masks on the same grid")
    }
}

/// Intensity drop at a grade group, monotone in GGG. CG lesions fill a
/// larger fraction of their region, so they get less contrast.
pub fn lesion_drop(spec: &PhantomSpec, zone: Zone, ggg: i64) -> f64 {
    let z = match zone {
        Zone::Pz => PZ_CONTRAST,
        Zone::Cg => CG_CONTRAST,
    };
    let base = (z * spec.lesion_contrast).min(0.95);
    1.0 - (1.0 - base).powf(1.0 + 0.3 * (ggg - 2) as f64)
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn r2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.semi[i]).powi(2)).sum()
    }
}

fn rician<R: Rng>(v: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return v;
    }
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    let (a, b) = (v + n.sample(rng), n.sample(rng));
    (a * a + b * b).sqrt()
}

pub fn generate_patient(spec: &PhantomSpec, patient_seed: u64, patient_id: &str) -> Result<PhantomPatient> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(patient_seed);
    let [sx, sy, sz] = spec.spacing;
    let nz = rng.gen_range(spec.slice_count_range.0..=spec.slice_count_range.1);
    let (nx, ny) = (spec.in_plane, spec.in_plane);
    let extent = [nx as f64 * sx, ny as f64 * sy, nz as f64 * sz];
    let c_z = (0.35 * extent[2]).clamp(sz.max(2.0), 15.0);
    let gland = Ellipsoid {
        center: [
            extent[0] / 2.0 + rng.gen_range(-2.0..2.0),
            extent[1] / 2.0 + rng.gen_range(-2.0..2.0),
            extent[2] / 2.0 + rng.gen_range(-0.3..0.3) * sz,
        ],
        semi: [
            rng.gen_range(0.30..0.36) * extent[0],
            rng.gen_range(0.24..0.30) * extent[1],
            c_z * rng.gen_range(0.9..1.0),
        ],
    };

    let has_lesion = rng.gen_bool(spec.lesion_prevalence);
    let benign = |rng: &mut ChaCha8Rng| rng.gen_range(0..=1i64);
    let (mut pz_ggg, mut cg_ggg) = (benign(&mut rng), benign(&mut rng));
    let lesion_zone = has_lesion.then(|| if rng.gen_bool(0.5) { Zone::Pz } else { Zone::Cg });
    let lesion_ggg = rng.gen_range(2..=5i64);
    match lesion_zone {
        Some(Zone::Pz) => pz_ggg = lesion_ggg,
        Some(Zone::Cg) => cg_ggg = lesion_ggg,
        None => {}
    }

    // Lesion centre in the host region's mid-plane, away from its border.
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let radial = match lesion_zone {
        Some(Zone::Pz) => (1.0 + CG_FRACTION) / 2.0,
        _ => rng.gen_range(0.0..0.3),
    };
    let lesion_r = rng.gen_range(spec.lesion_radius_mm.0..=spec.lesion_radius_mm.1);
    let center_slice = ((gland.center[2] / sz).floor() as i64).clamp(0, nz as i64 - 1) as usize;
    let lesion_slice = match (lesion_zone, spec.lesion_extent) {
        (Some(_), LesionExtent::SingleSlice) => {
            let lo = ((gland.center[2] - 0.5 * gland.semi[2]) / sz).floor().max(0.0) as usize;
            let hi = (((gland.center[2] + 0.5 * gland.semi[2]) / sz).floor() as usize).min(nz - 1);
            Some(rng.gen_range(lo.min(center_slice)..=hi.max(center_slice)))
        }
        _ => None,
    };
    let lesion = Ellipsoid {
        center: [
            gland.center[0] + radial * gland.semi[0] * angle.cos(),
            gland.center[1] + radial * gland.semi[1] * angle.sin(),
            lesion_slice.map_or(gland.center[2], |k| (k as f64 + 0.5) * sz),
        ],
        semi: [lesion_r, lesion_r, match lesion_slice {
            Some(_) => 0.5 * sz,
            None => 2.0 * gland.semi[2],
        }],
    };

    let jitter = |rng: &mut ChaCha8Rng| 1.0 + rng.gen_range(-spec.baseline_jitter..=spec.baseline_jitter);
    let (t2_scale, adc_scale) = (jitter(&mut rng), jitter(&mut rng));
    let region_jitter: Vec<f64> = (0..4).map(|_| 1.0 + rng.gen_range(-0.5..=0.5) * spec.baseline_jitter).collect();
    let drop = lesion_zone.map_or(0.0, |z| lesion_drop(spec, z, lesion_ggg));
    let bias_phase = rng.gen_range(0.0..1.0);

    let shape = (nx, ny, nz);
    let mut t2 = Array3::<f32>::zeros(shape);
    let mut adc = Array3::<f32>::zeros(shape);
    let mut pz = Array3::<f32>::zeros(shape);
    let mut cg = Array3::<f32>::zeros(shape);
    let mut les = Array3::<f32>::zeros(shape);
    let sigma_t2 = spec.noise_sigma * T2_PZ as f64;
    let sigma_adc = spec.noise_sigma * ADC_PZ as f64;
    for ((i, j, k), t2v) in t2.indexed_iter_mut() {
        let p = [(i as f64 + 0.5) * sx, (j as f64 + 0.5) * sy, (k as f64 + 0.5) * sz];
        let rg = gland.r2(p);
        let (mut tv, mut av, zone) = if rg <= CG_FRACTION * CG_FRACTION {
            cg[[i, j, k]] = 1.0;
            (T2_CG as f64 * region_jitter[0], ADC_CG as f64 * region_jitter[1], Some(Zone::Cg))
        } else if rg <= 1.0 {
            pz[[i, j, k]] = 1.0;
            (T2_PZ as f64 * region_jitter[2], ADC_PZ as f64 * region_jitter[3], Some(Zone::Pz))
        } else {
            (T2_BACKGROUND as f64, ADC_BACKGROUND as f64, None)
        };
        let in_slice = lesion_slice.map_or(true, |s| s == k);
        if zone.is_some() && zone == lesion_zone && in_slice && lesion.r2(p) <= 1.0 {
            les[[i, j, k]] = 1.0;
            tv *= 1.0 - drop;
            av *= 1.0 - drop;
        }
        let gain = (spec.bias_amplitude * (std::f64::consts::PI * (p[0] / extent[0] + bias_phase * 0.2)).sin()).exp();
        tv *= t2_scale * gain;
        av *= adc_scale * gain;
        *t2v = rician(tv, sigma_t2, &mut rng) as f32;
        adc[[i, j, k]] = rician(av, sigma_adc, &mut rng) as f32;
    }

    let vol = |data, m| ImageVolume::from_spacing(data, spec.spacing, m, patient_id);
    let ggg = pz_ggg.max(cg_ggg);
    Ok(PhantomPatient {
        patient_id: patient_id.to_string(),
        t2: vol(t2, Modality::T2)?,
        adc: vol(adc, Modality::Adc)?,
        pz_mask: vol(pz, Modality::MaskPz)?,
        cg_mask: vol(cg, Modality::MaskCg)?,
        lesion_mask: vol(les, Modality::MaskLesion)?,
        ggg,
        pz_ggg,
        cg_ggg,
        lesion_zone,
        lesion_slice,
    })
}

pub fn patient_seed(spec_seed: u64, index: usize) -> u64 {
    spec_seed
        .wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn patient_id(index: usize) -> String {
    format!("PH{index:03}")
}

/// Generates all patients in memory (parallel across patients).
pub fn generate_patients(spec: &PhantomSpec) -> Result<Vec<PhantomPatient>> {
    spec.validate()?;
    (0..spec.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(spec, patient_seed(spec.seed, i), &patient_id(i)))
        .collect()
}

/// Writes every patient as NIfTI files under `out_dir/<id>/` plus
/// `out_dir/manifest.json` (PZ, CG and GLAND entries per patient).
pub fn generate_cohort(spec: &PhantomSpec, out_dir: &Path) -> Result<CohortManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::unwritable(out_dir, e))?;
    let per_patient: Vec<Vec<ManifestEntry>> = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| {
            let p = generate_patient(spec, patient_seed(spec.seed, i), &patient_id(i))?;
            write_patient(&p, out_dir)
        })
        .collect::<Result<_>>()?;
    let manifest = CohortManifest {
        source: CohortSource::Phantom,
        entries: per_patient.into_iter().flatten().collect(),
    };
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn write_patient(p: &PhantomPatient, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let dir = out_dir.join(&p.patient_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::unwritable(&dir, e))?;
    let rel = |name: &str| PathBuf::from(&p.patient_id).join(name);
    let gland = p.gland_mask();
    for (vol, name) in [
        (&p.t2, "t2.nii.gz"),
        (&p.adc, "adc.nii.gz"),
        (&p.pz_mask, "pz.nii.gz"),
        (&p.cg_mask, "cg.nii.gz"),
        (&gland, "gland.nii.gz"),
        (&p.lesion_mask, "lesion.nii.gz"),
    ] {
        save_volume(vol, &dir.join(name))?;
    }
    let entry = |region, ggg, mask: &str| ManifestEntry {
        patient_id: p.patient_id.clone(),
        region,
        ggg,
        t2_path: rel("t2.nii.gz"),
        adc_path: rel("adc.nii.gz"),
        mask_path: rel(mask),
        lesion_path: Some(rel("lesion.nii.gz")),
    };
    Ok(vec![
        entry(Region::Pz, p.pz_ggg, "pz.nii.gz"),
        entry(Region::Cg, p.cg_ggg, "cg.nii.gz"),
        entry(Region::Gland, p.ggg, "gland.nii.gz"),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> PhantomSpec {
        PhantomSpec {
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            baseline_jitter: 0.0,
            lesion_prevalence: 0.0,
            ..PhantomSpec::default()
        }
    }

    fn masked_mean(v: &ImageVolume, m: &Array3<f32>) -> f64 {
        let (s, n) = v
            .data()
            .iter()
            .zip(m.iter())
            .filter(|(_, &k)| k > 0.5)
            .fold((0.0, 0usize), |(s, n), (&x, _)| (s + x as f64, n + 1));
        s / n as f64
    }

    #[test]
    fn noiseless_regions_recover_constants() {
        let p = generate_patient(&quiet(), 1, "q").unwrap();
        assert_eq!(p.ggg.clamp(0, 1), p.ggg);
        let bg = ndarray::Zip::from(p.pz_mask.data()).and(p.cg_mask.data()).map_collect(|&a, &b| 1.0 - a.max(b));
        for (vol, want) in [(&p.t2, [T2_PZ, T2_CG, T2_BACKGROUND]), (&p.adc, [ADC_PZ, ADC_CG, ADC_BACKGROUND])] {
            assert!((masked_mean(vol, p.pz_mask.data()) - want[0] as f64).abs() < 1e-3);
            assert!((masked_mean(vol, p.cg_mask.data()) - want[1] as f64).abs() < 1e-3);
            assert!((masked_mean(vol, &bg) - want[2] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn lesion_is_hypointense_and_inside_host() {
        let spec = PhantomSpec { lesion_prevalence: 1.0, ..PhantomSpec::default() };
        for seed in 0..10 {
            let p = generate_patient(&spec, seed, "l").unwrap();
            let zone = p.lesion_zone.unwrap();
            let host = if zone == Zone::Pz { &p.pz_mask } else { &p.cg_mask };
            let les = p.lesion_mask.data();
            assert!(les.iter().any(|&v| v > 0.5));
            assert!(les.iter().zip(host.data().iter()).all(|(&l, &h)| l <= h));
            let rest = ndarray::Zip::from(host.data()).and(les).map_collect(|&h, &l| h * (1.0 - l));
            for vol in [&p.t2, &p.adc] {
                assert!(masked_mean(vol, les) < masked_mean(vol, &rest));
            }
            assert!(p.ggg >= 2);
        }
    }

    #[test]
    fn masks_are_disjoint_and_generation_deterministic() {
        let spec = PhantomSpec::default();
        let a = generate_patient(&spec, 42, "d").unwrap();
        let b = generate_patient(&spec, 42, "d").unwrap();
        assert_eq!(a, b);
        assert!(a.pz_mask.data().iter().zip(a.cg_mask.data().iter()).all(|(&x, &y)| x * y == 0.0));
        let (lo, hi) = spec.slice_count_range;
        assert!((lo..=hi).contains(&a.t2.num_slices()));
        assert_eq!(a.t2.slice_axis(), 2);
    }

    #[test]
    fn single_slice_lesions_touch_one_slice() {
        let spec = PhantomSpec { lesion_prevalence: 1.0, lesion_extent: LesionExtent::SingleSlice, ..PhantomSpec::default() };
        for seed in 0..5 {
            let p = generate_patient(&spec, seed, "s").unwrap();
            let k = p.lesion_slice.unwrap();
            let slices: Vec<usize> = (0..p.lesion_mask.num_slices())
                .filter(|&s| p.lesion_mask.slice(s).iter().any(|&v| v > 0.5))
                .collect();
            assert_eq!(slices, vec![k]);
        }
    }

    #[test]
    fn contrast_monotone_in_grade() {
        let spec = PhantomSpec::default();
        for zone in Zone::BOTH {
            let d: Vec<f64> = (2..=5).map(|g| lesion_drop(&spec, zone, g)).collect();
            assert!(d.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
