//! 2.5D paired samples, cohort manifests, patient-level splitting, class
//! re-weighting and augmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi::{PatchSequence, Region};
use crate::volume::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pairing {
    #[serde(rename = "T2_ADC")]
    T2Adc,
    #[serde(rename = "T2_T2")]
    T2T2,
    #[serde(rename = "ADC_ADC")]
    AdcAdc,
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pairing::T2Adc => "T2_ADC",
            Pairing::T2T2 => "T2_T2",
            Pairing::AdcAdc => "ADC_ADC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Mixed,
    T2AdcOnly,
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairMode::Mixed => "mixed",
            PairMode::T2AdcOnly => "t2_adc_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub channels: Array3<f32>,
    pub pairing: Pairing,
    pub label: u8,
    pub patient_id: String,
    /// Anchor slice; consecutive pairs cover `slice_index` and the next slice.
    pub slice_index: usize,
    pub region: Region,
}

impl PairedSample {
    pub fn patch_shape(&self) -> (usize, usize) {
        let (_, h, w) = self.channels.dim();
        (h, w)
    }
}

/// 1 iff the grade group is clinically significant (GGG >= 2).
pub fn assign_label(ggg: i64) -> Result<u8> {
    match ggg {
        0..=1 => Ok(0),
        2..=5 => Ok(1),
        other => Err(Error::OutOfRangeGgg(other)),
    }
}

pub fn build_pairs(t2: &PatchSequence, adc: &PatchSequence, mode: PairMode, label: u8) -> Result<Vec<PairedSample>> {
    if t2.is_empty() || adc.is_empty() {
        return Err(Error::EmptySequence);
    }
    if t2.slice_indices() != adc.slice_indices()
        || t2.region() != adc.region()
        || t2.patient_id() != adc.patient_id()
        || t2.patch_shape() != adc.patch_shape()
    {
        return Err(Error::SequenceMisaligned(format!(
            "T2 and ADC sequences of {} / {} do not line up",
            t2.patient_id(),
            t2.region()
        )));
    }
    if t2.modality() != Modality::T2 || adc.modality() != Modality::Adc {
        return Err(Error::SequenceMisaligned(format!(
            "expected T2 and ADC sequences, got {} and {}",
            t2.modality(),
            adc.modality()
        )));
    }
    let n = t2.len();
    let idx = t2.slice_indices();
    let make = |a: &ndarray::Array2<f32>, b: &ndarray::Array2<f32>, pairing, slice_index| PairedSample {
        channels: ndarray::stack(Axis(0), &[a.view(), b.view()]).expect("equal patch shapes"),
        pairing,
        label,
        patient_id: t2.patient_id().to_string(),
        slice_index,
        region: t2.region(),
    };
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        out.push(make(&t2.patches()[i], &adc.patches()[i], Pairing::T2Adc, idx[i]));
    }
    if mode == PairMode::Mixed {
        for i in 0..n.saturating_sub(1) {
            out.push(make(&t2.patches()[i], &t2.patches()[i + 1], Pairing::T2T2, idx[i]));
        }
        for i in 0..n.saturating_sub(1) {
            out.push(make(&adc.patches()[i], &adc.patches()[i + 1], Pairing::AdcAdc, idx[i]));
        }
    }
    Ok(out)
}

/// Patient-level partition: `round(fraction * patients)` patients go to the
/// validation side, stratified by patient label so both sides keep both
/// classes whenever possible.
pub fn split_patients(
    patient_labels: &BTreeMap<String, u8>,
    fraction: f64,
    seed: u64,
) -> Result<BTreeSet<String>> {
    let n = patient_labels.len();
    if n < 2 {
        return Err(Error::TooFewPatients(n));
    }
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: [Vec<&String>; 2] = [Vec::new(), Vec::new()];
    for (id, &label) in patient_labels {
        groups[(label > 0) as usize].push(id);
    }
    for g in groups.iter_mut() {
        g.shuffle(&mut rng);
    }
    // Allocate the validation quota proportionally, largest remainder first.
    let exact: Vec<f64> = groups.iter().map(|g| n_val as f64 * g.len() as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n_val - quota.iter().sum::<usize>();
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| (exact[b] - quota[b] as f64).total_cmp(&(exact[a] - quota[a] as f64)));
    for &c in order.iter().cycle().take(4) {
        if left == 0 {
            break;
        }
        if quota[c] < groups[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }
    Ok(groups
        .iter()
        .zip(&quota)
        .flat_map(|(g, &q)| g[..q].iter().map(|s| (*s).clone()))
        .collect())
}

/// Splits samples by patient. Patient labels are the maximum sample label.
pub fn split_validation(
    samples: Vec<PairedSample>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    let mut labels = BTreeMap::new();
    for s in &samples {
        let e = labels.entry(s.patient_id.clone()).or_insert(0u8);
        *e = (*e).max(s.label);
    }
    let val_ids = split_patients(&labels, fraction, seed)?;
    Ok(samples.into_iter().partition(|s| !val_ids.contains(&s.patient_id)))
}

/// `w_c = N / (2 N_c)`.
pub fn class_weights(labels: &[u8]) -> Result<(f64, f64)> {
    let n1 = labels.iter().filter(|&&l| l > 0).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::SingleClass(format!("{n0} benign / {n1} malignant")));
    }
    let n = labels.len() as f64;
    Ok((n / (2.0 * n0 as f64), n / (2.0 * n1 as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub flip: bool,
    /// Maximum shift as a fraction of the patch size.
    pub max_translate: f64,
    /// Contrast jitter half-width `c`: factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::OFF
    }
}

impl AugmentationPolicy {
    pub const OFF: Self = Self {
        flip: false,
        max_translate: 0.0,
        contrast: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.1 + 1e-12).contains(&self.max_translate) || !(0.0..=0.3 + 1e-12).contains(&self.contrast) {
            return Err(Error::InvalidDescriptor(format!("augmentation out of bounds: {self:?}")));
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        !self.flip && self.max_translate == 0.0 && self.contrast == 0.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, shape: (usize, usize), rng: &mut R) -> Transform {
        let flip = self.flip && rng.gen_bool(0.5);
        let mut shift_axis = |n: usize| {
            let m = (self.max_translate * n as f64).floor() as i64;
            if m > 0 {
                rng.gen_range(-m..=m)
            } else {
                0
            }
        };
        let shift = (shift_axis(shape.0), shift_axis(shape.1));
        let contrast = if self.contrast > 0.0 {
            rng.gen_range(1.0 - self.contrast..=1.0 + self.contrast)
        } else {
            1.0
        };
        Transform { flip, shift, contrast }
    }
}

/// A concrete draw from an [`AugmentationPolicy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub flip: bool,
    /// (rows, cols); positive moves content down / right.
    pub shift: (i64, i64),
    pub contrast: f64,
}

impl Transform {
    pub const IDENTITY: Self = Self {
        flip: false,
        shift: (0, 0),
        contrast: 1.0,
    };

    /// Flip, then translate with zero fill, then contrast jitter per channel.
    pub fn apply(&self, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let mut out = if self.flip {
            x.slice(s![.., .., ..;-1]).to_owned()
        } else {
            x.clone()
        };
        let (dr, dc) = self.shift;
        if dr != 0 || dc != 0 {
            let mut shifted = Array3::zeros((c, h, w));
            let span = |d: i64, n: usize| -> Option<(usize, usize, usize)> {
                let len = n as i64 - d.abs();
                if len <= 0 {
                    return None;
                }
                let (src, dst) = if d >= 0 { (0, d) } else { (-d, 0) };
                Some((src as usize, dst as usize, len as usize))
            };
            if let (Some((sr, tr, lr)), Some((sc, tc, lc))) = (span(dr, h), span(dc, w)) {
                shifted
                    .slice_mut(s![.., tr..tr + lr, tc..tc + lc])
                    .assign(&out.slice(s![.., sr..sr + lr, sc..sc + lc]));
            }
            out = shifted;
        }
        if self.contrast != 1.0 {
            for mut ch in out.outer_iter_mut() {
                let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64;
                let f = self.contrast;
                ch.mapv_inplace(|v| (mean + f * (v as f64 - mean)) as f32);
            }
        }
        out
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &PairedSample, policy: &AugmentationPolicy, rng: &mut R) -> PairedSample {
    if policy.is_off() {
        return sample.clone();
    }
    let t = policy.sample(sample.patch_shape(), rng);
    PairedSample {
        channels: t.apply(&sample.channels),
        ..sample.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortSource {
    TrainPublic,
    TestInstitutional,
    Phantom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub region: Region,
    pub ggg: i64,
    pub t2_path: PathBuf,
    pub adc_path: PathBuf,
    pub mask_path: PathBuf,
    /// Ground-truth lesion mask, present for phantom cohorts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub source: CohortSource,
    pub entries: Vec<ManifestEntry>,
}

impl CohortManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            assign_label(e.ggg).map_err(|_| {
                Error::InvalidManifest(format!("{}: ggg {} outside 0..5", e.patient_id, e.ggg))
            })?;
            if !seen.insert((e.patient_id.as_str(), e.region)) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate entry for patient {} region {}",
                    e.patient_id, e.region
                )));
            }
        }
        Ok(())
    }

    pub fn patients(&self) -> Vec<String> {
        let set: BTreeSet<_> = self.entries.iter().map(|e| e.patient_id.clone()).collect();
        set.into_iter().collect()
    }

    /// Loads and validates; relative paths are resolved against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|e| Error::InvalidManifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            for p in [&mut e.t2_path, &mut e.adc_path, &mut e.mask_path] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let Some(p) = e.lesion_path.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::unwritable(path, e))
    }
}

/// Aligned T2/ADC patch sequences of one patient and region with the
/// region's weak label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub t2: PatchSequence,
    pub adc: PatchSequence,
    pub label: u8,
}

/// All labelled sequences of one region, split once by patient so every
/// pairing mode sees the same partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionCohort {
    pub region: Region,
    pub sequences: Vec<LabeledSequence>,
    pub val_patients: BTreeSet<String>,
}

impl RegionCohort {
    pub fn new(region: Region, sequences: Vec<LabeledSequence>, val_fraction: f64, seed: u64) -> Result<Self> {
        let mut labels = BTreeMap::new();
        for s in &sequences {
            if s.t2.region() != region {
                return Err(Error::SequenceMisaligned(format!(
                    "{} sequence in a {region} cohort",
                    s.t2.region()
                )));
            }
            let e = labels.entry(s.t2.patient_id().to_string()).or_insert(0u8);
            *e = (*e).max(s.label);
        }
        let val_patients = split_patients(&labels, val_fraction, seed)?;
        Ok(Self { region, sequences, val_patients })
    }

    pub fn samples(&self, mode: PairMode) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for s in &self.sequences {
            let pairs = build_pairs(&s.t2, &s.adc, mode, s.label)?;
            if self.val_patients.contains(s.t2.patient_id()) {
                val.extend(pairs);
            } else {
                train.extend(pairs);
            }
        }
        Ok((train, val))
    }

    pub fn patch_shape(&self) -> Option<(usize, usize)> {
        self.sequences.first().map(|s| s.t2.patch_shape())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::unwritable(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let cohort: Self = serde_json::from_str(&text)?;
        let shape = cohort.patch_shape();
        for s in &cohort.sequences {
            if s.t2.slice_indices() != s.adc.slice_indices()
                || s.t2.patches().len() != s.t2.slice_indices().len()
                || s.adc.patches().len() != s.adc.slice_indices().len()
                || Some(s.t2.patch_shape()) != shape
                || Some(s.adc.patch_shape()) != shape
            {
                return Err(Error::SequenceMisaligned(format!("{}: patient {}", path.display(), s.t2.patient_id())));
            }
        }
        Ok(cohort)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::roi::CropRect;
    use ndarray::Array2;

    fn seqs(n: usize) -> (PatchSequence, PatchSequence) {
        let rect = CropRect { x_min: 0, x_max: 3, y_min: 0, y_max: 3, margin_px: 0 };
        let mk = |m, off: f32| {
            let patches = (0..n).map(|i| Array2::from_elem((4, 4), i as f32 + off)).collect();
            PatchSequence::new(patches, (0..n).map(|i| i + 2).collect(), Region::Pz, m, "p1", rect).unwrap()
        };
        (mk(Modality::T2, 0.0), mk(Modality::Adc, 100.0))
    }

    #[test]
    fn labels_follow_grade_group() {
        assert_eq!(assign_label(0).unwrap(), 0);
        assert_eq!(assign_label(1).unwrap(), 0);
        assert_eq!(assign_label(2).unwrap(), 1);
        assert_eq!(assign_label(3).unwrap(), 1);
        assert!(matches!(assign_label(6), Err(Error::OutOfRangeGgg(6))));
        assert!(matches!(assign_label(-1), Err(Error::OutOfRangeGgg(-1))));
    }

    #[test]
    fn pair_contents_and_counts() {
        let (t2, adc) = seqs(8);
        let mixed = build_pairs(&t2, &adc, PairMode::Mixed, 1).unwrap();
        assert_eq!(mixed.len(), 22);
        assert_eq!(build_pairs(&t2, &adc, PairMode::T2AdcOnly, 1).unwrap().len(), 8);
        for s in &mixed {
            let i = (s.slice_index - 2) as f32;
            let (a, b) = (s.channels[[0, 0, 0]], s.channels[[1, 0, 0]]);
            match s.pairing {
                Pairing::T2Adc => assert_eq!((a, b), (i, i + 100.0)),
                Pairing::T2T2 => assert_eq!((a, b), (i, i + 1.0)),
                Pairing::AdcAdc => assert_eq!((a, b), (i + 100.0, i + 101.0)),
            }
            assert_eq!(s.label, 1);
        }
        let (t2, adc) = seqs(1);
        assert_eq!(build_pairs(&t2, &adc, PairMode::Mixed, 0).unwrap().len(), 1);
    }

    #[test]
    fn misaligned_sequences_rejected() {
        let (t2, adc) = seqs(4);
        let adc = adc.select(&[0, 1, 3]).unwrap();
        let t2 = t2.select(&[0, 1, 2]).unwrap();
        assert!(matches!(
            build_pairs(&t2, &adc, PairMode::Mixed, 0),
            Err(Error::SequenceMisaligned(_))
        ));
    }

    #[test]
    fn class_weight_formula() {
        let (w0, w1) = class_weights(&[0, 1, 0, 1]).unwrap();
        assert_eq!((w0, w1), (1.0, 1.0));
        let mut labels = vec![0u8; 75];
        labels.extend(vec![1u8; 25]);
        let (w0, w1) = class_weights(&labels).unwrap();
        assert!((w0 - 100.0 / 150.0).abs() < 1e-12 && (w1 - 2.0).abs() < 1e-12);
        assert!((w0 * 75.0 - w1 * 25.0).abs() < 1e-9);
        assert!(matches!(class_weights(&[0, 0, 0]), Err(Error::SingleClass(_))));
    }

    fn sample_for(pid: &str, label: u8) -> PairedSample {
        PairedSample {
            channels: Array3::zeros((2, 2, 2)),
            pairing: Pairing::T2Adc,
            label,
            patient_id: pid.into(),
            slice_index: 0,
            region: Region::Pz,
        }
    }

    #[test]
    fn three_patients_one_validation() {
        let samples: Vec<_> = ["a", "b", "c"]
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..3).map(move |_| sample_for(p, (i % 2) as u8)))
            .collect();
        let (tr, va) = split_validation(samples.clone(), 1.0 / 3.0, 7).unwrap();
        let vp: BTreeSet<_> = va.iter().map(|s| s.patient_id.clone()).collect();
        let tp: BTreeSet<_> = tr.iter().map(|s| s.patient_id.clone()).collect();
        assert_eq!((vp.len(), tp.len()), (1, 2));
        let (tr2, va2) = split_validation(samples, 1.0 / 3.0, 7).unwrap();
        assert_eq!((tr, va), (tr2, va2));
    }

    #[test]
    fn one_patient_is_too_few() {
        assert!(matches!(
            split_validation(vec![sample_for("a", 0)], 0.33, 1),
            Err(Error::TooFewPatients(1))
        ));
    }

    #[test]
    fn flip_is_an_involution() {
        let x = Array3::from_shape_fn((2, 5, 6), |(c, i, j)| (c * 100 + i * 10 + j) as f32);
        let t = Transform { flip: true, ..Transform::IDENTITY };
        assert_eq!(t.apply(&t.apply(&x)), x);
        assert_eq!(t.apply(&x)[[1, 2, 0]], x[[1, 2, 5]]);
    }

    #[test]
    fn translation_shifts_with_zero_fill() {
        let x = Array3::from_shape_fn((2, 8, 8), |(c, i, j)| (c * 100 + i * 10 + j + 1) as f32);
        let t = Transform { shift: (2, -3), ..Transform::IDENTITY };
        let y = t.apply(&x);
        for c in 0..2 {
            for i in 0..8i64 {
                for j in 0..8i64 {
                    let (si, sj) = (i - 2, j + 3);
                    let expected = if (0..8).contains(&si) && (0..8).contains(&sj) {
                        x[[c, si as usize, sj as usize]]
                    } else {
                        0.0
                    };
                    assert_eq!(y[[c, i as usize, j as usize]], expected);
                }
            }
        }
    }

    #[test]
    fn off_policy_is_identity() {
        let s = sample_for("a", 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &AugmentationPolicy::OFF, &mut rng), s);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let entry = ManifestEntry {
            patient_id: "P1".into(),
            region: Region::Cg,
            ggg: 3,
            t2_path: "P1/t2.nii.gz".into(),
            adc_path: "P1/adc.nii.gz".into(),
            mask_path: "P1/cg.nii.gz".into(),
            lesion_path: None,
        };
        let m = CohortManifest { source: CohortSource::Phantom, entries: vec![entry.clone()] };
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = CohortManifest::load(&path).unwrap();
        assert_eq!(loaded.entries[0].t2_path, dir.path().join("P1/t2.nii.gz"));
        let dup = CohortManifest { source: CohortSource::Phantom, entries: vec![entry.clone(), entry.clone()] };
        assert!(matches!(dup.validate(), Err(Error::InvalidManifest(_))));
        let bad = CohortManifest { source: CohortSource::Phantom, entries: vec![ManifestEntry { ggg: 9, ..entry }] };
        assert!(matches!(bad.validate(), Err(Error::InvalidManifest(_))));
    }

    proptest! {
        #[test]
        fn pairing_counts_follow_the_law(n in 1usize..60) {
            let (t2, adc) = seqs(n);
            let mixed = build_pairs(&t2, &adc, PairMode::Mixed, 1).unwrap();
            prop_assert_eq!(mixed.len(), 3 * n - 2);
            prop_assert_eq!(build_pairs(&t2, &adc, PairMode::T2AdcOnly, 1).unwrap().len(), n);
            prop_assert!(mixed.iter().all(|s| s.label == 1 && s.channels.dim() == (2, 4, 4)));
        }
    }
}
