//! Per-sequence slice scoring, ranking and report artifacts.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_pairs, PairMode, PairedSample};
use crate::detector::{predict, DetectorModel, Zone};
use crate::error::{Error, Result};
use crate::explain::{save_png, write_cam_png, CamHeatmap};
use crate::roi::{PatchSequence, Region};

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Slices this close to either end of the sequence are flagged as marginal.
pub const MARGINAL_SLICES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    Subregion,
    WholeGland,
}

impl fmt::Display for RegionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionMode::Subregion => "subregion",
            RegionMode::WholeGland => "whole_gland",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequencePrediction {
    pub patient_id: String,
    pub slice_indices: Vec<usize>,
    pub pz_probs: Vec<f64>,
    pub cg_probs: Vec<f64>,
    /// Every slice index, most suspicious first.
    pub top_slices: Vec<usize>,
    pub threshold: f64,
    pub region_mode: RegionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedSlice {
    pub index: usize,
    pub zone: Zone,
    pub prob: f64,
}

fn order(a: &RankedSlice, b: &RankedSlice) -> Ordering {
    b.prob
        .total_cmp(&a.prob)
        .then(a.index.cmp(&b.index))
        .then(a.zone.cmp(&b.zone))
}

impl SequencePrediction {
    pub fn new(
        patient_id: impl Into<String>,
        slice_indices: Vec<usize>,
        pz_probs: Vec<f64>,
        cg_probs: Vec<f64>,
        threshold: f64,
        region_mode: RegionMode,
    ) -> Result<Self> {
        let n = slice_indices.len();
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        if pz_probs.len() != n || cg_probs.len() != n {
            return Err(Error::SequenceMisaligned(format!(
                "{n} slices but {} PZ and {} CG probabilities",
                pz_probs.len(),
                cg_probs.len()
            )));
        }
        let mut pred = Self {
            patient_id: patient_id.into(),
            slice_indices,
            pz_probs,
            cg_probs,
            top_slices: Vec::new(),
            threshold,
            region_mode,
        };
        pred.top_slices = pred.ranking().iter().map(|r| r.index).collect();
        Ok(pred)
    }

    pub fn len(&self) -> usize {
        self.slice_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slice_indices.is_empty()
    }

    /// Every slice with its larger zone probability (PZ wins ties), sorted.
    fn ranking(&self) -> Vec<RankedSlice> {
        let mut all: Vec<RankedSlice> = (0..self.len())
            .map(|i| {
                let (pz, cg) = (self.pz_probs[i], self.cg_probs[i]);
                let (zone, prob) = if cg > pz { (Zone::Cg, cg) } else { (Zone::Pz, pz) };
                RankedSlice { index: self.slice_indices[i], zone, prob }
            })
            .collect();
        all.sort_by(order);
        all
    }

    pub fn probs(&self, zone: Zone) -> &[f64] {
        match zone {
            Zone::Pz => &self.pz_probs,
            Zone::Cg => &self.cg_probs,
        }
    }

    /// Slice index with the highest probability under `zone` (lowest index on
    /// ties).
    pub fn argmax(&self, zone: Zone) -> usize {
        let p = self.probs(zone);
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        self.slice_indices[best]
    }
}

fn scored_samples(t2: &PatchSequence, adc: &PatchSequence) -> Result<Vec<PairedSample>> {
    if t2.is_empty() {
        return Err(Error::EmptySequence);
    }
    // Labels are unused at inference.
    build_pairs(t2, adc, PairMode::T2AdcOnly, 0)
}

/// Scores the T2-ADC pair of every slice with both detectors on one crop
/// sequence. A gland-region crop yields whole-gland mode.
pub fn predict_sequence(
    pz: &DetectorModel,
    cg: &DetectorModel,
    t2: &PatchSequence,
    adc: &PatchSequence,
) -> Result<SequencePrediction> {
    let samples = scored_samples(t2, adc)?;
    let mode = if t2.region() == Region::Gland { RegionMode::WholeGland } else { RegionMode::Subregion };
    SequencePrediction::new(
        t2.patient_id(),
        t2.slice_indices().to_vec(),
        predict(pz, &samples)?,
        predict(cg, &samples)?,
        DEFAULT_THRESHOLD,
        mode,
    )
}

/// Scores each zone's own crops with its detector. Both crop sequences must
/// cover the same slices.
pub fn predict_subregions(
    pz: &DetectorModel,
    cg: &DetectorModel,
    pz_seq: (&PatchSequence, &PatchSequence),
    cg_seq: (&PatchSequence, &PatchSequence),
) -> Result<SequencePrediction> {
    if pz_seq.0.slice_indices() != cg_seq.0.slice_indices() || pz_seq.0.patient_id() != cg_seq.0.patient_id() {
        return Err(Error::SequenceMisaligned("PZ and CG crops cover different slices".into()));
    }
    let pz_samples = scored_samples(pz_seq.0, pz_seq.1)?;
    let cg_samples = scored_samples(cg_seq.0, cg_seq.1)?;
    SequencePrediction::new(
        pz_seq.0.patient_id(),
        pz_seq.0.slice_indices().to_vec(),
        predict(pz, &pz_samples)?,
        predict(cg, &cg_samples)?,
        DEFAULT_THRESHOLD,
        RegionMode::Subregion,
    )
}

/// The `top_k` most suspicious slices, each tagged with the zone attaining
/// its maximum. Ties go to the lower slice index, then PZ.
pub fn rank_slices(pred: &SequencePrediction, top_k: usize) -> Result<Vec<RankedSlice>> {
    if top_k < 1 || top_k > pred.len() {
        return Err(Error::BadK { k: top_k, len: pred.len() });
    }
    let mut r = pred.ranking();
    r.truncate(top_k);
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceEntry {
    pub index: usize,
    pub pz_prob: f64,
    pub cg_prob: f64,
    pub marginal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopEntry {
    pub index: usize,
    pub zone: Zone,
    pub prob: f64,
    pub cam_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub version: u32,
    pub patient_id: String,
    pub region_mode: RegionMode,
    pub threshold: f64,
    pub slices: Vec<SliceEntry>,
    pub top: Vec<TopEntry>,
}

impl Report {
    pub fn prediction(&self) -> Result<SequencePrediction> {
        if self.version != REPORT_VERSION {
            return Err(Error::InvalidManifest(format!("unsupported report version {}", self.version)));
        }
        SequencePrediction::new(
            self.patient_id.clone(),
            self.slices.iter().map(|s| s.index).collect(),
            self.slices.iter().map(|s| s.pz_prob).collect(),
            self.slices.iter().map(|s| s.cg_prob).collect(),
            self.threshold,
            self.region_mode,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidManifest(format!("{}: {e}", path.display())))
    }
}

/// A Grad-CAM map to render, with the sample it explains.
#[derive(Debug, Clone)]
pub struct ReportCam {
    pub zone: Zone,
    pub heatmap: CamHeatmap,
    pub sample: PairedSample,
}

pub const CAM_SCALE: u32 = 4;

/// The report document for `pred`, with the `top_k` most suspicious slices
/// linked to the overlay of the same slice and zone when one exists.
pub fn build_report(pred: &SequencePrediction, cam_files: &[(usize, Zone, String)], top_k: usize) -> Result<Report> {
    let n = pred.len();
    let slices = (0..n)
        .map(|i| SliceEntry {
            index: pred.slice_indices[i],
            pz_prob: pred.pz_probs[i],
            cg_prob: pred.cg_probs[i],
            marginal: i < MARGINAL_SLICES || i + MARGINAL_SLICES >= n,
        })
        .collect();
    let top = rank_slices(pred, top_k.clamp(1, n))?
        .into_iter()
        .map(|r| TopEntry {
            index: r.index,
            zone: r.zone,
            prob: r.prob,
            cam_path: cam_files.iter().find(|(i, z, _)| *i == r.index && *z == r.zone).map(|c| c.2.clone()),
        })
        .collect();
    Ok(Report {
        version: REPORT_VERSION,
        patient_id: pred.patient_id.clone(),
        region_mode: pred.region_mode,
        threshold: pred.threshold,
        slices,
        top,
    })
}

fn write_json(report: &Report, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::unwritable(out_dir, e))?;
    let path = out_dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::unwritable(&path, e))
}

/// Writes only `report.json` into `out_dir`.
pub fn write_report_json(pred: &SequencePrediction, top_k: usize, out_dir: &Path) -> Result<Report> {
    let report = build_report(pred, &[], top_k)?;
    write_json(&report, out_dir)?;
    Ok(report)
}

/// Writes `report.json`, `curve.png` and one overlay per CAM into `out_dir`.
pub fn emit_report(pred: &SequencePrediction, cams: &[ReportCam], top_k: usize, out_dir: &Path) -> Result<Report> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::unwritable(out_dir, e))?;
    let mut cam_files = Vec::new();
    for c in cams {
        let p = write_cam_png(&c.heatmap, &c.sample, c.zone, out_dir, CAM_SCALE)?;
        let name = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        cam_files.push((c.sample.slice_index, c.zone, name));
    }
    let report = build_report(pred, &cam_files, top_k)?;
    write_json(&report, out_dir)?;
    save_png(&render_curve(pred), &out_dir.join("curve.png"))?;
    Ok(report)
}

const PZ_COLOR: Rgb<u8> = Rgb([31, 119, 180]);
const CG_COLOR: Rgb<u8> = Rgb([255, 127, 14]);

/// Probability per slice for both detectors with a dashed threshold line and
/// shaded columns where either detector exceeds it.
pub fn render_curve(pred: &SequencePrediction) -> RgbImage {
    let (w, h) = (640u32, 360u32);
    let (left, right, top, bottom) = (40.0f32, 620.0f32, 20.0f32, 330.0f32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let n = pred.len();
    let x_at = |i: usize| if n == 1 { (left + right) / 2.0 } else { left + (right - left) * i as f32 / (n - 1) as f32 };
    let y_at = |p: f64| bottom - (bottom - top) * p.clamp(0.0, 1.0) as f32;
    let half = if n == 1 { 8.0 } else { ((right - left) / (n - 1) as f32 / 2.0).max(1.0) };
    for i in 0..n {
        if pred.pz_probs[i].max(pred.cg_probs[i]) >= pred.threshold {
            let x0 = (x_at(i) - half).max(left);
            let x1 = (x_at(i) + half).min(right);
            let r = Rect::at(x0 as i32, top as i32).of_size(((x1 - x0) as u32).max(1), (bottom - top) as u32);
            draw_filled_rect_mut(&mut img, r, Rgb([250, 225, 225]));
        }
    }
    let axis = Rgb([0, 0, 0]);
    draw_line_segment_mut(&mut img, (left, bottom), (right, bottom), axis);
    draw_line_segment_mut(&mut img, (left, top), (left, bottom), axis);
    for i in 0..n {
        draw_line_segment_mut(&mut img, (x_at(i), bottom), (x_at(i), bottom + 4.0), axis);
    }
    let ty = y_at(pred.threshold);
    let mut x = left;
    while x < right {
        draw_line_segment_mut(&mut img, (x, ty), ((x + 6.0).min(right), ty), Rgb([120, 120, 120]));
        x += 12.0;
    }
    for (probs, color) in [(&pred.pz_probs, PZ_COLOR), (&pred.cg_probs, CG_COLOR)] {
        for i in 0..n {
            let (cx, cy) = (x_at(i), y_at(probs[i]));
            draw_filled_rect_mut(&mut img, Rect::at(cx as i32 - 2, cy as i32 - 2).of_size(5, 5), color);
            if i + 1 < n {
                draw_line_segment_mut(&mut img, (cx, cy), (x_at(i + 1), y_at(probs[i + 1])), color);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_model, ArchitectureDescriptor};
    use crate::explain::grad_cam;
    use crate::roi::CropRect;
    use crate::volume::Modality;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(probs: Vec<f64>) -> SequencePrediction {
        let n = probs.len();
        SequencePrediction::new("p", (0..n).collect(), probs.clone(), probs.iter().map(|p| p / 2.0).collect(), 0.5, RegionMode::Subregion)
            .unwrap()
    }

    fn sequences(n: usize, region: Region, seed: u64) -> (PatchSequence, PatchSequence) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rect = CropRect { x_min: 0, x_max: 15, y_min: 0, y_max: 15, margin_px: 5 };
        let mut mk = |m| {
            let patches = (0..n).map(|_| Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0..1.0))).collect();
            PatchSequence::new(patches, (0..n).map(|i| 3 + i).collect(), region, m, "p9", rect).unwrap()
        };
        (mk(Modality::T2), mk(Modality::Adc))
    }

    fn models() -> (DetectorModel, DetectorModel) {
        let d = ArchitectureDescriptor::minimal(16, 16);
        (build_model(&d, Zone::Pz, 1).unwrap(), build_model(&d, Zone::Cg, 2).unwrap())
    }

    #[test]
    fn one_slice_sequence() {
        let (pz, cg) = models();
        let (t2, adc) = sequences(1, Region::Pz, 0);
        let p = predict_sequence(&pz, &cg, &t2, &adc).unwrap();
        assert_eq!((p.pz_probs.len(), p.cg_probs.len()), (1, 1));
        assert_eq!(p.top_slices, vec![3]);
    }

    #[test]
    fn scoring_is_slice_local() {
        let (pz, cg) = models();
        let (t2, adc) = sequences(6, Region::Gland, 1);
        let full = predict_sequence(&pz, &cg, &t2, &adc).unwrap();
        assert_eq!(full.region_mode, RegionMode::WholeGland);
        let sub = [1usize, 4, 5];
        let part = predict_sequence(&pz, &cg, &t2.select(&sub).unwrap(), &adc.select(&sub).unwrap()).unwrap();
        for (j, &i) in sub.iter().enumerate() {
            assert!((part.pz_probs[j] - full.pz_probs[i]).abs() < 1e-6);
            assert!((part.cg_probs[j] - full.cg_probs[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_slice_scores_identically() {
        let (pz, cg) = models();
        let (t2, adc) = sequences(4, Region::Pz, 2);
        let dup = |s: &PatchSequence| {
            let mut patches = s.patches().to_vec();
            patches.push(patches[1].clone());
            PatchSequence::new(patches, vec![3, 4, 5, 6, 7], s.region(), s.modality(), "p9", s.crop_rect()).unwrap()
        };
        let p = predict_sequence(&pz, &cg, &dup(&t2), &dup(&adc)).unwrap();
        assert!((p.pz_probs[1] - p.pz_probs[4]).abs() < 1e-6);
        assert!((p.cg_probs[1] - p.cg_probs[4]).abs() < 1e-6);
    }

    #[test]
    fn misaligned_inputs() {
        let (pz, cg) = models();
        let (t2, adc) = sequences(4, Region::Pz, 3);
        let short = adc.select(&[0, 1, 2]).unwrap();
        assert!(matches!(predict_sequence(&pz, &cg, &t2, &short), Err(Error::SequenceMisaligned(_))));
        let (ct2, cadc) = sequences(3, Region::Cg, 3);
        assert!(matches!(
            predict_subregions(&pz, &cg, (&t2, &adc), (&ct2, &cadc)),
            Err(Error::SequenceMisaligned(_))
        ));
    }

    #[test]
    fn all_equal_probabilities_keep_index_order() {
        let p = pred(vec![0.3; 7]);
        let r = rank_slices(&p, 3).unwrap();
        assert_eq!(r.iter().map(|x| x.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(r.iter().all(|x| x.zone == Zone::Pz));
    }

    #[test]
    fn single_spike_ranks_first() {
        let mut probs = vec![0.1; 20];
        probs[12] = 0.9;
        let r = rank_slices(&pred(probs), 1).unwrap();
        assert_eq!((r[0].index, r[0].zone), (12, Zone::Pz));
    }

    #[test]
    fn bad_k() {
        let p = pred(vec![0.2, 0.4]);
        assert!(matches!(rank_slices(&p, 0), Err(Error::BadK { k: 0, len: 2 })));
        assert!(matches!(rank_slices(&p, 3), Err(Error::BadK { .. })));
    }

    proptest! {
        #[test]
        fn ranking_matches_exhaustive_sort(
            probs in prop::collection::vec((0u8..6, 0u8..6), 1..30),
            k in 1usize..30,
        ) {
            let n = probs.len();
            let k = k.min(n);
            let pz: Vec<f64> = probs.iter().map(|p| p.0 as f64 / 5.0).collect();
            let cg: Vec<f64> = probs.iter().map(|p| p.1 as f64 / 5.0).collect();
            let p = SequencePrediction::new("x", (10..10 + n).collect(), pz.clone(), cg.clone(), 0.5, RegionMode::Subregion).unwrap();
            // Oracle: every (slice, zone) candidate, keep each slice's best.
            let mut cands: Vec<(f64, usize, u8)> = Vec::new();
            for i in 0..n {
                cands.push((pz[i], 10 + i, 0));
                cands.push((cg[i], 10 + i, 1));
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut seen = std::collections::HashSet::new();
            let oracle: Vec<(usize, u8)> = cands.into_iter().filter(|c| seen.insert(c.1)).map(|c| (c.1, c.2)).collect();
            let got: Vec<(usize, u8)> = rank_slices(&p, k).unwrap().iter().map(|r| (r.index, (r.zone == Zone::Cg) as u8)).collect();
            prop_assert_eq!(&got[..], &oracle[..k]);
            prop_assert_eq!(p.top_slices, oracle.iter().map(|o| o.0).collect::<Vec<_>>());
        }
    }

    #[test]
    fn report_round_trip_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probs: Vec<f64> = (0..9).map(|_| rng.gen::<f64>()).collect();
        let p = pred(probs);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        emit_report(&p, &[], 3, a.path()).unwrap();
        emit_report(&p, &[], 3, b.path()).unwrap();
        let ra = std::fs::read(a.path().join("report.json")).unwrap();
        assert_eq!(ra, std::fs::read(b.path().join("report.json")).unwrap());
        assert_eq!(
            std::fs::read(a.path().join("curve.png")).unwrap(),
            std::fs::read(b.path().join("curve.png")).unwrap()
        );
        let back = Report::load(&a.path().join("report.json")).unwrap();
        assert_eq!(back.prediction().unwrap(), p);
        assert!(back.slices[0].marginal && back.slices[1].marginal && !back.slices[2].marginal && back.slices[8].marginal);
        let files: Vec<_> = std::fs::read_dir(a.path()).unwrap().collect();
        assert_eq!(files.len(), 2);
    }

    #[test]
    fn cam_overlays_are_linked_from_top_entries() {
        let (pz, cg) = models();
        let (t2, adc) = sequences(3, Region::Pz, 4);
        let p = predict_sequence(&pz, &cg, &t2, &adc).unwrap();
        let best = rank_slices(&p, 1).unwrap()[0];
        let samples = build_pairs(&t2, &adc, PairMode::T2AdcOnly, 0).unwrap();
        let sample = samples.iter().find(|s| s.slice_index == best.index).unwrap().clone();
        let model = if best.zone == Zone::Pz { &pz } else { &cg };
        let cam = ReportCam { zone: best.zone, heatmap: grad_cam(model, &sample).unwrap(), sample };
        let dir = tempfile::tempdir().unwrap();
        let report = emit_report(&p, &[cam], 2, dir.path()).unwrap();
        let name = report.top[0].cam_path.clone().unwrap();
        assert!(dir.path().join(&name).is_file());
        assert_eq!(report.top[1].cam_path, None);
    }

    #[test]
    fn variable_lengths() {
        let (pz, cg) = models();
        for n in [1usize, 2, 5, 17, 40] {
            let (t2, adc) = sequences(n, Region::Gland, n as u64);
            let p = predict_sequence(&pz, &cg, &t2, &adc).unwrap();
            assert_eq!((p.pz_probs.len(), p.top_slices.len()), (n, n));
        }
    }
}
