//! Manifest to patch sequences: alignment, resampling, bias correction,
//! slice selection and region cropping.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{assign_label, CohortManifest, LabeledSequence, ManifestEntry, RegionCohort};
use crate::error::{Error, Result};
use crate::preprocess::{n4_bias_correct, resample_isotropic, resample_to_reference, Interp, PreprocessConfig};
use crate::roi::{crop_and_resize, foreground_slices, volume_bbox, PatchOptions, PatchSequence, Region};
use crate::volume::{load_volume_as, save_volume, ImageVolume, Modality};

/// One patient's volumes on the processed (isotropic, bias-corrected) grid.
#[derive(Debug, Clone)]
pub struct PreparedPatient {
    pub patient_id: String,
    pub t2: ImageVolume,
    pub adc: ImageVolume,
    pub masks: BTreeMap<Region, ImageVolume>,
    pub lesion: Option<ImageVolume>,
    /// Processed slice nearest the centre of each native slice.
    pub native_to_processed: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedMeta {
    patient_id: String,
    regions: Vec<Region>,
    has_lesion: bool,
    native_to_processed: Vec<usize>,
}

/// For every slice of `native`, the slice of `processed` whose centre lies
/// closest to the native slice centre.
pub fn native_slice_map(native: &ImageVolume, processed: &ImageVolume) -> Vec<usize> {
    let axis = native.slice_axis();
    let shape = native.shape();
    let pax = processed.slice_axis();
    (0..native.num_slices())
        .map(|k| {
            let mut idx = [0.0; 3];
            for a in 0..3 {
                idx[a] = if a == axis { k as f64 } else { (shape[a] as f64 - 1.0) / 2.0 };
            }
            let v = processed.world_to_voxel(native.voxel_to_world(idx));
            (v[pax].round().max(0.0) as usize).min(processed.num_slices() - 1)
        })
        .collect()
}

fn to_processed(vol: &ImageVolume, reference: &ImageVolume, cfg: &PreprocessConfig) -> Result<ImageVolume> {
    let interp = if vol.modality().is_mask() { Interp::Nearest } else { Interp::Trilinear };
    let aligned = if vol.same_grid(reference, 1e-6) {
        vol.clone()
    } else {
        resample_to_reference(vol, reference, interp)?
    };
    resample_isotropic(&aligned, cfg.target_spacing, interp)
}

fn correct(vol: ImageVolume, cfg: &PreprocessConfig) -> Result<ImageVolume> {
    if !cfg.n4 {
        return Ok(vol);
    }
    // Interpolation never goes negative, but clamp float dust anyway.
    let vol = if vol.data().iter().any(|&v| v < 0.0) { vol.with_data(vol.data().mapv(|v| v.max(0.0)))? } else { vol };
    Ok(n4_bias_correct(&vol, cfg, None)?.0)
}

/// Aligns ADC and masks to the T2 grid, resamples to the target spacing and
/// bias-corrects both images.
pub fn prepare_volumes(
    t2: &ImageVolume,
    adc: &ImageVolume,
    masks: &[(Region, ImageVolume)],
    lesion: Option<&ImageVolume>,
    cfg: &PreprocessConfig,
) -> Result<PreparedPatient> {
    cfg.validate()?;
    let t2_iso = resample_isotropic(t2, cfg.target_spacing, Interp::Trilinear)?;
    let adc_iso = to_processed(adc, t2, cfg)?;
    let masks = masks
        .iter()
        .map(|(r, m)| Ok((*r, to_processed(m, t2, cfg)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let lesion = lesion.map(|l| to_processed(l, t2, cfg)).transpose()?;
    let native_to_processed = native_slice_map(t2, &t2_iso);
    let (t2c, adcc) = rayon::join(|| correct(t2_iso, cfg), || correct(adc_iso, cfg));
    Ok(PreparedPatient {
        patient_id: t2.patient_id().to_string(),
        t2: t2c?,
        adc: adcc?,
        masks,
        lesion,
        native_to_processed,
    })
}

/// Loads and prepares one patient from its manifest entries (one per region).
pub fn prepare_entries(entries: &[&ManifestEntry], cfg: &PreprocessConfig) -> Result<PreparedPatient> {
    let first = entries.first().ok_or(Error::EmptySequence)?;
    let pid = first.patient_id.clone();
    let t2 = load_volume_as(&first.t2_path, Modality::T2)?.with_patient_id(&pid);
    let adc = load_volume_as(&first.adc_path, Modality::Adc)?.with_patient_id(&pid);
    let masks = entries
        .iter()
        .map(|e| Ok((e.region, load_volume_as(&e.mask_path, e.region.mask_modality())?)))
        .collect::<Result<Vec<_>>>()?;
    let lesion = match &first.lesion_path {
        Some(p) => Some(load_volume_as(p, Modality::MaskLesion)?),
        None => None,
    };
    prepare_volumes(&t2, &adc, &masks, lesion.as_ref(), cfg)
}

fn by_patient(manifest: &CohortManifest) -> BTreeMap<&str, Vec<&ManifestEntry>> {
    let mut groups: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        groups.entry(e.patient_id.as_str()).or_default().push(e);
    }
    groups
}

/// Prepares every patient in the manifest (parallel across patients), in
/// patient-id order.
pub fn prepare_cohort(manifest: &CohortManifest, cfg: &PreprocessConfig) -> Result<Vec<PreparedPatient>> {
    let groups: Vec<Vec<&ManifestEntry>> = by_patient(manifest).into_values().collect();
    groups.par_iter().map(|g| prepare_entries(g, cfg)).collect()
}

/// Which native slices to crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceSelection {
    /// Slices where the region itself has foreground (training).
    Region,
    /// Slices where any supplied mask has foreground (triage).
    AnyMask,
}

impl PreparedPatient {
    /// Processed slice indices for `selection`, paired with native indices.
    pub fn selected_slices(&self, region: Region, selection: SliceSelection) -> Result<Vec<(usize, usize)>> {
        let masks: Vec<&ImageVolume> = match selection {
            SliceSelection::Region => vec![self.mask(region)?],
            SliceSelection::AnyMask => self.masks.values().collect(),
        };
        let fg: Vec<Vec<usize>> = masks.iter().map(|m| foreground_slices(m)).collect();
        Ok(self
            .native_to_processed
            .iter()
            .enumerate()
            .filter(|(_, p)| fg.iter().any(|f| f.binary_search(p).is_ok()))
            .map(|(n, &p)| (n, p))
            .collect())
    }

    pub fn mask(&self, region: Region) -> Result<&ImageVolume> {
        self.masks
            .get(&region)
            .ok_or_else(|| Error::InvalidManifest(format!("{}: no {region} mask", self.patient_id)))
    }

    /// The gland mask if supplied, else the union of the sub-region masks.
    pub fn gland_mask(&self) -> Result<ImageVolume> {
        if let Some(g) = self.masks.get(&Region::Gland) {
            return Ok(g.clone());
        }
        let mut it = self.masks.values();
        let first = it.next().ok_or_else(|| Error::InvalidManifest(format!("{}: no masks", self.patient_id)))?;
        let mut data = first.data().clone();
        for m in it {
            data.zip_mut_with(m.data(), |a, &b| *a = a.max(b));
        }
        first.with_data(data)?.with_modality(Modality::MaskGland)
    }

    /// Aligned T2/ADC patch sequences of `region`, cropped by the region's
    /// sequence-wide bounding box and indexed by native slice.
    pub fn sequences(
        &self,
        region: Region,
        selection: SliceSelection,
        opts: &PatchOptions,
    ) -> Result<(PatchSequence, PatchSequence)> {
        let mask = match region {
            Region::Gland => self.gland_mask()?,
            r => self.mask(r)?.clone(),
        };
        let rect = volume_bbox(&mask, opts.margin_px)?;
        let picks = match (region, selection) {
            (Region::Gland, SliceSelection::Region) => self.selected_slices(Region::Gland, SliceSelection::AnyMask)?,
            (r, s) => self.selected_slices(r, s)?,
        };
        if picks.is_empty() {
            return Err(Error::EmptyMask(format!("{}: no {region} slices", self.patient_id)));
        }
        let processed: Vec<usize> = picks.iter().map(|p| p.1).collect();
        let native: Vec<usize> = picks.iter().map(|p| p.0).collect();
        let seqs = crop_and_resize(&[&self.t2, &self.adc], rect, &processed, region, opts)?;
        let reindex = |s: &PatchSequence| {
            PatchSequence::new(s.patches().to_vec(), native.clone(), region, s.modality(), &self.patient_id, rect)
        };
        Ok((reindex(&seqs[0])?, reindex(&seqs[1])?))
    }

    /// Writes every volume as NIfTI plus `slices.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::unwritable(dir, e))?;
        save_volume(&self.t2, &dir.join("t2.nii.gz"))?;
        save_volume(&self.adc, &dir.join("adc.nii.gz"))?;
        for (r, m) in &self.masks {
            save_volume(m, &dir.join(format!("mask_{r}.nii.gz")))?;
        }
        if let Some(l) = &self.lesion {
            save_volume(l, &dir.join("lesion.nii.gz"))?;
        }
        let meta = SavedMeta {
            patient_id: self.patient_id.clone(),
            regions: self.masks.keys().copied().collect(),
            has_lesion: self.lesion.is_some(),
            native_to_processed: self.native_to_processed.clone(),
        };
        let path = dir.join("slices.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::unwritable(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("slices.json");
        let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.clone()))?;
        let meta: SavedMeta = serde_json::from_str(&text)?;
        let masks = meta
            .regions
            .iter()
            .map(|&r| Ok((r, load_volume_as(&dir.join(format!("mask_{r}.nii.gz")), r.mask_modality())?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let lesion = if meta.has_lesion {
            Some(load_volume_as(&dir.join("lesion.nii.gz"), Modality::MaskLesion)?)
        } else {
            None
        };
        Ok(Self {
            t2: load_volume_as(&dir.join("t2.nii.gz"), Modality::T2)?,
            adc: load_volume_as(&dir.join("adc.nii.gz"), Modality::Adc)?,
            patient_id: meta.patient_id,
            masks,
            lesion,
            native_to_processed: meta.native_to_processed,
        })
    }

    /// Native slices whose processed counterpart touches the lesion mask.
    pub fn lesion_native_slices(&self) -> Vec<usize> {
        let Some(l) = &self.lesion else { return Vec::new() };
        let fg = foreground_slices(l);
        self.native_to_processed
            .iter()
            .enumerate()
            .filter(|(_, p)| fg.binary_search(p).is_ok())
            .map(|(n, _)| n)
            .collect()
    }
}

/// Labelled training sequences for one region across prepared patients.
pub fn region_cohort(
    patients: &[PreparedPatient],
    manifest: &CohortManifest,
    region: Region,
    opts: &PatchOptions,
    val_fraction: f64,
    seed: u64,
) -> Result<RegionCohort> {
    let labels: BTreeMap<&str, i64> = manifest
        .entries
        .iter()
        .filter(|e| e.region == region)
        .map(|e| (e.patient_id.as_str(), e.ggg))
        .collect();
    let sequences = patients
        .par_iter()
        .filter_map(|p| labels.get(p.patient_id.as_str()).map(|&g| (p, g)))
        .map(|(p, ggg)| {
            let (t2, adc) = p.sequences(region, SliceSelection::Region, opts)?;
            Ok(LabeledSequence { t2, adc, label: assign_label(ggg)? })
        })
        .collect::<Result<Vec<_>>>()?;
    RegionCohort::new(region, sequences, val_fraction, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_patient, PhantomSpec};

    fn quick_cfg() -> PreprocessConfig {
        PreprocessConfig { n4_iterations: 3, ..PreprocessConfig::default() }
    }

    fn patient(seed: u64) -> (crate::phantom::PhantomPatient, PreparedPatient) {
        let spec = PhantomSpec { lesion_prevalence: 1.0, ..PhantomSpec::default() };
        let p = generate_patient(&spec, seed, "pp").unwrap();
        let masks = vec![(Region::Pz, p.pz_mask.clone()), (Region::Cg, p.cg_mask.clone())];
        let prep = prepare_volumes(&p.t2, &p.adc, &masks, Some(&p.lesion_mask), &quick_cfg()).unwrap();
        (p, prep)
    }

    #[test]
    fn native_centres_map_to_nearest_processed_slice() {
        let (p, prep) = patient(3);
        assert_eq!(prep.t2.spacing(), [1.0, 1.0, 1.0]);
        assert_eq!(prep.native_to_processed.len(), p.t2.num_slices());
        for (k, &j) in prep.native_to_processed.iter().enumerate() {
            // native centre at 3.6 k mm, processed centres at integer mm
            assert_eq!(j, (3.6 * k as f64).round() as usize);
        }
    }

    #[test]
    fn region_sequences_use_native_indices() {
        let (p, prep) = patient(4);
        let opts = PatchOptions { out_size: (32, 32), ..PatchOptions::default() };
        let (t2, adc) = prep.sequences(Region::Pz, SliceSelection::Region, &opts).unwrap();
        assert_eq!(t2.slice_indices(), adc.slice_indices());
        assert_eq!(t2.patch_shape(), (32, 32));
        let native_fg = foreground_slices(&p.pz_mask);
        assert!(t2.slice_indices().iter().all(|k| native_fg.contains(k)));
        let (g, _) = prep.sequences(Region::Gland, SliceSelection::Region, &opts).unwrap();
        let (cg, _) = prep.sequences(Region::Cg, SliceSelection::AnyMask, &opts).unwrap();
        assert_eq!(g.slice_indices(), cg.slice_indices());
        assert!(!prep.lesion_native_slices().is_empty());
    }

    #[test]
    fn prepared_patient_round_trip() {
        let (_, prep) = patient(5);
        let dir = tempfile::tempdir().unwrap();
        prep.save(dir.path()).unwrap();
        let back = PreparedPatient::load(dir.path()).unwrap();
        assert_eq!(back.t2, prep.t2);
        assert_eq!(back.adc, prep.adc);
        assert_eq!(back.masks, prep.masks);
        assert_eq!(back.lesion, prep.lesion);
        assert_eq!(back.native_to_processed, prep.native_to_processed);
    }
}
