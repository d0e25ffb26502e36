//! Quick invariant checks on a tiny built-in phantom, run by `mpmri selftest`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{build_pairs, PairMode};
use crate::detector::{build_model, load_bundle, predict, save_bundle, ArchitectureDescriptor, Zone};
use crate::error::{Error, Result};
use crate::metrics::{roc_auc, trapezoid_auc};
use crate::phantom::{generate_patient, PhantomSpec};
use crate::pipeline::{prepare_volumes, SliceSelection};
use crate::preprocess::{n4_bias_correct, PreprocessConfig};
use crate::roi::{CropRect, PatchOptions, PatchSequence, Region};
use crate::triage::{predict_subregions, write_report_json, Report};
use crate::volume::{load_volume, save_volume, Modality};

type Check = (&'static str, Box<dyn Fn(u64, &std::path::Path) -> Result<bool>>);

fn checks() -> Vec<Check> {
    vec![
        ("phantom masks disjoint, lesion inside host, deterministic", Box::new(|seed, _| {
            let spec = PhantomSpec { lesion_prevalence: 1.0, slice_count_range: (8, 10), ..PhantomSpec::default() };
            let a = generate_patient(&spec, seed, "st")?;
            let host = match a.lesion_zone {
                Some(Zone::Pz) => &a.pz_mask,
                _ => &a.cg_mask,
            };
            let disjoint = a.pz_mask.data().iter().zip(a.cg_mask.data()).all(|(&x, &y)| x * y == 0.0);
            let inside = a.lesion_mask.data().iter().zip(host.data()).all(|(&l, &h)| l <= h);
            Ok(disjoint && inside && generate_patient(&spec, seed, "st")? == a)
        })),
        ("NIfTI save/load is lossless", Box::new(|seed, dir| {
            let p = generate_patient(&tiny(), seed, "st")?;
            let path = dir.join("t2.nii.gz");
            save_volume(&p.t2, &path)?;
            Ok(load_volume(&path)? == p.t2)
        })),
        ("N4 field positive, log-mean zero, smooth", Box::new(|seed, _| {
            let p = generate_patient(&tiny(), seed, "st")?;
            let cfg = PreprocessConfig { n4_iterations: 5, ..PreprocessConfig::default() };
            let (_, bias) = n4_bias_correct(&p.t2, &cfg, None)?;
            Ok(bias.field.iter().all(|&g| g > 0.0) && bias.mean_log().abs() < 1e-3 && bias.max_log_curvature() <= 0.5)
        })),
        ("pairing law 3n-2 / n", Box::new(|_, _| {
            let rect = CropRect { x_min: 0, x_max: 1, y_min: 0, y_max: 1, margin_px: 0 };
            for n in 1..=40 {
                let mk = |m| PatchSequence::new(vec![Array2::zeros((2, 2)); n], (0..n).collect(), Region::Pz, m, "st", rect);
                let (t2, adc) = (mk(Modality::T2)?, mk(Modality::Adc)?);
                if build_pairs(&t2, &adc, PairMode::Mixed, 0)?.len() != 3 * n - 2
                    || build_pairs(&t2, &adc, PairMode::T2AdcOnly, 0)?.len() != n
                {
                    return Ok(false);
                }
            }
            Ok(true)
        })),
        ("trapezoid AUC equals rank AUC", Box::new(|seed, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let n = rng.gen_range(2..30);
                let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
                labels[0] = 0;
                labels[1] = 1;
                let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
                if roc_auc(&labels, &scores)? != trapezoid_auc(&labels, &scores)? {
                    return Ok(false);
                }
            }
            Ok(roc_auc(&[1, 0, 1, 0], &[0.9, 0.8, 0.7, 0.1])? == 0.75)
        })),
        ("pipeline, triage and bundle round trips", Box::new(|seed, dir| {
            let p = generate_patient(&tiny(), seed, "st")?;
            let cfg = PreprocessConfig { n4_iterations: 3, ..PreprocessConfig::default() };
            let masks = [(Region::Pz, p.pz_mask.clone()), (Region::Cg, p.cg_mask.clone())];
            let prep = prepare_volumes(&p.t2, &p.adc, &masks, None, &cfg)?;
            let opts = PatchOptions { out_size: (16, 16), ..PatchOptions::default() };
            let pzs = prep.sequences(Region::Pz, SliceSelection::AnyMask, &opts)?;
            let cgs = prep.sequences(Region::Cg, SliceSelection::AnyMask, &opts)?;
            let desc = ArchitectureDescriptor::minimal(16, 16);
            let pz = build_model(&desc, Zone::Pz, seed)?;
            let cg = build_model(&desc, Zone::Cg, seed + 1)?;
            save_bundle(&pz, &dir.join("pz"))?;
            let back = load_bundle(&dir.join("pz"))?;
            let samples = build_pairs(&pzs.0, &pzs.1, PairMode::T2AdcOnly, 0)?;
            let same_preds = predict(&back, &samples)? == predict(&pz, &samples)?;
            let pred = predict_subregions(&pz, &cg, (&pzs.0, &pzs.1), (&cgs.0, &cgs.1))?;
            write_report_json(&pred, 3, &dir.join("report"))?;
            let reloaded = Report::load(&dir.join("report").join("report.json"))?.prediction()?;
            Ok(same_preds && reloaded == pred && pred.len() == pzs.0.len())
        })),
    ]
}

fn tiny() -> PhantomSpec {
    PhantomSpec { in_plane: 48, spacing: [1.0, 1.0, 3.6], slice_count_range: (8, 10), lesion_prevalence: 1.0, ..PhantomSpec::default() }
}

/// Prints one PASS/FAIL line per check; fails if any check fails.
pub fn run(seed: u64) -> Result<()> {
    let dir = std::env::temp_dir().join(format!("mpmri-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::unwritable(&dir, e))?;
    let mut failed = Vec::new();
    for (name, check) in checks() {
        let ok = match check(seed, &dir) {
            Ok(ok) => ok,
            Err(e) => {
                println!("      {name}: {e}");
                false
            }
        };
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::SelftestFailed(failed.join("; ")))
    }
}
