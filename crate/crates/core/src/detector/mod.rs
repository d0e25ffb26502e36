//! Two-channel convolutional malignancy detector for one zone.

mod descriptor;
mod layers;
mod network;
mod train;

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

pub use descriptor::{
    ArchitectureDescriptor, ConvBlockSpec, NormKind, DENSE_CHOICES, FILTER_CHOICES, KERNEL_CHOICES, MAX_BLOCKS,
};
pub use layers::Real;
pub use network::{ForwardCache, Mode, Network};
pub use train::{
    batch_gradient, fit, predict_probs, weighted_bce, Adam, AucValidator, EarlyStopping, EpochRecord,
    ScriptedValidator, TrainConfig, TrainingHistory, Validator,
};

use crate::dataset::{AugmentationPolicy, PairMode, PairedSample};
use crate::error::{Error, Result};
use crate::roi::Region;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Zone {
    #[serde(rename = "PZ")]
    Pz,
    #[serde(rename = "CG")]
    Cg,
}

impl Zone {
    pub const BOTH: [Zone; 2] = [Zone::Pz, Zone::Cg];

    pub fn region(self) -> Region {
        match self {
            Zone::Pz => Region::Pz,
            Zone::Cg => Region::Cg,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Zone::Pz => "PZ",
            Zone::Cg => "CG",
        }
    }
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub zone: Zone,
    pub network: Network<f32>,
    pub history: TrainingHistory,
    pub augmentation: AugmentationPolicy,
    /// Pairing mode the model was trained with; inference always scores
    /// T2-ADC pairs.
    pub mode: PairMode,
}

impl DetectorModel {
    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        self.network.descriptor()
    }
}

pub fn build_model(desc: &ArchitectureDescriptor, zone: Zone, seed: u64) -> Result<DetectorModel> {
    Ok(DetectorModel {
        zone,
        network: Network::new(desc, seed)?,
        history: TrainingHistory::default(),
        augmentation: AugmentationPolicy::OFF,
        mode: PairMode::T2AdcOnly,
    })
}

/// Trains in place against sample-level validation AUC. Both splits must
/// contain both classes.
pub fn train(
    mut model: DetectorModel,
    train_samples: &[PairedSample],
    val_samples: &[PairedSample],
    cfg: &TrainConfig,
) -> Result<DetectorModel> {
    crate::dataset::class_weights(&train::labels_of(val_samples))?;
    let mut validator = AucValidator { samples: val_samples };
    model.history = fit(&mut model.network, train_samples, &model.augmentation, cfg, &mut validator)?;
    Ok(model)
}

pub fn predict(model: &DetectorModel, samples: &[PairedSample]) -> Result<Vec<f64>> {
    predict_probs(&model.network, samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleDescriptor {
    format_version: u32,
    zone: Zone,
    architecture: ArchitectureDescriptor,
    augmentation: AugmentationPolicy,
    mode: PairMode,
}

const WEIGHTS_MAGIC: &[u8; 4] = b"MPMW";
const BUNDLE_VERSION: u32 = 1;

fn write_tensors(out: &mut impl Write, tensors: &[ArrayD<f32>]) -> std::io::Result<()> {
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tensors(r: &mut impl Read) -> std::io::Result<Vec<ArrayD<f32>>> {
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let nd = read_u32(r)? as usize;
        let shape = (0..nd).map(|_| read_u32(r).map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length matches shape"));
    }
    Ok(out)
}

/// Writes `descriptor.json`, `weights.bin` and `history.json` into `dir`
/// (created if needed).
pub fn save_bundle(model: &DetectorModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::unwritable(dir, e))?;
    let desc = BundleDescriptor {
        format_version: BUNDLE_VERSION,
        zone: model.zone,
        architecture: model.descriptor().clone(),
        augmentation: model.augmentation,
        mode: model.mode,
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::unwritable(p, e))
    };
    write("descriptor.json", (serde_json::to_string_pretty(&desc)? + "\n").as_bytes())?;
    write("history.json", (serde_json::to_string_pretty(&model.history)? + "\n").as_bytes())?;
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    write_tensors(&mut buf, model.network.params())?;
    write_tensors(&mut buf, model.network.buffers())?;
    write("weights.bin", &buf)
}

pub fn load_bundle(dir: &Path) -> Result<DetectorModel> {
    let files = ["descriptor.json", "weights.bin", "history.json"];
    if !dir.is_dir() || files.iter().any(|f| !dir.join(f).is_file()) {
        return Err(Error::MissingModelBundle(dir.to_path_buf()));
    }
    let bad = |m: String| Error::InvalidDescriptor(format!("{}: {m}", dir.display()));
    let desc: BundleDescriptor = serde_json::from_str(&std::fs::read_to_string(dir.join("descriptor.json"))?)
        .map_err(|e| bad(e.to_string()))?;
    let history: TrainingHistory = serde_json::from_str(&std::fs::read_to_string(dir.join("history.json"))?)
        .map_err(|e| bad(e.to_string()))?;
    let bytes = std::fs::read(dir.join("weights.bin"))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic != WEIGHTS_MAGIC || read_u32(&mut r).map_err(|e| bad(e.to_string()))? != BUNDLE_VERSION {
        return Err(bad("weights.bin has an unknown header".into()));
    }
    let params = read_tensors(&mut r).map_err(|e| bad(format!("weights.bin: {e}")))?;
    let buffers = read_tensors(&mut r).map_err(|e| bad(format!("weights.bin: {e}")))?;
    let mut network = Network::<f32>::new(&desc.architecture, 0)?;
    let fits = |a: &[ArrayD<f32>], b: &[ArrayD<f32>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
    if !fits(network.params(), &params) || !fits(network.buffers(), &buffers) {
        return Err(bad("weights do not match the architecture".into()));
    }
    network.params_mut().clone_from_slice(&params);
    network.buffers_mut().clone_from_slice(&buffers);
    Ok(DetectorModel {
        zone: desc.zone,
        network,
        history,
        augmentation: desc.augmentation,
        mode: desc.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Pairing;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples(n: usize, h: usize) -> Vec<PairedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        (0..n)
            .map(|i| PairedSample {
                channels: Array3::from_shape_fn((2, h, h), |_| rng.gen_range(-2.0..2.0)),
                pairing: Pairing::T2Adc,
                label: (i % 2) as u8,
                patient_id: "p".into(),
                slice_index: i,
                region: Region::Cg,
            })
            .collect()
    }

    #[test]
    fn minimal_model_gives_probabilities() {
        let m = build_model(&ArchitectureDescriptor::minimal(64, 64), Zone::Pz, 1).unwrap();
        let p = predict(&m, &samples(4, 64)).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn batch_and_single_predictions_agree() {
        let m = build_model(&ArchitectureDescriptor::minimal(16, 16), Zone::Cg, 2).unwrap();
        let mut s = samples(5, 16);
        s.push(s[2].clone());
        let all = predict(&m, &s).unwrap();
        for (i, x) in s.iter().enumerate() {
            let one = predict(&m, std::slice::from_ref(x)).unwrap()[0];
            assert!((one - all[i]).abs() < 1e-5);
        }
        assert_eq!(all[2], all[5]);
        assert_eq!(all, predict(&m, &s).unwrap());
    }

    #[test]
    fn shape_mismatch_reported() {
        let m = build_model(&ArchitectureDescriptor::minimal(16, 16), Zone::Cg, 2).unwrap();
        assert!(matches!(predict(&m, &samples(2, 12)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_model(&ArchitectureDescriptor::minimal(16, 16), Zone::Pz, 5).unwrap();
        m.augmentation = AugmentationPolicy { flip: true, max_translate: 0.05, contrast: 0.15 };
        m.network.buffers_mut()[0].fill(0.25);
        save_bundle(&m, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, m);
        let s = samples(3, 16);
        assert_eq!(predict(&back, &s).unwrap(), predict(&m, &s).unwrap());
    }

    #[test]
    fn missing_bundle() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bundle(&dir.path().join("nope")), Err(Error::MissingModelBundle(_))));
    }
}
