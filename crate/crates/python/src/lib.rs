//! Python bindings: volumes, phantoms, preprocessing, detectors and triage.

use std::path::PathBuf;

use mpmri_core::config::RunConfig;
use mpmri_core::dataset::{build_pairs, PairMode};
use mpmri_core::detector::{self, ArchitectureDescriptor, DetectorModel, Zone};
use mpmri_core::phantom::{self, PhantomSpec};
use mpmri_core::pipeline::{prepare_volumes, PreparedPatient, SliceSelection};
use mpmri_core::preprocess::{n4_bias_correct, PreprocessConfig};
use mpmri_core::roi::{CropRect, PatchOptions, PatchSequence, Region};
use mpmri_core::triage::{build_report, emit_report};
use mpmri_core::volume::{load_volume, save_volume, ImageVolume, Modality};
use ndarray::{Array2, Array3, Axis};
use numpy::{IntoPyArray, PyArray1, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn err(e: mpmri_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = mpmri_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn parse_zone(s: &str) -> PyResult<Zone> {
    match s {
        "PZ" => Ok(Zone::Pz),
        "CG" => Ok(Zone::Cg),
        other => Err(PyValueError::new_err(format!("unknown zone {other:?}; expected PZ or CG"))),
    }
}

/// Round-trips keyword arguments through JSON into a serde config type.
fn from_kwargs<T: serde::de::DeserializeOwned + Default>(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(kw) = kwargs else { return Ok(T::default()) };
    let text: String = py.import("json")?.call_method1("dumps", (kw,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn json_to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(name = "Volume", module = "mpmri", frozen)]
#[derive(Clone)]
struct PyVolume(ImageVolume);

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (data, spacing, modality, patient_id = "anon"))]
    fn new(data: PyReadonlyArray3<'_, f32>, spacing: [f64; 3], modality: &str, patient_id: &str) -> PyResult<Self> {
        let v = ImageVolume::from_spacing(data.as_array().to_owned(), spacing, parse(modality)?, patient_id).map_err(err)?;
        Ok(Self(v))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_volume(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_volume(&self.0, &path).map_err(err)
    }

    #[getter]
    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.0.data().clone().into_pyarray(py)
    }

    #[getter]
    fn shape(&self) -> [usize; 3] {
        self.0.shape()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.0.spacing()
    }

    #[getter]
    fn affine<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        let a = self.0.affine();
        Array2::from_shape_fn((4, 4), |(r, c)| a[(r, c)]).into_pyarray(py)
    }

    #[getter]
    fn modality(&self) -> String {
        self.0.modality().to_string()
    }

    #[getter]
    fn patient_id(&self) -> String {
        self.0.patient_id().to_string()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Volume({}, {:?}, spacing={:?})", self.0.modality(), self.0.shape(), self.0.spacing())
    }
}

/// Generates one phantom patient; keyword arguments override `PhantomSpec`
/// fields. Returns a dict of volumes and labels.
#[pyfunction]
#[pyo3(signature = (seed, patient_id = "PH000", **spec))]
fn generate_patient<'py>(py: Python<'py>, seed: u64, patient_id: &str, spec: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let spec: PhantomSpec = from_kwargs(py, spec)?;
    let p = phantom::generate_patient(&spec, seed, patient_id).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("gland", PyVolume(p.gland_mask()))?;
    d.set_item("patient_id", p.patient_id)?;
    d.set_item("t2", PyVolume(p.t2))?;
    d.set_item("adc", PyVolume(p.adc))?;
    d.set_item("pz", PyVolume(p.pz_mask))?;
    d.set_item("cg", PyVolume(p.cg_mask))?;
    d.set_item("lesion", PyVolume(p.lesion_mask))?;
    d.set_item("ggg", p.ggg)?;
    d.set_item("pz_ggg", p.pz_ggg)?;
    d.set_item("cg_ggg", p.cg_ggg)?;
    d.set_item("lesion_zone", p.lesion_zone.map(|z| z.to_string()))?;
    d.set_item("lesion_slice", p.lesion_slice)?;
    Ok(d)
}

/// Writes a phantom cohort under `out_dir`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, **spec))]
fn generate_cohort(py: Python<'_>, out_dir: PathBuf, spec: Option<&Bound<'_, PyDict>>) -> PyResult<PathBuf> {
    let spec: PhantomSpec = from_kwargs(py, spec)?;
    py.allow_threads(|| phantom::generate_cohort(&spec, &out_dir)).map_err(err)?;
    Ok(out_dir.join("manifest.json"))
}

/// Returns the corrected volume and the multiplicative bias field.
#[pyfunction]
#[pyo3(signature = (volume, **config))]
fn bias_correct<'py>(
    py: Python<'py>,
    volume: &PyVolume,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyVolume, Bound<'py, PyArray3<f32>>)> {
    let cfg: PreprocessConfig = from_kwargs(py, config)?;
    let (v, bias) = py.allow_threads(|| n4_bias_correct(&volume.0, &cfg, None)).map_err(err)?;
    Ok((PyVolume(v), bias.field.into_pyarray(py)))
}

#[pyfunction]
fn roc_auc(labels: Vec<u8>, scores: Vec<f64>) -> PyResult<f64> {
    mpmri_core::metrics::roc_auc(&labels, &scores).map_err(err)
}

#[pyfunction]
fn trapezoid_auc(labels: Vec<u8>, scores: Vec<f64>) -> PyResult<f64> {
    mpmri_core::metrics::trapezoid_auc(&labels, &scores).map_err(err)
}

/// Inclusive `(x_min, x_max, y_min, y_max)` over a list of 2D masks.
#[pyfunction]
#[pyo3(signature = (masks, margin_px = 5))]
fn sequence_bbox(masks: Vec<PyReadonlyArray2<'_, f32>>, margin_px: usize) -> PyResult<(usize, usize, usize, usize)> {
    let views: Vec<_> = masks.iter().map(|m| m.as_array()).collect();
    let r = mpmri_core::roi::sequence_bbox(&views, margin_px).map_err(err)?;
    Ok((r.x_min, r.x_max, r.y_min, r.y_max))
}

fn stack_patches(a: &Array3<f32>) -> Vec<Array2<f32>> {
    a.axis_iter(Axis(0)).map(|p| p.to_owned()).collect()
}

fn sequences_from_arrays(
    t2: &Array3<f32>,
    adc: &Array3<f32>,
    slice_indices: Option<Vec<usize>>,
    region: Region,
) -> PyResult<(PatchSequence, PatchSequence)> {
    let (n, h, w) = t2.dim();
    let idx = slice_indices.unwrap_or_else(|| (0..n).collect());
    let rect = CropRect { x_min: 0, x_max: h.saturating_sub(1), y_min: 0, y_max: w.saturating_sub(1), margin_px: 0 };
    let mk = |a: &Array3<f32>, m| PatchSequence::new(stack_patches(a), idx.clone(), region, m, "py", rect).map_err(err);
    Ok((mk(t2, Modality::T2)?, mk(adc, Modality::Adc)?))
}

#[pyclass(name = "Detector", module = "mpmri")]
#[derive(Clone)]
struct PyDetector(DetectorModel);

#[pymethods]
impl PyDetector {
    /// Untrained minimal detector for `(height, width)` patches.
    #[staticmethod]
    #[pyo3(signature = (zone, height, width, seed = 0))]
    fn untrained(zone: &str, height: usize, width: usize, seed: u64) -> PyResult<Self> {
        let desc = ArchitectureDescriptor::minimal(height, width);
        detector::build_model(&desc, parse_zone(zone)?, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        detector::load_bundle(&dir).map(Self).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        detector::save_bundle(&self.0, &dir).map_err(err)
    }

    #[getter]
    fn zone(&self) -> String {
        self.0.zone.to_string()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        self.0.descriptor().input_shape
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.network.num_parameters()
    }

    /// Training history as plain Python data.
    #[getter]
    fn history(&self, py: Python<'_>) -> PyResult<PyObject> {
        json_to_py(py, &self.0.history)
    }

    /// Malignancy probability of each T2-ADC pair; inputs are `(n, h, w)`.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        t2: PyReadonlyArray3<'py, f32>,
        adc: PyReadonlyArray3<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray1<f64>>> {
        let (t2, adc) = sequences_from_arrays(&t2.as_array().to_owned(), &adc.as_array().to_owned(), None, self.0.zone.region())?;
        let samples = build_pairs(&t2, &adc, PairMode::T2AdcOnly, 0).map_err(err)?;
        let probs = py.allow_threads(|| detector::predict(&self.0, &samples)).map_err(err)?;
        Ok(probs.into_pyarray(py))
    }

    /// Normalised Grad-CAM map and probability for one T2/ADC patch pair.
    fn grad_cam<'py>(
        &self,
        py: Python<'py>,
        t2: PyReadonlyArray2<'py, f32>,
        adc: PyReadonlyArray2<'py, f32>,
    ) -> PyResult<(Bound<'py, PyArray2<f32>>, f64)> {
        let t2 = t2.as_array().to_owned().insert_axis(Axis(0));
        let adc = adc.as_array().to_owned().insert_axis(Axis(0));
        let (t2, adc) = sequences_from_arrays(&t2, &adc, None, self.0.zone.region())?;
        let sample = build_pairs(&t2, &adc, PairMode::T2AdcOnly, 0).map_err(err)?.remove(0);
        let cam = mpmri_core::explain::grad_cam(&self.0, &sample).map_err(err)?;
        Ok((cam.values.into_pyarray(py), cam.prediction))
    }

    fn __repr__(&self) -> String {
        format!("Detector({}, input={:?})", self.0.zone, self.0.descriptor().input_shape)
    }
}

#[pyclass(name = "PreparedPatient", module = "mpmri")]
struct PyPrepared(PreparedPatient);

#[pymethods]
impl PyPrepared {
    #[getter]
    fn patient_id(&self) -> String {
        self.0.patient_id.clone()
    }

    #[getter]
    fn t2(&self) -> PyVolume {
        PyVolume(self.0.t2.clone())
    }

    #[getter]
    fn adc(&self) -> PyVolume {
        PyVolume(self.0.adc.clone())
    }

    #[getter]
    fn regions(&self) -> Vec<String> {
        self.0.masks.keys().map(|r| r.to_string()).collect()
    }

    /// `(t2, adc, native_slice_indices)` patch stacks for `region`.
    #[pyo3(signature = (region, out_size = (64, 64)))]
    fn sequences<'py>(
        &self,
        py: Python<'py>,
        region: &str,
        out_size: (usize, usize),
    ) -> PyResult<(Bound<'py, PyArray3<f32>>, Bound<'py, PyArray3<f32>>, Vec<usize>)> {
        let opts = PatchOptions { out_size, ..PatchOptions::default() };
        let (t2, adc) = self.0.sequences(parse(region)?, SliceSelection::AnyMask, &opts).map_err(err)?;
        let stack = |s: &PatchSequence| {
            let views: Vec<_> = s.patches().iter().map(|p| p.view()).collect();
            ndarray::stack(Axis(0), &views).expect("equal patch shapes")
        };
        Ok((stack(&t2).into_pyarray(py), stack(&adc).into_pyarray(py), t2.slice_indices().to_vec()))
    }
}

/// Resamples and bias-corrects a patient. Masks are optional; pass `gland`
/// alone for whole-gland triage.
#[pyfunction]
#[pyo3(signature = (t2, adc, pz = None, cg = None, gland = None, lesion = None, **config))]
#[allow(clippy::too_many_arguments)]
fn prepare(
    py: Python<'_>,
    t2: &PyVolume,
    adc: &PyVolume,
    pz: Option<&PyVolume>,
    cg: Option<&PyVolume>,
    gland: Option<&PyVolume>,
    lesion: Option<&PyVolume>,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<PyPrepared> {
    let cfg: PreprocessConfig = from_kwargs(py, config)?;
    let masks: Vec<(Region, ImageVolume)> = [(Region::Pz, pz), (Region::Cg, cg), (Region::Gland, gland)]
        .into_iter()
        .filter_map(|(r, m)| m.map(|m| (r, m.0.clone())))
        .collect();
    let lesion = lesion.map(|l| l.0.clone());
    py.allow_threads(|| prepare_volumes(&t2.0, &adc.0, &masks, lesion.as_ref(), &cfg))
        .map(PyPrepared)
        .map_err(err)
}

/// Scores every slice with both detectors and returns the report as a dict.
/// With `out_dir`, also writes report.json, curve.png and CAM overlays.
#[pyfunction]
#[pyo3(signature = (patient, pz, cg, threshold = 0.5, top_k = 3, out_dir = None))]
fn triage(
    py: Python<'_>,
    patient: &PyPrepared,
    pz: &PyDetector,
    cg: &PyDetector,
    threshold: f64,
    top_k: usize,
    out_dir: Option<PathBuf>,
) -> PyResult<PyObject> {
    let mut cfg = RunConfig::default();
    let (_, h, w) = pz.0.descriptor().input_shape;
    cfg.dataset.patch.out_size = (h, w);
    cfg.triage.threshold = threshold;
    cfg.triage.top_k = top_k;
    let report = py
        .allow_threads(|| {
            let (pred, cams) = mpmri_core::cli::triage_patient(&patient.0, &pz.0, &cg.0, &cfg)?;
            let k = top_k.min(pred.len());
            match &out_dir {
                Some(dir) => emit_report(&pred, &cams, k, dir),
                None => build_report(&pred, &[], k),
            }
        })
        .map_err(err)?;
    json_to_py(py, &report)
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("mpmri".to_string()).chain(args).collect();
    py.allow_threads(|| mpmri_core::cli::run(argv))
}

#[pymodule]
fn mpmri(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyPrepared>()?;
    m.add_function(wrap_pyfunction!(generate_patient, m)?)?;
    m.add_function(wrap_pyfunction!(generate_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(bias_correct, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(trapezoid_auc, m)?)?;
    m.add_function(wrap_pyfunction!(sequence_bbox, m)?)?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(triage, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("REGIONS", PyList::new(m.py(), ["PZ", "CG", "GLAND"])?)?;
    Ok(())
}
