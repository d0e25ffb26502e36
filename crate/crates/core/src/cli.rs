//! `mpmri` command-line entry point.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use tracing::info;

use crate::config::RunConfig;
use crate::dataset::{CohortManifest, PairMode, RegionCohort};
use crate::detector::{load_bundle, save_bundle, DetectorModel, Zone};
use crate::error::{Error, Result};
use crate::explain::grad_cam;
use crate::phantom::generate_cohort;
use crate::pipeline::{prepare_cohort, region_cohort, PreparedPatient, SliceSelection};
use crate::roi::Region;
use crate::search::{load_ledger, retrain_best, run_search};
use crate::triage::{emit_report, predict_sequence, predict_subregions, rank_slices, RegionMode, ReportCam, SequencePrediction};

const AFTER_HELP: &str = "\
Config sections read by each subcommand:
  phantom-gen    [phantom] [paths] jobs
  preprocess     [preprocess] [paths] jobs
  build-dataset  [dataset] [paths] seed
  search         [search] [train] [paths] seed
  train          [search] [train] [paths] seed
  predict        [preprocess] [dataset] [triage] [paths] jobs
  report         [preprocess] [dataset] [triage] [paths] jobs
  selftest       (none; config optional)

MPMRI_SEED overrides the config seed. Exit codes: 0 ok, 1 domain error, 2 usage error.";

#[derive(Debug, Parser)]
#[command(name = "mpmri", version, about = "Prostate mpMRI slice triage pipeline", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort (NIfTI files + manifest.json)
    PhantomGen(CommonArgs),
    /// Resample, bias-correct and store every manifest patient
    Preprocess(CommonArgs),
    /// Crop PZ/CG patch sequences and split by patient
    BuildDataset(CommonArgs),
    /// Bayesian architecture/augmentation search per zone
    Search(CommonArgs),
    /// Retrain each zone's best trial with the full training config
    Train(CommonArgs),
    /// Score every slice of the prediction manifest's patients
    Predict(CommonArgs),
    /// Like predict, plus probability curves and Grad-CAM overlays
    Report(CommonArgs),
    /// Run the invariant suite on a tiny built-in phantom
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        let cwd = std::env::current_dir()?;
        if let Some(w) = &self.work_dir {
            cfg.paths.work_dir = cwd.join(w);
        }
        if let Some(m) = &self.manifest {
            cfg.paths.manifest = Some(cwd.join(m));
        }
        if let Some(b) = self.budget {
            cfg.search.budget = b;
        }
        if let Some(e) = self.max_epochs {
            cfg.train.max_epochs = e;
        }
        if let Some(k) = self.top_k {
            cfg.triage.top_k = k;
        }
        if let Some(t) = self.threshold {
            cfg.triage.threshold = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            tracing::error!(error = %e, "command failed");
            eprintln!("{e}");
            1
        }
    }
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into());
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("jobs: {e}")))?;
    pool.install(f)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::PhantomGen(a) => phantom_gen(&a.load()?),
        Command::Preprocess(a) => preprocess(&a.load()?),
        Command::BuildDataset(a) => build_dataset(&a.load()?),
        Command::Search(a) => search(&a.load()?),
        Command::Train(a) => train(&a.load()?),
        Command::Predict(a) => predict(&a.load()?, false),
        Command::Report(a) => predict(&a.load()?, true),
        Command::Selftest(a) => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            crate::selftest::run(cfg.seed)
        }
    }
}

fn phantom_gen(cfg: &RunConfig) -> Result<()> {
    let t = Instant::now();
    let dir = &cfg.paths.phantom_dir;
    let m = with_jobs(cfg.jobs, || generate_cohort(&cfg.phantom, dir))?;
    info!(patients = cfg.phantom.n_patients, entries = m.entries.len(), dir = %dir.display(), seconds = t.elapsed().as_secs_f64(), "phantom cohort written");
    Ok(())
}

fn preprocess(cfg: &RunConfig) -> Result<()> {
    let t = Instant::now();
    let manifest = CohortManifest::load(&cfg.manifest_path())?;
    let out = cfg.processed_dir();
    let patients = with_jobs(cfg.jobs, || prepare_cohort(&manifest, &cfg.preprocess))?;
    for p in &patients {
        p.save(&out.join(&p.patient_id))?;
    }
    info!(patients = patients.len(), dir = %out.display(), seconds = t.elapsed().as_secs_f64(), "preprocessing done");
    Ok(())
}

fn load_processed(cfg: &RunConfig, manifest: &CohortManifest) -> Result<Vec<PreparedPatient>> {
    let dir = cfg.processed_dir();
    manifest.patients().iter().map(|p| PreparedPatient::load(&dir.join(p))).collect()
}

fn cohort_path(cfg: &RunConfig, zone: Zone) -> PathBuf {
    cfg.dataset_dir().join(format!("{zone}.json"))
}

fn build_dataset(cfg: &RunConfig) -> Result<()> {
    let manifest = CohortManifest::load(&cfg.manifest_path())?;
    let patients = load_processed(cfg, &manifest)?;
    let dir = cfg.dataset_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::unwritable(&dir, e))?;
    for zone in Zone::BOTH {
        let c = region_cohort(&patients, &manifest, zone.region(), &cfg.dataset.patch, cfg.dataset.val_fraction, cfg.seed)?;
        c.save(&cohort_path(cfg, zone))?;
        let (tr, va) = c.samples(PairMode::T2AdcOnly)?;
        info!(zone = %zone, sequences = c.sequences.len(), train_slices = tr.len(), val_slices = va.len(), "dataset written");
    }
    Ok(())
}

fn search(cfg: &RunConfig) -> Result<()> {
    for zone in Zone::BOTH {
        let t = Instant::now();
        let cohort = RegionCohort::load(&cohort_path(cfg, zone))?;
        let dir = cfg.search_dir().join(zone.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::unwritable(&dir, e))?;
        let (model, trials) = run_search(&cohort, zone, &cfg.search, &cfg.train, cfg.seed, Some(&dir.join("trials.jsonl")))?;
        save_bundle(&model, &dir.join("best"))?;
        info!(zone = %zone, trials = trials.len(), best_val_auc = model.history.best_val_auc(), seconds = t.elapsed().as_secs_f64(), "search finished");
    }
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    for zone in Zone::BOTH {
        let t = Instant::now();
        let cohort = RegionCohort::load(&cohort_path(cfg, zone))?;
        let ledger = cfg.search_dir().join(zone.as_str()).join("trials.jsonl");
        let trials = load_ledger(&ledger)?;
        if trials.is_empty() {
            return Err(Error::MissingFile(ledger));
        }
        let model = retrain_best(&cohort, zone, &cfg.search.space, &trials, &cfg.train, cfg.seed)?;
        save_bundle(&model, &cfg.models_dir().join(zone.as_str()))?;
        info!(zone = %zone, val_auc = model.history.best_val_auc(), epochs = model.history.epochs.len(), seconds = t.elapsed().as_secs_f64(), "final model trained");
    }
    Ok(())
}

/// Scores one prepared patient. Sub-region crops are used when both zone
/// masks exist (unless forced otherwise), the whole gland otherwise.
pub fn triage_patient(
    patient: &PreparedPatient,
    pz: &DetectorModel,
    cg: &DetectorModel,
    cfg: &RunConfig,
) -> Result<(SequencePrediction, Vec<ReportCam>)> {
    let opts = &cfg.dataset.patch;
    let has_zones = patient.masks.contains_key(&Region::Pz) && patient.masks.contains_key(&Region::Cg);
    let mode = cfg.triage.region_mode.unwrap_or(if has_zones { RegionMode::Subregion } else { RegionMode::WholeGland });
    let (mut pred, crops) = match mode {
        RegionMode::Subregion => {
            let p = patient.sequences(Region::Pz, SliceSelection::AnyMask, opts)?;
            let c = patient.sequences(Region::Cg, SliceSelection::AnyMask, opts)?;
            let pred = predict_subregions(pz, cg, (&p.0, &p.1), (&c.0, &c.1))?;
            (pred, [p, c])
        }
        RegionMode::WholeGland => {
            let g = patient.sequences(Region::Gland, SliceSelection::AnyMask, opts)?;
            let pred = predict_sequence(pz, cg, &g.0, &g.1)?;
            (pred, [g.clone(), g])
        }
    };
    pred.threshold = cfg.triage.threshold;
    let mut cams = Vec::new();
    for r in rank_slices(&pred, cfg.triage.top_k.min(pred.len()))? {
        let (model, (t2, adc)) = match r.zone {
            Zone::Pz => (pz, &crops[0]),
            Zone::Cg => (cg, &crops[1]),
        };
        let pos = t2.slice_indices().iter().position(|&k| k == r.index).expect("ranked slice comes from the sequence");
        let sample = crate::dataset::build_pairs(&t2.select(&[pos])?, &adc.select(&[pos])?, PairMode::T2AdcOnly, 0)?.remove(0);
        cams.push(ReportCam { zone: r.zone, heatmap: grad_cam(model, &sample)?, sample });
    }
    Ok((pred, cams))
}

fn load_models(dir: &Path) -> Result<(DetectorModel, DetectorModel)> {
    Ok((load_bundle(&dir.join("PZ"))?, load_bundle(&dir.join("CG"))?))
}

fn predict(cfg: &RunConfig, with_artifacts: bool) -> Result<()> {
    let t = Instant::now();
    let (pz, cg) = load_models(&cfg.models_dir())?;
    let manifest = CohortManifest::load(&cfg.predict_manifest_path())?;
    let out = if with_artifacts { cfg.reports_dir() } else { cfg.predictions_dir() };
    let patients = with_jobs(cfg.jobs, || prepare_cohort(&manifest, &cfg.preprocess))?;
    let n = with_jobs(cfg.jobs, || {
        patients
            .par_iter()
            .map(|p| {
                let (pred, cams) = triage_patient(p, &pz, &cg, cfg)?;
                let cams = if with_artifacts { cams } else { Vec::new() };
                let dir = out.join(&p.patient_id);
                if with_artifacts {
                    emit_report(&pred, &cams, cfg.triage.top_k, &dir)?;
                } else {
                    crate::triage::write_report_json(&pred, cfg.triage.top_k, &dir)?;
                }
                let top = rank_slices(&pred, 1)?[0];
                info!(patient = %p.patient_id, slices = pred.len(), top_slice = top.index, top_zone = %top.zone, top_prob = top.prob, "scored");
                Ok(())
            })
            .collect::<Result<Vec<()>>>()
            .map(|v| v.len())
    })?;
    info!(patients = n, dir = %out.display(), seconds = t.elapsed().as_secs_f64(), "triage finished");
    Ok(())
}
