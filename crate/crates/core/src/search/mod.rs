//! Bounded sequential model-based search over architecture, augmentation
//! and pairing mode.

mod gp;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gp::{expected_improvement, GaussianProcess};

use crate::dataset::{AugmentationPolicy, PairMode, RegionCohort};
use crate::detector::{
    build_model, train, ArchitectureDescriptor, ConvBlockSpec, DetectorModel, NormKind, TrainConfig, TrainingHistory,
    Zone,
};
use crate::error::{Error, Result};

pub const NUM_DIMS: usize = 10;
const MAX_ENUMERATED: usize = 200_000;
const CANDIDATE_SAMPLE: usize = 20_000;

/// Discrete search space; every dimension is an explicit value list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub conv_blocks: Vec<usize>,
    /// Filters of the last block; earlier blocks halve down to 16.
    pub filters: Vec<usize>,
    pub kernel: Vec<usize>,
    pub dropout: Vec<f64>,
    pub dense_units: Vec<usize>,
    pub normalization: Vec<NormKind>,
    pub flip: Vec<bool>,
    pub max_translate: Vec<f64>,
    pub contrast: Vec<f64>,
    pub mode: Vec<PairMode>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            conv_blocks: vec![1, 2, 3, 4, 5],
            filters: vec![16, 32, 64, 128],
            kernel: vec![3, 5],
            dropout: vec![0.0, 0.25, 0.5],
            dense_units: vec![32, 64, 128, 256],
            normalization: vec![NormKind::Batch, NormKind::None],
            flip: vec![false, true],
            max_translate: vec![0.0, 0.05, 0.10],
            contrast: vec![0.0, 0.15, 0.3],
            mode: vec![PairMode::Mixed, PairMode::T2AdcOnly],
        }
    }
}

/// Coordinates (value indices) into each dimension of a [`SearchSpace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SearchPoint(pub [usize; NUM_DIMS]);

/// Human-readable values of a point, as stored in the trial ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointValues {
    pub conv_blocks: usize,
    pub filters: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub dense_units: usize,
    pub normalization: NormKind,
    pub flip: bool,
    pub max_translate: f64,
    pub contrast: f64,
    pub mode: PairMode,
}

impl SearchSpace {
    pub fn cardinalities(&self) -> [usize; NUM_DIMS] {
        [
            self.conv_blocks.len(),
            self.filters.len(),
            self.kernel.len(),
            self.dropout.len(),
            self.dense_units.len(),
            self.normalization.len(),
            self.flip.len(),
            self.max_translate.len(),
            self.contrast.len(),
            self.mode.len(),
        ]
    }

    pub fn size(&self) -> usize {
        self.cardinalities().iter().product()
    }

    /// Every value list non-empty and every point decodable.
    pub fn validate(&self) -> Result<()> {
        if self.cardinalities().contains(&0) {
            return Err(Error::InvalidConfig("search space has an empty dimension".into()));
        }
        let bad = |m: String| Err(Error::InvalidConfig(format!("search space: {m}")));
        if self.conv_blocks.iter().any(|&b| !(1..=crate::detector::MAX_BLOCKS).contains(&b)) {
            return bad(format!("conv_blocks {:?}", self.conv_blocks));
        }
        if self.filters.iter().any(|f| !crate::detector::FILTER_CHOICES.contains(f)) {
            return bad(format!("filters {:?}", self.filters));
        }
        if self.kernel.iter().any(|k| !crate::detector::KERNEL_CHOICES.contains(k)) {
            return bad(format!("kernel {:?}", self.kernel));
        }
        if self.dense_units.iter().any(|d| !crate::detector::DENSE_CHOICES.contains(d)) {
            return bad(format!("dense_units {:?}", self.dense_units));
        }
        if self.dropout.iter().any(|d| !(0.0..1.0).contains(d)) {
            return bad(format!("dropout {:?}", self.dropout));
        }
        if self.max_translate.iter().any(|t| !(0.0..=0.1).contains(t)) || self.contrast.iter().any(|c| !(0.0..=0.3).contains(c)) {
            return bad("augmentation bounds are translate <= 0.1, contrast <= 0.3".into());
        }
        Ok(())
    }

    pub fn point(&self, mut index: usize) -> SearchPoint {
        let card = self.cardinalities();
        let mut c = [0usize; NUM_DIMS];
        for d in (0..NUM_DIMS).rev() {
            c[d] = index % card[d];
            index /= card[d];
        }
        SearchPoint(c)
    }

    pub fn index(&self, p: &SearchPoint) -> usize {
        let card = self.cardinalities();
        p.0.iter().zip(card).fold(0, |acc, (&c, n)| acc * n + c)
    }

    pub fn contains(&self, p: &SearchPoint) -> bool {
        p.0.iter().zip(self.cardinalities()).all(|(&c, n)| c < n)
    }

    pub fn values(&self, p: &SearchPoint) -> PointValues {
        let c = p.0;
        PointValues {
            conv_blocks: self.conv_blocks[c[0]],
            filters: self.filters[c[1]],
            kernel: self.kernel[c[2]],
            dropout: self.dropout[c[3]],
            dense_units: self.dense_units[c[4]],
            normalization: self.normalization[c[5]],
            flip: self.flip[c[6]],
            max_translate: self.max_translate[c[7]],
            contrast: self.contrast[c[8]],
            mode: self.mode[c[9]],
        }
    }

    /// Inverse of [`values`](Self::values); fails for values outside the space.
    pub fn locate(&self, v: &PointValues) -> Result<SearchPoint> {
        fn find<T: PartialEq + std::fmt::Debug>(list: &[T], x: &T, name: &str) -> Result<usize> {
            list.iter()
                .position(|y| y == x)
                .ok_or_else(|| Error::InvalidConfig(format!("{name} {x:?} is not in the search space")))
        }
        Ok(SearchPoint([
            find(&self.conv_blocks, &v.conv_blocks, "conv_blocks")?,
            find(&self.filters, &v.filters, "filters")?,
            find(&self.kernel, &v.kernel, "kernel")?,
            find(&self.dropout, &v.dropout, "dropout")?,
            find(&self.dense_units, &v.dense_units, "dense_units")?,
            find(&self.normalization, &v.normalization, "normalization")?,
            find(&self.flip, &v.flip, "flip")?,
            find(&self.max_translate, &v.max_translate, "max_translate")?,
            find(&self.contrast, &v.contrast, "contrast")?,
            find(&self.mode, &v.mode, "mode")?,
        ]))
    }

    pub fn decode(&self, p: &SearchPoint, patch: (usize, usize)) -> (ArchitectureDescriptor, AugmentationPolicy, PairMode) {
        let v = self.values(p);
        (descriptor_for(&v, patch), augmentation_for(&v), v.mode)
    }
}

/// Widening pyramid: the last block has `filters`, each earlier block half
/// as many (at least 16). Every block pools.
pub fn descriptor_for(v: &PointValues, patch: (usize, usize)) -> ArchitectureDescriptor {
    let n = v.conv_blocks;
    ArchitectureDescriptor {
        conv_blocks: (0..n)
            .map(|i| ConvBlockSpec {
                filters: (v.filters >> (n - 1 - i)).max(16),
                kernel: v.kernel,
                pool: true,
            })
            .collect(),
        dropout: v.dropout,
        dense_units: v.dense_units,
        input_shape: (2, patch.0, patch.1),
        normalization: v.normalization,
    }
}

pub fn augmentation_for(v: &PointValues) -> AugmentationPolicy {
    AugmentationPolicy {
        flip: v.flip,
        max_translate: v.max_translate,
        contrast: v.contrast,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub point: PointValues,
    pub objective: f64,
    pub history: TrainingHistory,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

const WARMUP: usize = 5;
const XI: f64 = 0.01;

fn rng_for(seed: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(trial as u64))
}

/// The `r`-th index (in increasing order) not present in `taken` (sorted).
fn nth_free(r: usize, taken: &[usize]) -> usize {
    let mut idx = r;
    for &t in taken {
        if t <= idx {
            idx += 1;
        } else {
            break;
        }
    }
    idx
}

/// Next point to evaluate: uniform random over unevaluated points for the
/// first five trials, then the unevaluated point of maximal expected
/// improvement under a GP surrogate (ties to the lowest index).
pub fn suggest<R: Rng + ?Sized>(space: &SearchSpace, completed: &[(SearchPoint, f64)], rng: &mut R) -> Result<SearchPoint> {
    let size = space.size();
    let taken: BTreeSet<usize> = completed.iter().map(|(p, _)| space.index(p)).collect();
    if taken.len() >= size {
        return Err(Error::SpaceExhausted(size));
    }
    let taken_sorted: Vec<usize> = taken.iter().copied().collect();
    if completed.len() < WARMUP {
        let r = rng.gen_range(0..size - taken.len());
        return Ok(space.point(nth_free(r, &taken_sorted)));
    }
    let xs: Vec<Vec<usize>> = completed.iter().map(|(p, _)| p.0.to_vec()).collect();
    let ys: Vec<f64> = completed.iter().map(|(_, y)| *y).collect();
    let gp = GaussianProcess::fit(&xs, &ys);
    let incumbent = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let free = size - taken.len();
    let candidates: Box<dyn Iterator<Item = usize>> = if free <= MAX_ENUMERATED {
        Box::new((0..size).filter(|i| !taken.contains(i)))
    } else {
        let mut picks: Vec<usize> = (0..CANDIDATE_SAMPLE).map(|_| nth_free(rng.gen_range(0..free), &taken_sorted)).collect();
        picks.sort_unstable();
        picks.dedup();
        Box::new(picks.into_iter())
    };
    let mut best: Option<(f64, usize)> = None;
    for i in candidates {
        let p = space.point(i);
        let (m, s) = gp.predict(&p.0);
        let ei = expected_improvement(m, s, incumbent, XI);
        if best.map_or(true, |(b, _)| ei > b) {
            best = Some((ei, i));
        }
    }
    Ok(space.point(best.expect("at least one free point").1))
}

/// Reads a JSON-lines trial ledger; a missing file is an empty ledger.
pub fn load_ledger(path: &Path) -> Result<Vec<TrialRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord =
            serde_json::from_str(&line).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if rec.trial_id != out.len() {
            return Err(Error::InvalidConfig(format!(
                "{}: trial ids must be dense from 0, found {} at line {}",
                path.display(),
                rec.trial_id,
                out.len() + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

fn append_ledger(path: &Path, rec: &TrialRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::unwritable(path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::unwritable(path, e))
}

/// Index of the best trial; ties go to the earlier trial.
pub fn best_trial(trials: &[TrialRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in trials.iter().enumerate() {
        if best.map_or(true, |b| t.objective > trials[b].objective) {
            best = Some(i);
        }
    }
    best
}

/// Generic search loop. `evaluate(trial_id, point)` returns the objective
/// and history; errors are recorded as objective 0. With a ledger, existing
/// trials are reloaded and the search continues after them.
pub fn search_loop<F>(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    ledger: Option<&Path>,
    mut evaluate: F,
) -> Result<Vec<TrialRecord>>
where
    F: FnMut(usize, &SearchPoint) -> Result<(f64, TrainingHistory)>,
{
    if budget == 0 {
        return Err(Error::InvalidConfig("search budget must be >= 1".into()));
    }
    space.validate()?;
    let mut trials = match ledger {
        Some(p) => load_ledger(p)?,
        None => Vec::new(),
    };
    let mut completed: Vec<(SearchPoint, f64)> = trials
        .iter()
        .map(|t| Ok((space.locate(&t.point)?, t.objective)))
        .collect::<Result<_>>()?;
    while trials.len() < budget {
        let id = trials.len();
        let point = match suggest(space, &completed, &mut rng_for(seed, id)) {
            Ok(p) => p,
            Err(Error::SpaceExhausted(_)) => break,
            Err(e) => return Err(e),
        };
        let start = Instant::now();
        let (objective, history, error) = match evaluate(id, &point) {
            Ok((o, h)) if o.is_finite() => (o.clamp(0.0, 1.0), h, None),
            Ok((o, h)) => (0.0, h, Some(format!("non-finite objective {o}"))),
            Err(e) => (0.0, TrainingHistory::default(), Some(e.to_string())),
        };
        let rec = TrialRecord {
            trial_id: id,
            point: space.values(&point),
            objective,
            history,
            wall_seconds: start.elapsed().as_secs_f64(),
            error,
        };
        tracing::info!(trial = id, objective, point = ?rec.point, "trial finished");
        if let Some(p) = ledger {
            append_ledger(p, &rec)?;
        }
        completed.push((point, objective));
        trials.push(rec);
    }
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub budget: usize,
    pub space: SearchSpace,
    /// Epoch cap for each trial; the winner is retrained with the full
    /// training config.
    pub trial_max_epochs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: 20,
            space: SearchSpace::default(),
            trial_max_epochs: 30,
        }
    }
}

fn model_seed(seed: u64, trial: usize) -> u64 {
    seed ^ ((trial as u64 + 1) << 32)
}

fn train_point(
    space: &SearchSpace,
    point: &SearchPoint,
    cohort: &RegionCohort,
    zone: Zone,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<DetectorModel> {
    let patch = cohort.patch_shape().ok_or(Error::EmptySequence)?;
    let (desc, aug, mode) = space.decode(point, patch);
    let (train_s, val_s) = cohort.samples(mode)?;
    let mut model = build_model(&desc, zone, init_seed)?;
    model.augmentation = aug;
    model.mode = mode;
    train(model, &train_s, &val_s, cfg)
}

/// Runs the search for one zone and returns the best trial's model with all
/// trial records.
pub fn run_search(
    cohort: &RegionCohort,
    zone: Zone,
    search: &SearchConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    ledger: Option<&Path>,
) -> Result<(DetectorModel, Vec<TrialRecord>)> {
    let trial_cfg = TrainConfig {
        max_epochs: search.trial_max_epochs.min(train_cfg.max_epochs),
        seed,
        ..train_cfg.clone()
    };
    let mut best: Option<(usize, f64, DetectorModel)> = None;
    let trials = search_loop(&search.space, search.budget, seed, ledger, |id, point| {
        let model = train_point(&search.space, point, cohort, zone, &trial_cfg, model_seed(seed, id))?;
        let objective = model.history.best_val_auc();
        let history = model.history.clone();
        if best.as_ref().map_or(true, |b| objective > b.1) {
            best = Some((id, objective, model));
        }
        Ok((objective, history))
    })?;
    let winner = best_trial(&trials).ok_or_else(|| Error::InvalidConfig("no trials ran".into()))?;
    let model = match best {
        Some((id, _, m)) if id == winner => m,
        // the winner came from a previous run's ledger: retrain it
        _ => {
            let point = search.space.locate(&trials[winner].point)?;
            train_point(&search.space, &point, cohort, zone, &trial_cfg, model_seed(seed, winner))?
        }
    };
    Ok((model, trials))
}

/// Retrains the winning point of a finished search with the full config.
pub fn retrain_best(
    cohort: &RegionCohort,
    zone: Zone,
    space: &SearchSpace,
    trials: &[TrialRecord],
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<DetectorModel> {
    let winner = best_trial(trials).ok_or_else(|| Error::InvalidConfig("no trials to retrain".into()))?;
    let point = space.locate(&trials[winner].point)?;
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    train_point(space, &point, cohort, zone, &cfg, model_seed(seed, winner))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> SearchSpace {
        SearchSpace {
            conv_blocks: vec![1, 2, 3],
            filters: vec![16, 32, 64],
            kernel: vec![3],
            dropout: vec![0.0],
            dense_units: vec![32],
            normalization: vec![NormKind::Batch],
            flip: vec![false, true],
            max_translate: vec![0.0],
            contrast: vec![0.0],
            mode: vec![PairMode::Mixed],
        }
    }

    #[test]
    fn index_point_bijection() {
        let s = SearchSpace::default();
        assert_eq!(s.size(), 5 * 4 * 2 * 3 * 4 * 2 * 2 * 3 * 3 * 2);
        for i in [0, 1, 17, 999, s.size() - 1] {
            assert_eq!(s.index(&s.point(i)), i);
            assert_eq!(s.locate(&s.values(&s.point(i))).unwrap(), s.point(i));
        }
    }

    #[test]
    fn every_point_decodes_to_a_valid_triple() {
        let s = SearchSpace::default();
        for i in (0..s.size()).step_by(7) {
            let (d, a, _) = s.decode(&s.point(i), (32, 32));
            d.validate().unwrap();
            a.validate().unwrap();
        }
    }

    #[test]
    fn pyramid_filters() {
        let s = SearchSpace::default();
        let v = PointValues { conv_blocks: 4, filters: 64, ..s.values(&s.point(0)) };
        let f: Vec<usize> = descriptor_for(&v, (32, 32)).conv_blocks.iter().map(|b| b.filters).collect();
        assert_eq!(f, vec![16, 16, 32, 64]);
    }

    #[test]
    fn warmup_is_seeded_and_forced_when_one_left() {
        let s = small();
        let a = suggest(&s, &[], &mut rng_for(3, 0)).unwrap();
        let b = suggest(&s, &[], &mut rng_for(3, 0)).unwrap();
        assert_eq!(a, b);
        let all_but: Vec<(SearchPoint, f64)> = (0..s.size()).filter(|&i| i != 7).map(|i| (s.point(i), 0.5)).collect();
        assert_eq!(suggest(&s, &all_but, &mut rng_for(0, 0)).unwrap(), s.point(7));
        let all: Vec<(SearchPoint, f64)> = (0..s.size()).map(|i| (s.point(i), 0.5)).collect();
        assert!(matches!(suggest(&s, &all, &mut rng_for(0, 0)), Err(Error::SpaceExhausted(18))));
    }

    #[test]
    fn loop_has_no_duplicates_and_stops_when_exhausted() {
        let s = small();
        let trials = search_loop(&s, 30, 1, None, |_, p| Ok((p.0[0] as f64 / 10.0, TrainingHistory::default()))).unwrap();
        assert_eq!(trials.len(), 18);
        let pts: BTreeSet<usize> = trials.iter().map(|t| s.index(&s.locate(&t.point).unwrap())).collect();
        assert_eq!(pts.len(), 18);
    }

    #[test]
    fn failed_trials_score_zero() {
        let s = small();
        let trials = search_loop(&s, 3, 1, None, |id, _| {
            if id == 1 {
                Err(Error::NonFiniteLoss { epoch: 0 })
            } else {
                Ok((0.7, TrainingHistory::default()))
            }
        })
        .unwrap();
        assert_eq!(trials[1].objective, 0.0);
        assert!(trials[1].error.as_deref().unwrap().starts_with("NonFiniteLoss"));
        assert_eq!(best_trial(&trials), Some(0));
    }

    #[test]
    fn ledger_resume_continues_identically() {
        let dir = tempfile::tempdir().unwrap();
        let s = small();
        let f = |_: usize, p: &SearchPoint| Ok(((p.0[0] * 3 + p.0[1] + p.0[6]) as f64 / 10.0, TrainingHistory::default()));
        let full = search_loop(&s, 9, 5, None, f).unwrap();
        let path = dir.path().join("trials.json");
        search_loop(&s, 4, 5, Some(&path), f).unwrap();
        let resumed = search_loop(&s, 9, 5, Some(&path), f).unwrap();
        let key = |t: &[TrialRecord]| t.iter().map(|r| (r.point.clone(), r.objective)).collect::<Vec<_>>();
        assert_eq!(key(&full), key(&resumed));
        assert_eq!(load_ledger(&path).unwrap().len(), 9);
    }

    proptest! {
        #[test]
        fn suggestions_never_repeat(seed in any::<u64>(), ys in prop::collection::vec(0.0f64..1.0, 18)) {
            let space = small();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut done: Vec<(SearchPoint, f64)> = Vec::new();
            for y in ys {
                let p = suggest(&space, &done, &mut rng).unwrap();
                prop_assert!(space.contains(&p));
                prop_assert!(done.iter().all(|(q, _)| q != &p));
                done.push((p, y));
            }
            prop_assert!(matches!(suggest(&space, &done, &mut rng), Err(Error::SpaceExhausted(18))));
        }
    }
}
