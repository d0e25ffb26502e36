use mpmri_core::dataset::PairMode;
use mpmri_core::detector::{NormKind, TrainingHistory};
use mpmri_core::search::{search_loop, SearchPoint, SearchSpace};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 3 x 3 x 2 subspace: depth, width and flip.
fn subspace() -> SearchSpace {
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

/// Smooth closed-form objective with a single optimum at (3 blocks, 64, flip).
fn objective(p: &SearchPoint) -> f64 {
    let [b, f, _, _, _, _, flip, ..] = p.0;
    0.5 + 0.12 * b as f64 + 0.08 * f as f64 + 0.03 * flip as f64 - 0.02 * (b as f64 * f as f64)
}

const BUDGET: usize = 10;

fn running_best(ys: &[f64]) -> Vec<f64> {
    ys.iter()
        .scan(f64::NEG_INFINITY, |b, &y| {
            *b = b.max(y);
            Some(*b)
        })
        .collect()
}

fn best(ys: &[f64]) -> f64 {
    ys.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn smbo_beats_random_search_on_most_seeds() {
    let space = subspace();
    let mut wins = 0;
    for seed in 0..20u64 {
        let trials = search_loop(&space, BUDGET, seed, None, |_, p| Ok((objective(p), TrainingHistory::default()))).unwrap();
        let smbo: Vec<f64> = trials.iter().map(|t| t.objective).collect();
        let mut order: Vec<usize> = (0..space.size()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(1000 + seed));
        let random: Vec<f64> = order[..BUDGET].iter().map(|&i| objective(&space.point(i))).collect();
        if best(&smbo) >= best(&random) {
            wins += 1;
        }
    }
    assert!(wins >= 12, "SMBO won {wins}/20");
}

#[test]
fn search_is_seed_deterministic_with_monotone_best_and_no_duplicates() {
    let space = subspace();
    let run = |seed| {
        search_loop(&space, 12, seed, None, |_, p| Ok((objective(p), TrainingHistory::default())))
            .unwrap()
            .into_iter()
            .map(|t| (t.point, t.objective))
            .collect::<Vec<_>>()
    };
    let a = run(4);
    assert_eq!(a, run(4));
    let pts: Vec<_> = a.iter().map(|(p, _)| space.locate(p).unwrap()).collect();
    let mut dedup = pts.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), pts.len());
    let best = running_best(&a.iter().map(|x| x.1).collect::<Vec<_>>());
    assert!(best.windows(2).all(|w| w[1] >= w[0]));
}
