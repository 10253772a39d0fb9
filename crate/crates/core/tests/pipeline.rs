mod common;

use proptest::prelude::*;
use rap_core::eval::STATUS_BEST;
use rap_core::queries::Objective;
use rap_core::{
    eval_relaxed, max_error, random_init, randomized_round, rho_from_eps_delta, run_rap, run_sweep, CompiledQuery,
    NoiseSource, QueryKind, RapConfig, RoundingConfig, Stream, SweepAxis, SweepSpec, Synthetic, Workload, WorkloadSpec,
};

fn quick(max_steps: usize) -> RapConfig {
    let mut c = RapConfig {
        n_prime: 60,
        ..RapConfig::default()
    };
    c.projection.max_steps = max_steps;
    c
}

#[test]
fn each_round_starts_where_the_last_ended() {
    let data = common::latent_class(&[3, 3, 4, 2], 400, 3, 21);
    let workload = Workload::all_marginals(data.schema(), 2, QueryKind::Product).unwrap();
    let config = RapConfig {
        rounds: 4,
        queries_per_round: 3,
        epsilon: 1.0,
        seed: 8,
        keep_snapshots: true,
        ..quick(150)
    };
    let result = run_rap(&data, &workload, &config).unwrap();
    assert_eq!(result.snapshots.len(), 4);
    let init = random_init(
        data.schema(),
        config.n_prime,
        config.projection.normalization,
        &mut NoiseSource::stream(config.seed, Stream::Init),
    );
    for (t, round) in result.rounds.iter().enumerate() {
        let upto = round.selected;
        let queries: Vec<CompiledQuery> = result.selected[..upto]
            .iter()
            .map(|&i| workload.queries()[i].clone())
            .collect();
        let start = if t == 0 { &init } else { &result.snapshots[t - 1] };
        let loss = Objective::new(&queries, &result.noisy_answers[..upto])
            .unwrap()
            .loss(start)
            .unwrap();
        assert!(
            (loss - round.initial_loss).abs() <= 1e-12 * loss.max(1.0),
            "round {}: {loss} vs {}",
            round.round,
            round.initial_loss
        );
        assert!(round.final_loss <= round.initial_loss);
    }
    assert_eq!(result.snapshots.last().unwrap(), &result.dataset);
}

#[test]
fn selected_queries_are_distinct() {
    let data = common::latent_class(&[3, 3, 3], 300, 2, 3);
    let workload = Workload::all_marginals(data.schema(), 2, QueryKind::Product).unwrap();
    let config = RapConfig {
        rounds: 9,
        queries_per_round: 3,
        epsilon: 0.5,
        ..quick(20)
    };
    let result = run_rap(&data, &workload, &config).unwrap();
    let mut s = result.selected.clone();
    s.sort_unstable();
    s.dedup();
    assert_eq!(s.len(), 27);
}

#[test]
fn rounding_matches_relaxed_answers_in_expectation() {
    let data = common::latent_class(&[2, 3, 4], 300, 3, 13);
    let workload = Workload::all_marginals(data.schema(), 2, QueryKind::Product).unwrap();
    assert_eq!(workload.len(), 26);
    let result = run_rap(&data, &workload, &quick(300)).unwrap();
    let relaxed = eval_relaxed(&workload, &result.dataset).unwrap();
    let r = 200;
    let synth = randomized_round(&result.dataset, &RoundingConfig { oversample: r, seed: 5 }).unwrap();
    assert_eq!(synth.len(), 60 * r);
    let rounded = rap_core::eval_discrete(&workload, &synth).unwrap();
    let samples = (60 * r) as f64;
    for (p, q) in relaxed.iter().zip(&rounded) {
        let bound = 4.0 * (p * (1.0 - p) / samples).sqrt() + 0.01;
        assert!((p - q).abs() < bound, "relaxed {p} rounded {q}");
    }
}

#[test]
fn threshold_workload_runs_end_to_end() {
    let data = common::latent_class(&[3, 2, 4], 200, 2, 17);
    let workload = Workload::all_marginals(data.schema(), 2, QueryKind::OneOutOfK).unwrap();
    let config = RapConfig {
        no_noise: true,
        ..quick(2000)
    };
    let result = run_rap(&data, &workload, &config).unwrap();
    let report = max_error(&workload, &data, Synthetic::Relaxed(&result.dataset)).unwrap();
    assert!(report.max_error < 0.05, "{}", report.max_error);
}

#[test]
fn oversample_sweep_reuses_one_fit_per_seed() {
    let data = common::latent_class(&[3, 3, 3], 150, 2, 2);
    let spec = SweepSpec {
        axis: SweepAxis::Oversample,
        values: vec![1.0, 4.0],
        seeds: vec![0, 1],
        grid_k: vec![],
        grid_t: vec![],
    };
    let workload = WorkloadSpec {
        k: 2,
        num_marginals: 3,
        seed: 0,
        kind: QueryKind::Product,
    };
    let table = run_sweep(&data, &spec, &quick(50), &workload).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.is_ok()));
    let again = run_sweep(&data, &spec, &quick(50), &workload).unwrap();
    assert_eq!(table.without_timing(), again.without_timing());
}

#[test]
fn grid_sweep_appends_best_rows() {
    let data = common::latent_class(&[3, 3, 3], 150, 2, 2);
    let spec = SweepSpec {
        axis: SweepAxis::Epsilon,
        values: vec![0.5],
        seeds: vec![0, 1],
        grid_k: vec![2, 4],
        grid_t: vec![1, 2],
    };
    let workload = WorkloadSpec {
        k: 2,
        num_marginals: 3,
        seed: 0,
        kind: QueryKind::Product,
    };
    let table = run_sweep(&data, &spec, &quick(30), &workload).unwrap();
    let best: Vec<_> = table.rows.iter().filter(|r| r.status == STATUS_BEST).collect();
    assert_eq!(best.len(), 2);
    for b in best {
        let min = table
            .rows
            .iter()
            .filter(|r| r.seed == b.seed && r.is_ok())
            .map(|r| r.max_error)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(b.max_error, min);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ledger_sums_to_budget(t in 1usize..6, k in 1usize..6, eps in 0.05f64..2.0, seed in 0u64..1000) {
        let data = common::latent_class(&[3, 3, 3], 60, 2, 1);
        let workload = Workload::all_marginals(data.schema(), 2, QueryKind::Product).unwrap();
        let config = RapConfig { rounds: t, queries_per_round: k, epsilon: eps, seed, ..quick(2) };
        let result = run_rap(&data, &workload, &config).unwrap();
        let rho = rho_from_eps_delta(eps, 1.0 / 3600.0).unwrap();
        let total: f64 = result.ledger.iter().map(|e| e.rho).sum();
        prop_assert!((total - rho).abs() <= 1e-12);
        let expected = if t == 1 { workload.len() } else { 2 * t * k };
        prop_assert_eq!(result.ledger.len(), expected);
    }
}
