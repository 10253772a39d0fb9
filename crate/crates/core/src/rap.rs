//! The RAP driver: privately answer a workload and project the answers onto
//! a relaxed synthetic dataset.
//!
//! With one round every query is answered by the Gaussian mechanism at
//! `rho / m`. With `T > 1` rounds, each round selects `K` queries by
//! report-noisy-max against the current synthetic data, answers them with the
//! Gaussian mechanism, and re-projects over everything selected so far. Each
//! selection and each answer costs `rho / (2 T K)`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::{self, BudgetSummary, LedgerEntry, PrivacyBudget, NO_NOISE};
use crate::projection::{random_init, relaxed_projection, ProjectionConfig, RelaxedDataset};
use crate::queries::{eval_discrete, eval_relaxed_queries, AnswerVector, CompiledQuery, Workload};
use crate::rng::{NoiseSource, Stream};
use crate::schema::DiscreteDataset;

pub const DEFAULT_N_PRIME: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RapConfig {
    /// Number of rounds `T`.
    pub rounds: usize,
    /// Queries selected per round `K`; ignored when `rounds == 1`.
    pub queries_per_round: usize,
    pub n_prime: usize,
    pub epsilon: f64,
    /// `None` resolves to `1/n²` for the private dataset's size.
    pub delta: Option<f64>,
    /// Skip all noise. The result is marked non-private.
    pub no_noise: bool,
    pub seed: u64,
    pub projection: ProjectionConfig,
    /// Draw mechanism noise from an OS-entropy-seeded source instead of
    /// `seed`. Runs are then not reproducible.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub os_entropy: bool,
    /// Keep the relaxed dataset produced by every round in the result.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub keep_snapshots: bool,
}

impl Default for RapConfig {
    fn default() -> Self {
        RapConfig {
            rounds: 1,
            queries_per_round: 1,
            n_prime: DEFAULT_N_PRIME,
            epsilon: 1.0,
            delta: None,
            no_noise: false,
            seed: 0,
            projection: ProjectionConfig::default(),
            os_entropy: false,
            keep_snapshots: false,
        }
    }
}

impl RapConfig {
    pub fn resolved_delta(&self, n: usize) -> f64 {
        self.delta.unwrap_or_else(|| 1.0 / (n as f64 * n as f64))
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.rounds == 0 || self.queries_per_round == 0 {
            return Err(Error::InvalidArgument("T and K must be at least 1".into()));
        }
        if self.n_prime == 0 {
            return Err(Error::InvalidArgument("n_prime must be at least 1".into()));
        }
        if m == 0 {
            return Err(Error::InvalidArgument("workload is empty".into()));
        }
        if self.rounds > 1 && self.rounds.saturating_mul(self.queries_per_round) > m {
            return Err(Error::Infeasible(format!(
                "T * K = {} * {} exceeds the {m} queries in the workload",
                self.rounds, self.queries_per_round
            )));
        }
        self.projection.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// `|Q_S|` after this round's selections.
    pub selected: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub stopped_early: bool,
    /// Max `|q(D') - â|` over the selected queries and their noisy answers.
    pub max_selected_error: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_trace: Option<Vec<f64>>,
}

/// Wall-clock measurements, kept apart from the reproducible result.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub total_ms: f64,
    pub projection_ms: Vec<f64>,
    pub ms_per_step: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RapResult {
    pub config: RapConfig,
    pub delta: Option<f64>,
    pub n: usize,
    pub m: usize,
    pub budget: BudgetSummary,
    pub ledger: Vec<LedgerEntry>,
    /// Query indices in selection order (all queries for a single round).
    pub selected: Vec<usize>,
    pub noisy_answers: Vec<f64>,
    pub rounds: Vec<RoundTrace>,
    #[serde(skip)]
    pub dataset: RelaxedDataset,
    #[serde(skip)]
    pub timing: RunTiming,
    /// Per-round relaxed datasets when `keep_snapshots` is set.
    #[serde(skip)]
    pub snapshots: Vec<RelaxedDataset>,
}

impl RapResult {
    /// Pretty JSON of everything except the dataset and timings.
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn is_private(&self) -> bool {
        self.budget.private
    }
}

/// Relaxed answers of the pool's queries, in pool order.
pub fn conjectured_answers(pool: &[usize], workload: &Workload, data: &RelaxedDataset) -> Result<AnswerVector> {
    let queries = pool
        .iter()
        .map(|&i| {
            workload.queries().get(i).cloned().ok_or_else(|| {
                Error::InvalidArgument(format!("query index {i} outside workload of {}", workload.len()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    eval_relaxed_queries(&queries, data)
}

struct Run<'a> {
    data: &'a DiscreteDataset,
    workload: &'a Workload,
    config: &'a RapConfig,
    budget: PrivacyBudget,
    gaussian: NoiseSource,
    gumbel: NoiseSource,
    selected: Vec<usize>,
    noisy: Vec<f64>,
    rounds: Vec<RoundTrace>,
    timing: RunTiming,
    total_steps: usize,
    snapshots: Vec<RelaxedDataset>,
}

impl Run<'_> {
    fn answer(&mut self, index: usize, truth: f64, rho: f64) -> Result<()> {
        let a = privacy::gaussian_mechanism(truth, self.data.len(), rho, &mut self.gaussian)?;
        self.budget.spend(format!("gaussian:q{index}"), rho)?;
        self.selected.push(index);
        self.noisy.push(a);
        Ok(())
    }

    fn project(&mut self, round: usize, init: &RelaxedDataset) -> Result<RelaxedDataset> {
        let queries: Vec<CompiledQuery> = self
            .selected
            .iter()
            .map(|&i| self.workload.queries()[i].clone())
            .collect();
        let start = Instant::now();
        let out = relaxed_projection(&queries, &self.noisy, init, &self.config.projection)?;
        self.timing.projection_ms.push(start.elapsed().as_secs_f64() * 1e3);
        self.total_steps += out.steps;
        let fitted = eval_relaxed_queries(&queries, &out.dataset)?;
        let max_selected_error = fitted
            .iter()
            .zip(&self.noisy)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        self.rounds.push(RoundTrace {
            round,
            selected: self.selected.len(),
            initial_loss: out.initial_loss,
            final_loss: out.best_loss,
            steps: out.steps,
            stopped_early: out.stopped_early,
            max_selected_error,
            loss_trace: self.config.projection.record_trace.then_some(out.loss_trace),
        });
        if self.config.keep_snapshots {
            self.snapshots.push(out.dataset.clone());
        }
        Ok(out.dataset)
    }
}

pub fn run_rap(data: &DiscreteDataset, workload: &Workload, config: &RapConfig) -> Result<RapResult> {
    let started = Instant::now();
    let m = workload.len();
    config.validate(m)?;
    if data.is_empty() {
        return Err(Error::Data("private dataset is empty".into()));
    }
    let n = data.len();
    let delta = (!config.no_noise).then(|| config.resolved_delta(n));
    let budget = match delta {
        Some(delta) => PrivacyBudget::from_eps_delta(config.epsilon, delta)?,
        None => PrivacyBudget::noiseless(),
    };
    let rho = budget.rho_total();
    let truth = eval_discrete(workload, data)?;

    let (gaussian, gumbel) = if config.os_entropy {
        (NoiseSource::from_os_entropy(), NoiseSource::from_os_entropy())
    } else {
        (
            NoiseSource::stream(config.seed, Stream::Gaussian),
            NoiseSource::stream(config.seed, Stream::Gumbel),
        )
    };
    let mut run = Run {
        data,
        workload,
        config,
        budget,
        gaussian,
        gumbel,
        selected: Vec::new(),
        noisy: Vec::new(),
        rounds: Vec::new(),
        timing: RunTiming::default(),
        total_steps: 0,
        snapshots: Vec::new(),
    };
    let mut current = random_init(
        workload.schema(),
        config.n_prime,
        config.projection.normalization,
        &mut NoiseSource::stream(config.seed, Stream::Init),
    );

    if config.rounds == 1 {
        let per_query = if rho == NO_NOISE { NO_NOISE } else { rho / m as f64 };
        for (i, &t) in truth.iter().enumerate() {
            run.answer(i, t, per_query)?;
        }
        current = run.project(1, &current)?;
    } else {
        let calls = (2 * config.rounds * config.queries_per_round) as f64;
        let per_call = if rho == NO_NOISE { NO_NOISE } else { rho / calls };
        let mut pool: Vec<usize> = (0..m).collect();
        'rounds: for round in 1..=config.rounds {
            // D' is fixed within a round, so conjectures are computed once
            let conjectured = eval_relaxed_queries(workload.queries(), &current)?;
            for _ in 0..config.queries_per_round {
                if pool.is_empty() {
                    break 'rounds;
                }
                let pool_truth: Vec<f64> = pool.iter().map(|&i| truth[i]).collect();
                let pool_conj: Vec<f64> = pool.iter().map(|&i| conjectured[i]).collect();
                let pick = privacy::report_noisy_max(&pool_truth, &pool_conj, n, per_call, &mut run.gumbel)?;
                let index = pool.remove(pick);
                run.budget.spend(format!("rnm:r{round}"), per_call)?;
                run.answer(index, truth[index], per_call)?;
            }
            current = run.project(round, &current)?;
        }
    }

    run.timing.total_ms = started.elapsed().as_secs_f64() * 1e3;
    let proj_ms: f64 = run.timing.projection_ms.iter().sum();
    run.timing.ms_per_step = if run.total_steps > 0 {
        proj_ms / run.total_steps as f64
    } else {
        0.0
    };
    Ok(RapResult {
        config: config.clone(),
        delta,
        n,
        m,
        budget: run.budget.summary(),
        ledger: run.budget.ledger().to_vec(),
        selected: run.selected,
        noisy_answers: run.noisy,
        rounds: run.rounds,
        dataset: current,
        timing: run.timing,
        snapshots: run.snapshots,
    })
}
