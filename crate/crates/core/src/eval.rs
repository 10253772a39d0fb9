//! Error metrics and the experiment sweep harness.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::RelaxedDataset;
use crate::queries::{eval_discrete, eval_relaxed, random_workload, QueryKind, Workload};
use crate::rap::{run_rap, RapConfig};
use crate::rounding::{randomized_round, RoundingConfig};
use crate::schema::DiscreteDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub max_error: f64,
    pub mean_error: f64,
    pub errors: Vec<f64>,
    /// Max error of answering every query with 0, i.e. `max_i q_i(D)`.
    pub naive_baseline: f64,
    pub m: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum Synthetic<'a> {
    Relaxed(&'a RelaxedDataset),
    Discrete(&'a DiscreteDataset),
}

pub fn max_error(workload: &Workload, data: &DiscreteDataset, synth: Synthetic<'_>) -> Result<ErrorReport> {
    let truth = eval_discrete(workload, data)?;
    let synth_answers = match synth {
        Synthetic::Relaxed(r) => eval_relaxed(workload, r)?,
        Synthetic::Discrete(d) => eval_discrete(workload, d)?,
    };
    Ok(report_from_answers(&truth, &synth_answers))
}

pub(crate) fn report_from_answers(truth: &[f64], synth: &[f64]) -> ErrorReport {
    let errors: Vec<f64> = truth.iter().zip(synth).map(|(a, b)| (a - b).abs()).collect();
    let m = errors.len();
    ErrorReport {
        max_error: errors.iter().copied().fold(0.0, f64::max),
        mean_error: if m == 0 {
            0.0
        } else {
            errors.iter().sum::<f64>() / m as f64
        },
        naive_baseline: truth.iter().copied().fold(0.0, f64::max),
        errors,
        m,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    /// Number of marginals drawn for the workload.
    WorkloadSize,
    NPrime,
    Oversample,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::WorkloadSize => "workload_size",
            SweepAxis::NPrime => "n_prime",
            SweepAxis::Oversample => "oversample",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepAxis::Epsilon),
            "workload" | "workload_size" | "workload-size" => Ok(SweepAxis::WorkloadSize),
            "n_prime" | "n-prime" | "nprime" => Ok(SweepAxis::NPrime),
            "oversample" => Ok(SweepAxis::Oversample),
            other => Err(Error::InvalidArgument(format!("unknown sweep axis '{other}'"))),
        }
    }
}

/// How sweeps build their workload (the workload axis overrides `num_marginals`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub k: usize,
    pub num_marginals: usize,
    pub seed: u64,
    pub kind: QueryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Candidate `K` values; empty means the base config's.
    pub grid_k: Vec<usize>,
    /// Candidate `T` values; empty means the base config's.
    pub grid_t: Vec<usize>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidArgument("sweep needs at least one axis value".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("sweep needs at least one seed".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::InvalidArgument("sweep seeds must be distinct".into()));
        }
        for &v in &self.values {
            let ok = match self.axis {
                SweepAxis::Epsilon => v > 0.0 && v.is_finite(),
                _ => v >= 1.0 && v.fract() == 0.0,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!("invalid {} value {v}", self.axis)));
            }
        }
        Ok(())
    }

    /// `(T, K)` pairs; a single-round point ignores K, so it appears once.
    pub fn grid(&self, base: &RapConfig) -> Vec<(usize, usize)> {
        let ts = if self.grid_t.is_empty() {
            vec![base.rounds]
        } else {
            self.grid_t.clone()
        };
        let ks = if self.grid_k.is_empty() {
            vec![base.queries_per_round]
        } else {
            self.grid_k.clone()
        };
        let mut points = Vec::new();
        for &t in &ts {
            if t == 1 {
                if !points.contains(&(1, ks[0])) {
                    points.push((1, ks[0]));
                }
                continue;
            }
            for &k in &ks {
                points.push((t, k));
            }
        }
        points
    }
}

pub const STATUS_OK: &str = "ok";
pub const STATUS_BEST: &str = "best_of_grid_non_private_selection";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub n_prime: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub max_error: f64,
    pub mean_error: f64,
    pub naive_baseline: f64,
    pub wall_ms: f64,
    pub status: String,
    pub ms_per_step: f64,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK || self.status == STATUS_BEST
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub median_max_error: f64,
    pub median_mean_error: f64,
    pub naive_baseline: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    grid_points: usize,
}

impl SweepTable {
    /// Rows that represent a `(value, seed)` cell: the best-of-grid row when
    /// the grid has several points, else the single run.
    pub fn representative_rows(&self) -> impl Iterator<Item = &SweepRow> + '_ {
        let multi = self.grid_points > 1;
        self.rows.iter().filter(move |r| {
            if multi {
                r.status == STATUS_BEST
            } else {
                r.status == STATUS_OK
            }
        })
    }

    /// Medians over seeds of the representative rows, per axis value.
    pub fn summaries(&self) -> Vec<SweepSummary> {
        let mut values: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !values.contains(&r.value) {
                values.push(r.value);
            }
        }
        values
            .into_iter()
            .map(|value| {
                let rows: Vec<&SweepRow> = self.representative_rows().filter(|r| r.value == value).collect();
                SweepSummary {
                    value,
                    median_max_error: median(rows.iter().map(|r| r.max_error).collect()),
                    median_mean_error: median(rows.iter().map(|r| r.mean_error).collect()),
                    naive_baseline: rows.first().map_or(f64::NAN, |r| r.naive_baseline),
                    runs: rows.len(),
                }
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<sweep table>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Copy with timing columns zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> SweepTable {
        let mut t = self.clone();
        for r in &mut t.rows {
            r.wall_ms = 0.0;
            r.ms_per_step = 0.0;
        }
        t
    }
}

/// Median of a sample (mean of the two middle values for even sizes).
pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

struct Cell {
    value_index: usize,
    seed: u64,
    t: usize,
    k: usize,
}

/// Runs RAP for every axis value × seed × `(T, K)` grid point.
///
/// Cells run in parallel and are assembled in sweep order. Failed runs stay
/// in the table with an `error:` status. When the grid has more than one
/// point, each `(value, seed)` also gets a best-of-grid row chosen by true
/// error, which is not a private selection.
pub fn run_sweep(
    data: &DiscreteDataset,
    spec: &SweepSpec,
    base: &RapConfig,
    workload: &WorkloadSpec,
) -> Result<SweepTable> {
    spec.validate()?;
    let schema = data.schema();
    let build = |marginals: usize| random_workload(schema, workload.k, marginals, workload.seed, workload.kind);

    let workloads: Vec<Workload> = match spec.axis {
        SweepAxis::WorkloadSize => spec.values.iter().map(|&v| build(v as usize)).collect::<Result<_>>()?,
        _ => vec![build(workload.num_marginals)?],
    };
    let truths: Vec<Vec<f64>> = workloads
        .iter()
        .map(|w| eval_discrete(w, data))
        .collect::<Result<_>>()?;

    let grid = spec.grid(base);
    // rounding reuses one RAP run per (seed, grid point) across oversample values
    let value_slots: Vec<usize> = match spec.axis {
        SweepAxis::Oversample => vec![0],
        _ => (0..spec.values.len()).collect(),
    };
    let mut cells = Vec::new();
    for &value_index in &value_slots {
        for &seed in &spec.seeds {
            for &(t, k) in &grid {
                cells.push(Cell {
                    value_index,
                    seed,
                    t,
                    k,
                });
            }
        }
    }

    let results: Vec<Vec<SweepRow>> = cells
        .par_iter()
        .map(|cell| run_cell(data, spec, base, &workloads, &truths, cell))
        .collect();

    // regroup as value -> seed -> grid, then append best rows
    let mut by_key: Vec<((usize, u64), Vec<SweepRow>)> = Vec::new();
    for (cell, rows) in cells.iter().zip(results) {
        for (offset, row) in rows.into_iter().enumerate() {
            let key = (cell.value_index + offset, cell.seed);
            match by_key.iter_mut().find(|(k, _)| *k == key) {
                Some((_, bucket)) => bucket.push(row),
                None => by_key.push((key, vec![row])),
            }
        }
    }
    by_key.sort_by_key(|((vi, seed), _)| {
        let seed_pos = spec.seeds.iter().position(|s| s == seed).unwrap_or(0);
        (*vi, seed_pos)
    });

    let mut rows = Vec::new();
    for (_, bucket) in by_key {
        let best = if grid.len() > 1 {
            bucket
                .iter()
                .filter(|r| r.is_ok())
                .min_by(|a, b| a.max_error.total_cmp(&b.max_error))
                .cloned()
        } else {
            None
        };
        rows.extend(bucket);
        if let Some(mut b) = best {
            b.status = STATUS_BEST.to_string();
            rows.push(b);
        }
    }
    Ok(SweepTable {
        rows,
        grid_points: grid.len(),
    })
}

fn run_cell(
    data: &DiscreteDataset,
    spec: &SweepSpec,
    base: &RapConfig,
    workloads: &[Workload],
    truths: &[Vec<f64>],
    cell: &Cell,
) -> Vec<SweepRow> {
    let value = spec.values[cell.value_index];
    let mut config = base.clone();
    config.seed = cell.seed;
    config.rounds = cell.t;
    config.queries_per_round = cell.k;
    let wi = match spec.axis {
        SweepAxis::WorkloadSize => cell.value_index,
        _ => 0,
    };
    match spec.axis {
        SweepAxis::Epsilon => config.epsilon = value,
        SweepAxis::NPrime => config.n_prime = value as usize,
        SweepAxis::WorkloadSize | SweepAxis::Oversample => {}
    }
    let workload = &workloads[wi];
    let truth = &truths[wi];
    let naive = truth.iter().copied().fold(0.0, f64::max);
    let row = |value: f64, report: Option<&ErrorReport>, wall_ms: f64, ms_per_step: f64, status: String| SweepRow {
        axis: spec.axis,
        value,
        seed: cell.seed,
        k: cell.k,
        t: cell.t,
        n_prime: config.n_prime,
        epsilon: if config.no_noise { f64::INFINITY } else { config.epsilon },
        delta: if config.no_noise {
            0.0
        } else {
            config.resolved_delta(data.len())
        },
        max_error: report.map_or(f64::NAN, |r| r.max_error),
        mean_error: report.map_or(f64::NAN, |r| r.mean_error),
        naive_baseline: naive,
        wall_ms,
        status,
        ms_per_step,
    };

    let start = Instant::now();
    let result = match run_rap(data, workload, &config) {
        Ok(r) => r,
        Err(e) => {
            let values: Vec<f64> = match spec.axis {
                SweepAxis::Oversample => spec.values.clone(),
                _ => vec![value],
            };
            return values
                .into_iter()
                .map(|v| row(v, None, 0.0, 0.0, format!("error: {e}")))
                .collect();
        }
    };
    let rap_ms = start.elapsed().as_secs_f64() * 1e3;
    let per_step = result.timing.ms_per_step;

    match spec.axis {
        SweepAxis::Oversample => spec
            .values
            .iter()
            .map(|&r| {
                let start = Instant::now();
                let rounding = RoundingConfig {
                    oversample: r as usize,
                    seed: cell.seed,
                };
                let outcome = randomized_round(&result.dataset, &rounding).and_then(|synth| {
                    let answers = eval_discrete(workload, &synth)?;
                    Ok(report_from_answers(truth, &answers))
                });
                let wall = rap_ms + start.elapsed().as_secs_f64() * 1e3;
                match outcome {
                    Ok(report) => row(r, Some(&report), wall, per_step, STATUS_OK.into()),
                    Err(e) => row(r, None, wall, per_step, format!("error: {e}")),
                }
            })
            .collect(),
        _ => {
            let outcome = eval_relaxed(workload, &result.dataset).map(|a| report_from_answers(truth, &a));
            vec![match outcome {
                Ok(report) => row(value, Some(&report), rap_ms, per_step, STATUS_OK.into()),
                Err(e) => row(value, None, rap_ms, per_step, format!("error: {e}")),
            }]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::ProjectionConfig;
    use crate::schema::{one_hot, Schema};

    fn toy() -> DiscreteDataset {
        let s = Schema::from_cardinalities(&[2, 3, 4]).unwrap();
        let rows = (0..60u32).map(|r| vec![r % 2, (r / 3) % 3, (r * r) % 4]).collect();
        DiscreteDataset::new(s, rows).unwrap()
    }

    #[test]
    fn identical_synthetic_has_zero_error() {
        let d = toy();
        let w = Workload::all_marginals(d.schema(), 2, QueryKind::Product).unwrap();
        let r = max_error(&w, &d, Synthetic::Discrete(&d)).unwrap();
        assert_eq!(r.max_error, 0.0);
        let relaxed = RelaxedDataset::from_one_hot(&one_hot(&d));
        let rr = max_error(&w, &d, Synthetic::Relaxed(&relaxed)).unwrap();
        assert_eq!(rr, r);
    }

    #[test]
    fn zero_rows_hit_naive_baseline() {
        let d = toy();
        let w = Workload::all_marginals(d.schema(), 2, QueryKind::Product).unwrap();
        let zeros = RelaxedDataset::zeros(d.schema().clone(), 10);
        let r = max_error(&w, &d, Synthetic::Relaxed(&zeros)).unwrap();
        assert_eq!(r.max_error, r.naive_baseline);
        let truth = eval_discrete(&w, &d).unwrap();
        assert_eq!(r.naive_baseline, truth.iter().copied().fold(0.0, f64::max));
    }

    #[test]
    fn hand_computed_report() {
        let r = report_from_answers(&[0.5, 0.25], &[0.4, 0.25]);
        assert!((r.max_error - 0.1).abs() < 1e-15);
        assert!((r.mean_error - 0.05).abs() < 1e-15);
        assert_eq!(r.m, 2);
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let d = toy();
        let w = Workload::all_marginals(d.schema(), 2, QueryKind::Product).unwrap();
        let other = DiscreteDataset::new(Schema::from_cardinalities(&[2]).unwrap(), vec![vec![0]]).unwrap();
        assert!(matches!(
            max_error(&w, &d, Synthetic::Discrete(&other)),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }

    fn base() -> RapConfig {
        RapConfig {
            n_prime: 20,
            projection: ProjectionConfig {
                max_steps: 100,
                ..ProjectionConfig::default()
            },
            ..RapConfig::default()
        }
    }

    fn wl() -> WorkloadSpec {
        WorkloadSpec {
            k: 2,
            num_marginals: 3,
            seed: 0,
            kind: QueryKind::Product,
        }
    }

    #[test]
    fn epsilon_axis_cardinality() {
        let spec = SweepSpec {
            axis: SweepAxis::Epsilon,
            values: vec![0.1, 1.0],
            seeds: vec![0],
            grid_k: vec![],
            grid_t: vec![],
        };
        let table = run_sweep(&toy(), &spec, &base(), &wl()).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows.iter().all(|r| r.status == STATUS_OK));
        assert_eq!(table.summaries().len(), 2);
    }

    #[test]
    fn grid_adds_best_rows_and_keeps_failures() {
        let spec = SweepSpec {
            axis: SweepAxis::Epsilon,
            values: vec![0.5],
            seeds: vec![1, 2],
            grid_k: vec![2, 20],
            grid_t: vec![1, 2],
        };
        let table = run_sweep(&toy(), &spec, &base(), &wl()).unwrap();
        // grid (1,2), (2,2), (2,20): the last is infeasible with m = 26
        assert_eq!(table.rows.len(), 2 * (3 + 1));
        assert!(table.rows.iter().any(|r| r.status.starts_with("error:")));
        let best: Vec<_> = table.rows.iter().filter(|r| r.status == STATUS_BEST).collect();
        assert_eq!(best.len(), 2);
        assert_eq!(table.summaries()[0].runs, 2);
    }

    #[test]
    fn workload_axis_rejects_too_many_marginals() {
        let spec = SweepSpec {
            axis: SweepAxis::WorkloadSize,
            values: vec![1.0, 4.0],
            seeds: vec![0],
            grid_k: vec![],
            grid_t: vec![],
        };
        assert!(run_sweep(&toy(), &spec, &base(), &wl()).is_err());
    }

    #[test]
    fn oversample_and_n_prime_axes() {
        let spec = SweepSpec {
            axis: SweepAxis::Oversample,
            values: vec![1.0, 5.0],
            seeds: vec![0, 1],
            grid_k: vec![],
            grid_t: vec![],
        };
        let table = run_sweep(&toy(), &spec, &base(), &wl()).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert_eq!(table.rows[0].value, 1.0);
        assert_eq!(table.rows[1].value, 1.0);
        assert_eq!(table.rows[2].value, 5.0);

        let spec = SweepSpec {
            axis: SweepAxis::NPrime,
            values: vec![10.0, 30.0],
            seeds: vec![0],
            grid_k: vec![],
            grid_t: vec![],
        };
        let table = run_sweep(&toy(), &spec, &base(), &wl()).unwrap();
        assert_eq!(table.rows[0].n_prime, 10);
        assert_eq!(table.rows[1].n_prime, 30);
        assert!(table.rows.iter().all(|r| r.ms_per_step > 0.0 && r.wall_ms > 0.0));
    }

    #[test]
    fn sweep_is_reproducible_without_timing() {
        let spec = SweepSpec {
            axis: SweepAxis::Epsilon,
            values: vec![0.3],
            seeds: vec![4, 5],
            grid_k: vec![],
            grid_t: vec![],
        };
        let a = run_sweep(&toy(), &spec, &base(), &wl()).unwrap().without_timing();
        let b = run_sweep(&toy(), &spec, &base(), &wl()).unwrap().without_timing();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.write_csv(&mut ba).unwrap();
        b.write_csv(&mut bb).unwrap();
        assert_eq!(ba, bb);
        let header = String::from_utf8(ba).unwrap();
        assert!(header.starts_with(
            "axis,value,seed,K,T,n_prime,epsilon,delta,max_error,mean_error,naive_baseline,wall_ms,status,ms_per_step"
        ));
    }

    #[test]
    fn spec_validation() {
        let mut spec = SweepSpec {
            axis: SweepAxis::Epsilon,
            values: vec![],
            seeds: vec![0],
            grid_k: vec![],
            grid_t: vec![],
        };
        assert!(spec.validate().is_err());
        spec.values = vec![1.0];
        spec.seeds = vec![1, 1];
        assert!(spec.validate().is_err());
        spec.seeds = vec![1];
        spec.axis = SweepAxis::NPrime;
        spec.values = vec![2.5];
        assert!(spec.validate().is_err());
    }
}
