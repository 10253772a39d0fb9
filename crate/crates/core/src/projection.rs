//! Relaxed projection: Adam on the squared query error over a continuous
//! relaxation of the one-hot domain, normalizing rows after every step.

use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queries::{CompiledQuery, Objective, DEFAULT_BATCH_SIZE};
use crate::rng::NoiseSource;
use crate::schema::{OneHotDataset, Schema};

/// `n' × d_prime` real matrix laid out over a schema's one-hot columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedDataset {
    schema: Schema,
    values: Vec<f64>,
    n: usize,
}

impl RelaxedDataset {
    pub fn new(schema: Schema, n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * schema.d_prime() {
            return Err(Error::SchemaMismatch(format!(
                "{} values do not form {n} rows of width {}",
                values.len(),
                schema.d_prime()
            )));
        }
        Ok(RelaxedDataset { schema, values, n })
    }

    pub fn zeros(schema: Schema, n: usize) -> Self {
        let values = vec![0.0; n * schema.d_prime()];
        RelaxedDataset { schema, values, n }
    }

    pub fn from_one_hot(data: &OneHotDataset) -> Self {
        RelaxedDataset {
            schema: data.schema().clone(),
            values: data.rows().flatten().map(|&b| b as f64).collect(),
            n: data.len(),
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn width(&self) -> usize {
        self.schema.d_prime()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.width();
        &self.values[r * w..(r + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.width())
    }

    /// CSV with a `feature=category` header and one row per relaxed record.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record((0..self.width()).map(|c| self.schema.column_name(c)))?;
        for row in self.rows() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(std::io::BufReader::new(file));
        let header = reader.headers()?.clone();
        let expected: Vec<String> = (0..schema.d_prime()).map(|c| schema.column_name(c)).collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::SchemaMismatch(format!(
                "{}: relaxed columns do not match the schema",
                path.display()
            )));
        }
        let mut values = Vec::new();
        let mut n = 0;
        for (r, record) in reader.records().enumerate() {
            for field in record?.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("{}: row {r}: '{field}' is not a number", path.display())))?;
                values.push(v);
            }
            n += 1;
        }
        RelaxedDataset::new(schema.clone(), n, values)
    }
}

/// Euclidean projection onto the probability simplex.
pub fn sparsemax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("sparsemax of an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("sparsemax input must be finite".into()));
    }
    let mut out = z.to_vec();
    sparsemax_in_place(&mut out, &mut Vec::with_capacity(z.len()));
    Ok(out)
}

/// In-place sparsemax; `scratch` is reused across calls to avoid allocation.
pub(crate) fn sparsemax_in_place(z: &mut [f64], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.extend_from_slice(z);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support_sum = 0.0;
    let mut support = 0;
    for (i, &v) in scratch.iter().enumerate() {
        cumsum += v;
        let k = (i + 1) as f64;
        if 1.0 + k * v > cumsum {
            support = i + 1;
            support_sum = cumsum;
        }
    }
    let tau = (support_sum - 1.0) / support as f64;
    for v in z.iter_mut() {
        *v = (*v - tau).max(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
#[derive(Default)]
pub enum Normalization {
    #[default]
    SparseMax,
    ClipBox {
        lo: f64,
        hi: f64,
    },
    /// Clamp to the box, then sparsemax each feature block.
    ClipThenSparseMax {
        lo: f64,
        hi: f64,
    },
}

impl Normalization {
    /// True when rows end up as per-feature distributions.
    pub fn yields_distributions(&self) -> bool {
        !matches!(self, Normalization::ClipBox { .. })
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Normalization::SparseMax => f.write_str("sparsemax"),
            Normalization::ClipBox { lo, hi } => write!(f, "clip[{lo},{hi}]"),
            Normalization::ClipThenSparseMax { lo, hi } => write!(f, "clip[{lo},{hi}]+sparsemax"),
        }
    }
}

impl FromStr for Normalization {
    type Err = Error;

    /// Accepts `sparsemax`, `clip` and `clip+sparsemax`; clipping uses `[-1, 1]`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparsemax" => Ok(Normalization::SparseMax),
            "clip" => Ok(Normalization::ClipBox { lo: -1.0, hi: 1.0 }),
            "clip+sparsemax" => Ok(Normalization::ClipThenSparseMax { lo: -1.0, hi: 1.0 }),
            other => Err(Error::InvalidArgument(format!("unknown normalization '{other}'"))),
        }
    }
}

fn sparsemax_blocks(data: &mut RelaxedDataset, scratch: &mut Vec<f64>) {
    let schema = data.schema.clone();
    let width = schema.d_prime();
    for row in data.values.chunks_exact_mut(width) {
        for i in 0..schema.num_features() {
            sparsemax_in_place(&mut row[schema.block(i)], scratch);
        }
    }
}

fn clip(data: &mut RelaxedDataset, lo: f64, hi: f64) {
    data.values.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
}

fn normalize_in_place(data: &mut RelaxedDataset, mode: Normalization, scratch: &mut Vec<f64>) {
    match mode {
        Normalization::SparseMax => sparsemax_blocks(data, scratch),
        Normalization::ClipBox { lo, hi } => clip(data, lo, hi),
        Normalization::ClipThenSparseMax { lo, hi } => {
            clip(data, lo, hi);
            sparsemax_blocks(data, scratch);
        }
    }
}

pub fn normalize_rows(data: &RelaxedDataset, mode: Normalization) -> RelaxedDataset {
    let mut out = data.clone();
    normalize_in_place(&mut out, mode, &mut Vec::new());
    out
}

/// Entries i.i.d. uniform on (-1, 1), then one normalization pass.
pub fn random_init(schema: &Schema, n: usize, mode: Normalization, rng: &mut NoiseSource) -> RelaxedDataset {
    let values = (0..n * schema.d_prime()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let data = RelaxedDataset {
        schema: schema.clone(),
        values,
        n,
    };
    normalize_rows(&data, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    params: AdamParams,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, params: AdamParams) -> Self {
        AdamState {
            params,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, x: &mut [f64], grad: &[f64], learning_rate: f64) {
        let AdamParams { beta1, beta2, epsilon } = self.params;
        self.step += 1;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (((x, &g), m), v) in x.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *x -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Stop once `(L_prev - L_cur) / max(L_prev, 1e-30)` falls in `[0, early_stop_rel)`.
    pub early_stop_rel: f64,
    pub normalization: Normalization,
    #[serde(default)]
    pub adam: AdamParams,
    pub batch_size: usize,
    /// Keep the per-step loss sequence in the outcome.
    #[serde(default)]
    pub record_trace: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            learning_rate: 0.001,
            max_steps: 5000,
            early_stop_rel: 1e-7,
            normalization: Normalization::SparseMax,
            adam: AdamParams::default(),
            batch_size: DEFAULT_BATCH_SIZE,
            record_trace: false,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
        }
        if !(self.early_stop_rel >= 0.0) {
            return Err(Error::InvalidArgument("early_stop_rel must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if let Normalization::ClipBox { lo, hi } | Normalization::ClipThenSparseMax { lo, hi } = self.normalization {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!("empty clip box [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionOutcome {
    /// Lowest-loss iterate seen, including the initial point.
    pub dataset: RelaxedDataset,
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Number of Adam updates taken.
    pub steps: usize,
    pub stopped_early: bool,
    /// Loss before any update followed by the loss after each update.
    pub loss_trace: Vec<f64>,
}

/// Minimizes `Σ_j (q_j(D') - target_j)²` starting from `init`.
pub fn relaxed_projection(
    queries: &[CompiledQuery],
    targets: &[f64],
    init: &RelaxedDataset,
    config: &ProjectionConfig,
) -> Result<ProjectionOutcome> {
    config.validate()?;
    if queries.is_empty() {
        return Err(Error::InvalidArgument(
            "relaxed projection needs at least one query".into(),
        ));
    }
    let mut objective = Objective::with_batch_size(queries, targets, config.batch_size)?;
    let mut current = init.clone();
    let mut grad = vec![0.0; current.values.len()];
    let mut adam = AdamState::new(grad.len(), config.adam);
    let mut scratch = Vec::new();

    let mut loss = objective.loss_and_gradient(&current, &mut grad)?;
    let initial_loss = loss;
    let mut best_loss = loss;
    let mut best = current.clone();
    let mut trace = Vec::new();
    if config.record_trace {
        trace.push(loss);
    }
    let mut steps = 0;
    let mut stopped_early = false;
    while steps < config.max_steps {
        if loss == 0.0 {
            stopped_early = true;
            break;
        }
        adam.update(&mut current.values, &grad, config.learning_rate);
        normalize_in_place(&mut current, config.normalization, &mut scratch);
        steps += 1;
        let prev = loss;
        loss = objective.loss_and_gradient(&current, &mut grad)?;
        if config.record_trace {
            trace.push(loss);
        }
        if !loss.is_finite() {
            break;
        }
        if loss < best_loss {
            best_loss = loss;
            best.values.copy_from_slice(&current.values);
        }
        let improvement = (prev - loss) / prev.max(1e-30);
        if (0.0..config.early_stop_rel).contains(&improvement) {
            stopped_early = true;
            break;
        }
    }
    Ok(ProjectionOutcome {
        dataset: best,
        initial_loss,
        best_loss,
        steps,
        stopped_early,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queries::{eval_relaxed_queries, QueryKind, Workload};
    use crate::schema::{one_hot, DiscreteDataset};

    /// Exhaustive search over supports: on support S the projection is
    /// `z_i - τ` with `τ = (Σ_S z - 1) / |S|`; keep the closest feasible one.
    fn brute_force_simplex_projection(z: &[f64]) -> Vec<f64> {
        let n = z.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << n) {
            let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let tau = (members.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / members.len() as f64;
            let mut p = vec![0.0; n];
            for &i in &members {
                p[i] = z[i] - tau;
            }
            if p.iter().any(|&v| v < 0.0) {
                continue;
            }
            let dist: f64 = p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                best = Some((dist, p));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn sparsemax_examples() {
        assert_eq!(sparsemax(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let v = sparsemax(&[0.3, 0.3]).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 0.5).abs() < 1e-15);
        assert_eq!(sparsemax(&[2.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(sparsemax(&[]).is_err());
        assert!(sparsemax(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn sparsemax_matches_brute_force() {
        let mut rng = NoiseSource::seeded(2);
        for _ in 0..300 {
            let dim = rng.gen_range(1..=8);
            let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fast = sparsemax(&z).unwrap();
            let slow = brute_force_simplex_projection(&z);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "{z:?}: {fast:?} vs {slow:?}");
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let s = Schema::from_cardinalities(&[2, 3]).unwrap();
        let d = DiscreteDataset::new(s.clone(), vec![vec![1, 2], vec![0, 0]]).unwrap();
        let oh = RelaxedDataset::from_one_hot(&one_hot(&d));
        assert_eq!(normalize_rows(&oh, Normalization::SparseMax), oh);

        let s1 = Schema::from_cardinalities(&[2]).unwrap();
        let r = RelaxedDataset::new(s1.clone(), 1, vec![0.3, 0.3]).unwrap();
        let out = normalize_rows(&r, Normalization::SparseMax);
        assert!((out.values()[0] - 0.5).abs() < 1e-15);

        let r = RelaxedDataset::new(s1, 1, vec![1.7, -3.0]).unwrap();
        let out = normalize_rows(&r, Normalization::ClipBox { lo: -1.0, hi: 1.0 });
        assert_eq!(out.values(), &[1.0, -1.0]);
        let out = normalize_rows(&r, Normalization::ClipThenSparseMax { lo: -1.0, hi: 1.0 });
        assert_eq!(out.values(), &[1.0, 0.0]);
    }

    #[test]
    fn normalization_parses() {
        assert_eq!("sparsemax".parse::<Normalization>().unwrap(), Normalization::SparseMax);
        assert_eq!(
            "clip".parse::<Normalization>().unwrap(),
            Normalization::ClipBox { lo: -1.0, hi: 1.0 }
        );
        assert!("softmax".parse::<Normalization>().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = AdamState::new(2, AdamParams::default());
        let mut x = vec![1.0, 1.0];
        adam.update(&mut x, &[3.0, -0.5], 0.01);
        assert!((x[0] - 0.99).abs() < 1e-9);
        assert!((x[1] - 1.01).abs() < 1e-9);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn already_optimal_stops_immediately() {
        let s = Schema::from_cardinalities(&[2, 3]).unwrap();
        let w = Workload::all_marginals(&s, 2, QueryKind::Product).unwrap();
        let init = random_init(&s, 5, Normalization::SparseMax, &mut NoiseSource::seeded(1));
        let targets = eval_relaxed_queries(w.queries(), &init).unwrap();
        let out = relaxed_projection(w.queries(), &targets, &init, &ProjectionConfig::default()).unwrap();
        assert_eq!(out.best_loss, 0.0);
        assert!(out.steps <= 2, "{}", out.steps);
        assert_eq!(out.dataset, init);
    }

    #[test]
    fn projection_rejects_bad_input() {
        let s = Schema::from_cardinalities(&[2]).unwrap();
        let init = RelaxedDataset::zeros(s, 1);
        assert!(relaxed_projection(&[], &[], &init, &ProjectionConfig::default()).is_err());
        let q = CompiledQuery {
            kind: QueryKind::Product,
            columns: vec![0],
        };
        let bad = ProjectionConfig {
            max_steps: 0,
            ..ProjectionConfig::default()
        };
        assert!(relaxed_projection(&[q], &[0.5], &init, &bad).is_err());
    }

    #[test]
    fn projection_improves_and_keeps_blocks_on_simplex() {
        let s = Schema::from_cardinalities(&[3, 2, 3]).unwrap();
        let w = Workload::all_marginals(&s, 2, QueryKind::Product).unwrap();
        let data = DiscreteDataset::new(
            s.clone(),
            (0..30)
                .map(|r| vec![(r % 3) as u32, (r % 2) as u32, ((r / 2) % 3) as u32])
                .collect(),
        )
        .unwrap();
        let targets = crate::queries::eval_discrete(&w, &data).unwrap();
        let init = random_init(&s, 30, Normalization::SparseMax, &mut NoiseSource::seeded(8));
        let config = ProjectionConfig {
            max_steps: 500,
            record_trace: true,
            ..ProjectionConfig::default()
        };
        let out = relaxed_projection(w.queries(), &targets, &init, &config).unwrap();
        assert!(out.best_loss <= out.initial_loss);
        assert!(out.best_loss < 0.5 * out.initial_loss);
        assert_eq!(out.loss_trace.len(), out.steps + 1);
        assert!(out.loss_trace.iter().all(|l| l.is_finite()));
        for row in out.dataset.rows() {
            for i in 0..s.num_features() {
                let block = &row[s.block(i)];
                assert!(block.iter().all(|&v| v >= 0.0));
                assert!((block.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let again = relaxed_projection(w.queries(), &targets, &init, &config).unwrap();
        assert_eq!(again.dataset, out.dataset);
    }

    #[test]
    fn relaxed_csv_round_trip() {
        let s = Schema::from_cardinalities(&[2, 2]).unwrap();
        let r = random_init(&s, 3, Normalization::SparseMax, &mut NoiseSource::seeded(0));
        let f = tempfile::NamedTempFile::new().unwrap();
        r.write_csv(f.path()).unwrap();
        assert_eq!(RelaxedDataset::read_csv(f.path(), &s).unwrap(), r);
        let other = Schema::from_cardinalities(&[2, 3]).unwrap();
        assert!(RelaxedDataset::read_csv(f.path(), &other).is_err());
    }

    proptest::proptest! {
        #[test]
        fn sparsemax_is_idempotent(z in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
            let once = sparsemax(&z).unwrap();
            let twice = sparsemax(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
            proptest::prop_assert!((once.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            proptest::prop_assert!(once.iter().all(|&v| v >= 0.0));
        }
    }
}
