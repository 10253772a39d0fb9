//! Marginal and 1-out-of-k threshold queries.
//!
//! A k-way marginal `(S, y)` compiles to the set `T` of one-hot columns
//! `offsets[i] + y_i`. On relaxed data the product query `∏_{c∈T} x_c`
//! agrees with the marginal on every one-hot row; the threshold query
//! `1 - ∏_{c∈T} (1 - x_c)` fires when at least one condition holds.

use std::fs::File;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::RelaxedDataset;
use crate::rng::{NoiseSource, Stream};
use crate::schema::{DiscreteDataset, Schema};

/// Default number of queries evaluated per batch in the loss/gradient pass.
pub const DEFAULT_BATCH_SIZE: usize = 1 << 16;

pub type AnswerVector = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Product,
    OneOutOfK,
}

/// Marginal query: features `S` must take the values `y`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarginalQuery {
    pub features: Vec<usize>,
    pub values: Vec<u32>,
}

impl MarginalQuery {
    pub fn new(features: Vec<usize>, values: Vec<u32>, schema: &Schema) -> Result<Self> {
        if features.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "marginal has {} features but {} values",
                features.len(),
                values.len()
            )));
        }
        let mut seen = vec![false; schema.num_features()];
        for (&f, &v) in features.iter().zip(&values) {
            if f >= schema.num_features() {
                return Err(Error::InvalidArgument(format!("feature {f} out of range")));
            }
            if std::mem::replace(&mut seen[f], true) {
                return Err(Error::InvalidArgument(format!("feature {f} repeated in marginal")));
            }
            if v as usize >= schema.cardinality(f) {
                return Err(Error::InvalidArgument(format!(
                    "value {v} out of range for feature {f} (t = {})",
                    schema.cardinality(f)
                )));
            }
        }
        Ok(MarginalQuery { features, values })
    }
}

/// A query over one-hot columns, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompiledQuery {
    pub kind: QueryKind,
    pub columns: Vec<usize>,
}

pub fn compile_marginal(query: &MarginalQuery, schema: &Schema, kind: QueryKind) -> CompiledQuery {
    let mut columns: Vec<usize> = query
        .features
        .iter()
        .zip(&query.values)
        .map(|(&f, &v)| schema.offset(f) + v as usize)
        .collect();
    columns.sort_unstable();
    CompiledQuery { kind, columns }
}

/// On-disk form of a workload: the generating marginals, not the queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadFile {
    pub kind: QueryKind,
    pub marginals: Vec<Vec<usize>>,
    pub seed: Option<u64>,
    pub k: usize,
}

/// Every query consistent with a list of marginals, in enumeration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    schema: Schema,
    kind: QueryKind,
    k: usize,
    seed: Option<u64>,
    marginals: Vec<Vec<usize>>,
    queries: Vec<CompiledQuery>,
}

impl Workload {
    /// Enumerates, per marginal, all value combinations with the last
    /// feature varying fastest.
    pub fn from_marginals(
        schema: &Schema,
        kind: QueryKind,
        marginals: Vec<Vec<usize>>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut queries = Vec::new();
        let mut k = 0;
        for features in &marginals {
            if features.is_empty() {
                return Err(Error::InvalidArgument("empty marginal".into()));
            }
            k = k.max(features.len());
            let mut values = vec![0u32; features.len()];
            // validates S once; the odometer only produces in-range values
            MarginalQuery::new(features.clone(), values.clone(), schema)?;
            'odometer: loop {
                let q = MarginalQuery {
                    features: features.clone(),
                    values: values.clone(),
                };
                queries.push(compile_marginal(&q, schema, kind));
                for pos in (0..features.len()).rev() {
                    values[pos] += 1;
                    if (values[pos] as usize) < schema.cardinality(features[pos]) {
                        continue 'odometer;
                    }
                    values[pos] = 0;
                }
                break;
            }
        }
        Ok(Workload {
            schema: schema.clone(),
            kind,
            k,
            seed,
            marginals,
            queries,
        })
    }

    /// All `C(d, k)` marginals in lexicographic order.
    pub fn all_marginals(schema: &Schema, k: usize, kind: QueryKind) -> Result<Self> {
        let d = schema.num_features();
        check_arity(k, d)?;
        let total = binomial(d, k);
        let marginals = (0..total).map(|r| unrank_combination(r, d, k)).collect();
        Workload::from_marginals(schema, kind, marginals, None)
    }

    pub fn from_file(file: &WorkloadFile, schema: &Schema) -> Result<Self> {
        let mut w = Workload::from_marginals(schema, file.kind, file.marginals.clone(), file.seed)?;
        w.k = file.k.max(w.k);
        Ok(w)
    }

    pub fn to_file(&self) -> WorkloadFile {
        WorkloadFile {
            kind: self.kind,
            marginals: self.marginals.clone(),
            seed: self.seed,
            k: self.k,
        }
    }

    pub fn read_json(path: impl AsRef<Path>, schema: &Schema) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let file: WorkloadFile = serde_json::from_reader(std::io::BufReader::new(f))?;
        Workload::from_file(&file, schema)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(&self.to_file())?).map_err(|e| Error::io(path, e))
    }

    /// Column-index arrays of every compiled query.
    pub fn column_dump(&self) -> Vec<Vec<usize>> {
        self.queries.iter().map(|q| q.columns.clone()).collect()
    }

    /// Appends another workload over the same schema and query kind.
    pub fn concat(mut self, other: Workload) -> Result<Self> {
        if self.schema != other.schema || self.kind != other.kind {
            return Err(Error::SchemaMismatch("workloads differ in schema or kind".into()));
        }
        self.k = self.k.max(other.k);
        self.marginals.extend(other.marginals);
        self.queries.extend(other.queries);
        self.seed = None;
        Ok(self)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn kind(&self) -> QueryKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn marginals(&self) -> &[Vec<usize>] {
        &self.marginals
    }

    pub fn queries(&self) -> &[CompiledQuery] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Number of queries each marginal contributes.
    pub fn counts_per_marginal(&self) -> Vec<usize> {
        self.marginals
            .iter()
            .map(|s| s.iter().map(|&f| self.schema.cardinality(f)).product())
            .collect()
    }
}

fn check_arity(k: usize, d: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("arity k = {k} must lie in 1..={d}")));
    }
    Ok(())
}

pub(crate) fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    usize::try_from(acc).unwrap_or(usize::MAX)
}

/// `rank`-th k-subset of `0..n` in lexicographic order.
fn unrank_combination(mut rank: usize, n: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut next = 0;
    for slot in 0..k {
        let remaining = k - slot;
        loop {
            let with_next = binomial(n - next - 1, remaining - 1);
            if rank < with_next {
                out.push(next);
                next += 1;
                break;
            }
            rank -= with_next;
            next += 1;
        }
    }
    out
}

/// Samples `num_marginals` distinct k-subsets uniformly without replacement
/// and enumerates all their queries.
pub fn random_workload(
    schema: &Schema,
    k: usize,
    num_marginals: usize,
    seed: u64,
    kind: QueryKind,
) -> Result<Workload> {
    let d = schema.num_features();
    check_arity(k, d)?;
    let total = binomial(d, k);
    if num_marginals == 0 || num_marginals > total {
        return Err(Error::InvalidArgument(format!(
            "cannot select {num_marginals} of the {total} available {k}-way marginals"
        )));
    }
    let mut rng = NoiseSource::stream(seed, Stream::Workload);
    let marginals = index::sample(&mut rng, total, num_marginals)
        .into_iter()
        .map(|r| unrank_combination(r, d, k))
        .collect();
    Workload::from_marginals(schema, kind, marginals, Some(seed))
}

fn column_conditions(query: &CompiledQuery, schema: &Schema) -> Vec<(usize, u32)> {
    query
        .columns
        .iter()
        .map(|&c| {
            let (f, v) = schema.column_owner(c);
            (f, v as u32)
        })
        .collect()
}

/// Exact answers on discrete data as `count / n`.
pub fn eval_discrete(workload: &Workload, data: &DiscreteDataset) -> Result<AnswerVector> {
    if workload.schema() != data.schema() {
        return Err(Error::SchemaMismatch("workload and dataset schemas differ".into()));
    }
    eval_discrete_queries(workload.queries(), data)
}

pub fn eval_discrete_queries(queries: &[CompiledQuery], data: &DiscreteDataset) -> Result<AnswerVector> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate queries on an empty dataset".into()));
    }
    let schema = data.schema();
    if let Some(c) = queries
        .iter()
        .flat_map(|q| &q.columns)
        .find(|&&c| c >= schema.d_prime())
    {
        return Err(Error::SchemaMismatch(format!("query column {c} outside the schema")));
    }
    let n = data.len() as f64;
    Ok(queries
        .par_iter()
        .map(|q| {
            let conds = column_conditions(q, schema);
            let count = data
                .rows()
                .filter(|row| match q.kind {
                    QueryKind::Product => conds.iter().all(|&(f, v)| row[f] == v),
                    QueryKind::OneOutOfK => conds.iter().any(|&(f, v)| row[f] == v),
                })
                .count();
            count as f64 / n
        })
        .collect())
}

#[inline]
pub(crate) fn query_row_value(kind: QueryKind, columns: &[usize], row: &[f64]) -> f64 {
    match kind {
        QueryKind::Product => columns.iter().map(|&c| row[c]).product(),
        QueryKind::OneOutOfK => 1.0 - columns.iter().map(|&c| 1.0 - row[c]).product::<f64>(),
    }
}

/// Relaxed answers `(1/n') Σ_rows q(row)`.
pub fn eval_relaxed(workload: &Workload, data: &RelaxedDataset) -> Result<AnswerVector> {
    if workload.schema() != data.schema() {
        return Err(Error::SchemaMismatch(
            "workload and relaxed dataset schemas differ".into(),
        ));
    }
    eval_relaxed_queries(workload.queries(), data)
}

pub fn eval_relaxed_queries(queries: &[CompiledQuery], data: &RelaxedDataset) -> Result<AnswerVector> {
    let width = data.width();
    if let Some(c) = queries.iter().flat_map(|q| &q.columns).find(|&&c| c >= width) {
        return Err(Error::SchemaMismatch(format!(
            "query column {c} outside relaxed width {width}"
        )));
    }
    if data.is_empty() {
        return Err(Error::Data(
            "cannot evaluate queries on an empty relaxed dataset".into(),
        ));
    }
    let mut out = vec![0.0; queries.len()];
    relaxed_answers_into(queries, data.values(), width, &mut out);
    Ok(out)
}

fn relaxed_answers_into(queries: &[CompiledQuery], values: &[f64], width: usize, out: &mut [f64]) {
    let n = (values.len() / width) as f64;
    out.par_iter_mut().zip(queries.par_iter()).for_each(|(slot, q)| {
        let sum: f64 = values
            .chunks_exact(width)
            .map(|row| query_row_value(q.kind, &q.columns, row))
            .sum();
        *slot = sum / n;
    });
}

/// Rows per slab. Slabs are transposed so per-query work runs along rows.
const SLAB_ROWS: usize = 128;
/// Upper bound on partial answer vectors held at once.
const MAX_ANSWER_TASKS: usize = 64;

/// One slab of rows in column-major order, plus work buffers.
#[derive(Debug)]
struct Slab {
    rows: usize,
    x: Vec<f64>,
    /// `1 - x`, the threshold-query factors.
    comp: Vec<f64>,
    grad: Vec<f64>,
    /// Suffix products, `max_arity + 1` columns.
    suffix: Vec<f64>,
    prefix: Vec<f64>,
}

impl Slab {
    fn new(width: usize, max_arity: usize) -> Slab {
        Slab {
            rows: 0,
            x: vec![0.0; width * SLAB_ROWS],
            comp: vec![0.0; width * SLAB_ROWS],
            grad: vec![0.0; width * SLAB_ROWS],
            suffix: vec![0.0; (max_arity + 1) * SLAB_ROWS],
            prefix: vec![0.0; SLAB_ROWS],
        }
    }

    fn load(&mut self, values: &[f64], width: usize) {
        self.rows = values.len() / width;
        for (r, row) in values.chunks_exact(width).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                self.x[c * SLAB_ROWS + r] = v;
                self.comp[c * SLAB_ROWS + r] = 1.0 - v;
            }
        }
    }

    /// Adds `Σ_rows q(row)` for each query to `acc`.
    fn add_answers(&mut self, queries: &[CompiledQuery], acc: &mut [f64]) {
        let n = self.rows;
        for (q, a) in queries.iter().zip(acc.iter_mut()) {
            let prod = &mut self.prefix[..n];
            prod.fill(1.0);
            for &c in &q.columns {
                let col = c * SLAB_ROWS;
                let f = match q.kind {
                    QueryKind::Product => &self.x[col..col + n],
                    QueryKind::OneOutOfK => &self.comp[col..col + n],
                };
                for (p, v) in prod.iter_mut().zip(f) {
                    *p *= v;
                }
            }
            let sum: f64 = match q.kind {
                QueryKind::Product => prod.iter().sum(),
                QueryKind::OneOutOfK => prod.iter().map(|p| 1.0 - p).sum(),
            };
            *a += sum;
        }
    }

    /// Fills `self.grad` with `Σ_j coefs[j] ∂q_j/∂x` for this slab.
    fn gradient(&mut self, queries: &[CompiledQuery], coefs: &[f64]) {
        let n = self.rows;
        self.grad.fill(0.0);
        for (q, &coef) in queries.iter().zip(coefs) {
            if coef == 0.0 {
                continue;
            }
            let k = q.columns.len();
            // suffix[i] = ∏_{i' >= i} factor(c_i'), suffix[k] = 1
            self.suffix[k * SLAB_ROWS..k * SLAB_ROWS + n].fill(1.0);
            for i in (0..k).rev() {
                let (lo, hi) = self.suffix.split_at_mut((i + 1) * SLAB_ROWS);
                let dst = &mut lo[i * SLAB_ROWS..i * SLAB_ROWS + n];
                let col = q.columns[i] * SLAB_ROWS;
                let f = match q.kind {
                    QueryKind::Product => &self.x[col..col + n],
                    QueryKind::OneOutOfK => &self.comp[col..col + n],
                };
                for ((d, s), v) in dst.iter_mut().zip(&hi[..n]).zip(f) {
                    *d = s * v;
                }
            }
            let prefix = &mut self.prefix[..n];
            prefix.fill(1.0);
            for i in 0..k {
                let col = q.columns[i] * SLAB_ROWS;
                let after = &self.suffix[(i + 1) * SLAB_ROWS..(i + 1) * SLAB_ROWS + n];
                let g = &mut self.grad[col..col + n];
                for ((g, p), s) in g.iter_mut().zip(prefix.iter()).zip(after) {
                    *g += coef * (p * s);
                }
                let f = match q.kind {
                    QueryKind::Product => &self.x[col..col + n],
                    QueryKind::OneOutOfK => &self.comp[col..col + n],
                };
                for (p, v) in prefix.iter_mut().zip(f) {
                    *p *= v;
                }
            }
        }
    }

    fn store_gradient(&self, out: &mut [f64], width: usize) {
        for (r, row) in out.chunks_exact_mut(width).enumerate() {
            for (c, g) in row.iter_mut().enumerate() {
                *g = self.grad[c * SLAB_ROWS + r];
            }
        }
    }
}

/// Squared-error objective `Σ_j (q_j(D') - target_j)²` over a fixed query list.
///
/// Rows are processed in fixed slabs whose partial sums are combined in slab
/// order, so results do not depend on the thread count.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    queries: &'a [CompiledQuery],
    targets: &'a [f64],
    batch_size: usize,
    max_arity: usize,
    answers: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(queries: &'a [CompiledQuery], targets: &'a [f64]) -> Result<Self> {
        Objective::with_batch_size(queries, targets, DEFAULT_BATCH_SIZE)
    }

    pub fn with_batch_size(queries: &'a [CompiledQuery], targets: &'a [f64], batch_size: usize) -> Result<Self> {
        if queries.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} queries but {} targets",
                queries.len(),
                targets.len()
            )));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let max_arity = queries.iter().map(|q| q.columns.len()).max().unwrap_or(0);
        Ok(Objective {
            queries,
            targets,
            batch_size,
            max_arity,
            answers: vec![0.0; batch_size.min(queries.len())],
        })
    }

    pub fn queries(&self) -> &[CompiledQuery] {
        self.queries
    }

    fn check_width(&self, data: &RelaxedDataset) -> Result<()> {
        let width = data.width();
        match self.queries.iter().flat_map(|q| &q.columns).find(|&&c| c >= width) {
            Some(c) => Err(Error::SchemaMismatch(format!(
                "query column {c} outside relaxed width {width}"
            ))),
            None if data.is_empty() => Err(Error::Data("relaxed dataset has no rows".into())),
            None => Ok(()),
        }
    }

    pub fn loss(&mut self, data: &RelaxedDataset) -> Result<f64> {
        self.check_width(data)?;
        let mut loss = 0.0;
        for (qs, ts) in self
            .queries
            .chunks(self.batch_size)
            .zip(self.targets.chunks(self.batch_size))
        {
            let answers = &mut self.answers[..qs.len()];
            slab_answers(qs, data, self.max_arity, answers);
            for (a, t) in answers.iter().zip(ts) {
                loss += (a - t) * (a - t);
            }
        }
        Ok(loss)
    }

    /// Loss and its gradient; `grad` is overwritten and must match the data shape.
    pub fn loss_and_gradient(&mut self, data: &RelaxedDataset, grad: &mut [f64]) -> Result<f64> {
        self.check_width(data)?;
        let width = data.width();
        let values = data.values();
        if grad.len() != values.len() {
            return Err(Error::InvalidArgument("gradient buffer has the wrong shape".into()));
        }
        let batches = self.queries.len().div_ceil(self.batch_size);
        if batches > 1 {
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
        let inv_n = 1.0 / data.len() as f64;
        let max_arity = self.max_arity;
        let mut loss = 0.0;
        for (qs, ts) in self
            .queries
            .chunks(self.batch_size)
            .zip(self.targets.chunks(self.batch_size))
        {
            let answers = &mut self.answers[..qs.len()];
            slab_answers(qs, data, max_arity, answers);
            // residual coefficients 2 (q_j - a_j) / n'
            for (a, t) in answers.iter_mut().zip(ts) {
                let r = *a - t;
                loss += r * r;
                *a = 2.0 * r * inv_n;
            }
            let coefs = &*answers;
            grad.par_chunks_mut(SLAB_ROWS * width)
                .zip(values.par_chunks(SLAB_ROWS * width))
                .for_each_init(
                    || Slab::new(width, max_arity),
                    |slab, (g, v)| {
                        slab.load(v, width);
                        slab.gradient(qs, coefs);
                        if batches > 1 {
                            let mut part = vec![0.0; g.len()];
                            slab.store_gradient(&mut part, width);
                            g.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                        } else {
                            slab.store_gradient(g, width);
                        }
                    },
                );
        }
        Ok(loss)
    }
}

/// Relaxed answers `(1/n') Σ_rows q(row)` via slabs.
fn slab_answers(queries: &[CompiledQuery], data: &RelaxedDataset, max_arity: usize, out: &mut [f64]) {
    let width = data.width();
    let n = data.len();
    let slabs = n.div_ceil(SLAB_ROWS);
    let per_task = slabs.div_ceil(MAX_ANSWER_TASKS) * SLAB_ROWS;
    let partial: Vec<Vec<f64>> = data
        .values()
        .par_chunks(per_task * width)
        .map_init(
            || Slab::new(width, max_arity),
            |slab, task| {
                let mut acc = vec![0.0; queries.len()];
                for v in task.chunks(SLAB_ROWS * width) {
                    slab.load(v, width);
                    slab.add_answers(queries, &mut acc);
                }
                acc
            },
        )
        .collect();
    out.iter_mut().for_each(|o| *o = 0.0);
    for acc in partial {
        for (o, a) in out.iter_mut().zip(acc) {
            *o += a;
        }
    }
    let n = n as f64;
    out.iter_mut().for_each(|o| *o /= n);
}

/// Convenience wrapper returning a freshly allocated gradient.
pub fn loss_and_gradient(queries: &[CompiledQuery], targets: &[f64], data: &RelaxedDataset) -> Result<(f64, Vec<f64>)> {
    let mut objective = Objective::new(queries, targets)?;
    let mut grad = vec![0.0; data.values().len()];
    let loss = objective.loss_and_gradient(data, &mut grad)?;
    Ok((loss, grad))
}
