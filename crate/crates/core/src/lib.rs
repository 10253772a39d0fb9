//! Differentially private synthetic data by relaxed adaptive projection.
//!
//! A categorical dataset is one-hot encoded; k-way marginal queries become
//! products over one-hot columns and can then be evaluated and differentiated
//! on a real-valued relaxation of the data. Queries are answered privately
//! (Gaussian mechanism, optionally with Gumbel report-noisy-max selection
//! under zCDP accounting), a relaxed synthetic dataset is fitted to the noisy
//! answers with Adam, and randomized rounding turns it back into records.
//!
//! ```no_run
//! use rap_core::{load_csv, random_workload, run_rap, QueryKind, RapConfig};
//!
//! let data = load_csv("data.csv", None)?;
//! let workload = random_workload(data.schema(), 3, 64, 0, QueryKind::Product)?;
//! let result = run_rap(&data, &workload, &RapConfig { epsilon: 1.0, ..RapConfig::default() })?;
//! println!("spent rho = {}", result.budget.rho_spent);
//! # Ok::<(), rap_core::Error>(())
//! ```

pub mod cli;
pub mod error;
pub mod eval;
pub mod privacy;
pub mod projection;
pub mod queries;
pub mod rap;
pub mod rng;
pub mod rounding;
pub mod schema;

pub use error::{Error, Result};
pub use eval::{max_error, run_sweep, ErrorReport, SweepAxis, SweepSpec, SweepTable, Synthetic, WorkloadSpec};
pub use privacy::{
    eps_from_rho_delta, gaussian_mechanism, gumbel_sample, report_noisy_max, rho_from_eps_delta, PrivacyBudget,
    NO_NOISE,
};
pub use projection::{
    normalize_rows, random_init, relaxed_projection, sparsemax, Normalization, ProjectionConfig, RelaxedDataset,
};
pub use queries::{
    compile_marginal, eval_discrete, eval_relaxed, loss_and_gradient, random_workload, AnswerVector, CompiledQuery,
    MarginalQuery, QueryKind, Workload,
};
pub use rap::{conjectured_answers, run_rap, RapConfig, RapResult};
pub use rng::{NoiseSource, Stream};
pub use rounding::{randomized_round, RoundingConfig};
pub use schema::{bin_numeric, decode_row, load_csv, one_hot, DiscreteDataset, FeatureSpec, OneHotDataset, Schema};
