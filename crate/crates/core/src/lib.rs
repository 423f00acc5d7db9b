//! Deep kernel machines.
//!
//! A deep kernel machine replaces the features of a deep Gaussian process by
//! their Gram matrices `G_ℓ = (1/N) F_ℓ F_ℓᵀ` and optimises those directly. The
//! crate covers the objective and its gradients, Adam over factor
//! parameterisations, closed-form linear-kernel solutions, an inducing-point
//! variant with prediction, and finite-width Langevin sampling used to check
//! the wide limit.

pub mod data;
pub mod dgp;
pub mod error;
pub mod experiment;
pub mod gram;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod linear_oracle;
pub mod objective;
pub mod optimizer;
pub mod sparse;

pub use data::{
    input_gram, load_csv, rmse, standardize, subset, Dataset, DatasetSource, Split, SubsetMode,
};
pub use dgp::{
    dgp_sample_prior, langevin_posterior, langevin_summary, map_features_train, mc_gram_estimate,
    posterior_gram_estimate, vdkm_objective_gaussian, DgpConfig, GaussianLayer, Nonlinearity,
    VdkmProblem, WhiteNoiseState,
};
pub use error::{DkmError, Result};
pub use experiment::{run_split, SparseMethod, SplitOutcome, SplitRun, SplitSetup};
pub use gram::{gram_from_features, gram_rmse, sqdist, FeatureMatrix, GramMatrix, WidthProfile};
pub use kernels::{leaky_relu_pointwise, GramBlocks, KernelSpec, TtBlock};
pub use linalg::{sym_eig, Chol, Tolerances};
pub use linear_oracle::{linear_equal_width, linear_general_width, LinearSolution};
pub use objective::{
    dkm_objective, kl_gaussian, likelihood_as_kl, log_lik_regression, map_objective,
    objective_gradient, wishart_limit_check, wishart_logpdf, DkmState, ObjectiveKind,
    ObjectiveTerms, Problem, RegressionTargets,
};
pub use optimizer::{
    init_prior, init_random_scaled, optimize, FactorParams, OptimizerConfig, Trace, TraceRow,
};
pub use sparse::{
    full_predict, init_sparse_state, nngp_baseline, predict, predict_marginals, propagate,
    sparse_objective, train_sparse, KlOrder, OutputMode, PropagatedBlocks, SparseConfig,
    SparseState,
};
