//! Softmax-gated multinomial-logistic mixtures of experts.
//!
//! Fitting uses a batch minorization-maximization algorithm with closed-form
//! updates, so the log-likelihood never decreases. Fitted models convert to
//! mixing measures, which are merged pairwise into a dendrogram; the
//! dendrogram selection criterion (DSC) then picks the number of experts from
//! a single over-specified fit. AIC, BIC and ICL over multi-K sweeps, Voronoi
//! losses against a known truth and log-log rate fits are included for
//! comparison and diagnostics.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod io;
pub mod math;
pub mod mixing;
pub mod mm;
pub mod model;
pub mod selection;

pub use diagnostics::{
    rate_slope, tv_discrepancy, voronoi_assign, voronoi_loss, RateFit, VoronoiAssignment,
    VoronoiLossReport,
};
pub use error::{Error, Result};
pub use mixing::{
    build_chain, density_of_measure, dissimilarity, from_theta, merge_pair, Atom, MergeChain,
    MixingMeasure,
};
pub use mm::{fit_mm, mm_step, FitOptions, FitTrace};
pub use model::{
    log_likelihood, predict_proba, sample_dataset, CovariateSampler, Dataset, ModelSpec, Theta,
};
pub use selection::{criterion_scores, dsc_scores, param_count, Criterion, SelectionReport};
