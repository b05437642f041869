//! Factor-augmented sparse linear regression (build in progress).

pub mod anova;
pub mod data;
mod eigen;
pub mod error;
pub mod estimate;
pub mod fab;
pub mod factor;
pub mod huber;
pub mod lasso;
pub mod seed;

pub use anova::{
    anova_statistic, isis_screen, marginal_screen, no_split_statistic, sparse_adequacy_test,
    split_indices, split_sample, AnovaResult, AnovaStatistic, ScreeningResult, ScreeningRule,
};
pub use data::DataSet;
pub use error::{FarmError, Result};
pub use estimate::{cv_select_lambda, fit_farm_cv, fit_farm_lasso, predict, FarmEstimate, LambdaPath};
pub use fab::{
    debias, entrywise_ci, estimate_sigma_rcv, fab_test, group_test, multiplier_bootstrap,
    nodewise_precision, nodewise_precision_of, report_from_draws, DebiasedEstimate, FabOutcome,
    PrecisionEstimate, TestReport,
};
pub use factor::{estimate_factors, project_out_factors, select_num_factors, FactorEstimate};
pub use huber::{default_tuning, fit_farm_huber, huber_value_grad, HuberConfig, HuberFit};
