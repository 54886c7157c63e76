//! Statistical learners: a from-scratch random-forest regressor with
//! importance-based feature selection, logistic regression with Wald
//! inference, and error metrics.

mod forest;
mod logistic;
mod metrics;

pub use forest::{
    default_feature_names, rf_train, select_features, ForestModel, ForestParams, RegressionTree,
    TreeNode,
};
pub use logistic::{logistic_fit, LogisticFit};
pub use metrics::{mse, FeatureMatrix, LearnError};
