//! Learned unrolled solvers: LISTA, DLISTA and A-DLISTA.

pub mod features;
pub mod head;
mod model;
mod train;

pub use features::{augmentation_features, features_of, FeatureOp, Features, NUM_FEATURES};
pub use model::{
    dlista_layer, gamma_name, psi_name, theta_name, InitConfig, ModelGraph, UnfoldedKind, UnfoldedModel,
    DEFAULT_LAYERS, THETA_INIT,
};
pub use train::train_unfolded;
