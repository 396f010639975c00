//! Hierarchical multitask Gaussian-process regression on difference-in-time-of-arrival
//! maps: exact GP machinery, three pooling regimes (independent, shared, intertask-GP),
//! NUTS-based inference, a synthetic plate simulator, and predictive evaluation.

pub mod datagen;
pub mod eval;
pub mod gp;
pub mod inference;
pub mod model;
