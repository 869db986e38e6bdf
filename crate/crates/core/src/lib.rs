//! Entity-aware news recommendation: a small autodiff engine, the news and
//! user encoders, contrastive pre-training, click-prediction training and
//! ranking metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod news;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod ranker;
pub mod rng;
pub mod tensor;
pub mod train_log;
pub mod user;

pub use error::{Error, Result};
pub use tensor::{Real, Scalar, Tensor};
