pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod pretrain_data;
pub mod report;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
