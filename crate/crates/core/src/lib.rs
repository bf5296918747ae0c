pub mod adapters;
pub mod error;
mod io;
pub mod model;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod positioning;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use adapters::{AdapterRole, InjectionPoint, LoraAdapter, Projection};
pub use model::{BaseModel, ModelConfig, Tokenizer};
pub use numerics::Matrix;
pub use pipeline::{EvalMode, RunOptions};
pub use positioning::DomainPrototypeSet;
pub use tasks::{Aspect, Instance, Polarity, Task};
pub use trainer::TrainConfig;
