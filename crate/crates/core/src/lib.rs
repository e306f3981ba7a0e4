pub mod approximator;
pub mod checkpoint;
pub mod envs;
pub mod error;
pub mod fdiv;
pub mod mbrl;
pub mod mdp;
pub mod model;
pub mod occupancy;
pub mod policy;
pub mod tom;

pub use error::{Error, Result};
pub use fdiv::FDivergence;
pub use approximator::{Activation, MlpSpec, ParamVector};
pub use mbrl::{LoopConfig, MetricsRow, SchemeKind, WeightMode};
pub use mdp::{Environment, Policy, ReplayBuffer, Transition};
pub use model::{DynamicsModel, WeightScheme};
pub use occupancy::{TabularMdp, TabularPolicy};
pub use policy::StochasticPolicy;
pub use tom::{Discriminator, DualQ};
