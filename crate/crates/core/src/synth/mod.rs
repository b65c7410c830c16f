//! Enumerable token environments, tabular policies and exact oracles.

pub mod env;
pub mod exact;
pub mod oracle;
pub mod policy;
pub mod rollout;

pub use env::{EnvSpec, RewardRule};
pub use exact::{exact_conditionals, exact_success_prob, Conditionals, ValueTable};
pub use oracle::{IdealTeacher, Oracle, OracleQualityReport};
pub use policy::{AnswerHint, PolicySpec, Role, Scorer, TabularPolicy};
pub use rollout::rollout_group;
