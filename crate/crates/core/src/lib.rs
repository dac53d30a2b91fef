//! Process-reward guided tree search over step-by-step reasoning traces.
//!
//! The crate is organized bottom-up:
//!
//! - [`value`]: weighted rewards, quality values and their closed forms.
//! - [`tree`]: the search tree with UCB selection and weighted-average backup.
//! - [`providers`]: policy/value backends (synthetic oracle, HTTP chat endpoints).
//! - [`mcts`]: the value-guided search driver.
//! - [`inference`]: per-node process rewards inferred from verified trees.
//! - [`pipeline`]: self-training iterations that emit SFT and value datasets.
//! - [`baselines`]: self-consistency, best-of-N and greedy DFS verifiers.

pub mod answer;
pub mod baselines;
pub mod budget;
pub mod inference;
pub mod mcts;
pub mod pipeline;
pub mod providers;
pub mod records;
pub mod tree;
pub mod value;
