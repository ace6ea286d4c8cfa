//! Behaviour distributions for the importance-weighted generator update.

pub mod mcts;
pub mod mixture;
pub mod nucleus;

pub use mcts::{mcts_decode, search_root, DecodeOutput, DecodeTag, MctsConfig, MctsMode, MctsNode, MctsTree, RootTrace};
pub use mixture::{mcts_mixture_density, mixture_sample_and_density, Behavior, BehaviorSampler, Draw, GuidedKind, MixtureSpec};
pub use nucleus::{nucleus_density, nucleus_log_density, nucleus_probs, nucleus_sample, nucleus_set, NucleusSpec};
