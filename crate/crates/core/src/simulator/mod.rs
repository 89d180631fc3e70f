pub mod bits;
pub mod tree;
pub mod trials;

pub use bits::{BitSource, StreamBits};
pub use tree::{build_tree, profiles, sample_unsuccessful_depth, DstTree, ProfileSummary};
pub use trials::{map_trials, run_trials, run_trials_sharded, trial_profile, EmpiricalMoments, StatSet, TrialConfig};
