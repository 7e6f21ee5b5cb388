//! Search-space description, architecture encoding and the weight-sharing
//! supernet.

mod arch;
mod spec;
mod store;
mod supernet;

pub use arch::{Architecture, Gene, SearchSpace};
pub use spec::{
    channel_multipliers, BitPair, BlockKind, CandidateSet, ChoiceBlockSpec, HeadSpec, StageSpec, StemSpec,
    SupernetSpec, Variant,
};
pub use store::{BnId, RunningStats, SharedWeightStore};
pub use supernet::{Subnet, Supernet};
