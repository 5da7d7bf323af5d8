//! Alignment-oriented neural HMMs trained with the full-sum criterion.
//!
//! A frame-level label posterior network and a transition model are trained
//! jointly by marginalizing over all monotonic alignments of the label
//! sequence. Forced alignments are read off with Viterbi and scored by time
//! stamp error.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root fix `f64`.

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod lattice;
pub mod logspace;
pub mod optim;
pub mod scalar;
pub mod topology;
pub mod trainer;
pub mod transition;
pub mod verify;

pub use alignment::{Alignment, Segment, TseAccumulator};
pub use config::{TmKindName, TrainConfig};
pub use error::{Error, Result};
pub use lattice::Scales;
pub use scalar::Real;
pub use topology::{LabelId, LabelInventory, SilenceMode, StateChain};
pub use trainer::PretrainMode;
pub use transition::{InitStrategy, TransitionKind};

pub type Model = trainer::Model<f64>;
pub type Encoder = encoder::Encoder<f64>;
pub type TransitionModel = transition::TransitionModel<f64>;
pub type TransitionField = transition::TransitionField<f64>;
pub type LatticeStats = lattice::LatticeStats<f64>;
pub type Corpus = datasets::Corpus<f64>;
pub type Utterance = datasets::Utterance<f64>;

/// Derives a child seed from a parent seed and a stream index (splitmix64 finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
