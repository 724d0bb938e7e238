//! A small trainable transformer that produces real trajectories for the
//! detectors: K sampled generations, hidden states, exact step Jacobians, and
//! detector-guided beam search.

pub mod autodiff;
pub mod beam;
pub mod checkpoint;
pub mod model;
pub mod sample;
pub mod step_map;
pub mod train;
pub mod vocab;

pub use beam::{detector_scorer, greedy_decode, guided_beam_search, BeamConfig, BeamResult};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use model::{TinyLM, TinyLMConfig};
pub use sample::{exact_amplification, make_labeled_dataset, sample_k, Corruption, DecodeConfig};
pub use step_map::StepMaps;
pub use train::{masked_accuracy, train_tiny_lm, TrainConfig, TrainOutcome};
pub use vocab::Prompt;
