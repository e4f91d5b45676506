//! Dataset generation and storage, tensor files, and image export.

pub mod dataset;
pub mod export;
pub mod netpbm;
pub mod sat;
pub mod synth;

pub use dataset::{parse_kv, Dataset, SegBatch};
pub use sat::{SatData, SatTensor};
pub use synth::{generate_dataset, generate_sample, SynthCfg};
