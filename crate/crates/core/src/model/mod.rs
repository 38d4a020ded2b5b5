pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod generator;
pub mod sc;
pub mod types;

pub use config::{ChannelMap, EncoderConfig, GeneratorConfig, Modality, NormKind, BASE_RES};
pub use encoder::SpatialEncoder;
pub use generator::Generator;
pub use sc::{Partition, ScModel};
pub use types::{BlockTrace, ConditionBatch, ConditionPair, IntermediatePair, StyleCode};
