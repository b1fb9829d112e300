//! Block self-attention: partitioning, block-length selection, masked block
//! self-attention and the Bi-BloSAN encoder.

mod encoder;
pub mod io;
mod mblosa;
mod plan;

pub use encoder::{BiBlosan, BlockLength, Embedding, EncoderConfig, EMBEDDING_INIT};
pub use mblosa::{departition_node, partition_node, BiBlosa, MBlosa};
pub use plan::{
    brute_force_block_length, departition, partition, select_block_length, select_block_length_batched, xi,
    BlockPlan,
};
