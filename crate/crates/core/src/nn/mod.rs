//! Sparse convolutional network: matrix kernels, layers, the sparse
//! conv execution engine, the full model, and checkpointing.

pub mod bench;
pub mod checkpoint;
pub mod layers;
pub mod mat;
pub mod network;
pub mod sparse_conv;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layers::{BatchNormParams, DenseParams, LayerError};
pub use mat::Mat;
pub use network::{
    count_params_macs, BnStats, FastLidarNet, ForwardStats, NetConfig, NetworkOutput, NnError,
    Tape,
};
pub use sparse_conv::{
    conv_backward, conv_forward, conv_naive, grid_pairs_2d, ConvParams, ShapeError, SparseTensor,
};
