//! The patch classifier: valid 3x3 convolutions, dense head, batch
//! normalization, ReLU, dropout and a two-way softmax.

mod layers;
mod network;
mod params;
mod spec;

pub use layers::{batchnorm_forward, dropout, softmax_rows, BN_EPSILON, BN_MOMENTUM};
pub(crate) use layers::bn_running_in_place;
pub use network::{
    backward, features, forward, forward_from, predict, predict_from, ForwardCache, ForwardMode, Gradients,
    LayerGrads,
};
pub use params::{
    build_network, he_init, parse_tensor_name, tensor_name, BatchNormParams, Layer, ParamSet, TensorRole,
};
pub use spec::{
    LayerKind, NetworkSpec, DEFAULT_CONV_WIDTHS, STANDARD_CONV_LAYERS, STANDARD_DENSE_WIDTHS, STANDARD_DEPTH,
};
