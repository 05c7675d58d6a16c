//! Dense and space-time convolutional source regressors.

mod gemm;
mod io;
mod layers;
mod model;
mod train;

pub use io::{decode_model, encode_model, load_model, save_model, MEGM_MAGIC, MEGM_VERSION};
pub use layers::{Activation, DenseLayer, SpaceTimeConvLayer};
pub use model::{
    batch_loss, build_cnn, build_cnn_with, build_mlp, build_mlp_with_hidden, forward_pass,
    loss_and_gradients, predict_locations, sgd_step, Batch, DenseGradient, Gradients, InputScaling,
    LossBreakdown, NetworkModel, OutputFrame, RegType, Regularization, CONV_FILTERS, CONV_TAPS, HIDDEN_WIDTHS,
};
pub use train::{
    train, train_with_callback, write_loss_history, ExampleSource, LossRecord, ShuffledDataset,
    TrainingConfig,
};
