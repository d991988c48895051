//! 3-D U-Net, composite segmentation loss, Adam and the training loop.

pub mod adam;
pub mod loss;
pub mod net;
pub mod train;

pub use adam::Adam;
pub use loss::{dice_per_class, mean_foreground, median_frequency_weights};
pub use net::{build_unet3d, Decoder, Mode, NetConfig, UNet3d};
pub use train::{evaluate, train, EvalReport, StepRecord, TrainConfig, TrainLog};
