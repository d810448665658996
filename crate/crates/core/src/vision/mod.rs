//! Frames, zero padding to a square canvas, patch tokens and the ViT-style
//! frame encoder.

mod encoder;
mod frame;

pub use encoder::{sample_frames, VisionEncoder, VitConfig};
pub use frame::{
    fitted_size, pad_to_square, patchify, resize_bilinear, standardize, Frame, CHANNELS, FRAME_MAGIC, PIXEL_MEAN, PIXEL_STD,
};
