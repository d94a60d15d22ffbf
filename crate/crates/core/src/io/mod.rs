//! Files: PNG images, the SPMM weights container and TOML run configs.

mod config;
mod image;
mod weights;

pub use config::{RunConfig, TrainSettings};
pub use image::{png_decode, png_encode, png_read, png_write};
pub use weights::{
    decode_weights, encode_weights, load_model, load_weights, save_model, save_weights, TensorEntry, WeightsFile, MAGIC,
    PAYLOAD_ALIGN, VERSION,
};

#[cfg(test)]
mod tests;
