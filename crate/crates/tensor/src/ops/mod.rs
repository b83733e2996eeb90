pub mod basic;
pub mod dense;
pub mod spatial;

pub use spatial::{channel_moments, conv_out_size, conv_transpose_out_size};
