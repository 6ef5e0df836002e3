//! Synthetic training and evaluation data: corruption masks and clips with
//! exact optical flow.

pub mod clip;
pub mod io;
pub mod mask;

pub use clip::{gen_clip, MotionKind, SyntheticClip, Texture};
pub use io::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, parse_key_values, read_bundle, write_bundle, ClipBundle};
pub use mask::{gen_mask, MaskKind, MaskSpec};
