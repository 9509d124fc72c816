//! Two-level U-Net for pixel-wise regression, with a hand-written backward
//! pass.
//!
//! ```text
//! x ─ enc1 ─┬─ pool ─ enc2 ─┬─ pool ─ bottleneck ─ up ─┐
//!           │               └────────── concat ────────┴─ dec2 ─ up ─┐
//!           └──────────────────────────── concat ────────────────────┴─ dec1 ─ head ─ y
//! ```
//!
//! Every 3x3 convolution is followed by a ReLU; the 1x1 head is linear.

mod checkpoint;
mod layers;
mod model;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, ArrayEntry, Manifest, FORMAT_VERSION, MANIFEST_FILE};
pub use layers::{concat, maxpool2, maxpool2_backward, split_channels, upsample2, upsample2_backward, Conv2d, ConvSpec};
pub use model::{backward, backward_into, forward, ActivationCache, Architecture, UNetParams, INPUT_CHANNELS, LAYER_NAMES};
