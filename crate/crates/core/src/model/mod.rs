//! The density-map regression network: residual dilated inception blocks
//! arranged in a U-shaped encoder/decoder with a linear three-channel head.

mod arch;
mod backend;
mod checkpoint;

pub use arch::{
    build_pathonet, forward, forward_graph, forward_tensor, init_params, rdim_forward, ArchDescriptor, BlockKind,
    LayerDef, LayerKind, ModelParams, RdimBlock, SkipMode, DEFAULT_WIDTHS, WIDE_DILATION,
};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("inconsistent widths: {0}")]
    Widths(String),
    #[error("expected a 3×H×W image with H and W divisible by 8, got {0:?}")]
    InputShape(Vec<usize>),
    #[error("network produced a non-finite value")]
    NonFinite,
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint length disagreement: {0}")]
    Length(String),
    #[error("bad architecture descriptor: {0}")]
    Descriptor(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `3×H×W` tensor with channel values scaled from `0..=255` to `[0, 1]`.
pub fn image_to_tensor(image: &image::RgbImage) -> crate::tensor::Tensor {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    crate::tensor::Tensor::new(vec![3, h, w], data).expect("finite pixels")
}
