//! Three-channel density maps and the raw `DMAP` dump format.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 4     | magic `DMAP`                    |
//! | 4     | u32 format version (1)          |
//! | 4     | u32 channel count C (always 3)  |
//! | 4     | u32 height H                    |
//! | 4     | u32 width W                     |
//! | 4·CHW | f32 values, channel-major       |

use std::fs;
use std::path::Path;

use crate::annotation::CellClass;
use crate::grid::Grid;
use crate::tensor::Tensor;

pub const DMAP_MAGIC: &[u8; 4] = b"DMAP";
pub const DMAP_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum DensityError {
    #[error("not a density map (bad magic)")]
    BadMagic,
    #[error("unsupported density map version {0}")]
    Version(u32),
    #[error("density maps have 3 channels, file declares {0}")]
    Channels(u32),
    #[error("density map truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("density map has {0} trailing bytes")]
    Trailing(usize),
    #[error("density map contains a non-finite value")]
    NonFinite,
    #[error("expected a 3×H×W tensor, got {0:?}")]
    Shape(Vec<usize>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-class density, channel `c` belonging to [`CellClass::from_channel`]`(c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DensityMap {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self, DensityError> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(DensityError::Shape(vec![data.len()]));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DensityError::NonFinite);
        }
        Ok(Self { height, width, data })
    }

    /// Accepts `3×H×W` or `1×3×H×W`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, DensityError> {
        match *t.shape() {
            [3, h, w] | [1, 3, h, w] => Self::from_vec(h, w, t.data().to_vec()),
            _ => Err(DensityError::Shape(t.shape().to_vec())),
        }
    }

    /// `1×3×H×W` tensor view for the network loss.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone()).expect("finite by construction")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, class: CellClass) -> &[f32] {
        let n = self.height * self.width;
        &self.data[class.channel() * n..(class.channel() + 1) * n]
    }

    pub fn channel_mut(&mut self, class: CellClass) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[class.channel() * n..(class.channel() + 1) * n]
    }

    pub fn channel_grid(&self, class: CellClass) -> Grid<f32> {
        Grid::from_vec(self.width, self.height, self.channel(class).to_vec())
    }

    pub fn get(&self, class: CellClass, x: usize, y: usize) -> f32 {
        self.channel(class)[y * self.width + x]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(DMAP_MAGIC);
        for v in [DMAP_VERSION, Self::CHANNELS as u32, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DensityError> {
        if bytes.len() < HEADER_LEN {
            return Err(DensityError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != DMAP_MAGIC {
            return Err(DensityError::BadMagic);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (version, channels, height, width) = (word(0), word(1), word(2) as usize, word(3) as usize);
        if version != DMAP_VERSION {
            return Err(DensityError::Version(version));
        }
        if channels != Self::CHANNELS as u32 {
            return Err(DensityError::Channels(channels));
        }
        let expected = HEADER_LEN + 4 * Self::CHANNELS * height * width;
        if bytes.len() < expected {
            return Err(DensityError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(DensityError::Trailing(bytes.len() - expected));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_vec(height, width, data)
    }

    pub fn save(&self, path: &Path) -> Result<(), DensityError> {
        fs::write(path, self.to_bytes()).map_err(|source| DensityError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DensityError> {
        let bytes = fs::read(path).map_err(|source| DensityError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
