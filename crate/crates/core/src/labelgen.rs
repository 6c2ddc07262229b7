//! Gaussian density labels from point annotations, tiling, the
//! source-level train/test split and dihedral augmentation.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::annotation::{check_bounds, AnnotationError, CellAnnotation};
use crate::density::DensityMap;

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("image {width}x{height} is smaller than one {tile}x{tile} tile")]
    Undersized { width: u32, height: u32, tile: u32 },
    #[error("augmentation needs a square tile, got {width}x{height}")]
    NotSquare { width: usize, height: usize },
    #[error("image and label sizes differ: {0}")]
    SizeMismatch(String),
    #[error("invalid label configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelRenderConfig {
    /// σ² of the Gaussian, in pixels².
    pub variance: f64,
    pub peak: f64,
    /// Value written at each exact center pixel.
    pub center_value: f64,
    /// Amplitudes below this are dropped.
    pub cutoff: f64,
}

impl Default for LabelRenderConfig {
    fn default() -> Self {
        Self {
            variance: 9.0,
            peak: 255.0,
            center_value: 2250.0,
            cutoff: 1.0,
        }
    }
}

impl LabelRenderConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        let ok = self.variance > 0.0
            && self.peak > 0.0
            && self.center_value >= self.peak
            && self.cutoff > 0.0
            && self.cutoff <= self.peak
            && [self.variance, self.peak, self.center_value, self.cutoff].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(LabelError::Config(format!("{self:?}")))
        }
    }

    /// Distance at which the Gaussian falls to `cutoff`.
    pub fn truncation_radius(&self) -> f64 {
        (2.0 * self.variance * (self.peak / self.cutoff).ln()).sqrt()
    }
}

/// Per class: the pixelwise maximum of `peak·exp(−d²/2σ²)` over that class's
/// cells, zeroed below `cutoff`, then every center pixel set to
/// `center_value`.
pub fn render_density_map(
    cells: &[CellAnnotation],
    height: usize,
    width: usize,
    cfg: &LabelRenderConfig,
) -> Result<DensityMap, LabelError> {
    cfg.validate()?;
    check_bounds(cells, width, height)?;
    let mut map = DensityMap::zeros(height, width);
    let radius = cfg.truncation_radius();
    let reach = radius.floor() as i64;
    let two_var = 2.0 * cfg.variance;
    for c in cells {
        let plane = map.channel_mut(c.class);
        let (cx, cy) = (c.x as i64, c.y as i64);
        for y in (cy - reach).max(0)..=(cy + reach).min(height as i64 - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(width as i64 - 1) {
                let d2 = ((x - cx).pow(2) + (y - cy).pow(2)) as f64;
                let v = cfg.peak * (-d2 / two_var).exp();
                if v < cfg.cutoff {
                    continue;
                }
                let p = &mut plane[y as usize * width + x as usize];
                *p = p.max(v as f32);
            }
        }
    }
    for c in cells {
        map.channel_mut(c.class)[c.y as usize * width + c.x as usize] = cfg.center_value as f32;
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }
}

/// Assigns whole source images to train or test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSplit {
    pub train_fraction: f64,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        Self { train_fraction, seed }
    }

    /// `round(train_fraction · n)` sources, chosen by a seeded shuffle, go
    /// to train. Entry `i` is the tag of source `i`.
    pub fn assign(&self, n_sources: usize) -> Vec<SplitTag> {
        let n_train = ((self.train_fraction.clamp(0.0, 1.0) * n_sources as f64).round() as usize).min(n_sources);
        let mut order: Vec<usize> = (0..n_sources).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let mut tags = vec![SplitTag::Test; n_sources];
        for &i in &order[..n_train] {
            tags[i] = SplitTag::Train;
        }
        tags
    }
}

/// One crop of a source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub source: usize,
    /// Grid position, column then row.
    pub col: u32,
    pub row: u32,
    pub image: RgbImage,
    pub cells: Vec<CellAnnotation>,
    pub split: SplitTag,
}

/// Non-overlapping `tile × tile` crops from the top-left; partial tiles
/// at the right and bottom margins are dropped along with their cells.
pub fn tile_image(
    image: &RgbImage,
    cells: &[CellAnnotation],
    tile: u32,
) -> Result<Vec<(u32, u32, RgbImage, Vec<CellAnnotation>)>, LabelError> {
    let (w, h) = image.dimensions();
    if tile == 0 || w < tile || h < tile {
        return Err(LabelError::Undersized {
            width: w,
            height: h,
            tile,
        });
    }
    check_bounds(cells, w as usize, h as usize)?;
    let (cols, rows) = (w / tile, h / tile);
    let mut out = Vec::with_capacity((cols * rows) as usize);
    for row in 0..rows {
        for col in 0..cols {
            let (x0, y0) = (col * tile, row * tile);
            let crop = image::imageops::crop_imm(image, x0, y0, tile, tile).to_image();
            let local = cells
                .iter()
                .filter(|c| c.x / tile == col && c.y / tile == row)
                .map(|c| CellAnnotation {
                    x: c.x - x0,
                    y: c.y - y0,
                    ..*c
                })
                .collect();
            out.push((col, row, crop, local));
        }
    }
    Ok(out)
}

/// Tiles every source and tags each tile with its source's split.
pub fn tile_and_split(
    sources: &[(RgbImage, Vec<CellAnnotation>)],
    tile: u32,
    split: &DatasetSplit,
) -> Result<Vec<Tile>, LabelError> {
    let tags = split.assign(sources.len());
    let mut out = Vec::new();
    for (source, ((image, cells), tag)) in sources.iter().zip(tags).enumerate() {
        for (col, row, image, cells) in tile_image(image, cells, tile)? {
            out.push(Tile {
                source,
                col,
                row,
                image,
                cells,
                split: tag,
            });
        }
    }
    Ok(out)
}

/// The eight symmetries of the square, as signed permutation matrices
/// acting on pixel coordinates centered on the tile (y axis downwards).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dihedral {
    Identity,
    /// Mirror across the vertical axis: `(x, y) → (W−1−x, y)`.
    FlipX,
    /// Mirror across the horizontal axis: `(x, y) → (x, H−1−y)`.
    FlipY,
    /// Quarter turn clockwise on screen: `(x, y) → (N−1−y, x)`.
    Rot90,
    Rot180,
    Rot270,
    Transpose,
    AntiTranspose,
}

/// The six variants produced for every training tile.
pub const AUGMENTATIONS: [Dihedral; 6] = [
    Dihedral::Identity,
    Dihedral::FlipX,
    Dihedral::FlipY,
    Dihedral::Rot90,
    Dihedral::Rot180,
    Dihedral::Rot270,
];

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::FlipX,
        Dihedral::FlipY,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    fn matrix(self) -> [[i64; 2]; 2] {
        match self {
            Dihedral::Identity => [[1, 0], [0, 1]],
            Dihedral::FlipX => [[-1, 0], [0, 1]],
            Dihedral::FlipY => [[1, 0], [0, -1]],
            Dihedral::Rot90 => [[0, -1], [1, 0]],
            Dihedral::Rot180 => [[-1, 0], [0, -1]],
            Dihedral::Rot270 => [[0, 1], [-1, 0]],
            Dihedral::Transpose => [[0, 1], [1, 0]],
            Dihedral::AntiTranspose => [[0, -1], [-1, 0]],
        }
    }

    fn from_matrix(m: [[i64; 2]; 2]) -> Self {
        Self::ALL.into_iter().find(|d| d.matrix() == m).expect("closed under products")
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn after(self, first: Dihedral) -> Dihedral {
        let (a, b) = (self.matrix(), first.matrix());
        let mut m = [[0; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Self::from_matrix(m)
    }

    pub fn inverse(self) -> Dihedral {
        Self::ALL
            .into_iter()
            .find(|d| d.after(self) == Dihedral::Identity)
            .expect("group element has an inverse")
    }

    /// Where pixel `(x, y)` of an `n × n` tile lands.
    pub fn map_point(self, x: usize, y: usize, n: usize) -> (usize, usize) {
        let m = self.matrix();
        let (u, v) = (2 * x as i64 - (n as i64 - 1), 2 * y as i64 - (n as i64 - 1));
        let (u2, v2) = (m[0][0] * u + m[0][1] * v, m[1][0] * u + m[1][1] * v);
        (((u2 + n as i64 - 1) / 2) as usize, ((v2 + n as i64 - 1) / 2) as usize)
    }

    /// Permutes a row-major `n × n` plane of `channels` interleaved values.
    fn permute<T: Copy + Default>(self, src: &[T], n: usize, channels: usize) -> Vec<T> {
        let mut dst = vec![T::default(); src.len()];
        for y in 0..n {
            for x in 0..n {
                let (x2, y2) = self.map_point(x, y, n);
                let (s, d) = ((y * n + x) * channels, (y2 * n + x2) * channels);
                dst[d..d + channels].copy_from_slice(&src[s..s + channels]);
            }
        }
        dst
    }

    pub fn apply_image(self, image: &RgbImage) -> Result<RgbImage, LabelError> {
        let (w, h) = image.dimensions();
        if w != h {
            return Err(LabelError::NotSquare {
                width: w as usize,
                height: h as usize,
            });
        }
        let data = self.permute(image.as_raw(), w as usize, 3);
        Ok(RgbImage::from_raw(w, h, data).expect("same byte count"))
    }

    pub fn apply_density(self, map: &DensityMap) -> Result<DensityMap, LabelError> {
        let n = map.width();
        if map.height() != n {
            return Err(LabelError::NotSquare {
                width: n,
                height: map.height(),
            });
        }
        let plane = n * n;
        let mut data = Vec::with_capacity(3 * plane);
        for c in map.data().chunks_exact(plane) {
            data.extend(self.permute(c, n, 1));
        }
        Ok(DensityMap::from_vec(n, n, data).expect("same shape"))
    }

    pub fn apply_cells(self, cells: &[CellAnnotation], n: usize) -> Vec<CellAnnotation> {
        cells
            .iter()
            .map(|c| {
                let (x, y) = self.map_point(c.x as usize, c.y as usize, n);
                CellAnnotation {
                    x: x as u32,
                    y: y as u32,
                    ..*c
                }
            })
            .collect()
    }
}

/// The six [`AUGMENTATIONS`] of an image/label pair, applied identically.
pub fn augment(image: &RgbImage, label: &DensityMap) -> Result<Vec<(Dihedral, RgbImage, DensityMap)>, LabelError> {
    if (image.width() as usize, image.height() as usize) != (label.width(), label.height()) {
        return Err(LabelError::SizeMismatch(format!(
            "image {}x{}, label {}x{}",
            image.width(),
            image.height(),
            label.width(),
            label.height()
        )));
    }
    AUGMENTATIONS
        .iter()
        .map(|&d| Ok((d, d.apply_image(image)?, d.apply_density(label)?)))
        .collect()
}
