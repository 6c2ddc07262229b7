//! From density map to cell centers: threshold, distance transform,
//! negation, seeded watershed, one center per region.

mod distance;
mod maxima;
mod watershed;

pub use distance::{distance_transform, squared_distance_transform};
pub use maxima::local_maxima;
pub use watershed::{watershed_basic, watershed_seeded, Topography, BOUNDARY};

use crate::annotation::{CellAnnotation, CellClass};
use crate::density::DensityMap;
use crate::grid::Grid;

#[derive(Debug, thiserror::Error)]
pub enum PostprocessError {
    #[error("seeded watershed needs at least one seed")]
    NoSeeds,
    #[error("seed ({x}, {y}) lies outside the grid")]
    SeedOutOfBounds { x: usize, y: usize },
    #[error("seed ({x}, {y}) given twice")]
    DuplicateSeed { x: usize, y: usize },
    #[error("mask and height grid differ in size")]
    SizeMismatch,
    #[error("invalid postprocess configuration: {0}")]
    Config(String),
}

/// Which peaks seed the watershed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeedSource {
    /// Maxima of the distance transform of the binarized channel.
    #[default]
    DistanceMaxima,
    /// Maxima of the density channel itself, inside the foreground.
    DensityMaxima,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocessConfig {
    /// Per class, in channel order.
    pub thresholds: [f64; 3],
    pub min_separation: f64,
    pub seed_source: SeedSource,
}

pub const DEFAULT_THRESHOLDS: [f64; 3] = [120.0, 180.0, 40.0];

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS,
            min_separation: 5.0,
            seed_source: SeedSource::DistanceMaxima,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        if let Some(t) = self.thresholds.iter().find(|t| !(0.0..=255.0).contains(*t)) {
            return Err(PostprocessError::Config(format!("threshold {t} outside [0, 255]")));
        }
        if !(self.min_separation >= 1.0) {
            return Err(PostprocessError::Config(format!(
                "minimum separation {} below 1",
                self.min_separation
            )));
        }
        Ok(())
    }
}

/// `< tau → 0`, `≥ tau → 255`.
pub fn binarize(channel: &Grid<f32>, tau: f64) -> Grid<u8> {
    channel.map(|v| if (v as f64) < tau { 0 } else { 255 })
}

/// Centers detected in one channel, each with the channel value there.
pub fn extract_channel(channel: &Grid<f32>, tau: f64, cfg: &PostprocessConfig) -> Vec<(usize, usize, f32)> {
    let binary = binarize(channel, tau);
    let dist = distance_transform(&binary);
    let seeds = match cfg.seed_source {
        SeedSource::DistanceMaxima => local_maxima(&dist, cfg.min_separation),
        SeedSource::DensityMaxima => {
            let masked = Grid::from_fn(channel.width(), channel.height(), |x, y| {
                if binary.get(x, y) == 0 {
                    f64::NEG_INFINITY
                } else {
                    channel.get(x, y) as f64
                }
            });
            local_maxima(&masked, cfg.min_separation)
        }
    };
    if seeds.is_empty() {
        return Vec::new();
    }
    let mask = binary.map(|v| v != 0);
    let topo = watershed_seeded(&dist.map(|d| -d), &seeds, Some(&mask)).expect("seeds are distinct and in bounds");

    // Per region: first pixel in row-major order with the largest distance.
    let mut best: Vec<Option<(f64, usize, usize)>> = vec![None; seeds.len() + 1];
    for y in 0..channel.height() {
        for x in 0..channel.width() {
            let l = topo.labels.get(x, y) as usize;
            if l == BOUNDARY as usize {
                continue;
            }
            let d = dist.get(x, y);
            if best[l].is_none_or(|(bd, _, _)| d > bd) {
                best[l] = Some((d, x, y));
            }
        }
    }
    best.into_iter()
        .flatten()
        .map(|(_, x, y)| (x, y, channel.get(x, y)))
        .collect()
}

/// Per channel: binarize at the class threshold, distance transform,
/// seeded watershed on the negated distances, one center per region.
pub fn extract_cells(map: &DensityMap, cfg: &PostprocessConfig) -> Result<Vec<CellAnnotation>, PostprocessError> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for class in CellClass::ALL {
        let channel = map.channel_grid(class);
        for (x, y, score) in extract_channel(&channel, cfg.thresholds[class.channel()], cfg) {
            cells.push(CellAnnotation::new(x as u32, y as u32, class).with_score(score));
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_edges() {
        let g = Grid::from_vec(3, 1, vec![119.9f32, 120.0, -4.0]);
        assert_eq!(binarize(&g, 120.0).data(), &[0, 255, 0]);
        assert!(binarize(&g, 0.0).data()[..2].iter().all(|&v| v == 255));
    }

    #[test]
    fn all_zero_map_has_no_cells() {
        let cells = extract_cells(&DensityMap::zeros(32, 32), &PostprocessConfig::default()).unwrap();
        assert!(cells.is_empty());
    }

    #[test]
    fn config_bounds() {
        let mut cfg = PostprocessConfig::default();
        cfg.thresholds[1] = 256.0;
        assert!(cfg.validate().is_err());
        let cfg = PostprocessConfig {
            min_separation: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
