//! Procedural stained-tissue tiles with exact point ground truth.
//!
//! Cells are filled ellipses. An ellipse with semi-axes `r` and
//! `ratio·r` fits in a disk of radius `r`, so two cells whose centers are
//! at least `r_i + r_j` apart cannot share a pixel.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotation::{CellAnnotation, CellClass};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("could not place cell {placed} of {total} after {attempts} attempts; lower the cell counts or radii")]
    InfeasiblePacking { placed: usize, total: usize, attempts: usize },
    #[error("invalid synth configuration: {0}")]
    Config(String),
}

/// Appearance and population of one cell class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStyle {
    /// Inclusive count range per tile.
    pub count: (usize, usize),
    /// Inclusive bounding-radius range in pixels.
    pub radius: (f64, f64),
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub tile_size: u32,
    /// Indexed by [`CellClass::channel`].
    pub classes: [ClassStyle; 3],
    pub background: [u8; 3],
    /// Per-cell uniform color offset, ± this many levels per channel.
    pub color_jitter: u8,
    /// Per-pixel uniform noise, ± this many levels per channel.
    pub noise_amplitude: u8,
    /// Chance that a cell is placed touching an existing one.
    pub overlap_probability: f64,
    /// Minor/major axis ratio range.
    pub axis_ratio: (f64, f64),
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tile_size: 256,
            classes: [
                ClassStyle {
                    count: (8, 16),
                    radius: (4.0, 9.0),
                    color: [139, 84, 42],
                },
                ClassStyle {
                    count: (12, 24),
                    radius: (4.0, 9.0),
                    color: [72, 92, 168],
                },
                ClassStyle {
                    count: (2, 6),
                    radius: (4.0, 6.5),
                    color: [34, 38, 104],
                },
            ],
            background: [226, 214, 222],
            color_jitter: 12,
            noise_amplitude: 10,
            overlap_probability: 0.0,
            axis_ratio: (0.7, 1.0),
            max_attempts: 2000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.overlap_probability) {
            return bad("overlap probability must lie in [0, 1]");
        }
        let (lo, hi) = self.axis_ratio;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("axis ratio range must satisfy 0 < lo <= hi <= 1");
        }
        for s in &self.classes {
            if s.count.0 > s.count.1 {
                return bad("count range is reversed");
            }
            if !(s.radius.0 >= 2.0 && s.radius.0 <= s.radius.1) {
                return bad("radii must be at least 2 and ordered");
            }
        }
        if (self.tile_size as f64) <= 2.0 * self.margin() {
            return bad("tile too small for the largest cell");
        }
        Ok(())
    }

    /// Centers keep this distance from the tile border.
    fn margin(&self) -> f64 {
        self.classes.iter().map(|s| s.radius.1).fold(0.0, f64::max).ceil()
    }
}

/// One drawn cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthCell {
    pub annotation: CellAnnotation,
    /// Bounding radius; the semi-major axis.
    pub radius: f64,
    pub axis_ratio: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTile {
    pub image: RgbImage,
    pub cells: Vec<SynthCell>,
}

impl SynthTile {
    pub fn annotations(&self) -> Vec<CellAnnotation> {
        self.cells.iter().map(|c| c.annotation).collect()
    }
}

fn center_distance(a: &SynthCell, x: f64, y: f64) -> f64 {
    (a.annotation.x as f64 - x).hypot(a.annotation.y as f64 - y)
}

pub fn generate_tile(cfg: &SynthConfig) -> Result<SynthTile, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.tile_size as f64;
    let margin = cfg.margin();

    let mut plan = Vec::new();
    for class in CellClass::ALL {
        let style = &cfg.classes[class.channel()];
        let k = rng.random_range(style.count.0..=style.count.1);
        plan.extend(std::iter::repeat_n(class, k));
    }
    // Interleave classes so no class is systematically placed last.
    for i in (1..plan.len()).rev() {
        plan.swap(i, rng.random_range(0..=i));
    }

    let mut cells: Vec<SynthCell> = Vec::with_capacity(plan.len());
    for (i, &class) in plan.iter().enumerate() {
        let style = &cfg.classes[class.channel()];
        let mut placed = None;
        for _ in 0..cfg.max_attempts {
            let r = rng.random_range(style.radius.0..=style.radius.1);
            let partner = (!cells.is_empty() && rng.random_bool(cfg.overlap_probability))
                .then(|| rng.random_range(0..cells.len()));
            let (x, y) = match partner {
                Some(j) => {
                    let p = &cells[j];
                    let d = rng.random_range(0.7..=0.95) * (p.radius + r);
                    let t = rng.random_range(0.0..std::f64::consts::TAU);
                    (
                        (p.annotation.x as f64 + d * t.cos()).round(),
                        (p.annotation.y as f64 + d * t.sin()).round(),
                    )
                }
                None => (
                    rng.random_range(margin..=n - 1.0 - margin).round(),
                    rng.random_range(margin..=n - 1.0 - margin).round(),
                ),
            };
            if x < margin || y < margin || x > n - 1.0 - margin || y > n - 1.0 - margin {
                continue;
            }
            let clear = cells.iter().enumerate().all(|(k, c)| {
                let d = center_distance(c, x, y);
                if Some(k) == partner {
                    d >= 1.0
                } else {
                    d >= c.radius + r
                }
            });
            if !clear {
                continue;
            }
            placed = Some(SynthCell {
                annotation: CellAnnotation::new(x as u32, y as u32, class),
                radius: r,
                axis_ratio: rng.random_range(cfg.axis_ratio.0..=cfg.axis_ratio.1),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            });
            break;
        }
        match placed {
            Some(c) => cells.push(c),
            None => {
                return Err(SynthError::InfeasiblePacking {
                    placed: i,
                    total: plan.len(),
                    attempts: cfg.max_attempts,
                })
            }
        }
    }

    let size = cfg.tile_size;
    let mut image = RgbImage::from_pixel(size, size, Rgb(cfg.background));
    for c in &cells {
        let style = &cfg.classes[c.annotation.class.channel()];
        let j = cfg.color_jitter as i32;
        let color: [u8; 3] = std::array::from_fn(|k| (style.color[k] as i32 + rng.random_range(-j..=j)).clamp(0, 255) as u8);
        paint_ellipse(&mut image, c, color);
    }
    let a = cfg.noise_amplitude as i32;
    if a > 0 {
        for px in image.pixels_mut() {
            for v in px.0.iter_mut() {
                *v = (*v as i32 + rng.random_range(-a..=a)).clamp(0, 255) as u8;
            }
        }
    }
    Ok(SynthTile { image, cells })
}

/// Strict interior, so two disks that merely touch never share a pixel.
fn paint_ellipse(image: &mut RgbImage, c: &SynthCell, color: [u8; 3]) {
    let (cx, cy) = (c.annotation.x as f64, c.annotation.y as f64);
    let (a, b) = (c.radius, c.radius * c.axis_ratio);
    let (s, co) = c.angle.sin_cos();
    let reach = c.radius.ceil() as i64;
    for y in (cy as i64 - reach).max(0)..=(cy as i64 + reach).min(image.height() as i64 - 1) {
        for x in (cx as i64 - reach).max(0)..=(cx as i64 + reach).min(image.width() as i64 - 1) {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = (dx * co + dy * s) / a;
            let v = (-dx * s + dy * co) / b;
            if u * u + v * v < 1.0 {
                image.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
    }
}

/// Whether the painted masks of two cells can intersect.
pub fn masks_may_touch(a: &SynthCell, b: &SynthCell) -> bool {
    center_distance(a, b.annotation.x as f64, b.annotation.y as f64) < a.radius + b.radius
}
