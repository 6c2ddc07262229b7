use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use super::PostprocessError;
use crate::grid::Grid;

/// Label of watershed lines and of pixels no region reached.
pub const BOUNDARY: u32 = 0;

/// A height field and its region labels (`1..`, or [`BOUNDARY`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Topography {
    pub heights: Grid<f64>,
    pub labels: Grid<u32>,
}

impl Topography {
    pub fn region_count(&self) -> usize {
        let mut seen: Vec<u32> = self.labels.data().iter().copied().filter(|&l| l != BOUNDARY).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// Level-by-level flooding on integer heights. At each level, every
/// 4-connected group of pixels at that level joins the one region it
/// touches, becomes boundary if it touches several, or starts a new
/// region if it touches none. Groups are visited in row-major order of
/// their first pixel.
pub fn watershed_basic(heights: &Grid<i64>) -> Topography {
    let (w, h) = (heights.width(), heights.height());
    let mut labels = Grid::new(w, h, BOUNDARY);
    let mut done = Grid::new(w, h, false);
    let mut levels: Vec<i64> = heights.data().to_vec();
    levels.sort_unstable();
    levels.dedup();

    let mut next = 1;
    let mut group = Vec::new();
    let mut queue = VecDeque::new();
    for &k in &levels {
        for start in 0..w * h {
            let (sx, sy) = (start % w, start / w);
            if heights.get(sx, sy) != k || done.get(sx, sy) {
                continue;
            }
            group.clear();
            done.set(sx, sy, true);
            queue.push_back((sx, sy));
            while let Some((x, y)) = queue.pop_front() {
                group.push((x, y));
                for (nx, ny) in heights.neighbors(x, y, false) {
                    if heights.get(nx, ny) == k && !done.get(nx, ny) {
                        done.set(nx, ny, true);
                        queue.push_back((nx, ny));
                    }
                }
            }
            let mut touching: Vec<u32> = group
                .iter()
                .flat_map(|&(x, y)| heights.neighbors(x, y, false))
                .map(|(nx, ny)| labels.get(nx, ny))
                .filter(|&l| l != BOUNDARY)
                .collect();
            touching.sort_unstable();
            touching.dedup();
            let label = match touching.len() {
                1 => touching[0],
                0 => {
                    next += 1;
                    next - 1
                }
                _ => BOUNDARY,
            };
            for &(x, y) in &group {
                labels.set(x, y, label);
            }
        }
    }
    Topography {
        heights: heights.map(|v| v as f64),
        labels,
    }
}

/// Priority flood from `seeds` (labels `1..=seeds.len()` in order) over
/// the 8-connected pixels where `mask` holds. The lowest queued pixel is
/// expanded first; equal heights are expanded in insertion order. A pixel
/// takes the label of the pixel that first queued it. Pixels outside the
/// mask or unreachable from any seed keep [`BOUNDARY`].
pub fn watershed_seeded(
    heights: &Grid<f64>,
    seeds: &[(usize, usize)],
    mask: Option<&Grid<bool>>,
) -> Result<Topography, PostprocessError> {
    let (w, h) = (heights.width(), heights.height());
    if seeds.is_empty() {
        return Err(PostprocessError::NoSeeds);
    }
    if let Some(m) = mask {
        if (m.width(), m.height()) != (w, h) {
            return Err(PostprocessError::SizeMismatch);
        }
    }
    let inside = |x: usize, y: usize| mask.is_none_or(|m| m.get(x, y));
    let mut labels = Grid::new(w, h, BOUNDARY);
    let mut heap = BinaryHeap::new();
    let mut counter = 0u64;
    for (i, &(x, y)) in seeds.iter().enumerate() {
        if x >= w || y >= h {
            return Err(PostprocessError::SeedOutOfBounds { x, y });
        }
        if labels.get(x, y) != BOUNDARY {
            return Err(PostprocessError::DuplicateSeed { x, y });
        }
        labels.set(x, y, i as u32 + 1);
        heap.push(Reverse((OrdF64(heights.get(x, y)), counter, x, y)));
        counter += 1;
    }
    while let Some(Reverse((_, _, x, y))) = heap.pop() {
        let label = labels.get(x, y);
        for (nx, ny) in heights.neighbors(x, y, true) {
            if labels.get(nx, ny) == BOUNDARY && inside(nx, ny) {
                labels.set(nx, ny, label);
                heap.push(Reverse((OrdF64(heights.get(nx, ny)), counter, nx, ny)));
                counter += 1;
            }
        }
    }
    Ok(Topography {
        heights: heights.clone(),
        labels,
    })
}

/// Total order on heights for the flood queue.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_image_is_one_region() {
        let t = watershed_basic(&Grid::new(4, 3, 7));
        assert!(t.labels.data().iter().all(|&l| l == 1));
    }

    #[test]
    fn ramp_is_one_region() {
        let t = watershed_basic(&Grid::from_fn(6, 4, |x, _| x as i64));
        assert!(t.labels.data().iter().all(|&l| l == 1));
    }

    #[test]
    fn seeded_requires_seeds() {
        let g = Grid::new(3, 3, 0.0);
        assert!(matches!(watershed_seeded(&g, &[], None), Err(PostprocessError::NoSeeds)));
        assert!(matches!(
            watershed_seeded(&g, &[(1, 1), (1, 1)], None),
            Err(PostprocessError::DuplicateSeed { .. })
        ));
        assert!(matches!(
            watershed_seeded(&g, &[(3, 0)], None),
            Err(PostprocessError::SeedOutOfBounds { .. })
        ));
    }

    #[test]
    fn one_seed_claims_its_blob_only() {
        let mask = Grid::from_fn(6, 3, |x, _| x < 2 || x > 3);
        let t = watershed_seeded(&Grid::new(6, 3, 0.0), &[(0, 0)], Some(&mask)).unwrap();
        assert!((0..3).all(|y| t.labels.get(0, y) == 1 && t.labels.get(1, y) == 1));
        assert!((0..3).all(|y| t.labels.get(4, y) == BOUNDARY && t.labels.get(2, y) == BOUNDARY));
    }
}
