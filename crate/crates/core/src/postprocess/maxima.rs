use crate::grid::Grid;

/// Peaks of `grid`: pixels at least as high as all eight neighbors and
/// strictly above the global minimum, thinned greedily in order of
/// (height desc, y asc, x asc) so that no two survivors are closer than
/// `min_separation` (Euclidean). A constant grid has no peaks.
pub fn local_maxima(grid: &Grid<f64>, min_separation: f64) -> Vec<(usize, usize)> {
    let floor = grid.data().iter().copied().fold(f64::INFINITY, f64::min);
    let mut candidates = Vec::new();
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            let v = grid.get(x, y);
            if v > floor && !v.is_nan() && grid.neighbors(x, y, true).all(|(nx, ny)| v >= grid.get(nx, ny)) {
                candidates.push((v, x, y));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
    let min_sq = min_separation * min_separation;
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (_, x, y) in candidates {
        let close = kept.iter().any(|&(kx, ky)| {
            let (dx, dy) = (kx as f64 - x as f64, ky as f64 - y as f64);
            dx * dx + dy * dy < min_sq
        });
        if !close {
            kept.push((x, y));
        }
    }
    kept
}
