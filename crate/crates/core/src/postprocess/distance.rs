//! Exact Euclidean distance transform (lower envelope of parabolas,
//! separable over columns then rows).

use crate::grid::Grid;

/// One-dimensional squared-distance transform of `f` into `out`.
/// Infinite entries of `f` never become envelope roots.
fn transform_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        while let Some(&p) = v.last() {
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest pixel where
/// `is_background` holds. Background pixels get 0; if there is no
/// background at all every entry is infinite.
pub fn squared_distance_transform<T: Copy>(grid: &Grid<T>, is_background: impl Fn(T) -> bool) -> Grid<f64> {
    let (w, h) = (grid.width(), grid.height());
    let mut d = grid.map(|v| if is_background(v) { 0.0 } else { f64::INFINITY });
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; h];
    let mut res = vec![0.0; h.max(w)];
    for x in 0..w {
        for (y, c) in col.iter_mut().enumerate() {
            *c = d.get(x, y);
        }
        transform_1d(&col, &mut res[..h], &mut v, &mut z);
        for (y, r) in res[..h].iter().enumerate() {
            d.set(x, y, *r);
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&d.data()[y * w..(y + 1) * w]);
        transform_1d(&row, &mut res[..w], &mut v, &mut z);
        d.data_mut()[y * w..(y + 1) * w].copy_from_slice(&res[..w]);
    }
    d
}

/// Euclidean distance from each foreground (nonzero) pixel to the nearest
/// zero pixel; zero pixels map to 0.
pub fn distance_transform(binary: &Grid<u8>) -> Grid<f64> {
    squared_distance_transform(binary, |v| v == 0).map(f64::sqrt)
}
