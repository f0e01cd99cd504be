use serde::{Deserialize, Serialize};

use super::SalienceMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    AreaAverage,
    Bilinear,
}

/// Overlap weights between `target` output bins and `source` input bins
/// along one axis. Row `i` holds `(source index, overlap length)` pairs, with
/// lengths measured in source units; each row sums to `source / target`.
fn area_weights(source: usize, target: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = source as f64 / target as f64;
    (0..target)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(source);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

/// Linear-interpolation taps (half-pixel centres, edge clamped).
fn bilinear_taps(source: usize, target: usize) -> Vec<(usize, usize, f64)> {
    let scale = source as f64 / target as f64;
    (0..target)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (source - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(source - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Resamples a salience map. Both modes produce convex combinations of the
/// input, so the output stays in `[0, 1]`.
pub fn resize_salience(map: &SalienceMap, target: (usize, usize), mode: ResizeMode) -> SalienceMap {
    let (th, tw) = target;
    assert!(th >= 1 && tw >= 1, "target dimensions must be positive");
    let (sh, sw) = map.resolution();
    if (sh, sw) == (th, tw) {
        return map.clone();
    }
    let grid = match mode {
        ResizeMode::AreaAverage => {
            let rows = area_weights(sh, th);
            let cols = area_weights(sw, tw);
            let norm = (sh as f64 / th as f64) * (sw as f64 / tw as f64);
            let mut out = Vec::with_capacity(th * tw);
            for rw in &rows {
                for cw in &cols {
                    let mut acc = 0.0;
                    for &(y, wy) in rw {
                        for &(x, wx) in cw {
                            acc += wy * wx * map.get(y, x);
                        }
                    }
                    out.push((acc / norm).clamp(0.0, 1.0));
                }
            }
            out
        }
        ResizeMode::Bilinear => {
            let rows = bilinear_taps(sh, th);
            let cols = bilinear_taps(sw, tw);
            let mut out = Vec::with_capacity(th * tw);
            for &(y0, y1, fy) in &rows {
                for &(x0, x1, fx) in &cols {
                    let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
                    let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
                    out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
                }
            }
            out
        }
    };
    SalienceMap::new(th, tw, grid, map.provenance()).expect("convex combination stays in range")
}

/// Bilinear resampling of an arbitrary real grid (no range constraint).
pub fn bilinear_grid(grid: &[f64], source: (usize, usize), target: (usize, usize)) -> Vec<f64> {
    let (sh, sw) = source;
    let (th, tw) = target;
    let rows = bilinear_taps(sh, th);
    let cols = bilinear_taps(sw, tw);
    let mut out = Vec::with_capacity(th * tw);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let top = grid[y0 * sw + x0] * (1.0 - fx) + grid[y0 * sw + x1] * fx;
            let bottom = grid[y1 * sw + x0] * (1.0 - fx) + grid[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
