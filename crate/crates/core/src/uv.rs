//! UV-space rasterization (scatter) and bilinear resampling (gather).
//!
//! Scatter rasterizes the template's UV triangulation at texel centers with
//! barycentric blending; texels covered by no triangle hold zero and are
//! marked in a coverage mask. A single dilation pass fills the one-texel ring
//! around each chart with neighbor means so bilinear taps at chart-edge UVs
//! read sensible values; dilated texels stay unmarked in the mask.

use dynbody_ad::Tensor;

use crate::template::Template;

#[derive(Clone, Debug)]
pub struct UvScatter {
    /// Rasterized channels, `[C, R, R]`.
    pub grid: Tensor,
    /// Coverage mask, `[1, R, R]`; 1 where a triangle covered the texel.
    pub mask: Tensor,
    /// UV triangles skipped for having (near-)zero area.
    pub degenerate_skipped: usize,
}

/// Rasterize per-vertex channels (`values[v]` has `channels` entries) onto an
/// `res x res` grid.
pub fn scatter_to_uv(
    template: &Template,
    values: &[f64],
    channels: usize,
    res: usize,
) -> UvScatter {
    let v = template.vertex_count();
    assert_eq!(values.len(), v * channels, "scatter channel count mismatch");
    let mut grid = vec![0.0; channels * res * res];
    let mut mask = vec![0.0; res * res];
    let mut degenerate = 0usize;

    for face in &template.faces {
        let [i0, i1, i2] = *face;
        let a = template.uvs[i0];
        let b = template.uvs[i1];
        let c = template.uvs[i2];
        // Texel-space coordinates: texel (x,y) has center (x+0.5, y+0.5).
        let ax = a[0] * res as f64;
        let ay = a[1] * res as f64;
        let bx = b[0] * res as f64;
        let by = b[1] * res as f64;
        let cx = c[0] * res as f64;
        let cy = c[1] * res as f64;
        let det = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay);
        if det.abs() < 1e-12 {
            degenerate += 1;
            continue;
        }
        let min_x = ax.min(bx).min(cx).floor().max(0.0) as usize;
        let max_x = (ax.max(bx).max(cx).ceil() as usize).min(res);
        let min_y = ay.min(by).min(cy).floor().max(0.0) as usize;
        let max_y = (ay.max(by).max(cy).ceil() as usize).min(res);
        for ty in min_y..max_y {
            for tx in min_x..max_x {
                let px = tx as f64 + 0.5;
                let py = ty as f64 + 0.5;
                let w1 = ((px - ax) * (cy - ay) - (cx - ax) * (py - ay)) / det;
                let w2 = ((bx - ax) * (py - ay) - (px - ax) * (by - ay)) / det;
                let w0 = 1.0 - w1 - w2;
                let eps = -1e-12;
                if w0 < eps || w1 < eps || w2 < eps {
                    continue;
                }
                let ti = ty * res + tx;
                if mask[ti] != 0.0 {
                    continue; // first triangle wins; overlaps share edges anyway
                }
                mask[ti] = 1.0;
                for ch in 0..channels {
                    grid[ch * res * res + ti] = w0 * values[i0 * channels + ch]
                        + w1 * values[i1 * channels + ch]
                        + w2 * values[i2 * channels + ch];
                }
            }
        }
    }

    dilate_once(&mut grid, &mask, channels, res);

    UvScatter {
        grid: Tensor::new(vec![channels, res, res], grid).unwrap(),
        mask: Tensor::new(vec![1, res, res], mask).unwrap(),
        degenerate_skipped: degenerate,
    }
}

/// Fill uncovered texels that touch covered ones with the mean of their
/// covered 8-neighbors. The mask itself is left untouched.
fn dilate_once(grid: &mut [f64], mask: &[f64], channels: usize, res: usize) {
    let mut fills: Vec<(usize, Vec<f64>)> = Vec::new();
    for ty in 0..res {
        for tx in 0..res {
            let ti = ty * res + tx;
            if mask[ti] != 0.0 {
                continue;
            }
            let mut acc = vec![0.0; channels];
            let mut count = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let ny = ty as i64 + dy;
                    let nx = tx as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= res as i64 || nx >= res as i64 {
                        continue;
                    }
                    let ni = ny as usize * res + nx as usize;
                    if mask[ni] != 0.0 {
                        count += 1.0;
                        for (ch, a) in acc.iter_mut().enumerate() {
                            *a += grid[ch * res * res + ni];
                        }
                    }
                }
            }
            if count > 0.0 {
                for a in &mut acc {
                    *a /= count;
                }
                fills.push((ti, acc));
            }
        }
    }
    for (ti, vals) in fills {
        for (ch, v) in vals.into_iter().enumerate() {
            grid[ch * res * res + ti] = v;
        }
    }
}

/// Bilinear sample of a `[C,R,R]` grid at each observer's UV: returns
/// row-major `[n_uvs, C]` values.
pub fn gather_from_uv(grid: &Tensor, uvs: &[[f64; 2]]) -> Vec<f64> {
    let g = dynbody_ad::Graph::new();
    let gv = g.leaf(grid.clone());
    let coords: Vec<(f64, f64)> = uvs.iter().map(|uv| (uv[0], uv[1])).collect();
    let out = gv.bilinear_sample(std::rc::Rc::new(coords));
    out.value().data().to_vec()
}

/// Expand per-observer channels to per-vertex channels through the template's
/// static nearest-observer map.
pub fn expand_observer_channels(
    template: &Template,
    observer_values: &[f64],
    channels: usize,
) -> Vec<f64> {
    let m = template.observer_count();
    assert_eq!(observer_values.len(), m * channels);
    let mut out = Vec::with_capacity(template.vertex_count() * channels);
    for &slot in &template.nearest_observer {
        out.extend_from_slice(&observer_values[slot * channels..(slot + 1) * channels]);
    }
    out
}
