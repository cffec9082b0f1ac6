//! Attention maps over backbone activations.
//!
//! The map is the channel-wise sum of squared activations, min-max
//! normalized to [0, 1] per sample; its argmax cell is the attention
//! center. `attention_map_tensor` is the tape-recorded variant the losses
//! differentiate through; [`attention_matrix`] is the exact analysis path.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::imageio;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub h: usize,
    pub w: usize,
    /// Row-major values in [0, 1].
    pub values: Vec<f32>,
    /// Row-major-first argmax cell.
    pub center: (usize, usize),
    pub mode: Mode,
}

impl AttentionMap {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.w + col]
    }

    pub fn center_index(&self) -> usize {
        position_index(self.center, self.w)
    }
}

/// Per-sample attention maps from a backbone activation of shape
/// c×h×w or N×c×h×w. A constant map normalizes to all zeros.
pub fn attention_matrix(a: &Tensor, mode: Mode) -> Result<Vec<AttentionMap>> {
    let (n, c, h, w) = match a.shape() {
        [c, h, w] => (1usize, *c, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(Error::BadShape {
                op: "attention_matrix",
                expected: "c×h×w or N×c×h×w".into(),
                got: other.to_vec(),
            })
        }
    };
    if h == 0 || w == 0 {
        return Err(Error::invalid("attention_matrix", "empty spatial dims"));
    }
    let plane = h * w;
    let mut maps = Vec::with_capacity(n);
    for i in 0..n {
        let mut sum_sq = vec![0.0f32; plane];
        for ch in 0..c {
            let src = &a.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            for (acc, &v) in sum_sq.iter_mut().zip(src) {
                *acc += v * v;
            }
        }
        let mn = sum_sq.iter().cloned().fold(f32::INFINITY, f32::min);
        let mx = sum_sq.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let values: Vec<f32> = if mx > mn {
            sum_sq.iter().map(|&v| (v - mn) / (mx - mn)).collect()
        } else {
            vec![0.0; plane]
        };
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for (j, &v) in values.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        maps.push(AttentionMap {
            h,
            w,
            values,
            center: (best / w, best % w),
            mode,
        });
    }
    Ok(maps)
}

/// Tape-recorded attention maps, one row per sample: N×(h·w) in [0, 1].
/// The normalization denominator carries a 1e-6 guard so a constant map
/// yields zeros instead of a division by zero.
pub fn attention_map_tensor(backbone: &Tensor) -> Result<Tensor> {
    if backbone.shape().len() != 4 {
        return Err(Error::BadShape {
            op: "attention_map_tensor",
            expected: "N×c×h×w backbone".into(),
            got: backbone.shape().to_vec(),
        });
    }
    let sum_sq = backbone.square().sum_channels()?;
    let mx = sum_sq.row_max()?;
    let mn = sum_sq.neg().row_max()?.neg();
    let range = mx.sub(&mn)?.add_scalar(1e-6);
    sum_sq.sub_rows(&mn)?.div_rows(&range)
}

/// Flatten a cell to the scalar position label p = row·w + col.
pub fn position_index(center: (usize, usize), w: usize) -> usize {
    center.0 * w + center.1
}

/// Inverse of [`position_index`]: p → (⌊p/w⌋, p mod w).
pub fn p_to_cell(p: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    if p >= h * w {
        return Err(Error::invalid("p_to_cell", format!("position {p} outside {h}x{w} grid")));
    }
    Ok((p / w, p % w))
}

/// Mean absolute elementwise difference between two maps.
pub fn map_distance(a: &AttentionMap, b: &AttentionMap) -> Result<f32> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::ShapeMismatch {
            op: "map_distance",
            lhs: vec![a.h, a.w],
            rhs: vec![b.h, b.w],
        });
    }
    let sum: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok((sum / a.values.len() as f64) as f32)
}

/// Write the map as an 8-bit grayscale PGM, nearest-neighbor upscaled.
pub fn export_heatmap(map: &AttentionMap, out_h: usize, out_w: usize, path: &Path) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("export_heatmap", "empty output size"));
    }
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let iy = oy * map.h / out_h;
        for ox in 0..out_w {
            let ix = ox * map.w / out_w;
            let v = (map.at(iy, ix) * 255.0).round().clamp(0.0, 255.0);
            pixels.push(v as u8);
        }
    }
    imageio::write_pgm(path, out_w, out_h, &pixels)
}
