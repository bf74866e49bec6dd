//! Token-level primitives: patch rearrangement, windowing, timestep encoding
//! and scaled dot-product attention.

use ndarray::{Array1, Array2, Array3, ArrayView2};

use super::{DenoiserError, TokenGrid};
use crate::real::Real;

/// Cut a `[C × H × W]` image into non-overlapping `p × p` patches.
///
/// Output row order is the raster order of patches; each row is the patch
/// content laid out channel-major, then row-major within the patch. This is a
/// pixel-preserving rearrangement: [`unpatchify`] inverts it bit-exactly.
pub fn patchify<F: Real>(
    image: &Array3<F>,
    patch_size: usize,
) -> Result<TokenGrid<F>, DenoiserError> {
    let (c, h, w) = image.dim();
    if h != w {
        return Err(DenoiserError::ShapeMismatch {
            what: "patchify input".into(),
            expected: "square image".into(),
            actual: format!("{h}x{w}"),
        });
    }
    if patch_size == 0 || h % patch_size != 0 {
        return Err(DenoiserError::InvalidConfig(format!(
            "image side {h} not divisible by patch size {patch_size}"
        )));
    }
    let grid = h / patch_size;
    let row_len = c * patch_size * patch_size;
    let mut rows = Array2::<F>::zeros((grid * grid, row_len));
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            let mut k = 0;
            for ch in 0..c {
                for py in 0..patch_size {
                    for px in 0..patch_size {
                        rows[[row, k]] = image[[ch, gy * patch_size + py, gx * patch_size + px]];
                        k += 1;
                    }
                }
            }
        }
    }
    TokenGrid::new(rows, grid, grid)
}

/// Reassemble patch rows into a `[channels × image_size × image_size]` image.
/// Exact inverse of [`patchify`].
pub fn unpatchify<F: Real>(
    rows: &Array2<F>,
    patch_size: usize,
    image_size: usize,
    channels: usize,
) -> Result<Array3<F>, DenoiserError> {
    if patch_size == 0 || !image_size.is_multiple_of(patch_size) {
        return Err(DenoiserError::InvalidConfig(format!(
            "image side {image_size} not divisible by patch size {patch_size}"
        )));
    }
    let grid = image_size / patch_size;
    let row_len = channels * patch_size * patch_size;
    if rows.nrows() != grid * grid || rows.ncols() != row_len {
        return Err(DenoiserError::ShapeMismatch {
            what: "unpatchify rows".into(),
            expected: format!("{}x{row_len}", grid * grid),
            actual: format!("{}x{}", rows.nrows(), rows.ncols()),
        });
    }
    let mut image = Array3::<F>::zeros((channels, image_size, image_size));
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            let mut k = 0;
            for ch in 0..channels {
                for py in 0..patch_size {
                    for px in 0..patch_size {
                        image[[ch, gy * patch_size + py, gx * patch_size + px]] = rows[[row, k]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(image)
}

/// Sinusoidal timestep encoding: the first `dim/2` entries are
/// `sin(t·ω_k)` and the last `dim/2` are `cos(t·ω_k)` with
/// `ω_k = max_period^(−2k/dim)`.
pub fn timestep_embedding<F: Real>(
    t: usize,
    dim: usize,
    max_period: f64,
) -> Result<Array1<F>, DenoiserError> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(DenoiserError::OddEmbeddingDim(dim));
    }
    let half = dim / 2;
    let mut out = Array1::<F>::zeros(dim);
    for k in 0..half {
        let omega = max_period.powf(-2.0 * k as f64 / dim as f64);
        let arg = t as f64 * omega;
        out[k] = F::from_f64(arg.sin());
        out[half + k] = F::from_f64(arg.cos());
    }
    Ok(out)
}

fn check_window_args(side: usize, window_size: usize, shift: usize) -> Result<(), DenoiserError> {
    if window_size == 0 || !side.is_multiple_of(window_size) {
        return Err(DenoiserError::InvalidConfig(format!(
            "grid side {side} not divisible by window size {window_size}"
        )));
    }
    if shift >= side {
        return Err(DenoiserError::ShiftOutOfRange { shift, side });
    }
    Ok(())
}

/// Roll the token grid by `(−shift, −shift)` and tile it into contiguous
/// `window_size × window_size` windows, raster order.
pub fn window_partition<F: Real>(
    grid: &TokenGrid<F>,
    window_size: usize,
    shift: usize,
) -> Result<Vec<Array2<F>>, DenoiserError> {
    if grid.grid_h != grid.grid_w {
        return Err(DenoiserError::ShapeMismatch {
            what: "window partition grid".into(),
            expected: "square grid".into(),
            actual: format!("{}x{}", grid.grid_h, grid.grid_w),
        });
    }
    let side = grid.grid_h;
    check_window_args(side, window_size, shift)?;
    let d = grid.embed_dim();
    let per_side = side / window_size;
    let mut windows = Vec::with_capacity(per_side * per_side);
    for wy in 0..per_side {
        for wx in 0..per_side {
            let mut win = Array2::<F>::zeros((window_size * window_size, d));
            for iy in 0..window_size {
                for ix in 0..window_size {
                    let gy = (wy * window_size + iy + shift) % side;
                    let gx = (wx * window_size + ix + shift) % side;
                    let src = grid.tokens.row(gy * side + gx);
                    win.row_mut(iy * window_size + ix).assign(&src);
                }
            }
            windows.push(win);
        }
    }
    Ok(windows)
}

/// Exact inverse of [`window_partition`], including the un-shift.
pub fn window_merge<F: Real>(
    windows: &[Array2<F>],
    window_size: usize,
    shift: usize,
) -> Result<TokenGrid<F>, DenoiserError> {
    let count = windows.len();
    let per_side = (count as f64).sqrt().round() as usize;
    if per_side * per_side != count || count == 0 {
        return Err(DenoiserError::ShapeMismatch {
            what: "window count".into(),
            expected: "a nonzero square".into(),
            actual: format!("{count}"),
        });
    }
    let side = per_side * window_size;
    check_window_args(side, window_size, shift)?;
    let d = windows[0].ncols();
    for (i, w) in windows.iter().enumerate() {
        if w.nrows() != window_size * window_size || w.ncols() != d {
            return Err(DenoiserError::ShapeMismatch {
                what: format!("window {i}"),
                expected: format!("{}x{d}", window_size * window_size),
                actual: format!("{}x{}", w.nrows(), w.ncols()),
            });
        }
    }
    let mut tokens = Array2::<F>::zeros((side * side, d));
    for wy in 0..per_side {
        for wx in 0..per_side {
            let win = &windows[wy * per_side + wx];
            for iy in 0..window_size {
                for ix in 0..window_size {
                    let gy = (wy * window_size + iy + shift) % side;
                    let gx = (wx * window_size + ix + shift) % side;
                    tokens
                        .row_mut(gy * side + gx)
                        .assign(&win.row(iy * window_size + ix));
                }
            }
        }
    }
    TokenGrid::new(tokens, side, side)
}

/// Single-head scaled dot-product attention: `softmax(QKᵀ/√d_head)·V`.
pub fn attention<F: Real>(
    queries: &ArrayView2<F>,
    keys: &ArrayView2<F>,
    values: &ArrayView2<F>,
) -> Result<Array2<F>, DenoiserError> {
    attention_with_weights(queries, keys, values).map(|(out, _)| out)
}

/// Attention that also returns the softmax weight matrix (rows sum to 1);
/// the instrumentation surface used by tests and the backward pass.
pub fn attention_with_weights<F: Real>(
    queries: &ArrayView2<F>,
    keys: &ArrayView2<F>,
    values: &ArrayView2<F>,
) -> Result<(Array2<F>, Array2<F>), DenoiserError> {
    let d = queries.ncols();
    if keys.ncols() != d || values.nrows() != keys.nrows() {
        return Err(DenoiserError::ShapeMismatch {
            what: "attention operands".into(),
            expected: format!("keys [*x{d}], values [{}x*]", keys.nrows()),
            actual: format!(
                "keys [{}x{}], values [{}x{}]",
                keys.nrows(),
                keys.ncols(),
                values.nrows(),
                values.ncols()
            ),
        });
    }
    let scale = F::from_f64(1.0 / (d as f64).sqrt());
    let mut scores = queries.dot(&keys.t());
    scores.mapv_inplace(|v| v * scale);
    let weights = softmax_rows(&scores);
    let out = weights.dot(values);
    Ok((out, weights))
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<F: Real>(scores: &Array2<F>) -> Array2<F> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}
