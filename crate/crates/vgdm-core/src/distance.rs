//! Exact Euclidean distance transforms on binary masks.
//!
//! Implementation is the two-pass parabola-envelope transform (Felzenszwalb &
//! Huttenlocher), which is exact for squared Euclidean distances, so results
//! agree with all-pairs brute force down to the last bit of the final sqrt.

use ndarray::Array2;

const INF: f64 = 1e20;

/// 1-d squared distance transform of a sampled function `f`.
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s > z[k] {
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = INF;
        }
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
/// Pixels where no `true` pixel exists anywhere keep a large sentinel value.
pub fn squared_distance_to(mask: &Array2<bool>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut g = Array2::<f64>::zeros((h, w));
    // Column pass.
    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = if mask[[y, x]] { 0.0 } else { INF };
        }
        dt_1d(&col_in, &mut col_out);
        for y in 0..h {
            g[[y, x]] = col_out[y];
        }
    }
    // Row pass.
    let mut row_in = vec![0.0f64; w];
    let mut row_out = vec![0.0f64; w];
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            row_in[x] = g[[y, x]];
        }
        dt_1d(&row_in, &mut row_out);
        for x in 0..w {
            out[[y, x]] = row_out[x];
        }
    }
    out
}

/// Euclidean distance from every pixel to the nearest `true` pixel.
pub fn distance_to(mask: &Array2<bool>) -> Array2<f64> {
    squared_distance_to(mask).mapv(f64::sqrt)
}
