//! Segmentation-head decode and the three-term composite training loss:
//! binary cross entropy, soft Dice, and a signed-distance-weighted boundary
//! term. Every loss comes with its analytic gradient with respect to the
//! probability map so training and finite-difference verification share one
//! definition.

use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

use crate::denoiser::{unpatchify, DenoiserConfig, TokenGrid};
use crate::distance::distance_to;
use crate::params::ParamVec;
use crate::real::Real;

/// Probabilities are clamped to `[EPS_CLAMP, 1 - EPS_CLAMP]` before logs.
pub const EPS_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("{what}: shape {actual} does not match {expected}")]
    ShapeMismatch {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("loss weights must be non-negative with at least one positive")]
    InvalidWeights,
}

/// Weights of the composite loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub lambda_boundary: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let ws = [self.lambda_bce, self.lambda_dice, self.lambda_boundary];
        if ws.iter().any(|w| *w < 0.0 || !w.is_finite()) || ws.iter().all(|w| *w == 0.0) {
            return Err(LossError::InvalidWeights);
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        // Boundary term down-weighted: its scale grows with image size.
        Self {
            lambda_bce: 1.0,
            lambda_dice: 1.0,
            lambda_boundary: 0.01,
        }
    }
}

/// Signed distance values plus a degeneracy flag for single-class masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDistance {
    pub values: Array2<f64>,
    /// True when the mask was all-foreground or all-background; `values` then
    /// carry the `(H + W)` sentinel magnitude.
    pub degenerate: bool,
}

/// Euclidean distance in pixels to the nearest pixel of the opposite class,
/// negated inside the mask. Exact.
///
/// A single-class mask has no opposite pixels; every value is then the
/// sentinel magnitude `H + W` (signed by membership) and the result is
/// flagged degenerate.
pub fn signed_distance_transform(mask: &Array2<u8>) -> SignedDistance {
    let (h, w) = mask.dim();
    let fg = mask.mapv(|v| v != 0);
    let n_fg = fg.iter().filter(|v| **v).count();
    if n_fg == 0 || n_fg == h * w {
        let sentinel = (h + w) as f64;
        let values = fg.mapv(|inside| if inside { -sentinel } else { sentinel });
        return SignedDistance {
            values,
            degenerate: true,
        };
    }
    let bg = fg.mapv(|v| !v);
    let d_to_fg = distance_to(&fg);
    let d_to_bg = distance_to(&bg);
    let values = Array2::from_shape_fn(
        (h, w),
        |idx| {
            if fg[idx] {
                -d_to_bg[idx]
            } else {
                d_to_fg[idx]
            }
        },
    );
    SignedDistance {
        values,
        degenerate: false,
    }
}

/// Ground-truth mask with its precomputed signed distance map.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<F> {
    pub mask: Array2<u8>,
    pub sdt: Array2<F>,
}

impl<F: Real> GroundTruth<F> {
    pub fn from_mask(mask: Array2<u8>) -> Self {
        let sdt = signed_distance_transform(&mask).values.mapv(F::from_f64);
        Self { mask, sdt }
    }
}

fn check_same_shape<F: Real, G>(what: &str, a: &Array2<F>, b: &Array2<G>) -> Result<(), LossError> {
    if a.dim() != b.dim() {
        return Err(LossError::ShapeMismatch {
            what: what.into(),
            expected: format!("{:?}", a.dim()),
            actual: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// Map final token features to per-pixel mask logits: a per-token linear head
/// to `patch_size²` values, then spatial reassembly.
pub fn decode_to_logits<F: Real>(
    features: &TokenGrid<F>,
    params: &ParamVec<F>,
    config: &DenoiserConfig,
) -> Result<Array2<F>, LossError> {
    if features.tokens.dim() != (config.num_tokens(), config.embed_dim) {
        return Err(LossError::ShapeMismatch {
            what: "decode features".into(),
            expected: format!("{}x{}", config.num_tokens(), config.embed_dim),
            actual: format!("{:?}", features.tokens.dim()),
        });
    }
    let rows =
        features.tokens.dot(&params.view2("seg_head.weight")) + params.view1("seg_head.bias");
    let img = unpatchify(&rows, config.patch_size, config.image_size, 1).map_err(|_| {
        LossError::ShapeMismatch {
            what: "decode rows".into(),
            expected: "config-consistent".into(),
            actual: format!("{:?}", rows.dim()),
        }
    })?;
    Ok(img.index_axis(Axis(0), 0).to_owned())
}

/// Head gradients `(d_weight, d_bias, d_tokens)` of a scalar loss through
/// the decode.
pub type DecodeGrads<F> = (Array2<F>, Array1<F>, Array2<F>);

/// Gradients of a scalar loss through [`decode_to_logits`].
pub fn decode_to_logits_backward<F: Real>(
    features: &TokenGrid<F>,
    params: &ParamVec<F>,
    config: &DenoiserConfig,
    d_logits: &Array2<F>,
) -> Result<DecodeGrads<F>, LossError> {
    let d3 = d_logits.clone().insert_axis(Axis(0));
    let d_rows = crate::denoiser::patchify(&d3, config.patch_size)
        .map_err(|e| LossError::ShapeMismatch {
            what: "decode gradient".into(),
            expected: "config-consistent".into(),
            actual: e.to_string(),
        })?
        .tokens;
    let d_w = features.tokens.t().dot(&d_rows);
    let d_b = d_rows.sum_axis(Axis(0));
    let d_tokens = d_rows.dot(&params.view2("seg_head.weight").t());
    Ok((d_w, d_b, d_tokens))
}

fn clamp_prob<F: Real>(p: F) -> F {
    let lo = F::from_f64(EPS_CLAMP);
    let hi = F::one() - lo;
    p.max(lo).min(hi)
}

/// Mean binary cross entropy over pixels, with probabilities clamped at
/// [`EPS_CLAMP`] before the logs.
pub fn bce_loss<F: Real>(prob: &Array2<F>, gt: &Array2<u8>) -> Result<F, LossError> {
    check_same_shape("bce", prob, gt)?;
    let n = F::from_f64(prob.len() as f64);
    let mut acc = F::zero();
    for (p, g) in prob.iter().zip(gt.iter()) {
        let p = clamp_prob(*p);
        let term = if *g != 0 { p.ln() } else { (F::one() - p).ln() };
        acc = acc - term;
    }
    Ok(acc / n)
}

/// d(bce)/d(prob); zero inside the clamp region.
pub fn bce_loss_grad<F: Real>(prob: &Array2<F>, gt: &Array2<u8>) -> Result<Array2<F>, LossError> {
    check_same_shape("bce", prob, gt)?;
    let inv_n = F::from_f64(1.0 / prob.len() as f64);
    let lo = F::from_f64(EPS_CLAMP);
    let hi = F::one() - lo;
    let mut grad = Array2::<F>::zeros(prob.dim());
    for ((p, g), d) in prob.iter().zip(gt.iter()).zip(grad.iter_mut()) {
        if *p <= lo || *p >= hi {
            continue;
        }
        *d = if *g != 0 {
            -inv_n / *p
        } else {
            inv_n / (F::one() - *p)
        };
    }
    Ok(grad)
}

/// Soft Dice loss: `1 − (2Σpg + s)/(Σp + Σg + s)`.
pub fn dice_loss<F: Real>(prob: &Array2<F>, gt: &Array2<u8>, smooth: F) -> Result<F, LossError> {
    check_same_shape("dice", prob, gt)?;
    let (inter, p_sum, g_sum) = dice_sums(prob, gt);
    let a = F::from_f64(2.0) * inter + smooth;
    let b = p_sum + g_sum + smooth;
    if b == F::zero() {
        // Both supports empty with zero smoothing: perfect agreement.
        return Ok(F::zero());
    }
    Ok(F::one() - a / b)
}

fn dice_sums<F: Real>(prob: &Array2<F>, gt: &Array2<u8>) -> (F, F, F) {
    let mut inter = F::zero();
    let mut p_sum = F::zero();
    let mut g_sum = F::zero();
    for (p, g) in prob.iter().zip(gt.iter()) {
        p_sum = p_sum + *p;
        if *g != 0 {
            inter = inter + *p;
            g_sum = g_sum + F::one();
        }
    }
    (inter, p_sum, g_sum)
}

pub fn dice_loss_grad<F: Real>(
    prob: &Array2<F>,
    gt: &Array2<u8>,
    smooth: F,
) -> Result<Array2<F>, LossError> {
    check_same_shape("dice", prob, gt)?;
    let (inter, p_sum, g_sum) = dice_sums(prob, gt);
    let a = F::from_f64(2.0) * inter + smooth;
    let b = p_sum + g_sum + smooth;
    if b == F::zero() {
        return Ok(Array2::zeros(prob.dim()));
    }
    let b2 = b * b;
    let two = F::from_f64(2.0);
    let mut grad = Array2::<F>::zeros(prob.dim());
    for (g, d) in gt.iter().zip(grad.iter_mut()) {
        let gf = if *g != 0 { F::one() } else { F::zero() };
        *d = -(two * gf * b - a) / b2;
    }
    Ok(grad)
}

/// Signed-distance-weighted regional loss: `mean(sdt ⊙ prob)`. Decreases as
/// probability mass moves inside the ground-truth region.
pub fn boundary_loss<F: Real>(prob: &Array2<F>, gt: &GroundTruth<F>) -> Result<F, LossError> {
    check_same_shape("boundary", prob, &gt.sdt)?;
    let n = F::from_f64(prob.len() as f64);
    let mut acc = F::zero();
    for (p, s) in prob.iter().zip(gt.sdt.iter()) {
        acc = acc + *p * *s;
    }
    Ok(acc / n)
}

pub fn boundary_loss_grad<F: Real>(
    prob: &Array2<F>,
    gt: &GroundTruth<F>,
) -> Result<Array2<F>, LossError> {
    check_same_shape("boundary", prob, &gt.sdt)?;
    let inv_n = F::from_f64(1.0 / prob.len() as f64);
    Ok(gt.sdt.mapv(|s| s * inv_n))
}

/// Per-term values of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeTerms<F> {
    pub bce: F,
    pub dice: F,
    pub boundary: F,
    pub total: F,
}

pub fn composite_loss_terms<F: Real>(
    prob: &Array2<F>,
    gt: &GroundTruth<F>,
    weights: &LossWeights,
    smooth: F,
) -> Result<CompositeTerms<F>, LossError> {
    let bce = bce_loss(prob, &gt.mask)?;
    let dice = dice_loss(prob, &gt.mask, smooth)?;
    let boundary = boundary_loss(prob, gt)?;
    let total = F::from_f64(weights.lambda_bce) * bce
        + F::from_f64(weights.lambda_dice) * dice
        + F::from_f64(weights.lambda_boundary) * boundary;
    Ok(CompositeTerms {
        bce,
        dice,
        boundary,
        total,
    })
}

/// `λ1·bce + λ2·dice + λ3·boundary`.
pub fn composite_loss<F: Real>(
    prob: &Array2<F>,
    gt: &GroundTruth<F>,
    weights: &LossWeights,
    smooth: F,
) -> Result<F, LossError> {
    composite_loss_terms(prob, gt, weights, smooth).map(|t| t.total)
}

pub fn composite_loss_grad<F: Real>(
    prob: &Array2<F>,
    gt: &GroundTruth<F>,
    weights: &LossWeights,
    smooth: F,
) -> Result<Array2<F>, LossError> {
    let mut grad = bce_loss_grad(prob, &gt.mask)?.mapv(|v| v * F::from_f64(weights.lambda_bce));
    let dg = dice_loss_grad(prob, &gt.mask, smooth)?;
    let bg = boundary_loss_grad(prob, gt)?;
    let ld = F::from_f64(weights.lambda_dice);
    let lb = F::from_f64(weights.lambda_boundary);
    grad.zip_mut_with(&dg, |a, b| *a = *a + ld * *b);
    grad.zip_mut_with(&bg, |a, b| *a = *a + lb * *b);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::init_params;
    use approx::assert_relative_eq;
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn center_mask_3x3() -> Array2<u8> {
        let mut m = Array2::<u8>::zeros((3, 3));
        m[[1, 1]] = 1;
        m
    }

    #[test]
    fn sdt_single_center_pixel() {
        let SignedDistance { values, degenerate } = signed_distance_transform(&center_mask_3x3());
        assert!(!degenerate);
        assert_eq!(values[[1, 1]], -1.0);
        assert_eq!(values[[0, 1]], 1.0);
        assert_eq!(values[[1, 0]], 1.0);
        assert_relative_eq!(values[[0, 0]], 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(values[[2, 2]], 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn sdt_checkerboard_and_symmetry() {
        let mask = Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 2) as u8);
        let sd = signed_distance_transform(&mask);
        for (m, v) in mask.iter().zip(sd.values.iter()) {
            assert_eq!(*v, if *m != 0 { -1.0 } else { 1.0 });
        }

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mask = Array2::from_shape_fn((6, 5), |_| rng.gen_bool(0.4) as u8);
        if mask.iter().all(|v| *v == 0) || mask.iter().all(|v| *v == 1) {
            return;
        }
        let complement = mask.mapv(|v| 1 - v);
        let a = signed_distance_transform(&mask).values;
        let b = signed_distance_transform(&complement).values;
        assert_eq!(a, b.mapv(|v| -v));
    }

    #[test]
    fn sdt_degenerate_masks() {
        let all_bg = Array2::<u8>::zeros((3, 5));
        let sd = signed_distance_transform(&all_bg);
        assert!(sd.degenerate);
        assert!(sd.values.iter().all(|v| *v == 8.0));

        let all_fg = Array2::<u8>::ones((3, 5));
        let sd = signed_distance_transform(&all_fg);
        assert!(sd.degenerate);
        assert!(sd.values.iter().all(|v| *v == -8.0));
    }

    #[test]
    fn bce_examples() {
        let gt = arr2(&[[1u8, 0]]);
        let half = arr2(&[[0.5f64, 0.5]]);
        assert_relative_eq!(bce_loss(&half, &gt).unwrap(), 2f64.ln(), epsilon = 1e-12);

        let exact = arr2(&[[1.0f64, 0.0]]);
        let loss = bce_loss(&exact, &gt).unwrap();
        assert!(loss <= -(1.0 - EPS_CLAMP).ln() + 1e-15);

        let p = arr2(&[[0.9f64, 0.2]]);
        let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert_relative_eq!(expect, 0.16425, epsilon = 1e-5);
        assert_relative_eq!(bce_loss(&p, &gt).unwrap(), expect, epsilon = 1e-12);

        let bad = arr2(&[[1u8]]);
        assert!(bce_loss(&half, &bad).is_err());
    }

    #[test]
    fn dice_examples() {
        let ones_p = Array2::<f64>::ones((2, 2));
        let ones_g = Array2::<u8>::ones((2, 2));
        assert_eq!(dice_loss(&ones_p, &ones_g, 1.0).unwrap(), 0.0);

        // Disjoint supports, 4 pixels each.
        let p = arr2(&[[1.0f64, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0]]);
        let g = arr2(&[[0u8, 0, 0, 0], [1, 1, 1, 1]]);
        assert_eq!(dice_loss(&p, &g, 0.0).unwrap(), 1.0);

        let p = arr2(&[[0.5f64, 0.5], [0.5, 0.5]]);
        let g = arr2(&[[1u8, 1], [0, 0]]);
        assert_relative_eq!(dice_loss(&p, &g, 0.0).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn boundary_examples() {
        let gt = GroundTruth::<f64>::from_mask(center_mask_3x3());
        let zero = Array2::<f64>::zeros((3, 3));
        assert_eq!(boundary_loss(&zero, &gt).unwrap(), 0.0);

        let ones = Array2::<f64>::ones((3, 3));
        let mean_sdt = gt.sdt.sum() / 9.0;
        assert_relative_eq!(
            boundary_loss(&ones, &gt).unwrap(),
            mean_sdt,
            epsilon = 1e-12
        );

        let center_ind = center_mask_3x3().mapv(|v| v as f64);
        assert_relative_eq!(
            boundary_loss(&center_ind, &gt).unwrap(),
            -1.0 / 9.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn boundary_moves_mass_toward_interior() {
        let gt = GroundTruth::<f64>::from_mask(center_mask_3x3());
        let mut prob = Array2::<f64>::from_elem((3, 3), 0.2);
        let before = boundary_loss(&prob, &gt).unwrap();
        // Move mass from a positive-sdt pixel to the negative-sdt center.
        prob[[0, 0]] -= 0.1;
        prob[[1, 1]] += 0.1;
        let after = boundary_loss(&prob, &gt).unwrap();
        assert!(after < before);
    }

    #[test]
    fn composite_degenerate_weights() {
        let gt = GroundTruth::<f64>::from_mask(center_mask_3x3());
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let prob = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0.05..0.95));

        let only_bce = LossWeights {
            lambda_bce: 1.0,
            lambda_dice: 0.0,
            lambda_boundary: 0.0,
        };
        assert_eq!(
            composite_loss(&prob, &gt, &only_bce, 1.0).unwrap(),
            bce_loss(&prob, &gt.mask).unwrap()
        );
        let only_dice = LossWeights {
            lambda_bce: 0.0,
            lambda_dice: 1.0,
            lambda_boundary: 0.0,
        };
        assert_eq!(
            composite_loss(&prob, &gt, &only_dice, 1.0).unwrap(),
            dice_loss(&prob, &gt.mask, 1.0).unwrap()
        );

        // Sum of independently verified terms.
        let w = LossWeights {
            lambda_bce: 1.0,
            lambda_dice: 1.0,
            lambda_boundary: 1.0,
        };
        let total = composite_loss(&prob, &gt, &w, 1.0).unwrap();
        let sum = bce_loss(&prob, &gt.mask).unwrap()
            + dice_loss(&prob, &gt.mask, 1.0).unwrap()
            + boundary_loss(&prob, &gt).unwrap();
        assert_relative_eq!(total, sum, epsilon = 1e-12);

        assert!(LossWeights {
            lambda_bce: 0.0,
            lambda_dice: 0.0,
            lambda_boundary: 0.0
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            lambda_bce: -1.0,
            lambda_dice: 1.0,
            lambda_boundary: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn composite_two_pixel_case_from_components() {
        // prob=[0.9,0.2], gt=[1,0], sdt=[-1,1]: bce + dice + boundary where
        // boundary = (-0.9 + 0.2)/2.
        let prob = arr2(&[[0.9f64, 0.2]]);
        let mask = arr2(&[[1u8, 0]]);
        let gt = GroundTruth {
            mask: mask.clone(),
            sdt: arr2(&[[-1.0f64, 1.0]]),
        };
        let w = LossWeights {
            lambda_bce: 1.0,
            lambda_dice: 1.0,
            lambda_boundary: 1.0,
        };
        let total = composite_loss(&prob, &gt, &w, 0.0).unwrap();
        let bce = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        let dice = 1.0 - (2.0 * 0.9) / (1.1 + 1.0);
        let boundary = (-0.9 + 0.2) / 2.0;
        assert_relative_eq!(total, bce + dice + boundary, epsilon = 1e-12);
    }

    #[test]
    fn composite_grad_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mask = Array2::from_shape_fn((4, 4), |_| rng.gen_bool(0.4) as u8);
        let gt = GroundTruth::<f64>::from_mask(mask);
        let prob = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.05..0.95));
        let w = LossWeights::default();
        let grad = composite_loss_grad(&prob, &gt, &w, 1.0).unwrap();
        let h = 1e-6;
        for idx in 0..16 {
            let (r, c) = (idx / 4, idx % 4);
            let mut pp = prob.clone();
            pp[[r, c]] += h;
            let mut pm = prob.clone();
            pm[[r, c]] -= h;
            let fd = (composite_loss(&pp, &gt, &w, 1.0).unwrap()
                - composite_loss(&pm, &gt, &w, 1.0).unwrap())
                / (2.0 * h);
            let an = grad[[r, c]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-9);
            assert!(rel < 1e-4, "pixel ({r},{c}): fd={fd} an={an}");
        }
    }

    fn decode_setup() -> (DenoiserConfig, ParamVec<f64>, TokenGrid<f64>) {
        let config = DenoiserConfig {
            image_size: 4,
            in_channels: 2,
            patch_size: 2,
            embed_dim: 6,
            depth: 1,
            num_heads: 2,
            window_size: 1,
            mlp_ratio: 1.0,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let params: ParamVec<f64> = init_params(&config, &mut rng).unwrap();
        let tokens = Array2::from_shape_fn((4, 6), |_| f64::standard_normal(&mut rng));
        let grid = TokenGrid::new(tokens, 2, 2).unwrap();
        (config, params, grid)
    }

    #[test]
    fn decode_zero_head_gives_uniform_half_probability() {
        let (config, mut params, grid) = decode_setup();
        params
            .slice_mut("seg_head.weight")
            .iter_mut()
            .for_each(|v| *v = 0.0);
        params
            .slice_mut("seg_head.bias")
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let logits = decode_to_logits(&grid, &params, &config).unwrap();
        assert!(logits.iter().all(|v| *v == 0.0));
        let prob = logits.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        assert!(prob.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn decode_shape_contract() {
        let config = DenoiserConfig {
            image_size: 32,
            in_channels: 5,
            patch_size: 4,
            embed_dim: 64,
            depth: 1,
            num_heads: 4,
            window_size: 4,
            mlp_ratio: 1.0,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let params: ParamVec<f64> = init_params(&config, &mut rng).unwrap();
        let tokens = Array2::from_shape_fn((64, 64), |_| f64::standard_normal(&mut rng));
        let grid = TokenGrid::new(tokens, 8, 8).unwrap();
        let logits = decode_to_logits(&grid, &params, &config).unwrap();
        assert_eq!(logits.dim(), (32, 32));

        let small = TokenGrid::new(Array2::<f64>::zeros((4, 64)), 2, 2).unwrap();
        assert!(decode_to_logits(&small, &params, &config).is_err());
    }

    #[test]
    fn decode_grad_matches_finite_differences() {
        let (config, params, grid) = decode_setup();
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let probe = Array2::from_shape_fn((config.image_size, config.image_size), |_| {
            f64::standard_normal(&mut rng)
        });
        let loss = |p: &ParamVec<f64>, g: &TokenGrid<f64>| -> f64 {
            (&decode_to_logits(g, p, &config).unwrap() * &probe).sum()
        };
        let (d_w, d_b, d_tokens) =
            decode_to_logits_backward(&grid, &params, &config, &probe).unwrap();

        let h = 1e-6;
        let w_entry = params.layout().require("seg_head.weight").clone();
        for k in [0usize, 7, w_entry.len() - 1] {
            let idx = w_entry.offset + k;
            let mut pp = params.clone();
            pp.data_mut()[idx] += h;
            let mut pm = params.clone();
            pm.data_mut()[idx] -= h;
            let fd = (loss(&pp, &grid) - loss(&pm, &grid)) / (2.0 * h);
            let an = d_w.as_slice().unwrap()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-9);
            assert!(rel < 1e-4, "weight[{k}]: fd={fd} an={an}");
        }
        let b_entry = params.layout().require("seg_head.bias").clone();
        for k in [0usize, b_entry.len() - 1] {
            let idx = b_entry.offset + k;
            let mut pp = params.clone();
            pp.data_mut()[idx] += h;
            let mut pm = params.clone();
            pm.data_mut()[idx] -= h;
            let fd = (loss(&pp, &grid) - loss(&pm, &grid)) / (2.0 * h);
            let an = d_b[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-9);
            assert!(rel < 1e-4, "bias[{k}]: fd={fd} an={an}");
        }
        for (r, c) in [(0usize, 0usize), (3, 5)] {
            let mut gp = grid.clone();
            gp.tokens[[r, c]] += h;
            let mut gm = grid.clone();
            gm.tokens[[r, c]] -= h;
            let fd = (loss(&params, &gp) - loss(&params, &gm)) / (2.0 * h);
            let an = d_tokens[[r, c]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-9);
            assert!(rel < 1e-4, "tokens[{r},{c}]: fd={fd} an={an}");
        }
    }

    proptest! {
        #[test]
        fn losses_are_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = 12usize;
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
            let gts: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.5) as u8).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);

            let to_arr = |v: &[f64]| Array2::from_shape_vec((3, 4), v.to_vec()).unwrap();
            let to_gt = |v: &[u8]| Array2::from_shape_vec((3, 4), v.to_vec()).unwrap();
            let p1 = to_arr(&probs);
            let g1 = to_gt(&gts);
            let p2 = to_arr(&order.iter().map(|&i| probs[i]).collect::<Vec<_>>());
            let g2 = to_gt(&order.iter().map(|&i| gts[i]).collect::<Vec<_>>());

            let b1 = bce_loss(&p1, &g1).unwrap();
            let b2 = bce_loss(&p2, &g2).unwrap();
            prop_assert!((b1 - b2).abs() < 1e-12);
            let d1 = dice_loss(&p1, &g1, 1.0).unwrap();
            let d2 = dice_loss(&p2, &g2, 1.0).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&d1));
            prop_assert!(b1 >= 0.0);

            // Boundary term, with the distance map permuted as data.
            let sdts: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let gt1 = GroundTruth { mask: g1, sdt: to_arr(&sdts) };
            let gt2 = GroundTruth {
                mask: g2,
                sdt: to_arr(&order.iter().map(|&i| sdts[i]).collect::<Vec<_>>()),
            };
            let y1 = boundary_loss(&p1, &gt1).unwrap();
            let y2 = boundary_loss(&p2, &gt2).unwrap();
            prop_assert!((y1 - y2).abs() < 1e-12);
        }
    }
}
