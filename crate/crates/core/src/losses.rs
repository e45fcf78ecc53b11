//! Dice, binary cross-entropy and the relation-dependent taxonomy loss, each
//! with its analytic gradient with respect to the prediction.
//!
//! Labels are constants; gradients flow only into predictions. Inside the
//! taxonomy loss "Dice" is the overlap *coefficient*: for an exclusive pair
//! the overlap itself is what should shrink. The supervised term uses the
//! Dice *loss* `1 - coefficient`.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::taxonomy::Relation;

/// Smoothing term of the Dice coefficient.
pub const DICE_EPS: f64 = 1e-6;
/// Probability clip for cross-entropy.
pub const BCE_CLIP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("mask values must lie in [0, 1]")]
    OutOfRange,
    #[error("label mask must be binary")]
    NotBinary,
    #[error("scale weight must be non-negative, got {0}")]
    NegativeWeight(f64),
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("non-finite loss value")]
    NonFinite,
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    BadStep(f64),
    #[error("prediction must stay inside (0, 1) under perturbation")]
    NotInterior,
}

/// Per-pixel probabilities (or binary labels) of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    values: Array2<f64>,
    binary: bool,
}

impl MaskTensor {
    /// A soft mask; every value must lie in `[0, 1]`.
    pub fn soft(values: Array2<f64>) -> Result<Self, LossError> {
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(LossError::OutOfRange);
        }
        Ok(MaskTensor {
            values,
            binary: false,
        })
    }

    /// A label mask; every value must be exactly 0 or 1.
    pub fn binary(values: Array2<f64>) -> Result<Self, LossError> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(LossError::NotBinary);
        }
        Ok(MaskTensor {
            values,
            binary: true,
        })
    }

    pub fn from_bools(shape: (usize, usize), bits: &[bool]) -> Self {
        let values = Array2::from_shape_fn(shape, |(r, c)| {
            if bits[r * shape.1 + c] {
                1.0
            } else {
                0.0
            }
        });
        MaskTensor {
            values,
            binary: true,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn sum(&self) -> f64 {
        self.values.sum()
    }
}

/// A scalar loss and its gradient with respect to the prediction argument.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Array2<f64>,
}

fn same_shape(a: &MaskTensor, b: &MaskTensor) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::Shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// Quotient-rule core of the Dice coefficient, shared by every caller.
fn dice_raw(a: &Array2<f64>, b: &Array2<f64>, eps: f64) -> LossValue {
    let inter: f64 = Zip::from(a).and(b).fold(0.0, |s, &x, &y| s + x * y);
    let num = 2.0 * inter + eps;
    let den = a.sum() + b.sum() + eps;
    let den2 = den * den;
    let gradient = a.mapv(|x| (2.0 * x * den - num) / den2);
    LossValue {
        value: num / den,
        gradient,
    }
}

/// `(2·Σ a⊙b + eps) / (Σa + Σb + eps)`; the gradient is taken w.r.t. `b`.
pub fn dice_coeff(a: &MaskTensor, b: &MaskTensor, eps: f64) -> Result<LossValue, LossError> {
    same_shape(a, b)?;
    Ok(dice_raw(&a.values, &b.values, eps))
}

/// `1 - dice_coeff(y, p)`.
pub fn dice_loss(y: &MaskTensor, p: &MaskTensor) -> Result<LossValue, LossError> {
    let d = dice_coeff(y, p, DICE_EPS)?;
    Ok(LossValue {
        value: 1.0 - d.value,
        gradient: -d.gradient,
    })
}

/// Mean binary cross-entropy with `p` clipped to `[clip, 1 - clip]`.
pub fn bce(y: &MaskTensor, p: &MaskTensor) -> Result<LossValue, LossError> {
    same_shape(y, p)?;
    if !y.is_binary() {
        return Err(LossError::NotBinary);
    }
    let n = y.values.len() as f64;
    let mut total = 0.0;
    let mut gradient = Array2::zeros(p.shape());
    Zip::from(&mut gradient)
        .and(&y.values)
        .and(&p.values)
        .for_each(|g, &t, &q| {
            let qc = q.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            total -= t * qc.ln() + (1.0 - t) * (1.0 - qc).ln();
            if q > BCE_CLIP && q < 1.0 - BCE_CLIP {
                *g = (-t / qc + (1.0 - t) / (1.0 - qc)) / n;
            }
        });
    Ok(LossValue {
        value: total / n,
        gradient,
    })
}

/// Constraint between a labeled class `i` and the prediction for class `j`,
/// selected by `r = rel(i, j)`:
///
/// * `Subset` (i ⊆ j): `dice(1 - yᵢ, pⱼ)`, so `pⱼ` keeps off the outside of `yᵢ`
///   and grows inside it;
/// * `Superset` (i ⊇ j): `-dice(yᵢ, yᵢ ∪ pⱼ)`, minimal once `pⱼ` lies inside `yᵢ`;
/// * `Exclusive`: `dice(yᵢ, pⱼ)`, the overlap itself;
/// * anything else: zero.
///
/// The union is the probabilistic sum `a + b - a⊙b`.
pub fn taxonomy_pair_loss(
    y_i: &MaskTensor,
    p_j: &MaskTensor,
    r: Relation,
) -> Result<LossValue, LossError> {
    same_shape(y_i, p_j)?;
    if !y_i.is_binary() {
        return Err(LossError::NotBinary);
    }
    let y = &y_i.values;
    let p = &p_j.values;
    Ok(match r {
        Relation::Subset => dice_raw(&y.mapv(|v| 1.0 - v), p, DICE_EPS),
        Relation::Superset => {
            let union = Zip::from(y).and(p).map_collect(|&a, &b| a + b - a * b);
            let d = dice_raw(y, &union, DICE_EPS);
            // d(union)/d(p) = 1 - y
            let gradient = Zip::from(&d.gradient)
                .and(y)
                .map_collect(|&g, &a| -g * (1.0 - a));
            LossValue {
                value: -d.value,
                gradient,
            }
        }
        Relation::Exclusive => dice_raw(y, p, DICE_EPS),
        Relation::Identity | Relation::Unrelated => LossValue {
            value: 0.0,
            gradient: Array2::zeros(p.dim()),
        },
    })
}

/// One semi-supervised peer prediction entering the total loss.
#[derive(Debug, Clone, Copy)]
pub struct Peer<'a> {
    pub prediction: &'a MaskTensor,
    pub relation: Relation,
    pub weight: f64,
}

/// The full objective for one labeled patch, split into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub dice: f64,
    pub bce: f64,
    /// `λ · Σ s · L_tax`, already weighted.
    pub taxonomy: f64,
    /// Gradient w.r.t. the prediction of the labeled class.
    pub grad_self: Array2<f64>,
    /// Gradient w.r.t. each peer prediction, in input order.
    pub grad_peers: Vec<Array2<f64>>,
}

/// `dice_loss(yᵢ, pᵢ) + bce(yᵢ, pᵢ) + λ Σⱼ sᵢⱼ · taxonomy_pair_loss(yᵢ, pⱼ, rᵢⱼ)`.
pub fn total_loss(
    y_i: &MaskTensor,
    p_i: &MaskTensor,
    peers: &[Peer<'_>],
    lambda: f64,
) -> Result<TotalLoss, LossError> {
    if !(lambda >= 0.0) {
        return Err(LossError::NegativeLambda(lambda));
    }
    let d = dice_loss(y_i, p_i)?;
    let b = bce(y_i, p_i)?;
    let mut taxonomy = 0.0;
    let mut grad_peers = Vec::with_capacity(peers.len());
    for peer in peers {
        if !(peer.weight >= 0.0) {
            return Err(LossError::NegativeWeight(peer.weight));
        }
        let t = taxonomy_pair_loss(y_i, peer.prediction, peer.relation)?;
        let w = lambda * peer.weight;
        taxonomy += w * t.value;
        grad_peers.push(t.gradient * w);
    }
    let value = d.value + b.value + taxonomy;
    if !value.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok(TotalLoss {
        value,
        dice: d.value,
        bce: b.value,
        taxonomy,
        grad_self: d.gradient + b.gradient,
        grad_peers,
    })
}

/// Denominator floor of [`max_relative_error`]. Central differences of an
/// O(1) loss carry round-off near `1e-16 / step`; where the exact derivative
/// is zero, a smaller floor would report that noise as a relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Largest elementwise `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Central finite differences of `f` at `x` along every coordinate.
pub fn central_differences<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + step;
            let up = f(&probe);
            probe[k] = x[k] - step;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares the analytic gradient of `loss_fn` at `p` with central finite
/// differences and returns the maximum relative error.
pub fn grad_check<F>(loss_fn: F, p: &MaskTensor, step: f64) -> Result<f64, LossError>
where
    F: Fn(&MaskTensor) -> Result<LossValue, LossError>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(LossError::BadStep(step));
    }
    if p.values.iter().any(|&v| v - step <= 0.0 || v + step >= 1.0) {
        return Err(LossError::NotInterior);
    }
    let analytic = loss_fn(p)?;
    if !analytic.value.is_finite() {
        return Err(LossError::NonFinite);
    }
    let shape = p.shape();
    let x: Vec<f64> = p.values.iter().copied().collect();
    let mut failure = None;
    let numeric = central_differences(
        |v| {
            let m = MaskTensor::soft(Array2::from_shape_vec(shape, v.to_vec()).expect("shape"))
                .expect("interior probe");
            match loss_fn(&m) {
                Ok(l) if l.value.is_finite() => l.value,
                Ok(_) => {
                    failure = Some(LossError::NonFinite);
                    f64::NAN
                }
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        },
        &x,
        step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let a: Vec<f64> = analytic.gradient.iter().copied().collect();
    Ok(max_relative_error(&a, &numeric))
}

/// Random interior probability map.
pub fn random_interior(rng: &mut impl Rng, shape: (usize, usize)) -> MaskTensor {
    MaskTensor::soft(Array2::from_shape_fn(shape, |_| rng.random_range(0.05..0.95)))
        .expect("interior")
}

/// Random label with at least one foreground and one background pixel.
pub fn random_label(rng: &mut impl Rng, shape: (usize, usize)) -> MaskTensor {
    loop {
        let v = Array2::from_shape_fn(shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        let s = v.sum();
        if s > 0.0 && s < v.len() as f64 {
            return MaskTensor::binary(v).expect("binary");
        }
    }
}

/// One row of the gradient-check table.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Finite-difference tolerance of the gradient-check suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Runs every analytic gradient against finite differences on random 8×8
/// masks: Dice loss, BCE, the three constraining relations and the composite
/// objective (w.r.t. the labeled prediction and a peer prediction).
pub fn run_gradient_suite(seed: u64, trials: usize) -> Result<Vec<CheckRow>, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = (8, 8);
    let step = 1e-5;
    let names: [&'static str; 7] = [
        "dice_loss",
        "bce",
        "taxonomy/subset",
        "taxonomy/superset",
        "taxonomy/exclusive",
        "total/self",
        "total/peer",
    ];
    let mut worst = [0.0f64; 7];
    for _ in 0..trials {
        let y = random_label(&mut rng, shape);
        let p = random_interior(&mut rng, shape);
        let q = random_interior(&mut rng, shape);
        let other = random_interior(&mut rng, shape);
        let errs = [
            grad_check(|m| dice_loss(&y, m), &p, step)?,
            grad_check(|m| bce(&y, m), &p, step)?,
            grad_check(|m| taxonomy_pair_loss(&y, m, Relation::Subset), &p, step)?,
            grad_check(|m| taxonomy_pair_loss(&y, m, Relation::Superset), &p, step)?,
            grad_check(|m| taxonomy_pair_loss(&y, m, Relation::Exclusive), &p, step)?,
            grad_check(
                |m| {
                    let peers = [
                        Peer { prediction: &q, relation: Relation::Exclusive, weight: 0.7 },
                        Peer { prediction: &other, relation: Relation::Superset, weight: 0.3 },
                    ];
                    let t = total_loss(&y, m, &peers, 0.1)?;
                    Ok(LossValue { value: t.value, gradient: t.grad_self })
                },
                &p,
                step,
            )?,
            grad_check(
                |m| {
                    let peers = [
                        Peer { prediction: m, relation: Relation::Subset, weight: 0.6 },
                        Peer { prediction: &other, relation: Relation::Exclusive, weight: 0.9 },
                    ];
                    let t = total_loss(&y, &q, &peers, 0.1)?;
                    Ok(LossValue { value: t.value, gradient: t.grad_peers[0].clone() })
                },
                &p,
                step,
            )?,
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(&name, e)| CheckRow {
            name,
            trials,
            max_rel_error: e,
            passed: e < GRAD_TOLERANCE,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    fn bin(v: &[f64]) -> MaskTensor {
        MaskTensor::binary(arr2(&[[v[0], v[1]], [v[2], v[3]]])).unwrap()
    }

    fn soft(v: &[f64]) -> MaskTensor {
        MaskTensor::soft(Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn dice_coefficient_cases() {
        let a = bin(&[1., 1., 0., 0.]);
        assert_abs_diff_eq!(dice_coeff(&a, &a, 1e-12).unwrap().value, 1.0, epsilon = 1e-9);
        let b = bin(&[0., 0., 1., 1.]);
        assert_abs_diff_eq!(dice_coeff(&a, &b, DICE_EPS).unwrap().value, 0.0, epsilon = 1e-6);
        let ones = bin(&[1., 1., 1., 1.]);
        assert_abs_diff_eq!(dice_coeff(&b, &ones, DICE_EPS).unwrap().value, 2.0 / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn dice_loss_cases() {
        let y = bin(&[0., 0., 1., 1.]);
        assert_abs_diff_eq!(dice_loss(&y, &y).unwrap().value, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(dice_loss(&y, &bin(&[1., 1., 0., 0.])).unwrap().value, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(dice_loss(&y, &bin(&[1., 1., 1., 1.])).unwrap().value, 1.0 / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn bce_cases() {
        let y = MaskTensor::binary(arr2(&[[1.0, 0.0]])).unwrap();
        let v = bce(&y, &MaskTensor::soft(arr2(&[[1.0, 0.0]])).unwrap()).unwrap().value;
        assert_abs_diff_eq!(v, -(1.0 - BCE_CLIP).ln(), epsilon = 1e-15);
        let y1 = MaskTensor::binary(arr2(&[[1.0]])).unwrap();
        assert_abs_diff_eq!(bce(&y1, &soft(&[0.5])).unwrap().value, 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(bce(&y, &soft(&[0.9, 0.1])).unwrap().value, -(0.9f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(-(0.9f64).ln(), 0.105, epsilon = 1e-3);
    }

    #[test]
    fn label_must_be_binary() {
        let s = soft(&[0.5, 0.5]);
        assert_eq!(bce(&s, &s), Err(LossError::NotBinary));
        assert!(MaskTensor::soft(arr2(&[[1.5]])).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let a = soft(&[0.5, 0.5]);
        let b = soft(&[0.5]);
        assert!(matches!(dice_coeff(&a, &b, DICE_EPS), Err(LossError::Shape(..))));
    }

    #[test]
    fn pair_loss_cases() {
        let y = bin(&[1., 1., 0., 0.]);
        let v = |p: &[f64], r| taxonomy_pair_loss(&y, &bin(p), r).unwrap().value;
        assert_abs_diff_eq!(v(&[0., 0., 1., 1.], Relation::Exclusive), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(v(&[1., 1., 1., 1.], Relation::Subset), 2.0 / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(v(&[1., 0., 0., 0.], Relation::Superset), -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v(&[1., 1., 1., 1.], Relation::Superset), -2.0 / 3.0, epsilon = 1e-6);
        let z = taxonomy_pair_loss(&y, &bin(&[1., 1., 1., 1.]), Relation::Unrelated).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.gradient.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_loss_reductions() {
        let y = bin(&[1., 1., 0., 0.]);
        let p = bin(&[1., 1., 0., 0.]);
        let q = bin(&[0., 0., 1., 1.]);
        let peers = [Peer { prediction: &q, relation: Relation::Exclusive, weight: 1.0 }];
        let t = total_loss(&y, &p, &peers, 0.1).unwrap();
        assert_abs_diff_eq!(t.value, 0.0, epsilon = 1e-5);

        let soft_p = MaskTensor::soft(arr2(&[[0.7, 0.6], [0.2, 0.3]])).unwrap();
        let base = dice_loss(&y, &soft_p).unwrap().value + bce(&y, &soft_p).unwrap().value;
        let unrelated = [
            Peer { prediction: &q, relation: Relation::Unrelated, weight: 1.0 },
            Peer { prediction: &p, relation: Relation::Unrelated, weight: 0.5 },
        ];
        assert_eq!(total_loss(&y, &soft_p, &unrelated, 0.1).unwrap().value, base);
        let constraining = [Peer { prediction: &q, relation: Relation::Subset, weight: 1.0 }];
        assert_eq!(total_loss(&y, &soft_p, &constraining, 0.0).unwrap().value, base);
    }

    #[test]
    fn total_loss_errors() {
        let y = bin(&[1., 1., 0., 0.]);
        let peers = [Peer { prediction: &y, relation: Relation::Subset, weight: -1.0 }];
        assert_eq!(total_loss(&y, &y, &peers, 0.1), Err(LossError::NegativeWeight(-1.0)));
        assert_eq!(total_loss(&y, &y, &[], -0.1), Err(LossError::NegativeLambda(-0.1)));
    }

    #[test]
    fn grad_check_rejects_bad_input() {
        let y = bin(&[1., 1., 0., 0.]);
        let p = MaskTensor::soft(arr2(&[[0.5, 0.5], [0.5, 0.5]])).unwrap();
        assert_eq!(grad_check(|m| dice_loss(&y, m), &p, 1e-2), Err(LossError::BadStep(1e-2)));
        let edge = MaskTensor::soft(arr2(&[[0.0, 0.5], [0.5, 0.5]])).unwrap();
        assert_eq!(grad_check(|m| dice_loss(&y, m), &edge, 1e-5), Err(LossError::NotInterior));
    }

    #[test]
    fn gradient_suite_small() {
        for row in run_gradient_suite(7, 5).unwrap() {
            assert!(row.passed, "{} max rel err {}", row.name, row.max_rel_error);
        }
    }

    #[test]
    fn dice_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_interior(&mut rng, (5, 5));
        let b = random_interior(&mut rng, (5, 5));
        let ab = dice_coeff(&a, &b, DICE_EPS).unwrap().value;
        let ba = dice_coeff(&b, &a, DICE_EPS).unwrap().value;
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-15);
        assert!(ab > 0.0 && ab <= 1.0);
    }
}
