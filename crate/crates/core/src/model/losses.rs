//! Proxy-task losses with closed-form gradients.
//!
//! Ordering: K-way cross-entropy over permutation logits. Orientation: full
//! binary cross-entropy summed over both flip kinds of every branch, so
//! unflipped cubes also contribute signal. Total: alpha * ordering +
//! beta * orientation.
//!
//! Everything uses the numerically stable forms: log-sum-exp shifted by the
//! max, and max(z,0) - z*g + ln(1 + exp(-|z|)) for BCE terms.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() || self.alpha < 0.0 || self.beta < 0.0
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Stable softmax.
pub fn softmax<F: Scalar>(logits: &Array1<F>) -> Array1<F> {
    let max = logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps.mapv(|v| v / sum)
}

fn log_sum_exp<F: Scalar>(logits: &Array1<F>) -> F {
    let max = logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    max + logits.mapv(|v| (v - max).exp()).sum().ln()
}

/// Cross-entropy of the true permutation index under the logits.
pub fn permutation_loss<F: Scalar>(logits: &Array1<F>, label: usize) -> Result<F> {
    if label >= logits.len() {
        return Err(Error::Config(format!(
            "permutation label {label} outside K={}",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Loss plus dL/dlogits (softmax minus one-hot).
pub fn permutation_loss_grad<F: Scalar>(
    logits: &Array1<F>,
    label: usize,
) -> Result<(F, Array1<F>)> {
    let loss = permutation_loss(logits, label)?;
    let mut grad = softmax(logits);
    grad[label] -= F::one();
    Ok((loss, grad))
}

fn bce_with_logits<F: Scalar>(z: F, target: bool) -> F {
    let g = if target { F::one() } else { F::zero() };
    z.max(F::zero()) - z * g + (F::one() + (-z.abs()).exp()).ln()
}

fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn check_rotation_shapes<F: Scalar>(
    hor_logits: &Array1<F>,
    ver_logits: &Array1<F>,
    hor_flags: &[bool],
    ver_flags: &[bool],
) -> Result<()> {
    if hor_logits.len() != hor_flags.len() || ver_logits.len() != ver_flags.len() {
        return Err(Error::shape(
            "rotation loss",
            format!("{} hor and {} ver targets", hor_logits.len(), ver_logits.len()),
            format!("{} hor and {} ver flags", hor_flags.len(), ver_flags.len()),
        ));
    }
    Ok(())
}

/// Sum of per-cube BCE terms over both flip kinds (2M terms).
pub fn rotation_loss<F: Scalar>(
    hor_logits: &Array1<F>,
    ver_logits: &Array1<F>,
    hor_flags: &[bool],
    ver_flags: &[bool],
) -> Result<F> {
    check_rotation_shapes(hor_logits, ver_logits, hor_flags, ver_flags)?;
    let h = hor_logits
        .iter()
        .zip(hor_flags)
        .map(|(&z, &g)| bce_with_logits(z, g))
        .sum::<F>();
    let v = ver_logits
        .iter()
        .zip(ver_flags)
        .map(|(&z, &g)| bce_with_logits(z, g))
        .sum::<F>();
    Ok(h + v)
}

/// Loss plus gradients (sigmoid minus target, per logit).
pub fn rotation_loss_grad<F: Scalar>(
    hor_logits: &Array1<F>,
    ver_logits: &Array1<F>,
    hor_flags: &[bool],
    ver_flags: &[bool],
) -> Result<(F, Array1<F>, Array1<F>)> {
    let loss = rotation_loss(hor_logits, ver_logits, hor_flags, ver_flags)?;
    let grad_of = |logits: &Array1<F>, flags: &[bool]| {
        Array1::from_iter(logits.iter().zip(flags).map(|(&z, &g)| {
            sigmoid(z) - if g { F::one() } else { F::zero() }
        }))
    };
    Ok((
        loss,
        grad_of(hor_logits, hor_flags),
        grad_of(ver_logits, ver_flags),
    ))
}

/// alpha * ordering + beta * orientation.
pub fn total_loss<F: Scalar>(perm: F, rot: F, weights: &LossWeights) -> F {
    F::from_f64(weights.alpha) * perm + F::from_f64(weights.beta) * rot
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2usize, 4, 7, 100] {
            let logits = Array1::<f64>::from_elem(k, 0.37);
            let loss = permutation_loss(&logits, k / 2).unwrap();
            assert!(
                (loss - (k as f64).ln()).abs() < 1e-12,
                "K={k}: {loss} vs {}",
                (k as f64).ln()
            );
        }
    }

    #[test]
    fn zero_rotation_logits_give_2m_ln2() {
        let m = 8;
        let z = Array1::<f64>::zeros(m);
        let flags = vec![true, false, true, false, true, false, true, false];
        let loss = rotation_loss(&z, &z, &flags, &flags).unwrap();
        assert!((loss - 16.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_class_ce() {
        // logits [0, ln 3]: softmax [1/4, 3/4]; label 0 -> loss ln 4.
        let logits = Array1::from_vec(vec![0.0f64, 3.0f64.ln()]);
        let (loss, grad) = permutation_loss_grad(&logits, 0).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((grad[0] - (-0.75)).abs() < 1e-12);
        assert!((grad[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_bce() {
        // sigmoid(ln 3) = 3/4: positive target -> ln(4/3), negative -> ln 4.
        let z = Array1::from_vec(vec![3.0f64.ln()]);
        let pos = rotation_loss(&z, &z, &[true], &[false]).unwrap();
        assert!((pos - ((4.0f64 / 3.0).ln() + 4.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = Array1::from_vec(vec![500.0f64, -500.0, 0.0]);
        let loss = permutation_loss(&logits, 1).unwrap();
        assert!(loss.is_finite());
        assert!((loss - 1000.0).abs() < 1e-9);
        let z = Array1::from_vec(vec![700.0f64, -700.0]);
        let rot = rotation_loss(&z, &z, &[false, true], &[true, false]).unwrap();
        assert!(rot.is_finite());
        let (_, gh, gv) = rotation_loss_grad(&z, &z, &[false, true], &[true, false]).unwrap();
        assert!(gh.iter().chain(gv.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..10 {
            let k = rng.gen_range(2..10);
            let logits = Array1::<f64>::from_shape_fn(k, |_| rng.gen_range(-2.0..2.0));
            let label = rng.gen_range(0..k);
            let (_, grad) = permutation_loss_grad(&logits, label).unwrap();
            for i in 0..k {
                let mut up = logits.clone();
                up[i] += h;
                let mut down = logits.clone();
                down[i] -= h;
                let fd = (permutation_loss(&up, label).unwrap()
                    - permutation_loss(&down, label).unwrap())
                    / (2.0 * h);
                assert!((fd - grad[i]).abs() < 1e-8);
            }

            let m = rng.gen_range(2..9);
            let hz = Array1::<f64>::from_shape_fn(m, |_| rng.gen_range(-3.0..3.0));
            let vz = Array1::<f64>::from_shape_fn(m, |_| rng.gen_range(-3.0..3.0));
            let hf: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.5)).collect();
            let vf: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.5)).collect();
            let (_, gh, gv) = rotation_loss_grad(&hz, &vz, &hf, &vf).unwrap();
            for i in 0..m {
                let mut up = hz.clone();
                up[i] += h;
                let mut down = hz.clone();
                down[i] -= h;
                let fd = (rotation_loss(&up, &vz, &hf, &vf).unwrap()
                    - rotation_loss(&down, &vz, &hf, &vf).unwrap())
                    / (2.0 * h);
                assert!((fd - gh[i]).abs() < 1e-8);
                let mut upv = vz.clone();
                upv[i] += h;
                let mut downv = vz.clone();
                downv[i] -= h;
                let fdv = (rotation_loss(&hz, &upv, &hf, &vf).unwrap()
                    - rotation_loss(&hz, &downv, &hf, &vf).unwrap())
                    / (2.0 * h);
                assert!((fdv - gv[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn weighting_composes() {
        let w = LossWeights::default();
        assert_eq!(total_loss(2.0f64, 4.0, &w), 3.0);
        let w2 = LossWeights {
            alpha: 1.0,
            beta: 0.0,
        };
        assert_eq!(total_loss(2.0f64, 999.0, &w2), 2.0);
        assert!(LossWeights {
            alpha: -1.0,
            beta: 0.5
        }
        .validate()
        .is_err());
    }

    #[test]
    fn label_bounds_checked() {
        let logits = Array1::<f32>::zeros(4);
        assert!(permutation_loss(&logits, 4).is_err());
        let z = Array1::<f32>::zeros(3);
        assert!(rotation_loss(&z, &z, &[true, false], &[false, false, true]).is_err());
    }
}
