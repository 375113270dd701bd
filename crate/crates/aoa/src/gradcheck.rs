//! Central finite-difference verification of reverse-mode gradients.
//!
//! Piecewise-linear ops (relu, max pooling, abs, max reductions, the
//! runner-up class choice) make some coordinates non-differentiable. Callers
//! provide a kink signature; a coordinate whose signature changes between the
//! two probe points is skipped instead of failing the check.

use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub struct GradCheck {
    /// Central-difference step.
    pub step: Real,
    /// Maximum allowed relative error.
    pub rel_tol: Real,
    /// Coordinates where both gradients are below this are accepted outright;
    /// the relative error of two near-zero values is noise.
    pub zero_floor: Real,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-3,
            rel_tol: 1e-4,
            zero_floor: 1e-9,
            max_coords: 200,
            seed: 0x9d5c,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: Real,
    pub worst_coord: Option<usize>,
}

impl GradCheckReport {
    /// Fraction of checked (non-kink) coordinates within tolerance.
    pub fn pass_fraction(&self) -> Real {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as Real / self.checked as Real
        }
    }
}

impl GradCheck {
    /// Compares `analytic` against central differences of `f` at `x`.
    /// `signature` hashes the active piecewise-linear region; pass `None`
    /// for smooth functions.
    pub fn run(
        &self,
        x: &Tensor,
        analytic: &Tensor,
        mut f: impl FnMut(&Tensor) -> Real,
        mut signature: Option<&mut dyn FnMut(&Tensor) -> u64>,
    ) -> GradCheckReport {
        assert_eq!(x.shape(), analytic.shape(), "gradient shape mismatch");
        let n = x.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > self.max_coords {
            let mut rng = Rng::seed(self.seed);
            rng.shuffle(&mut coords);
            coords.truncate(self.max_coords);
            coords.sort_unstable();
        }

        let mut report = GradCheckReport {
            checked: 0,
            passed: 0,
            skipped_kinks: 0,
            max_rel_err: 0.0,
            worst_coord: None,
        };
        let mut probe = x.data().to_vec();
        for &i in &coords {
            let orig = probe[i];
            probe[i] = orig + self.step;
            let up = Tensor::raw(x.shape().to_vec(), probe.clone());
            probe[i] = orig - self.step;
            let dn = Tensor::raw(x.shape().to_vec(), probe.clone());
            probe[i] = orig;

            if let Some(sig) = signature.as_deref_mut() {
                if sig(&up) != sig(&dn) {
                    report.skipped_kinks += 1;
                    continue;
                }
            }

            let fd = (f(&up) - f(&dn)) / (2.0 * self.step);
            let an = analytic.data()[i];
            report.checked += 1;
            if fd.abs() < self.zero_floor && an.abs() < self.zero_floor {
                report.passed += 1;
                continue;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            if rel <= self.rel_tol {
                report.passed += 1;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coord = Some(i);
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn quadratic_gradient_verifies() {
        // f(x) = sum(x^2), grad = 2x.
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 0.7]).unwrap();
        let grad = x.map(|v| 2.0 * v);
        let report = GradCheck::default().run(
            &x,
            &grad,
            |t| t.data().iter().map(|v| v * v).sum(),
            None,
        );
        assert_eq!(report.checked, 5);
        assert_eq!(report.passed, 5);
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let grad = x.map(|v| 3.0 * v); // should be 2x
        let report = GradCheck::default().run(
            &x,
            &grad,
            |t| t.data().iter().map(|v| v * v).sum(),
            None,
        );
        assert_eq!(report.passed, 0);
        assert!(report.max_rel_err > 0.1);
    }

    #[test]
    fn relu_kinks_are_skipped_via_signature() {
        // x exactly at 0 sits on the relu kink; the signature must catch it.
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 1.0]).unwrap();
        let f = |t: &Tensor| -> Real {
            let mut tape = Tape::new();
            let xi = tape.leaf(t.clone());
            let r = tape.relu(xi).unwrap();
            let s = tape.sum_all(r).unwrap();
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let r = tape.relu(xi).unwrap();
        let s = tape.sum_all(r).unwrap();
        let grad = tape.gradient(s, xi).unwrap().grad;
        let mut sig = |t: &Tensor| -> u64 {
            t.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| if v > 0.0 { 1u64 << (i % 63) } else { 0 })
                .fold(0, |a, b| a ^ b)
        };
        let report = GradCheck::default().run(&x, &grad, f, Some(&mut sig));
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 2);
        assert_eq!(report.passed, 2);
    }
}
