//! Sparse multivariate polynomials with analytic gradients.
//!
//! Benchmark costs and constraints are low-degree polynomials; keeping them
//! in this form gives the simulator exact gradients for free and lets problem
//! definitions round-trip through the config file.

use serde::{Deserialize, Serialize};

/// One monomial `coef * u_0^p0 * u_1^p1 * ...`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Term {
    pub coef: f64,
    pub powers: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Poly {
    pub terms: Vec<Term>,
}

impl Poly {
    pub fn new(terms: Vec<Term>) -> Self {
        Poly { terms }
    }

    /// Convenience constructor from `(coef, powers)` tuples.
    pub fn from_tuples(terms: &[(f64, &[u32])]) -> Self {
        Poly {
            terms: terms
                .iter()
                .map(|(c, p)| Term { coef: *c, powers: p.to_vec() })
                .collect(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.terms.iter().map(|t| t.powers.len()).max().unwrap_or(0)
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let mut v = t.coef;
                for (i, &p) in t.powers.iter().enumerate() {
                    if p > 0 {
                        v *= u[i].powi(p as i32);
                    }
                }
                v
            })
            .sum()
    }

    /// Partial derivative with respect to variable `i`.
    pub fn derivative(&self, i: usize) -> Poly {
        let mut terms = Vec::new();
        for t in &self.terms {
            let p = t.powers.get(i).copied().unwrap_or(0);
            if p == 0 {
                continue;
            }
            let mut powers = t.powers.clone();
            powers[i] = p - 1;
            terms.push(Term { coef: t.coef * p as f64, powers });
        }
        Poly { terms }
    }

    pub fn grad(&self, u: &[f64]) -> Vec<f64> {
        (0..u.len()).map(|i| self.derivative(i).eval(u)).collect()
    }

    /// Sound upper bound on `max |poly|` over the box, obtained by bounding
    /// each monomial separately. Conservative for sign-cancelling terms.
    pub fn abs_bound(&self, lo: &[f64], hi: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let mut v = t.coef.abs();
                for (i, &p) in t.powers.iter().enumerate() {
                    if p > 0 {
                        v *= lo[i].abs().max(hi[i].abs()).powi(p as i32);
                    }
                }
                v
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_and_grad_of_quadratic() {
        // (u1 - 0.5)^2 + (u2 - 0.4)^2 expanded
        let p = Poly::from_tuples(&[
            (1.0, &[2, 0]),
            (-1.0, &[1, 0]),
            (1.0, &[0, 2]),
            (-0.8, &[0, 1]),
            (0.41, &[0, 0]),
        ]);
        let u = [0.1, 0.2];
        assert!((p.eval(&u) - ((0.1f64 - 0.5).powi(2) + (0.2f64 - 0.4).powi(2))).abs() < 1e-15);
        let g = p.grad(&u);
        assert!((g[0] - 2.0 * (0.1 - 0.5)).abs() < 1e-15);
        assert!((g[1] - 2.0 * (0.2 - 0.4)).abs() < 1e-15);
    }

    #[test]
    fn termwise_bound_is_sound() {
        let p = Poly::from_tuples(&[(-12.0, &[1, 0]), (-3.5, &[0, 0])]);
        let b = p.abs_bound(&[-0.5, 0.0], &[0.5, 0.8]);
        assert!((b - 9.5).abs() < 1e-12);
    }
}
