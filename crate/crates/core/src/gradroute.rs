//! Gradient routing primitives: gradient reversal and stop-gradient, the
//! policy that configures them, and the finite-difference oracle used to
//! check them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DiffValue, Graph};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradRoutingPolicy {
    /// Reversal strength `eta`. Held constant over training.
    pub grl_scale: f64,
    pub detach_enabled: bool,
    /// When false every reversal node becomes a plain identity. Only used to
    /// build the un-reversed reference graph in tests.
    #[serde(default = "yes")]
    pub reverse_enabled: bool,
    /// Whether the instance-context classifier's reversal also covers the
    /// context half of its input. When false the context network receives
    /// that classifier's gradient un-reversed.
    #[serde(default = "yes")]
    pub reverse_iloss_context: bool,
}

fn yes() -> bool {
    true
}

impl Default for GradRoutingPolicy {
    fn default() -> Self {
        GradRoutingPolicy {
            grl_scale: 1.0,
            detach_enabled: true,
            reverse_enabled: true,
            reverse_iloss_context: true,
        }
    }
}

impl GradRoutingPolicy {
    pub fn validate(&self, adversarial_active: bool) -> Result<()> {
        if !(self.grl_scale.is_finite() && self.grl_scale >= 0.0) {
            return Err(Error::InvalidPolicy(format!("grl_scale must be >= 0, got {}", self.grl_scale)));
        }
        if adversarial_active && self.grl_scale == 0.0 {
            return Err(Error::InvalidPolicy(
                "grl_scale must be > 0 while an adversarial branch is active".into(),
            ));
        }
        Ok(())
    }

    /// Applies the policy's reversal to `x` (identity when reversal is off).
    pub fn reverse<T: Real>(&self, g: &mut Graph<T>, x: DiffValue) -> Result<DiffValue> {
        if self.reverse_enabled {
            gradient_reverse(g, x, self.grl_scale)
        } else {
            Ok(x)
        }
    }

    /// Applies stop-gradient to `x` when detaching is enabled.
    pub fn detach<T: Real>(&self, g: &mut Graph<T>, x: DiffValue) -> DiffValue {
        if self.detach_enabled {
            stop_gradient(g, x)
        } else {
            x
        }
    }
}

/// Identity in the forward direction; scales the backward gradient by `-eta`.
pub fn gradient_reverse<T: Real>(g: &mut Graph<T>, x: DiffValue, eta: f64) -> Result<DiffValue> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidPolicy(format!("reversal scale must be >= 0, got {eta}")));
    }
    Ok(g.reverse(x, eta))
}

/// Identity in the forward direction; blocks all backward flow.
pub fn stop_gradient<T: Real>(g: &mut Graph<T>, x: DiffValue) -> DiffValue {
    g.stop(x)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::OracleFailure(format!("step must be > 0, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::OracleFailure(format!("non-finite evaluation at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn var(g: &mut Graph<f64>, v: &[f64]) -> DiffValue {
        g.variable(Tensor::from_f64(&[v.len()], v).unwrap())
    }

    #[test]
    fn reverse_forward_is_identity() {
        let mut g = Graph::new();
        let x = var(&mut g, &[0.3, -1.2]);
        let y = gradient_reverse(&mut g, x, 1.0).unwrap();
        assert_eq!(g.value(y).data, vec![0.3, -1.2]);
    }

    #[test]
    fn reverse_of_sum_gives_minus_eta() {
        let mut g = Graph::new();
        let x = var(&mut g, &[0.3, -1.2]);
        let y = gradient_reverse(&mut g, x, 1.0).unwrap();
        let s = g.sum(y);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[-1.0, -1.0]);
    }

    #[test]
    fn reverse_of_half_square() {
        // f = sum(grl(x, 0.5)^2 / 2) at x = 2: identity gradient is x = 2, reversed -1.
        let eval = |x0: f64, eta: Option<f64>| {
            let mut g = Graph::new();
            let x = var(&mut g, &[x0]);
            let y = match eta {
                Some(e) => gradient_reverse(&mut g, x, e).unwrap(),
                None => x,
            };
            let sq = g.mul(y, y).unwrap();
            let half = g.scale(sq, 0.5);
            let s = g.sum(half);
            g.backward(s);
            (g.scalar(s), g.grad(x).unwrap()[0])
        };
        let (_, reversed) = eval(2.0, Some(0.5));
        assert_eq!(reversed, -1.0);
        let fd = finite_difference_gradient(|v| eval(v[0], Some(0.5)).0, &[2.0], 1e-5).unwrap()[0];
        assert!((reversed - (-0.5 * fd)).abs() < 1e-8);
    }

    #[test]
    fn reverse_rejects_negative_scale() {
        let mut g = Graph::<f64>::new();
        let x = var(&mut g, &[1.0]);
        assert!(matches!(gradient_reverse(&mut g, x, -0.1), Err(Error::InvalidPolicy(_))));
    }

    #[test]
    fn zero_scale_blocks_like_stop_gradient() {
        let mut g = Graph::new();
        let x = var(&mut g, &[1.0, 2.0]);
        let y = gradient_reverse(&mut g, x, 0.0).unwrap();
        let s = g.sum(y);
        g.backward(s);
        assert!(g.grad(x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stop_gradient_examples() {
        let mut g = Graph::new();
        let x = var(&mut g, &[5.0]);
        let y = stop_gradient(&mut g, x);
        assert_eq!(g.value(y).data, vec![5.0]);
        let s = g.sum(y);
        g.backward(s);
        assert!(g.grad(x).is_none_or(|v| v == [0.0]));

        // f = sum(stop(x) * x) at x = 3 -> 3, not 6
        let mut g = Graph::new();
        let x = var(&mut g, &[3.0]);
        let y = stop_gradient(&mut g, x);
        let m = g.mul(y, x).unwrap();
        let s = g.sum(m);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|v| v.iter().map(|a| a * a).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let ones = finite_difference_gradient(|v| v.iter().sum(), &[0.3, -7.0, 12.0], 1e-5).unwrap();
        assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(matches!(
            finite_difference_gradient(|v| v[0].ln(), &[0.0], 1e-5),
            Err(Error::OracleFailure(_))
        ));
        assert!(finite_difference_gradient(|v| v[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn policy_validation() {
        let p = GradRoutingPolicy { grl_scale: 0.0, ..Default::default() };
        assert!(p.validate(false).is_ok());
        assert!(p.validate(true).is_err());
        let p = GradRoutingPolicy { grl_scale: -1.0, ..Default::default() };
        assert!(p.validate(false).is_err());
    }

    proptest! {
        #[test]
        fn forward_is_bit_identical(v in proptest::collection::vec(-1e6f64..1e6, 1..8), eta in 0.0f64..4.0) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_f64(&[v.len()], &v).unwrap());
            let r = gradient_reverse(&mut g, x, eta).unwrap();
            let s = stop_gradient(&mut g, x);
            let bits = |t: &Tensor<f64>| t.data.iter().map(|a| a.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(g.value(r)), bits(g.value(x)));
            prop_assert_eq!(bits(g.value(s)), bits(g.value(x)));
        }

        #[test]
        fn reversed_gradient_is_scaled_identity_gradient(
            v in proptest::collection::vec(-2.0f64..2.0, 1..6),
            eta in 0.0f64..3.0,
        ) {
            // f = sum(sigmoid(r(x)) * r(x)) with r = grl or identity
            let run = |reverse: bool| {
                let mut g = Graph::new();
                let x = g.variable(Tensor::from_f64(&[v.len()], &v).unwrap());
                let y = if reverse { gradient_reverse(&mut g, x, eta).unwrap() } else { x };
                let s = g.sigmoid(y);
                let m = g.mul(s, y).unwrap();
                let out = g.sum(m);
                g.backward(out);
                g.grad(x).unwrap().to_vec()
            };
            let plain = run(false);
            let rev = run(true);
            for (a, b) in rev.iter().zip(&plain) {
                prop_assert!((a + eta * b).abs() <= 1e-10);
            }
        }
    }
}
