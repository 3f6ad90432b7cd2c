//! Reference-element machinery for quadrilateral spectral elements.
//!
//! Everything here lives on the reference interval [-1, 1] or the reference
//! square [-1, 1]^2: Gauss-Lobatto-Legendre (GLL) quadrature, the nodal
//! Lagrange basis collocated at the GLL points, and the nodal
//! differentiation matrix. Two-dimensional operators are tensor products of
//! the 1D rule.

use crate::error::{Error, Result};
use ndarray::prelude::*;

/// Legendre polynomial P_n and its derivative at `x`, by three-term recurrence.
pub fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p_prev, mut p) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p_next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
        p_prev = p;
        p = p_next;
    }
    // P'_n(x) = n (x P_n - P_{n-1}) / (x^2 - 1), with endpoint limits handled
    // by the caller (GLL endpoints are never passed here during the Newton loop).
    let dp = if (x * x - 1.0).abs() < 1e-14 {
        let nf = n as f64;
        let sign = if x > 0.0 { 1.0 } else { (-1.0f64).powi(n as i32 - 1) };
        sign * nf * (nf + 1.0) / 2.0
    } else {
        (n as f64) * (x * p - p_prev) / (x * x - 1.0)
    };
    (p, dp)
}

/// Gauss-Lobatto-Legendre rule with P+1 points on [-1, 1].
///
/// Nodes are the roots of (1 - x^2) P'_P(x); weights are
/// 2 / (P (P+1) P_P(x_i)^2). The rule integrates polynomials of degree
/// up to 2P-1 exactly.
pub fn gll_rule(order: usize) -> Result<(Array1<f64>, Array1<f64>)> {
    if order == 0 {
        return Err(Error::invalid("GLL rule requires order >= 1"));
    }
    let n = order + 1;
    let mut nodes = Array1::zeros(n);
    nodes[0] = -1.0;
    nodes[n - 1] = 1.0;
    // Interior nodes: Newton iteration on P'_P seeded with Chebyshev-Lobatto points.
    for i in 1..n - 1 {
        let mut x = -(std::f64::consts::PI * i as f64 / order as f64).cos();
        for _ in 0..100 {
            // Newton step on f = P'_P using f' from the Legendre ODE:
            // (1-x^2) P''_P = 2x P'_P - P(P+1) P_P.
            let (p, dp) = legendre(order, x);
            let ddp = (2.0 * x * dp - (order as f64) * (order as f64 + 1.0) * p) / (1.0 - x * x);
            let step = dp / ddp;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = x;
    }
    let mut weights = Array1::zeros(n);
    let scale = 2.0 / (order as f64 * (order as f64 + 1.0));
    for i in 0..n {
        let (p, _) = legendre(order, nodes[i]);
        weights[i] = scale / (p * p);
    }
    Ok((nodes, weights))
}

/// Nodal differentiation matrix at the GLL points: D[i][j] = l'_j(x_i).
pub fn diff_matrix(order: usize) -> Result<Array2<f64>> {
    if order == 0 {
        return Err(Error::invalid("differentiation matrix requires order >= 1"));
    }
    let (nodes, _) = gll_rule(order)?;
    let n = order + 1;
    let mut d = Array2::zeros((n, n));
    let pf = order as f64;
    for i in 0..n {
        let (pi, _) = legendre(order, nodes[i]);
        for j in 0..n {
            if i == j {
                continue;
            }
            let (pj, _) = legendre(order, nodes[j]);
            d[(i, j)] = (pi / pj) / (nodes[i] - nodes[j]);
        }
    }
    d[(0, 0)] = -pf * (pf + 1.0) / 4.0;
    d[(n - 1, n - 1)] = pf * (pf + 1.0) / 4.0;
    Ok(d)
}

/// Values of the P+1 Lagrange basis functions (nodal at `nodes`) at `points`.
///
/// Returns a (points.len() x nodes.len()) matrix; identity when
/// `points == nodes` (collocation).
pub fn lagrange_eval(nodes: &Array1<f64>, points: &Array1<f64>) -> Array2<f64> {
    let n = nodes.len();
    let m = points.len();
    // Barycentric weights.
    let mut w: Array1<f64> = Array1::ones(n);
    for j in 0..n {
        for k in 0..n {
            if k != j {
                w[j] /= nodes[j] - nodes[k];
            }
        }
    }
    let mut out = Array2::zeros((m, n));
    for (q, &x) in points.iter().enumerate() {
        if let Some(j) = nodes.iter().position(|&xn| (x - xn).abs() < 1e-14) {
            out[(q, j)] = 1.0;
            continue;
        }
        let mut denom = 0.0;
        for j in 0..n {
            denom += w[j] / (x - nodes[j]);
        }
        for j in 0..n {
            out[(q, j)] = (w[j] / (x - nodes[j])) / denom;
        }
    }
    out
}

/// 1D reference element: GLL nodes, weights and differentiation matrix.
#[derive(Debug, Clone)]
pub struct ReferenceElement {
    pub order: usize,
    pub nodes: Array1<f64>,
    pub weights: Array1<f64>,
    pub diff: Array2<f64>,
}

impl ReferenceElement {
    pub fn new(order: usize) -> Result<Self> {
        let (nodes, weights) = gll_rule(order)?;
        let diff = diff_matrix(order)?;
        Ok(Self {
            order,
            nodes,
            weights,
            diff,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.order + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bisection oracle for the interior GLL nodes: roots of P'_P on (-1, 1).
    fn gll_nodes_bisection(order: usize) -> Vec<f64> {
        let dp = |x: f64| legendre(order, x).1;
        let mut roots = vec![-1.0];
        let samples = 2000;
        let mut prev_x = -1.0 + 1e-9;
        let mut prev_f = dp(prev_x);
        for k in 1..=samples {
            let x = -1.0 + 2.0 * (k as f64) / (samples as f64 + 1.0);
            let f = dp(x);
            if prev_f * f < 0.0 {
                let (mut a, mut b) = (prev_x, x);
                for _ in 0..200 {
                    let mid = 0.5 * (a + b);
                    if dp(a) * dp(mid) <= 0.0 {
                        b = mid;
                    } else {
                        a = mid;
                    }
                }
                roots.push(0.5 * (a + b));
            }
            prev_x = x;
            prev_f = f;
        }
        roots.push(1.0);
        roots
    }

    #[test]
    fn two_point_rule_is_forced() {
        let (nodes, weights) = gll_rule(1).unwrap();
        assert_eq!(nodes.as_slice().unwrap(), &[-1.0, 1.0]);
        assert_eq!(weights.as_slice().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn three_point_rule_matches_bisection_oracle() {
        let (nodes, weights) = gll_rule(2).unwrap();
        let oracle = gll_nodes_bisection(2);
        for (a, b) in nodes.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for (w, expect) in weights.iter().zip([1.0 / 3.0, 4.0 / 3.0, 1.0 / 3.0]) {
            assert!((w - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn order_zero_rejected() {
        assert!(gll_rule(0).is_err());
        assert!(diff_matrix(0).is_err());
    }

    #[test]
    fn quartic_integral_with_p3_rule() {
        let (nodes, weights) = gll_rule(3).unwrap();
        let integral: f64 = nodes
            .iter()
            .zip(weights.iter())
            .map(|(x, w)| w * x.powi(4))
            .sum();
        assert!((integral - 0.4).abs() < 1e-12);
    }

    #[test]
    fn exactness_up_to_degree_2p_minus_1() {
        for p in 1..=10 {
            let (nodes, weights) = gll_rule(p).unwrap();
            for k in 0..=(2 * p - 1) {
                let quad: f64 = nodes
                    .iter()
                    .zip(weights.iter())
                    .map(|(x, w)| w * x.powi(k as i32))
                    .sum();
                let exact = if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
                assert!(
                    (quad - exact).abs() < 1e-12,
                    "P={p} k={k}: {quad} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn nodes_increasing_weights_positive_sum_two() {
        for p in 1..=12 {
            let (nodes, weights) = gll_rule(p).unwrap();
            for i in 1..nodes.len() {
                assert!(nodes[i] > nodes[i - 1]);
            }
            assert!(weights.iter().all(|&w| w > 0.0));
            assert!((weights.sum() - 2.0).abs() < 1e-13);
        }
    }

    #[test]
    fn diff_matrix_kills_constants() {
        for p in 1..=12 {
            let d = diff_matrix(p).unwrap();
            for i in 0..=p {
                let row_sum: f64 = d.row(i).sum();
                assert!(row_sum.abs() < 1e-12, "P={p} row {i}: {row_sum}");
            }
        }
    }

    #[test]
    fn diff_matrix_identity_function() {
        let (nodes, _) = gll_rule(3).unwrap();
        let d = diff_matrix(3).unwrap();
        let deriv = d.dot(&nodes);
        for v in deriv.iter() {
            assert!((v - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn diff_matrix_cubic_against_symbolic() {
        // f(x) = x^3, f'(x) = 3 x^2.
        let (nodes, _) = gll_rule(3).unwrap();
        let d = diff_matrix(3).unwrap();
        let values = nodes.mapv(|x| x.powi(3));
        let deriv = d.dot(&values);
        for (x, v) in nodes.iter().zip(deriv.iter()) {
            assert!((v - 3.0 * x * x).abs() < 1e-12);
        }
    }

    #[test]
    fn diff_matrix_polynomial_exactness() {
        for p in 2..=12 {
            let (nodes, _) = gll_rule(p).unwrap();
            let d = diff_matrix(p).unwrap();
            // Degree-p polynomial with mixed coefficients.
            let f = |x: f64| (0..=p).map(|k| (k as f64 + 1.0) * x.powi(k as i32)).sum::<f64>();
            let df = |x: f64| {
                (1..=p)
                    .map(|k| (k as f64 + 1.0) * k as f64 * x.powi(k as i32 - 1))
                    .sum::<f64>()
            };
            let values = nodes.mapv(f);
            let deriv = d.dot(&values);
            for (x, v) in nodes.iter().zip(deriv.iter()) {
                assert!((v - df(*x)).abs() < 1e-11 * (1.0 + df(*x).abs()), "P={p}");
            }
        }
    }

    #[test]
    fn lagrange_eval_collocation_identity() {
        let (nodes, _) = gll_rule(5).unwrap();
        let e = lagrange_eval(&nodes, &nodes);
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((e[(i, j)] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn lagrange_eval_reproduces_polynomials() {
        let (nodes, _) = gll_rule(4).unwrap();
        let points = Array1::linspace(-1.0, 1.0, 17);
        let e = lagrange_eval(&nodes, &points);
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x.powi(3) + x.powi(4);
        let coeffs = nodes.mapv(f);
        let vals = e.dot(&coeffs);
        for (x, v) in points.iter().zip(vals.iter()) {
            assert!((v - f(*x)).abs() < 1e-12);
        }
    }
}
