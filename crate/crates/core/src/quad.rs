//! Quadrature rules on the reference triangle and on boundary edges.
//!
//! All volume integration in the crate goes through the degree-4 rule: it is
//! exact for products of quadratic basis functions with affine geometry, and
//! nonlinear coefficients are sampled pointwise at its nodes.

/// Quadrature rule given in barycentric coordinates on the reference triangle.
///
/// Weights sum to the reference-triangle area 1/2, so an integral over a
/// physical element is `sum_q w_q * |det J| * f(x_q)`.
#[derive(Debug, Clone)]
pub struct QuadRule {
    /// Barycentric coordinates (l0, l1, l2) of each node.
    pub points: Vec<[f64; 3]>,
    /// Weights, summing to 1/2.
    pub weights: Vec<f64>,
    /// Largest polynomial degree integrated exactly.
    pub degree: usize,
}

impl QuadRule {
    /// Six-point degree-4 rule (Dunavant).
    pub fn degree4() -> Self {
        let a = 0.445_948_490_915_965;
        let b = 0.091_576_213_509_771;
        let wa = 0.223_381_589_678_011 / 2.0;
        let wb = 0.109_951_743_655_322 / 2.0;
        QuadRule {
            points: vec![
                [1.0 - 2.0 * a, a, a],
                [a, 1.0 - 2.0 * a, a],
                [a, a, 1.0 - 2.0 * a],
                [1.0 - 2.0 * b, b, b],
                [b, 1.0 - 2.0 * b, b],
                [b, b, 1.0 - 2.0 * b],
            ],
            weights: vec![wa, wa, wa, wb, wb, wb],
            degree: 4,
        }
    }
}

/// Gauss rule on the unit interval, used for boundary-edge integrals.
#[derive(Debug, Clone)]
pub struct EdgeRule {
    /// Points in [0, 1].
    pub points: Vec<f64>,
    /// Weights summing to 1.
    pub weights: Vec<f64>,
}

impl EdgeRule {
    /// Three-point Gauss-Legendre rule (degree 5).
    pub fn gauss3() -> Self {
        let s = 0.5 * (3.0f64 / 5.0).sqrt();
        EdgeRule {
            points: vec![0.5 - s, 0.5, 0.5 + s],
            weights: vec![5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0],
        }
    }
}
