//! Weighted norms over finite-element states: the iteration-dependent norms
//! of the schemes, plus plain L2 helpers.
//!
//! Every norm is `sqrt` of a quadrature sum of nonnegative weighted terms.
//! Weights are coefficient callbacks frozen at whatever iterate the caller
//! registered, so the norm seen by the engine is exactly the symmetric part
//! of the scheme's bilinear form.

use crate::assemble::{integrate, AssembleError, FieldDef, Qp, ScalarCoeff};
use crate::mesh::TriMesh;
use crate::quad::QuadRule;

/// What a norm term measures, referring to a registered field by index.
pub enum NormTerm<'a> {
    /// `w * |field|^2` (scalar value or vector magnitude).
    Value(usize, ScalarCoeff<'a>),
    /// `w * |grad field|^2` of a scalar field.
    Grad(usize, ScalarCoeff<'a>),
    /// `w * (div field)^2` of a vector field.
    Div(usize, ScalarCoeff<'a>),
    /// `w * eps(field) : eps(field)` of a vector field.
    Strain(usize, ScalarCoeff<'a>),
}

/// Square root of the weighted quadrature sum. Zero weights are allowed
/// (degenerate coefficients); a negative weight at any quadrature point is a
/// hard error carrying the location.
pub fn weighted_norm(
    mesh: &TriMesh,
    fields: &[FieldDef],
    quad: &QuadRule,
    terms: &[NormTerm],
) -> Result<f64, AssembleError> {
    let sq = integrate(mesh, fields, quad, |elem, q, qp| {
        let mut acc = 0.0;
        for term in terms {
            let (w, sel) = match term {
                NormTerm::Value(f, c) => (c(qp), value_sq(qp, *f)),
                NormTerm::Grad(f, c) => {
                    let g = qp.grad(*f);
                    (c(qp), g[0] * g[0] + g[1] * g[1])
                }
                NormTerm::Div(f, c) => {
                    let d = qp.div(*f);
                    (c(qp), d * d)
                }
                NormTerm::Strain(f, c) => (c(qp), strain_sq(qp, *f)),
            };
            if w < 0.0 {
                return Err(AssembleError::NegativeWeight { elem, qp: q, value: w });
            }
            acc += w * sel;
        }
        Ok(acc)
    })?;
    // quadrature roundoff can leave a tiny negative value on zero states
    Ok(sq.max(0.0).sqrt())
}

fn value_sq(qp: &Qp, field: usize) -> f64 {
    match qp.try_vec(field) {
        Some(v) => v[0] * v[0] + v[1] * v[1],
        None => {
            let v = qp.val(field);
            v * v
        }
    }
}

fn strain_sq(qp: &Qp, field: usize) -> f64 {
    let g = qp.vec_grad(field);
    let e00 = g[0][0];
    let e11 = g[1][1];
    let e01 = 0.5 * (g[0][1] + g[1][0]);
    e00 * e00 + e11 * e11 + 2.0 * e01 * e01
}

/// Plain L2 norm of a field.
pub fn l2_norm(mesh: &TriMesh, field: FieldDef, quad: &QuadRule) -> f64 {
    weighted_norm(mesh, &[field], quad, &[NormTerm::Value(0, &|_| 1.0)])
        .expect("unit weight cannot fail")
}

/// L2 norm of the difference of two coefficient vectors on the same space.
pub fn l2_diff(
    mesh: &TriMesh,
    space: &crate::space::FeSpace,
    a: &[f64],
    b: &[f64],
    quad: &QuadRule,
) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    l2_norm(mesh, FieldDef::new(space, &d), quad)
}
