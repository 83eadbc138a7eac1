//! Generic assembly of coefficient-weighted bilinear and linear forms.
//!
//! Forms are lists of terms. Each term owns a coefficient callback evaluated
//! at every quadrature point; the callback sees the physical point, the
//! element index, and the values and gradients of any registered state fields
//! there. Nonlinear constitutive laws live entirely inside these callbacks,
//! so assembly, residuals, norms and estimators all sample them identically.
//!
//! Assembly order is element index ascending, then local index, which makes
//! repeated assemblies bit-identical.

use crate::mesh::BoundaryTag;
use crate::quad::{EdgeRule, QuadRule};
use crate::space::{ElemGeom, FeSpace, Order};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error("non-finite coefficient on element {elem} at quadrature point {qp}")]
    NonFiniteCoefficient { elem: usize, qp: usize },
    #[error("negative weight {value} on element {elem} at quadrature point {qp}")]
    NegativeWeight { elem: usize, qp: usize, value: f64 },
    #[error("trial and test spaces live on different meshes")]
    MeshMismatch,
}

/// Value and gradient of one registered field at a quadrature point.
#[derive(Debug, Clone, Copy)]
pub enum FieldEval {
    Scalar { v: f64, g: [f64; 2] },
    Vector { v: [f64; 2], g: [[f64; 2]; 2] },
}

/// Everything a coefficient callback may inspect at a quadrature point.
#[derive(Debug)]
pub struct Qp<'a> {
    pub x: [f64; 2],
    pub elem: usize,
    fields: &'a [FieldEval],
}

impl<'a> Qp<'a> {
    pub fn val(&self, field: usize) -> f64 {
        match self.fields[field] {
            FieldEval::Scalar { v, .. } => v,
            FieldEval::Vector { .. } => panic!("field {field} is a vector"),
        }
    }

    pub fn grad(&self, field: usize) -> [f64; 2] {
        match self.fields[field] {
            FieldEval::Scalar { g, .. } => g,
            FieldEval::Vector { .. } => panic!("field {field} is a vector"),
        }
    }

    pub fn vec(&self, field: usize) -> [f64; 2] {
        match self.fields[field] {
            FieldEval::Vector { v, .. } => v,
            FieldEval::Scalar { .. } => panic!("field {field} is a scalar"),
        }
    }

    /// Gradient of a vector field, `g[a][b] = d u_b / d x_a`.
    pub fn vec_grad(&self, field: usize) -> [[f64; 2]; 2] {
        match self.fields[field] {
            FieldEval::Vector { g, .. } => g,
            FieldEval::Scalar { .. } => panic!("field {field} is a scalar"),
        }
    }

    pub fn div(&self, field: usize) -> f64 {
        let g = self.vec_grad(field);
        g[0][0] + g[1][1]
    }

    /// Vector value if the field is vector-valued.
    pub fn try_vec(&self, field: usize) -> Option<[f64; 2]> {
        match self.fields[field] {
            FieldEval::Vector { v, .. } => Some(v),
            FieldEval::Scalar { .. } => None,
        }
    }
}

/// A state field registered with a form: a coefficient vector over a space.
#[derive(Clone, Copy)]
pub struct FieldDef<'a> {
    pub space: &'a FeSpace,
    pub dofs: &'a [f64],
}

impl<'a> FieldDef<'a> {
    pub fn new(space: &'a FeSpace, dofs: &'a [f64]) -> Self {
        assert_eq!(dofs.len(), space.n_dofs(), "field vector length mismatch");
        FieldDef { space, dofs }
    }
}

pub type ScalarCoeff<'a> = &'a dyn Fn(&Qp) -> f64;
pub type VectorCoeff<'a> = &'a dyn Fn(&Qp) -> [f64; 2];
pub type TensorCoeff<'a> = &'a dyn Fn(&Qp) -> [[f64; 2]; 2];

/// Bilinear-form building blocks, written trial-first: the assembled entry is
/// (test i, trial j).
pub enum Term<'a> {
    /// `w * (phi_j, phi_i)`; scalar-scalar or componentwise vector-vector.
    Mass(ScalarCoeff<'a>),
    /// `w * (grad phi_j, grad phi_i)`; componentwise for vector spaces.
    Stiffness(ScalarCoeff<'a>),
    /// `(b * phi_j, grad phi_i)` for scalar spaces.
    ConvectionGradTest(VectorCoeff<'a>),
    /// `w * (eps(phi_j), eps(phi_i))` for vector spaces.
    Strain(ScalarCoeff<'a>),
    /// `w * (div phi_j, div phi_i)` for vector spaces.
    DivDiv(ScalarCoeff<'a>),
    /// `w * (grad phi_j, v_i)`: scalar trial against vector test.
    GradTrialDotTest(ScalarCoeff<'a>),
    /// `w * (div phi_j, q_i)`: vector trial against scalar test.
    DivTrialTimesTest(ScalarCoeff<'a>),
}

/// Linear-functional building blocks over the test space.
pub enum FnlTerm<'a> {
    /// `(g, q_i)` for scalar tests.
    ScalarTest(ScalarCoeff<'a>),
    /// `(b, grad q_i)` for scalar tests.
    VecGradTest(VectorCoeff<'a>),
    /// `(b, v_i)` for vector tests.
    VecTest(VectorCoeff<'a>),
    /// `(M, grad v_i)` for vector tests; with symmetric M this is `(M, eps(v_i))`.
    TensorGradTest(TensorCoeff<'a>),
}

/// Shared per-element evaluation: basis data of a space at the rule's points.
struct SpaceTables {
    vals: Vec<[f64; 6]>,
    ref_grads: Vec<[[f64; 2]; 6]>,
    n_local_scalar: usize,
}

impl SpaceTables {
    fn build(space: &FeSpace, quad: &QuadRule) -> Self {
        let vals = quad.points.iter().map(|&l| space.basis_values(l)).collect();
        let ref_grads = quad.points.iter().map(|&l| space.basis_ref_grads(l)).collect();
        let n_local_scalar = match space.order {
            Order::P1 => 3,
            Order::P2 => 6,
        };
        SpaceTables { vals, ref_grads, n_local_scalar }
    }
}

fn eval_fields(
    fields: &[FieldDef],
    tables: &[SpaceTables],
    elem: usize,
    q: usize,
    geom: &ElemGeom,
    out: &mut Vec<FieldEval>,
) {
    out.clear();
    for (f, t) in fields.iter().zip(tables) {
        let dofs = &f.space.elem_dofs[elem];
        let comps = f.space.components;
        if comps == 1 {
            let mut v = 0.0;
            let mut g = [0.0; 2];
            for loc in 0..t.n_local_scalar {
                let d = f.dofs[dofs[loc]];
                v += d * t.vals[q][loc];
                let gp = geom.push_grad(t.ref_grads[q][loc]);
                g[0] += d * gp[0];
                g[1] += d * gp[1];
            }
            out.push(FieldEval::Scalar { v, g });
        } else {
            let mut v = [0.0; 2];
            let mut g = [[0.0; 2]; 2];
            for loc in 0..t.n_local_scalar {
                let gp = geom.push_grad(t.ref_grads[q][loc]);
                for c in 0..2 {
                    let d = f.dofs[dofs[loc] * 2 + c];
                    v[c] += d * t.vals[q][loc];
                    g[0][c] += d * gp[0];
                    g[1][c] += d * gp[1];
                }
            }
            out.push(FieldEval::Vector { v, g });
        }
    }
}

fn check_finite(x: f64, elem: usize, qp: usize) -> Result<f64, AssembleError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(AssembleError::NonFiniteCoefficient { elem, qp })
    }
}

/// Assemble a bilinear form into (row = test dof, col = trial dof, value)
/// triplets.
pub fn assemble(
    terms: &[Term],
    trial: &FeSpace,
    test: &FeSpace,
    fields: &[FieldDef],
    quad: &QuadRule,
) -> Result<Vec<(usize, usize, f64)>, AssembleError> {
    if !std::sync::Arc::ptr_eq(&trial.mesh, &test.mesh) {
        return Err(AssembleError::MeshMismatch);
    }
    let mesh = &*trial.mesh;
    let trial_t = SpaceTables::build(trial, quad);
    let test_t = SpaceTables::build(test, quad);
    let field_t: Vec<SpaceTables> = fields.iter().map(|f| SpaceTables::build(f.space, quad)).collect();
    let (ntl, ncl) = (trial_t.n_local_scalar * trial.components, test_t.n_local_scalar * test.components);
    let mut local = vec![0.0f64; ntl * ncl];
    let mut evals: Vec<FieldEval> = Vec::with_capacity(fields.len());
    let mut triplets = Vec::new();
    let mut trial_grads = vec![[0.0f64; 2]; trial_t.n_local_scalar];
    let mut test_grads = vec![[0.0f64; 2]; test_t.n_local_scalar];

    for elem in 0..mesh.triangles.len() {
        let geom = ElemGeom::new(mesh, elem);
        local.iter_mut().for_each(|v| *v = 0.0);
        for q in 0..quad.points.len() {
            let w = quad.weights[q] * geom.det_j;
            eval_fields(fields, &field_t, elem, q, &geom, &mut evals);
            let qp = Qp { x: geom.physical_point(quad.points[q]), elem, fields: &evals };
            for loc in 0..trial_t.n_local_scalar {
                trial_grads[loc] = geom.push_grad(trial_t.ref_grads[q][loc]);
            }
            for loc in 0..test_t.n_local_scalar {
                test_grads[loc] = geom.push_grad(test_t.ref_grads[q][loc]);
            }
            for term in terms {
                match term {
                    Term::Mass(c) => {
                        let wv = w * check_finite(c(&qp), elem, q)?;
                        debug_assert_eq!(trial.components, test.components);
                        for i in 0..test_t.n_local_scalar {
                            for j in 0..trial_t.n_local_scalar {
                                let m = wv * test_t.vals[q][i] * trial_t.vals[q][j];
                                for c in 0..trial.components {
                                    local[(i * test.components + c) * ntl + j * trial.components + c] += m;
                                }
                            }
                        }
                    }
                    Term::Stiffness(c) => {
                        let wv = w * check_finite(c(&qp), elem, q)?;
                        for i in 0..test_t.n_local_scalar {
                            for j in 0..trial_t.n_local_scalar {
                                let m = wv
                                    * (test_grads[i][0] * trial_grads[j][0]
                                        + test_grads[i][1] * trial_grads[j][1]);
                                for c in 0..trial.components {
                                    local[(i * test.components + c) * ntl + j * trial.components + c] += m;
                                }
                            }
                        }
                    }
                    Term::ConvectionGradTest(c) => {
                        let b = c(&qp);
                        check_finite(b[0], elem, q)?;
                        check_finite(b[1], elem, q)?;
                        for i in 0..test_t.n_local_scalar {
                            let bg = b[0] * test_grads[i][0] + b[1] * test_grads[i][1];
                            for j in 0..trial_t.n_local_scalar {
                                local[i * ntl + j] += w * bg * trial_t.vals[q][j];
                            }
                        }
                    }
                    Term::Strain(c) => {
                        let wv = w * check_finite(c(&qp), elem, q)?;
                        // eps(phi e_c) : eps(psi e_d) = (delta_cd grad.grad + d_d phi d_c psi)/2
                        for i in 0..test_t.n_local_scalar {
                            for ci in 0..2 {
                                for j in 0..trial_t.n_local_scalar {
                                    for cj in 0..2 {
                                        let gdot = trial_grads[j][0] * test_grads[i][0]
                                            + trial_grads[j][1] * test_grads[i][1];
                                        let cross = trial_grads[j][ci] * test_grads[i][cj];
                                        let val = 0.5 * (if ci == cj { gdot } else { 0.0 } + cross);
                                        local[(i * 2 + ci) * ntl + j * 2 + cj] += wv * val;
                                    }
                                }
                            }
                        }
                    }
                    Term::DivDiv(c) => {
                        let wv = w * check_finite(c(&qp), elem, q)?;
                        for i in 0..test_t.n_local_scalar {
                            for ci in 0..2 {
                                for j in 0..trial_t.n_local_scalar {
                                    for cj in 0..2 {
                                        local[(i * 2 + ci) * ntl + j * 2 + cj] +=
                                            wv * trial_grads[j][cj] * test_grads[i][ci];
                                    }
                                }
                            }
                        }
                    }
                    Term::GradTrialDotTest(c) => {
                        let wv = w * check_finite(c(&qp), elem, q)?;
                        debug_assert_eq!(test.components, 2);
                        for i in 0..test_t.n_local_scalar {
                            for ci in 0..2 {
                                for j in 0..trial_t.n_local_scalar {
                                    local[(i * 2 + ci) * ntl + j] +=
                                        wv * trial_grads[j][ci] * test_t.vals[q][i];
                                }
                            }
                        }
                    }
                    Term::DivTrialTimesTest(c) => {
                        let wv = w * check_finite(c(&qp), elem, q)?;
                        debug_assert_eq!(trial.components, 2);
                        for i in 0..test_t.n_local_scalar {
                            for j in 0..trial_t.n_local_scalar {
                                for cj in 0..2 {
                                    local[i * ntl + j * 2 + cj] +=
                                        wv * trial_grads[j][cj] * test_t.vals[q][i];
                                }
                            }
                        }
                    }
                }
            }
        }
        let tdofs = &trial.elem_dofs[elem];
        let qdofs = &test.elem_dofs[elem];
        for i in 0..ncl {
            let gi = qdofs[i / test.components] * test.components + i % test.components;
            for j in 0..ntl {
                let gj = tdofs[j / trial.components] * trial.components + j % trial.components;
                let v = local[i * ntl + j];
                if v != 0.0 {
                    triplets.push((gi, gj, v));
                }
            }
        }
    }
    Ok(triplets)
}

/// Assemble a linear functional over the test space.
pub fn assemble_functional(
    terms: &[FnlTerm],
    test: &FeSpace,
    fields: &[FieldDef],
    quad: &QuadRule,
) -> Result<Vec<f64>, AssembleError> {
    let mesh = &*test.mesh;
    let test_t = SpaceTables::build(test, quad);
    let field_t: Vec<SpaceTables> = fields.iter().map(|f| SpaceTables::build(f.space, quad)).collect();
    let mut out = vec![0.0f64; test.n_dofs()];
    let mut evals: Vec<FieldEval> = Vec::with_capacity(fields.len());
    let mut test_grads = vec![[0.0f64; 2]; test_t.n_local_scalar];
    for elem in 0..mesh.triangles.len() {
        let geom = ElemGeom::new(mesh, elem);
        let qdofs = &test.elem_dofs[elem];
        for q in 0..quad.points.len() {
            let w = quad.weights[q] * geom.det_j;
            eval_fields(fields, &field_t, elem, q, &geom, &mut evals);
            let qp = Qp { x: geom.physical_point(quad.points[q]), elem, fields: &evals };
            for loc in 0..test_t.n_local_scalar {
                test_grads[loc] = geom.push_grad(test_t.ref_grads[q][loc]);
            }
            for term in terms {
                match term {
                    FnlTerm::ScalarTest(c) => {
                        let g = w * check_finite(c(&qp), elem, q)?;
                        for i in 0..test_t.n_local_scalar {
                            out[qdofs[i]] += g * test_t.vals[q][i];
                        }
                    }
                    FnlTerm::VecGradTest(c) => {
                        let b = c(&qp);
                        check_finite(b[0], elem, q)?;
                        check_finite(b[1], elem, q)?;
                        for i in 0..test_t.n_local_scalar {
                            out[qdofs[i]] +=
                                w * (b[0] * test_grads[i][0] + b[1] * test_grads[i][1]);
                        }
                    }
                    FnlTerm::VecTest(c) => {
                        let b = c(&qp);
                        check_finite(b[0], elem, q)?;
                        check_finite(b[1], elem, q)?;
                        for i in 0..test_t.n_local_scalar {
                            for ci in 0..2 {
                                out[qdofs[i] * 2 + ci] += w * b[ci] * test_t.vals[q][i];
                            }
                        }
                    }
                    FnlTerm::TensorGradTest(c) => {
                        let m = c(&qp);
                        for row in &m {
                            check_finite(row[0], elem, q)?;
                            check_finite(row[1], elem, q)?;
                        }
                        // (M, grad v): for v = psi e_c this is sum_a M[a][c] d_a psi
                        for i in 0..test_t.n_local_scalar {
                            for ci in 0..2 {
                                out[qdofs[i] * 2 + ci] +=
                                    w * (m[0][ci] * test_grads[i][0] + m[1][ci] * test_grads[i][1]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Boundary load `(f, v)` over edges with the given tags; vector test space.
pub fn assemble_boundary_load(
    test: &FeSpace,
    tags: &[BoundaryTag],
    rule: &EdgeRule,
    f: impl Fn([f64; 2]) -> [f64; 2],
) -> Vec<f64> {
    assert_eq!(test.components, 2);
    let mesh = &*test.mesh;
    let mut out = vec![0.0f64; test.n_dofs()];
    for &(a, b, tag) in &mesh.boundary_edges {
        if !tags.contains(&tag) {
            continue;
        }
        let (pa, pb) = (mesh.nodes[a], mesh.nodes[b]);
        let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
        let mid = edge_midpoint_dof(test, a, b);
        for (s, w) in rule.points.iter().zip(&rule.weights) {
            let x = [pa[0] + s * (pb[0] - pa[0]), pa[1] + s * (pb[1] - pa[1])];
            let fv = f(x);
            // 1D traces: P1 endpoints or P2 endpoints plus midpoint bubble
            let (na, nb, nm) = match test.order {
                Order::P1 => (1.0 - s, *s, 0.0),
                Order::P2 => ((1.0 - s) * (1.0 - 2.0 * s), s * (2.0 * s - 1.0), 4.0 * s * (1.0 - s)),
            };
            for c in 0..2 {
                out[a * 2 + c] += w * len * fv[c] * na;
                out[b * 2 + c] += w * len * fv[c] * nb;
                if let Some(mdof) = mid {
                    out[mdof * 2 + c] += w * len * fv[c] * nm;
                }
            }
        }
    }
    out
}

fn edge_midpoint_dof(space: &FeSpace, a: usize, b: usize) -> Option<usize> {
    if space.order != Order::P2 {
        return None;
    }
    let key = (a.min(b), a.max(b));
    space
        .edges
        .iter()
        .position(|&e| e == key)
        .map(|e| space.mesh.nodes.len() + e)
}

/// Quadrature sum of a pointwise integrand over the mesh. The callback may
/// fail (e.g. a negative norm weight) and every sample is checked finite.
pub fn integrate(
    mesh: &crate::mesh::TriMesh,
    fields: &[FieldDef],
    quad: &QuadRule,
    mut f: impl FnMut(usize, usize, &Qp) -> Result<f64, AssembleError>,
) -> Result<f64, AssembleError> {
    let field_t: Vec<SpaceTables> = fields.iter().map(|d| SpaceTables::build(d.space, quad)).collect();
    let mut evals: Vec<FieldEval> = Vec::with_capacity(fields.len());
    let mut total = 0.0;
    for elem in 0..mesh.triangles.len() {
        let geom = ElemGeom::new(mesh, elem);
        for q in 0..quad.points.len() {
            let w = quad.weights[q] * geom.det_j;
            eval_fields(fields, &field_t, elem, q, &geom, &mut evals);
            let qp = Qp { x: geom.physical_point(quad.points[q]), elem, fields: &evals };
            let v = check_finite(f(elem, q, &qp)?, elem, q)?;
            total += w * v;
        }
    }
    Ok(total)
}

/// Dirichlet data for an assembled (possibly multi-field) system.
pub struct Constraints {
    pub fixed: Vec<Option<f64>>,
}

impl Constraints {
    /// Constrained DOFs take prescribed boundary values at time `t`; used when
    /// solving for states.
    pub fn at_time(blocks: &[(usize, &FeSpace)], n: usize, t: f64) -> Self {
        let mut fixed = vec![None; n];
        for &(offset, space) in blocks {
            for (dof, v) in space.dirichlet_values(t) {
                fixed[offset + dof] = Some(v);
            }
        }
        Constraints { fixed }
    }

    /// Constrained DOFs are pinned to zero; used when solving for increments
    /// of states that already satisfy the boundary data.
    pub fn homogeneous(blocks: &[(usize, &FeSpace)], n: usize) -> Self {
        let mut fixed = vec![None; n];
        for &(offset, space) in blocks {
            for (dof, d) in space.dirichlet.iter().enumerate() {
                if d.is_some() {
                    fixed[offset + dof] = Some(0.0);
                }
            }
        }
        Constraints { fixed }
    }
}

/// Row/column elimination: constrained rows become identity rows carrying the
/// prescribed value, and their columns are folded into the right-hand side so
/// symmetric blocks stay symmetric.
pub fn apply_dirichlet(
    triplets: &mut Vec<(usize, usize, f64)>,
    rhs: &mut [f64],
    cons: &Constraints,
) {
    triplets.retain(|&(r, c, v)| {
        if cons.fixed[r].is_some() {
            return false;
        }
        if let Some(g) = cons.fixed[c] {
            rhs[r] -= v * g;
            return false;
        }
        true
    });
    for (i, g) in cons.fixed.iter().enumerate() {
        if let Some(g) = g {
            triplets.push((i, i, 1.0));
            rhs[i] = *g;
        }
    }
}
