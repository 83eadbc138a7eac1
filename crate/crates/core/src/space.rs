//! Lagrange finite-element spaces on triangles: P1 scalars and P2 scalars or
//! vectors, with per-DOF Dirichlet masks.
//!
//! Vector spaces interleave components: the full DOF index of scalar basis
//! `s`, component `c` is `s * components + c`.

use crate::mesh::{BoundaryTag, TriMesh};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    P1,
    P2,
}

/// Prescribed Dirichlet datum for one DOF component.
#[derive(Clone)]
pub enum DirichletValue {
    Const(f64),
    /// Evaluated at the DOF coordinates and the current time.
    Fn(Arc<dyn Fn([f64; 2], f64) -> f64 + Send + Sync>),
}

impl DirichletValue {
    pub fn eval(&self, x: [f64; 2], t: f64) -> f64 {
        match self {
            DirichletValue::Const(v) => *v,
            DirichletValue::Fn(f) => f(x, t),
        }
    }
}

impl std::fmt::Debug for DirichletValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DirichletValue::Const(v) => write!(f, "Const({v})"),
            DirichletValue::Fn(_) => write!(f, "Fn(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeSpace {
    pub mesh: Arc<TriMesh>,
    pub order: Order,
    pub components: usize,
    /// Coordinates of each scalar DOF (nodes, then edge midpoints for P2).
    pub dof_coords: Vec<[f64; 2]>,
    /// Unique mesh edges as sorted node pairs (P2 only; empty for P1).
    pub edges: Vec<(usize, usize)>,
    edge_index: HashMap<(usize, usize), usize>,
    /// Scalar DOFs of each element: 3 for P1, 6 for P2 in the order
    /// vertices (0,1,2) then edges (01, 12, 20).
    pub elem_dofs: Vec<[usize; 6]>,
    /// Per full DOF: prescribed value if constrained.
    pub dirichlet: Vec<Option<DirichletValue>>,
}

impl FeSpace {
    pub fn new(mesh: Arc<TriMesh>, order: Order, components: usize) -> Self {
        assert!(components == 1 || components == 2);
        let mut edges = Vec::new();
        let mut edge_index = HashMap::new();
        if order == Order::P2 {
            for tri in &mesh.triangles {
                for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                    let key = (a.min(b), a.max(b));
                    edge_index.entry(key).or_insert_with(|| {
                        edges.push(key);
                        edges.len() - 1
                    });
                }
            }
        }
        let n_nodes = mesh.nodes.len();
        let mut dof_coords = mesh.nodes.clone();
        for &(a, b) in &edges {
            let (pa, pb) = (mesh.nodes[a], mesh.nodes[b]);
            dof_coords.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
        }
        let mut elem_dofs = Vec::with_capacity(mesh.triangles.len());
        for tri in &mesh.triangles {
            let mut dofs = [usize::MAX; 6];
            dofs[..3].copy_from_slice(tri);
            if order == Order::P2 {
                for (k, (a, b)) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])]
                    .into_iter()
                    .enumerate()
                {
                    dofs[3 + k] = n_nodes + edge_index[&(a.min(b), a.max(b))];
                }
            }
            elem_dofs.push(dofs);
        }
        let n_scalar = dof_coords.len();
        let dirichlet = vec![None; n_scalar * components];
        FeSpace { mesh, order, components, dof_coords, edges, edge_index, elem_dofs, dirichlet }
    }

    pub fn p1(mesh: Arc<TriMesh>) -> Self {
        Self::new(mesh, Order::P1, 1)
    }

    pub fn p2_vector(mesh: Arc<TriMesh>) -> Self {
        Self::new(mesh, Order::P2, 2)
    }

    pub fn n_scalar_dofs(&self) -> usize {
        self.dof_coords.len()
    }

    pub fn n_dofs(&self) -> usize {
        self.dof_coords.len() * self.components
    }

    pub fn local_size(&self) -> usize {
        let s = match self.order {
            Order::P1 => 3,
            Order::P2 => 6,
        };
        s * self.components
    }

    /// Scalar DOF index of the midpoint DOF on boundary edge (a, b); P2 only.
    fn edge_dof(&self, a: usize, b: usize) -> Option<usize> {
        self.edge_index
            .get(&(a.min(b), a.max(b)))
            .map(|&e| self.mesh.nodes.len() + e)
    }

    /// Constrain component `comp` on every DOF lying on a boundary edge whose
    /// tag is selected by `tags`.
    pub fn set_dirichlet(&mut self, comp: usize, tags: &[BoundaryTag], value: DirichletValue) {
        assert!(comp < self.components);
        let edges: Vec<(usize, usize)> = self
            .mesh
            .boundary_edges
            .iter()
            .filter(|(_, _, tag)| tags.contains(tag))
            .map(|&(a, b, _)| (a, b))
            .collect();
        for (a, b) in edges {
            for s in [Some(a), Some(b), if self.order == Order::P2 { self.edge_dof(a, b) } else { None }]
                .into_iter()
                .flatten()
            {
                self.dirichlet[s * self.components + comp] = Some(value.clone());
            }
        }
    }

    /// Constrain component `comp` on tagged DOFs that also satisfy a
    /// coordinate predicate (piecewise boundary data).
    pub fn set_dirichlet_where(
        &mut self,
        comp: usize,
        tags: &[BoundaryTag],
        pred: impl Fn([f64; 2]) -> bool,
        value: DirichletValue,
    ) {
        assert!(comp < self.components);
        let edges: Vec<(usize, usize)> = self
            .mesh
            .boundary_edges
            .iter()
            .filter(|(_, _, tag)| tags.contains(tag))
            .map(|&(a, b, _)| (a, b))
            .collect();
        for (a, b) in edges {
            for s in [Some(a), Some(b), if self.order == Order::P2 { self.edge_dof(a, b) } else { None }]
                .into_iter()
                .flatten()
            {
                if pred(self.dof_coords[s]) {
                    self.dirichlet[s * self.components + comp] = Some(value.clone());
                }
            }
        }
    }

    /// Constrained full DOFs with their prescribed values at time `t`.
    pub fn dirichlet_values(&self, t: f64) -> Vec<(usize, f64)> {
        self.dirichlet
            .iter()
            .enumerate()
            .filter_map(|(dof, d)| {
                d.as_ref()
                    .map(|v| (dof, v.eval(self.dof_coords[dof / self.components], t)))
            })
            .collect()
    }

    /// Overwrite constrained entries of a coefficient vector with the
    /// prescribed boundary values at time `t`.
    pub fn impose_dirichlet(&self, dofs: &mut [f64], t: f64) {
        for (dof, v) in self.dirichlet_values(t) {
            dofs[dof] = v;
        }
    }

    /// Nodal/DOF interpolation of a scalar function (components must be 1).
    pub fn interpolate(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        assert_eq!(self.components, 1);
        self.dof_coords.iter().map(|&x| f(x)).collect()
    }

    /// Scalar basis values at a barycentric point, local ordering as in
    /// `elem_dofs`.
    pub fn basis_values(&self, l: [f64; 3]) -> [f64; 6] {
        match self.order {
            Order::P1 => [l[0], l[1], l[2], 0.0, 0.0, 0.0],
            Order::P2 => [
                l[0] * (2.0 * l[0] - 1.0),
                l[1] * (2.0 * l[1] - 1.0),
                l[2] * (2.0 * l[2] - 1.0),
                4.0 * l[0] * l[1],
                4.0 * l[1] * l[2],
                4.0 * l[2] * l[0],
            ],
        }
    }

    /// Reference gradients (w.r.t. the two local coordinates) at a barycentric
    /// point. The local coordinates are (xi, eta) with l = (1-xi-eta, xi, eta).
    pub fn basis_ref_grads(&self, l: [f64; 3]) -> [[f64; 2]; 6] {
        // dl0 = (-1,-1), dl1 = (1,0), dl2 = (0,1)
        const DL: [[f64; 2]; 3] = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
        match self.order {
            Order::P1 => [DL[0], DL[1], DL[2], [0.0; 2], [0.0; 2], [0.0; 2]],
            Order::P2 => {
                let mut g = [[0.0; 2]; 6];
                for v in 0..3 {
                    for d in 0..2 {
                        g[v][d] = (4.0 * l[v] - 1.0) * DL[v][d];
                    }
                }
                for (k, (i, j)) in [(0usize, 1usize), (1, 2), (2, 0)].into_iter().enumerate() {
                    for d in 0..2 {
                        g[3 + k][d] = 4.0 * (l[i] * DL[j][d] + l[j] * DL[i][d]);
                    }
                }
                g
            }
        }
    }
}

/// Affine geometry of one element: Jacobian determinant and the transposed
/// inverse used to push reference gradients to physical space.
#[derive(Debug, Clone, Copy)]
pub struct ElemGeom {
    pub det_j: f64,
    pub jinv_t: [[f64; 2]; 2],
    pub vertices: [[f64; 2]; 3],
}

impl ElemGeom {
    pub fn new(mesh: &TriMesh, elem: usize) -> Self {
        let [a, b, c] = mesh.triangles[elem];
        let (pa, pb, pc) = (mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]);
        let j = [[pb[0] - pa[0], pc[0] - pa[0]], [pb[1] - pa[1], pc[1] - pa[1]]];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let jinv_t = [
            [j[1][1] / det, -j[1][0] / det],
            [-j[0][1] / det, j[0][0] / det],
        ];
        ElemGeom { det_j: det, jinv_t, vertices: [pa, pb, pc] }
    }

    pub fn physical_point(&self, l: [f64; 3]) -> [f64; 2] {
        [
            l[0] * self.vertices[0][0] + l[1] * self.vertices[1][0] + l[2] * self.vertices[2][0],
            l[0] * self.vertices[0][1] + l[1] * self.vertices[1][1] + l[2] * self.vertices[2][1],
        ]
    }

    pub fn push_grad(&self, g_ref: [f64; 2]) -> [f64; 2] {
        [
            self.jinv_t[0][0] * g_ref[0] + self.jinv_t[0][1] * g_ref[1],
            self.jinv_t[1][0] * g_ref[0] + self.jinv_t[1][1] * g_ref[1],
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_rect_mesh, Rect};
    use crate::quad::QuadRule;

    fn unit_mesh(n: usize) -> Arc<TriMesh> {
        Arc::new(build_rect_mesh(n, n, Rect::unit_square()).unwrap())
    }

    #[test]
    fn dof_counts() {
        let mesh = unit_mesh(2);
        let p1 = FeSpace::p1(mesh.clone());
        assert_eq!(p1.n_dofs(), mesh.nodes.len());
        let p2v = FeSpace::p2_vector(mesh.clone());
        assert_eq!(p2v.n_dofs(), 2 * (mesh.nodes.len() + p2v.edges.len()));
    }

    #[test]
    fn p1_partition_of_unity() {
        let mesh = unit_mesh(2);
        let p1 = FeSpace::p1(mesh);
        let q = QuadRule::degree4();
        for p in &q.points {
            let sum: f64 = p1.basis_values(*p)[..3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn p2_reproduces_affine() {
        let mesh = unit_mesh(3);
        let space = FeSpace::new(mesh.clone(), Order::P2, 1);
        let f = |x: [f64; 2]| 2.0 * x[0] - 3.0 * x[1] + 0.5;
        let dofs = space.interpolate(f);
        let q = QuadRule::degree4();
        for elem in 0..mesh.triangles.len() {
            let geom = ElemGeom::new(&mesh, elem);
            for p in &q.points {
                let vals = space.basis_values(*p);
                let x = geom.physical_point(*p);
                let mut u = 0.0;
                for (loc, &dof) in space.elem_dofs[elem].iter().enumerate() {
                    u += dofs[dof] * vals[loc];
                }
                assert!((u - f(x)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn p2_gradient_of_affine_is_exact() {
        let mesh = unit_mesh(3);
        let space = FeSpace::new(mesh.clone(), Order::P2, 1);
        let dofs = space.interpolate(|x| 2.0 * x[0] - 3.0 * x[1] + 0.5);
        let q = QuadRule::degree4();
        for elem in 0..mesh.triangles.len() {
            let geom = ElemGeom::new(&mesh, elem);
            for p in &q.points {
                let grads = space.basis_ref_grads(*p);
                let mut g = [0.0; 2];
                for (loc, &dof) in space.elem_dofs[elem].iter().enumerate() {
                    let gp = geom.push_grad(grads[loc]);
                    g[0] += dofs[dof] * gp[0];
                    g[1] += dofs[dof] * gp[1];
                }
                assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] + 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dirichlet_marks_tagged_dofs() {
        let mesh = unit_mesh(2);
        let mut p1 = FeSpace::p1(mesh);
        p1.set_dirichlet(0, &[BoundaryTag::Bottom], DirichletValue::Const(1.0));
        let vals = p1.dirichlet_values(0.0);
        assert_eq!(vals.len(), 3); // three bottom nodes on a 2x2 grid
        for (dof, v) in vals {
            assert_eq!(p1.dof_coords[dof][1], 0.0);
            assert_eq!(v, 1.0);
        }
    }
}
