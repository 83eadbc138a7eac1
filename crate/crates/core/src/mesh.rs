//! Conforming simplicial triangulations of the benchmark domains.
//!
//! Meshes are structured: rectangles split into two triangles per cell and the
//! L-shaped domain obtained by dropping the upper-right quadrant of a square
//! grid. The mesh size `h` reported elsewhere is the longest edge, i.e.
//! `sqrt(2)/n` for `n` cells per unit edge.

use std::fmt::Write as _;
use thiserror::Error;

/// Geometric label of a boundary edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    Top,
    Bottom,
    Left,
    Right,
    /// Horizontal edge of the re-entrant cut (y = 0.5, x in [0.5, 1]).
    ReentrantH,
    /// Vertical edge of the re-entrant cut (x = 0.5, y in [0.5, 1]).
    ReentrantV,
    None,
}

impl BoundaryTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryTag::Top => "TOP",
            BoundaryTag::Bottom => "BOTTOM",
            BoundaryTag::Left => "LEFT",
            BoundaryTag::Right => "RIGHT",
            BoundaryTag::ReentrantH => "REENTRANT_H",
            BoundaryTag::ReentrantV => "REENTRANT_V",
            BoundaryTag::None => "NONE",
        }
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn unit_square() -> Self {
        Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }
}

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("L-shape mesh needs an even cell count to align the cut at 0.5, got {0}")]
    OddLshapeCells(usize),
    #[error("cell counts must be at least 1")]
    EmptyMesh,
}

/// Triangulation with boundary tags.
///
/// Triangles are counterclockwise. Boundary edges are stored as node pairs in
/// the orientation induced by their owning triangle.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<(usize, usize, BoundaryTag)>,
}

impl TriMesh {
    /// Signed area of triangle `t` (positive for counterclockwise node order).
    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.signed_area(t)).sum()
    }

    /// Longest edge over all triangles.
    pub fn mesh_size(&self) -> f64 {
        let mut h: f64 = 0.0;
        for tri in &self.triangles {
            for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                let a = self.nodes[tri[i]];
                let b = self.nodes[tri[j]];
                h = h.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        h
    }

    /// Plain-text listing: nodes, triangles, tagged boundary edges.
    pub fn export_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# nodes {}", self.nodes.len());
        for n in &self.nodes {
            let _ = writeln!(s, "{:.17e} {:.17e}", n[0], n[1]);
        }
        let _ = writeln!(s, "# triangles {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(s, "# boundary {}", self.boundary_edges.len());
        for (i, j, tag) in &self.boundary_edges {
            let _ = writeln!(s, "{} {} {}", i, j, tag.as_str());
        }
        s
    }

    fn validate(&self, analytic_area: f64) {
        for t in 0..self.triangles.len() {
            debug_assert!(self.signed_area(t) > 0.0, "triangle {t} not counterclockwise");
        }
        let area = self.total_area();
        debug_assert!(
            (area - analytic_area).abs() <= 1e-12 * analytic_area,
            "mesh area {area} vs analytic {analytic_area}"
        );
    }
}

/// Structured triangulation of a rectangle: `nx * ny` cells, each split along
/// the lower-left to upper-right diagonal, `2 nx ny` triangles in total.
pub fn build_rect_mesh(nx: usize, ny: usize, rect: Rect) -> Result<TriMesh, MeshError> {
    if nx == 0 || ny == 0 {
        return Err(MeshError::EmptyMesh);
    }
    let (w, h) = (rect.x1 - rect.x0, rect.y1 - rect.y0);
    let node = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push([
                rect.x0 + w * (i as f64) / (nx as f64),
                rect.y0 + h * (j as f64) / (ny as f64),
            ]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (n00, n10, n11, n01) = (node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1));
            triangles.push([n00, n10, n11]);
            triangles.push([n00, n11, n01]);
        }
    }
    let mut boundary_edges = Vec::new();
    for i in 0..nx {
        boundary_edges.push((node(i, 0), node(i + 1, 0), BoundaryTag::Bottom));
        boundary_edges.push((node(i + 1, ny), node(i, ny), BoundaryTag::Top));
    }
    for j in 0..ny {
        boundary_edges.push((node(nx, j), node(nx, j + 1), BoundaryTag::Right));
        boundary_edges.push((node(0, j + 1), node(0, j), BoundaryTag::Left));
    }
    let mesh = TriMesh { nodes, triangles, boundary_edges };
    mesh.validate(w * h);
    Ok(mesh)
}

/// L-shaped domain `(0,1)^2 \ [0.5,1]^2` with `n` cells per unit edge.
///
/// `n` must be even so cell boundaries align with the cut at 0.5. The two cut
/// edges carry the re-entrant tags.
pub fn build_lshape_mesh(n: usize) -> Result<TriMesh, MeshError> {
    if n < 2 {
        return Err(MeshError::EmptyMesh);
    }
    if n % 2 != 0 {
        return Err(MeshError::OddLshapeCells(n));
    }
    let half = n / 2;
    let keep_cell = |i: usize, j: usize| !(i >= half && j >= half);
    // Node (i, j) of the full grid is kept if some kept cell touches it.
    let mut node_id = vec![usize::MAX; (n + 1) * (n + 1)];
    let full = |i: usize, j: usize| j * (n + 1) + i;
    let mut nodes = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            let kept = !(i > half && j > half);
            if kept {
                node_id[full(i, j)] = nodes.len();
                nodes.push([(i as f64) / (n as f64), (j as f64) / (n as f64)]);
            }
        }
    }
    let node = |i: usize, j: usize| node_id[full(i, j)];
    let mut triangles = Vec::new();
    for j in 0..n {
        for i in 0..n {
            if !keep_cell(i, j) {
                continue;
            }
            let (n00, n10, n11, n01) = (node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1));
            triangles.push([n00, n10, n11]);
            triangles.push([n00, n11, n01]);
        }
    }
    let mut boundary_edges = Vec::new();
    for i in 0..n {
        boundary_edges.push((node(i, 0), node(i + 1, 0), BoundaryTag::Bottom));
    }
    for j in 0..n {
        boundary_edges.push((node(0, j + 1), node(0, j), BoundaryTag::Left));
    }
    // Outer top edge exists only for x <= 0.5, outer right only for y <= 0.5.
    for i in 0..half {
        boundary_edges.push((node(i + 1, n), node(i, n), BoundaryTag::Top));
    }
    for j in 0..half {
        boundary_edges.push((node(n, j), node(n, j + 1), BoundaryTag::Right));
    }
    // Re-entrant cut.
    for i in half..n {
        boundary_edges.push((node(i + 1, half), node(i, half), BoundaryTag::ReentrantH));
    }
    for j in half..n {
        boundary_edges.push((node(half, j), node(half, j + 1), BoundaryTag::ReentrantV));
    }
    let mesh = TriMesh { nodes, triangles, boundary_edges };
    mesh.validate(0.75);
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn minimal_rect_split() {
        let m = build_rect_mesh(1, 1, Rect::unit_square()).unwrap();
        assert_eq!(m.triangles.len(), 2);
        assert_eq!(m.nodes.len(), 4);
        assert!((m.total_area() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rect_area_conserved() {
        let m = build_rect_mesh(2, 2, Rect::unit_square()).unwrap();
        assert!((m.total_area() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rect_mesh_size_matches_benchmark() {
        let m = build_rect_mesh(40, 40, Rect::unit_square()).unwrap();
        assert_eq!(m.triangles.len(), 2 * 40 * 40);
        assert!((m.mesh_size() - 2.0f64.sqrt() / 40.0).abs() < 1e-14);
    }

    #[test]
    fn lshape_minimal() {
        let m = build_lshape_mesh(2).unwrap();
        assert_eq!(m.triangles.len(), 6);
        assert!((m.total_area() - 0.75).abs() <= 1e-12);
    }

    #[test]
    fn lshape_rejects_odd() {
        assert!(build_lshape_mesh(3).is_err());
        assert!(build_lshape_mesh(80).is_ok());
    }

    #[test]
    fn lshape_mesh_size() {
        let m = build_lshape_mesh(80).unwrap();
        assert!((m.mesh_size() - 2.0f64.sqrt() / 80.0).abs() < 1e-14);
    }

    /// Every edge with exactly one owning triangle must carry a non-NONE tag,
    /// and every tagged edge must belong to exactly one triangle.
    #[test]
    fn lshape_boundary_closed() {
        let m = build_lshape_mesh(4).unwrap();
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &m.triangles {
            for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                let key = (t[i].min(t[j]), t[i].max(t[j]));
                *count.entry(key).or_insert(0) += 1;
            }
        }
        let tagged: Vec<_> = m
            .boundary_edges
            .iter()
            .map(|&(i, j, tag)| {
                assert_ne!(tag, BoundaryTag::None);
                (i.min(j), i.max(j))
            })
            .collect();
        for key in &tagged {
            assert_eq!(count[key], 1, "boundary edge shared by two triangles");
        }
        let n_single = count.values().filter(|&&c| c == 1).count();
        assert_eq!(n_single, tagged.len(), "untagged boundary edge left over");
    }

    #[test]
    fn export_roundtrippable_text() {
        let m = build_rect_mesh(1, 1, Rect::unit_square()).unwrap();
        let txt = m.export_text();
        assert!(txt.contains("# nodes 4"));
        assert!(txt.contains("# triangles 2"));
        assert!(txt.lines().any(|l| l.ends_with("BOTTOM")));
    }
}
