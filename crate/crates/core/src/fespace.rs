//! Finite element spaces on a triangulation: P1 scalars (also used
//! componentwise for the symmetric tensor field), the P2 velocity space of
//! the Taylor-Hood pair, mass lumping, quadrature rules and the discrete
//! Neumann-Laplacian.
//!
//! Lumped terms use the nodal (vertex) rule by definition. All other volume
//! terms are integrated with a 6-point degree-4 symmetric triangle rule,
//! exact for every P2 x P2 and P2 x grad-P1 product the scheme contains.
//! Non-lumped boundary line integrals use 2-point Gauss.

use std::collections::HashMap;

use crate::error::Error;
use crate::mesh::Mesh;
use crate::sparse::{Coo, Csr};
use crate::Result;

const NONE: u32 = u32::MAX;

/// Diagonal lumped mass: interior weights per vertex (area units) and
/// boundary weights per boundary vertex (length units, zero elsewhere).
#[derive(Debug, Clone)]
pub struct LumpedMass {
    pub w: Vec<f64>,
    pub wb: Vec<f64>,
}

impl LumpedMass {
    /// Lumped semi-inner product `<q, z>_h`.
    pub fn inner(&self, q: &[f64], z: &[f64]) -> f64 {
        self.w
            .iter()
            .zip(q.iter().zip(z))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    /// Lumped norm `||q||_h`.
    pub fn norm(&self, q: &[f64]) -> f64 {
        self.inner(q, q).sqrt()
    }

    /// Lumped boundary semi-inner product `<q, z>_{h, boundary}`.
    pub fn boundary_inner(&self, q: &[f64], z: &[f64]) -> f64 {
        self.wb
            .iter()
            .zip(q.iter().zip(z))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }
}

/// Vertex weight = one third of the incident triangle areas; boundary weight
/// = half of the incident boundary edge lengths.
pub fn lumped_mass(mesh: &Mesh) -> LumpedMass {
    let nv = mesh.num_vertices();
    let mut w = vec![0.0; nv];
    for t in 0..mesh.num_triangles() {
        let share = mesh.area(t) / 3.0;
        for v in mesh.triangle(t) {
            w[v] += share;
        }
    }
    let mut wb = vec![0.0; nv];
    for e in mesh.boundary_edges() {
        let p = mesh.vertex(e[0] as usize);
        let q = mesh.vertex(e[1] as usize);
        let half = 0.5 * (p[0] - q[0]).hypot(p[1] - q[1]);
        wb[e[0] as usize] += half;
        wb[e[1] as usize] += half;
    }
    LumpedMass { w, wb }
}

/// Nodal interpolation: evaluates `f` at every vertex.
pub fn nodal_interpolate<F: Fn([f64; 2]) -> f64>(mesh: &Mesh, f: F) -> Vec<f64> {
    (0..mesh.num_vertices()).map(|i| f(mesh.vertex(i))).collect()
}

/// Element geometry: corners, area and the constant P1 basis gradients.
#[derive(Debug, Clone, Copy)]
pub struct ElemGeom {
    pub corners: [[f64; 2]; 3],
    pub area: f64,
    pub grad_l: [[f64; 2]; 3],
}

impl ElemGeom {
    pub fn new(corners: [[f64; 2]; 3]) -> Self {
        let [p0, p1, p2] = corners;
        let area = 0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]));
        let rot = |d: [f64; 2]| [-d[1], d[0]];
        let g = |a: [f64; 2], b: [f64; 2]| {
            let r = rot([a[0] - b[0], a[1] - b[1]]);
            [r[0] / (2.0 * area), r[1] / (2.0 * area)]
        };
        ElemGeom {
            corners,
            area,
            grad_l: [g(p2, p1), g(p0, p2), g(p1, p0)],
        }
    }

    pub fn of(mesh: &Mesh, t: usize) -> Self {
        ElemGeom::new(mesh.triangle_corners(t))
    }

    pub fn point(&self, b: [f64; 3]) -> [f64; 2] {
        [
            b[0] * self.corners[0][0] + b[1] * self.corners[1][0] + b[2] * self.corners[2][0],
            b[0] * self.corners[0][1] + b[1] * self.corners[1][1] + b[2] * self.corners[2][1],
        ]
    }
}

/// Degree-4 symmetric 6-point triangle rule (barycentric points, weights
/// summing to one).
pub const TRI_DEG4: [([f64; 3], f64); 6] = {
    const A1: f64 = 0.108_103_018_168_070;
    const B1: f64 = 0.445_948_490_915_965;
    const W1: f64 = 0.223_381_589_678_011;
    const A2: f64 = 0.816_847_572_980_459;
    const B2: f64 = 0.091_576_213_509_771;
    const W2: f64 = 0.109_951_743_655_322;
    [
        ([A1, B1, B1], W1),
        ([B1, A1, B1], W1),
        ([B1, B1, A1], W1),
        ([A2, B2, B2], W2),
        ([B2, A2, B2], W2),
        ([B2, B2, A2], W2),
    ]
};

/// Composite refinement of [`TRI_DEG4`]: the element is split `level` times
/// into four congruent sub-triangles. Used for high-accuracy right-hand
/// sides (manufactured solutions, error norms); the scheme itself only needs
/// the base rule.
pub fn tri_deg4_composite(level: u32) -> Vec<([f64; 3], f64)> {
    let mut tris: Vec<[[f64; 3]; 3]> = vec![[
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ]];
    for _ in 0..level {
        let mut next = Vec::with_capacity(4 * tris.len());
        for t in &tris {
            let mid = |a: [f64; 3], b: [f64; 3]| {
                [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])]
            };
            let (m01, m12, m20) = (mid(t[0], t[1]), mid(t[1], t[2]), mid(t[2], t[0]));
            next.push([t[0], m01, m20]);
            next.push([m01, t[1], m12]);
            next.push([m20, m12, t[2]]);
            next.push([m01, m12, m20]);
        }
        tris = next;
    }
    let scale = 1.0 / tris.len() as f64;
    let mut out = Vec::with_capacity(6 * tris.len());
    for t in &tris {
        for (b, w) in TRI_DEG4 {
            let p = [
                b[0] * t[0][0] + b[1] * t[1][0] + b[2] * t[2][0],
                b[0] * t[0][1] + b[1] * t[1][1] + b[2] * t[2][1],
                b[0] * t[0][2] + b[1] * t[1][2] + b[2] * t[2][2],
            ];
            out.push((p, w * scale));
        }
    }
    out
}

/// 2-point Gauss rule on an edge: (parameter in [0,1], weight), weights sum
/// to one; exact for cubics.
pub const EDGE_GAUSS2: [(f64, f64); 2] = {
    const S: f64 = 0.288_675_134_594_812_9; // 1/(2 sqrt 3)
    [(0.5 - S, 0.5), (0.5 + S, 0.5)]
};

/// P2 scalar shape values at a barycentric point: three vertex functions
/// followed by the edge bubbles opposite each vertex.
#[inline]
pub fn p2_values(b: [f64; 3]) -> [f64; 6] {
    [
        b[0] * (2.0 * b[0] - 1.0),
        b[1] * (2.0 * b[1] - 1.0),
        b[2] * (2.0 * b[2] - 1.0),
        4.0 * b[1] * b[2],
        4.0 * b[2] * b[0],
        4.0 * b[0] * b[1],
    ]
}

/// Gradients of the P2 shapes at a barycentric point.
#[inline]
pub fn p2_grads(b: [f64; 3], g: &[[f64; 2]; 3]) -> [[f64; 2]; 6] {
    let lin = |k: usize| {
        let f = 4.0 * b[k] - 1.0;
        [f * g[k][0], f * g[k][1]]
    };
    let edge = |i: usize, j: usize| {
        [
            4.0 * (b[i] * g[j][0] + b[j] * g[i][0]),
            4.0 * (b[i] * g[j][1] + b[j] * g[i][1]),
        ]
    };
    [lin(0), lin(1), lin(2), edge(1, 2), edge(2, 0), edge(0, 1)]
}

/// Undirected edge enumeration of the triangulation.
#[derive(Debug, Clone)]
pub struct EdgeTable {
    pub edges: Vec<[u32; 2]>,
    /// Per triangle, the edge opposite each local vertex.
    pub tri_edges: Vec<[u32; 3]>,
    pub edge_is_boundary: Vec<bool>,
}

pub fn edge_table(mesh: &Mesh) -> EdgeTable {
    let mut lookup: HashMap<(u32, u32), u32> = HashMap::new();
    let mut edges: Vec<[u32; 2]> = Vec::new();
    let mut count: Vec<u8> = Vec::new();
    let mut tri_edges = Vec::with_capacity(mesh.num_triangles());
    for t in 0..mesh.num_triangles() {
        let tv = mesh.triangle(t);
        let mut te = [0u32; 3];
        for k in 0..3 {
            let a = tv[(k + 1) % 3] as u32;
            let b = tv[(k + 2) % 3] as u32;
            let key = if a < b { (a, b) } else { (b, a) };
            let id = *lookup.entry(key).or_insert_with(|| {
                edges.push([key.0, key.1]);
                count.push(0);
                (edges.len() - 1) as u32
            });
            count[id as usize] += 1;
            te[k] = id;
        }
        tri_edges.push(te);
    }
    EdgeTable {
        edges,
        tri_edges,
        edge_is_boundary: count.iter().map(|&c| c == 1).collect(),
    }
}

/// Taylor-Hood velocity space: P2 vector field with homogeneous Dirichlet
/// values imposed by eliminating the boundary degrees of freedom.
#[derive(Debug, Clone)]
pub struct VelocitySpace {
    /// Scalar P2 nodes: vertices first, then edge midpoints.
    pub n_nodes: usize,
    pub n_full: usize,
    pub node_is_boundary: Vec<bool>,
    pub reduced_of_full: Vec<u32>,
    pub full_of_reduced: Vec<u32>,
}

impl VelocitySpace {
    pub fn new(mesh: &Mesh, edges: &EdgeTable) -> Self {
        let nv = mesh.num_vertices();
        let ne = edges.edges.len();
        let n_nodes = nv + ne;
        let mut node_is_boundary = vec![false; n_nodes];
        for v in 0..nv {
            node_is_boundary[v] = mesh.is_boundary_vertex(v);
        }
        for (e, &b) in edges.edge_is_boundary.iter().enumerate() {
            node_is_boundary[nv + e] = b;
        }
        let n_full = 2 * n_nodes;
        let mut reduced_of_full = vec![NONE; n_full];
        let mut full_of_reduced = Vec::new();
        for node in 0..n_nodes {
            if !node_is_boundary[node] {
                for comp in 0..2 {
                    let full = 2 * node + comp;
                    reduced_of_full[full] = full_of_reduced.len() as u32;
                    full_of_reduced.push(full as u32);
                }
            }
        }
        VelocitySpace {
            n_nodes,
            n_full,
            node_is_boundary,
            reduced_of_full,
            full_of_reduced,
        }
    }

    pub fn n_reduced(&self) -> usize {
        self.full_of_reduced.len()
    }

    /// Scalar node ids of the six local P2 nodes of a triangle.
    pub fn local_nodes(&self, mesh: &Mesh, edges: &EdgeTable, t: usize) -> [usize; 6] {
        let tv = mesh.triangle(t);
        let te = edges.tri_edges[t];
        [
            tv[0],
            tv[1],
            tv[2],
            mesh.num_vertices() + te[0] as usize,
            mesh.num_vertices() + te[1] as usize,
            mesh.num_vertices() + te[2] as usize,
        ]
    }

    /// Scatters a reduced solution into the full vector (boundary zeros).
    pub fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n_full];
        for (r, &f) in self.full_of_reduced.iter().enumerate() {
            full[f as usize] = reduced[r];
        }
        full
    }

    /// Gathers the interior entries of a full vector.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.full_of_reduced
            .iter()
            .map(|&f| full[f as usize])
            .collect()
    }
}

/// Evaluates a full P2 vector field at a barycentric point of a triangle.
pub fn eval_p2_vector(
    mesh: &Mesh,
    edges: &EdgeTable,
    vspace: &VelocitySpace,
    field: &[f64],
    t: usize,
    b: [f64; 3],
) -> [f64; 2] {
    let nodes = vspace.local_nodes(mesh, edges, t);
    let sh = p2_values(b);
    let mut out = [0.0; 2];
    for (k, &node) in nodes.iter().enumerate() {
        for comp in 0..2 {
            out[comp] += sh[k] * field[2 * node + comp];
        }
    }
    out
}

/// Coefficient of a stiffness form: either a constant or a P1 nodal field
/// interpolated as `I_h[coeff]`.
#[derive(Debug, Clone, Copy)]
pub enum Coeff<'a> {
    Const(f64),
    Nodal(&'a [f64]),
}

impl Coeff<'_> {
    fn at(&self, v: usize) -> f64 {
        match self {
            Coeff::Const(c) => *c,
            Coeff::Nodal(f) => f[v],
        }
    }
}

/// Assembles the P1 stiffness matrix with entries
/// `int I_h[coeff] grad(b_i) . grad(b_j)`.
///
/// The interpolated coefficient integrates to its vertex mean on each
/// element. Fails if the coefficient is not positive at some vertex.
pub fn p1_stiffness(mesh: &Mesh, coeff: Coeff) -> Result<Csr> {
    if let Coeff::Nodal(f) = coeff {
        if f.len() != mesh.num_vertices() {
            return Err(Error::invalid_state("coefficient length mismatch"));
        }
    }
    for v in 0..mesh.num_vertices() {
        if !(coeff.at(v) > 0.0) {
            return Err(Error::invalid_state(format!(
                "stiffness coefficient must be positive, got {} at vertex {v}",
                coeff.at(v)
            )));
        }
    }
    let nv = mesh.num_vertices();
    let mut coo = Coo::with_capacity(nv, nv, 9 * mesh.num_triangles());
    for t in 0..mesh.num_triangles() {
        let tv = mesh.triangle(t);
        let g = ElemGeom::of(mesh, t);
        let cbar = (coeff.at(tv[0]) + coeff.at(tv[1]) + coeff.at(tv[2])) / 3.0;
        for i in 0..3 {
            for j in 0..3 {
                let val = cbar
                    * g.area
                    * (g.grad_l[i][0] * g.grad_l[j][0] + g.grad_l[i][1] * g.grad_l[j][1]);
                coo.push(tv[i], tv[j], val);
            }
        }
    }
    Ok(coo.to_csr())
}

/// Consistent P1 mass matrix (exact integration).
pub fn p1_consistent_mass(mesh: &Mesh) -> Csr {
    let nv = mesh.num_vertices();
    let mut coo = Coo::with_capacity(nv, nv, 9 * mesh.num_triangles());
    for t in 0..mesh.num_triangles() {
        let tv = mesh.triangle(t);
        let a12 = mesh.area(t) / 12.0;
        for i in 0..3 {
            for j in 0..3 {
                coo.push(tv[i], tv[j], if i == j { 2.0 * a12 } else { a12 });
            }
        }
    }
    coo.to_csr()
}

/// Discrete Neumann-Laplacian: `(Delta_h q)(P) = -(K q)(P) / w(P)` with the
/// unit-coefficient stiffness `K` and lumped weights `w`. The result has
/// zero lumped mean by construction.
pub fn discrete_laplacian(stiffness: &Csr, lumped: &LumpedMass, q: &[f64]) -> Vec<f64> {
    let kq = stiffness.apply(q);
    kq.iter()
        .zip(&lumped.w)
        .map(|(v, w)| -v / w)
        .collect()
}

/// `||q||_{L2}^2` of a P1 field (exact).
pub fn p1_l2_norm_sq(mass: &Csr, q: &[f64]) -> f64 {
    let mq = mass.apply(q);
    q.iter().zip(&mq).map(|(a, b)| a * b).sum()
}

/// `||grad q||_{L2}^2` of a P1 field.
pub fn p1_h1_semi_sq(stiffness: &Csr, q: &[f64]) -> f64 {
    let kq = stiffness.apply(q);
    q.iter().zip(&kq).map(|(a, b)| a * b).sum()
}

/// `||q||_{L2(boundary)}^2` of a P1 field (2-point Gauss, exact).
pub fn p1_boundary_l2_sq(mesh: &Mesh, q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for e in mesh.boundary_edges() {
        let p0 = mesh.vertex(e[0] as usize);
        let p1 = mesh.vertex(e[1] as usize);
        let len = (p0[0] - p1[0]).hypot(p0[1] - p1[1]);
        let (qa, qb) = (q[e[0] as usize], q[e[1] as usize]);
        for (t, w) in EDGE_GAUSS2 {
            let val = (1.0 - t) * qa + t * qb;
            acc += w * len * val * val;
        }
    }
    acc
}

/// Lumped-minus-consistent local mass of one element; the difference is
/// positive semidefinite, which yields `||q||_{L2} <= ||q||_h`.
pub fn local_lumping_gap(area: f64) -> [[f64; 3]; 3] {
    let d = area / 12.0;
    [
        [2.0 * d, -d, -d],
        [-d, 2.0 * d, -d],
        [-d, -d, 2.0 * d],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_macro_mesh, BBox};
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_right_triangle() -> Mesh {
        Mesh::from_raw(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn quadrature_exact_to_degree_4() {
        // reference: int over the unit right triangle of x^a y^b
        // = a! b! / (a + b + 2)!
        let g = ElemGeom::new([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let fact = |n: usize| (1..=n).product::<usize>() as f64;
        for a in 0..=4usize {
            for b in 0..=(4 - a) {
                let exact = fact(a) * fact(b) / fact(a + b + 2);
                let mut num = 0.0;
                for (bary, w) in TRI_DEG4 {
                    let p = g.point(bary);
                    num += w * g.area * p[0].powi(a as i32) * p[1].powi(b as i32);
                }
                assert!(
                    (num - exact).abs() < 1e-13,
                    "monomial x^{a} y^{b}: {num} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn composite_rule_is_consistent() {
        let g = ElemGeom::new([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let pts = tri_deg4_composite(2);
        let wsum: f64 = pts.iter().map(|(_, w)| w).sum();
        assert!((wsum - 1.0).abs() < 1e-13);
        // degree-6 monomial x^3 y^3: exact = 3!3!/8! = 36/40320
        let exact = 36.0 / 40320.0;
        let eval = |pts: &[([f64; 3], f64)]| {
            let mut num = 0.0;
            for (bary, w) in pts {
                let p = g.point(*bary);
                num += w * g.area * p[0].powi(3) * p[1].powi(3);
            }
            num
        };
        let base = eval(&tri_deg4_composite(0));
        let fine = eval(&pts);
        assert!((fine - exact).abs() < 1e-7);
        assert!((fine - exact).abs() < (base - exact).abs() / 100.0);
    }

    #[test]
    fn lumped_weights_on_unit_triangle() {
        let m = unit_right_triangle();
        let lm = lumped_mass(&m);
        for w in &lm.w {
            assert!((w - 1.0 / 6.0).abs() < 1e-15);
        }
        // all three edges are boundary
        let wb_sum: f64 = lm.wb.iter().sum();
        assert!((wb_sum - (2.0 + 2.0f64.sqrt())).abs() < 1e-14);
    }

    #[test]
    fn constants_have_domain_mass() {
        let m = build_macro_mesh(BBox::square(-5.0, 5.0), 8).unwrap();
        let lm = lumped_mass(&m);
        let one = vec![1.0; m.num_vertices()];
        assert!((lm.norm(&one).powi(2) - 100.0).abs() < 1e-10);
        let wsum: f64 = lm.w.iter().sum();
        assert!((wsum - 100.0).abs() < 1e-10);
        let wbsum: f64 = lm.wb.iter().sum();
        assert!((wbsum - 40.0).abs() < 1e-12);
    }

    #[test]
    fn l2_norm_below_lumped_norm() {
        let m = build_macro_mesh(BBox::square(-5.0, 5.0), 8).unwrap();
        let lm = lumped_mass(&m);
        let mass = p1_consistent_mass(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q: Vec<f64> = (0..m.num_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let l2 = p1_l2_norm_sq(&mass, &q);
            let lumped = lm.inner(&q, &q);
            assert!(l2 <= lumped * (1.0 + 1e-13));
        }
        // elementwise PSD gap
        for t in 0..m.num_triangles() {
            let gap = local_lumping_gap(m.area(t));
            // eigenvalues of area/12 * (2 I - (J - I)) are {0, 3, 3} * area/12
            let tr: f64 = (0..3).map(|i| gap[i][i]).sum();
            assert!(tr >= 0.0);
        }
    }

    #[test]
    fn stiffness_local_oracle() {
        let m = unit_right_triangle();
        let k = p1_stiffness(&m, Coeff::Const(1.0)).unwrap();
        let d = k.to_dense();
        let expect = [
            [1.0, -0.5, -0.5],
            [-0.5, 0.5, 0.0],
            [-0.5, 0.0, 0.5],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((d[i][j] - expect[i][j]).abs() < 1e-14, "({i},{j})");
            }
        }
    }

    #[test]
    fn stiffness_row_sums_vanish_and_coeff_guard() {
        let m = build_macro_mesh(BBox::square(-5.0, 5.0), 4).unwrap();
        let k = p1_stiffness(&m, Coeff::Const(2.5)).unwrap();
        let one = vec![1.0; m.num_vertices()];
        for r in k.apply(&one) {
            assert!(r.abs() < 1e-12);
        }
        let mut bad = vec![1.0; m.num_vertices()];
        bad[3] = 0.0;
        assert!(p1_stiffness(&m, Coeff::Nodal(&bad)).is_err());
    }

    #[test]
    fn discrete_laplacian_properties() {
        let m = build_macro_mesh(BBox::square(-5.0, 5.0), 6).unwrap();
        let lm = lumped_mass(&m);
        let k = p1_stiffness(&m, Coeff::Const(1.0)).unwrap();
        let c = vec![3.0; m.num_vertices()];
        for v in discrete_laplacian(&k, &lm, &c) {
            assert!(v.abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q: Vec<f64> = (0..m.num_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..m.num_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dq = discrete_laplacian(&k, &lm, &q);
            // zero lumped mean
            let one = vec![1.0; q.len()];
            let mean = lm.inner(&dq, &one);
            let scale = lm.norm(&dq).max(1e-300);
            assert!(mean.abs() <= 1e-12 * scale * 10.0);
            // defining identity <Delta_h q, z>_h = -(grad q, grad z)
            let lhs = lm.inner(&dq, &z);
            let kq = k.apply(&q);
            let rhs: f64 = -kq.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
            assert!((lhs - rhs).abs() <= 1e-12 * (lhs.abs() + rhs.abs()).max(1e-6));
            // symmetry in (q, z)
            let dz = discrete_laplacian(&k, &lm, &z);
            let sym = lm.inner(&dz, &q);
            assert!((lhs - sym).abs() <= 1e-12 * (lhs.abs() + sym.abs()).max(1e-6));
        }
    }

    #[test]
    fn interpolation_second_order() {
        // || f - I_h f ||_{L2} = O(h^2) for smooth f
        let f = |p: [f64; 2]| (p[0]).sin() * (p[1]).sin();
        let mut errs = Vec::new();
        for n in [8usize, 16, 32] {
            let m = build_macro_mesh(BBox::square(-5.0, 5.0), n).unwrap();
            let fh = nodal_interpolate(&m, f);
            let pts = tri_deg4_composite(1);
            let mut err2 = 0.0;
            for t in 0..m.num_triangles() {
                let g = ElemGeom::of(&m, t);
                let tv = m.triangle(t);
                for (b, w) in &pts {
                    let p = g.point(*b);
                    let ih = b[0] * fh[tv[0]] + b[1] * fh[tv[1]] + b[2] * fh[tv[2]];
                    err2 += w * g.area * (f(p) - ih).powi(2);
                }
            }
            errs.push(err2.sqrt());
        }
        let r1 = (errs[0] / errs[1]).log2();
        let r2 = (errs[1] / errs[2]).log2();
        assert!(r1 >= 1.9 && r2 >= 1.9, "rates {r1} {r2}");
    }

    #[test]
    fn p2_space_counts_and_partition_of_unity() {
        let m = build_macro_mesh(BBox::square(0.0, 1.0), 3).unwrap();
        let et = edge_table(&m);
        let vs = VelocitySpace::new(&m, &et);
        assert_eq!(vs.n_full, 2 * (m.num_vertices() + et.edges.len()));
        // interior dof count: full minus boundary nodes times two
        let nb = vs.node_is_boundary.iter().filter(|&&b| b).count();
        assert_eq!(vs.n_reduced(), 2 * (vs.n_nodes - nb));
        // P2 partition of unity and gradient consistency at a random point
        let b = [0.2, 0.5, 0.3];
        let vals = p2_values(b);
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let g = ElemGeom::new([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let grads = p2_grads(b, &g.grad_l);
        let gsum = grads.iter().fold([0.0; 2], |a, g| [a[0] + g[0], a[1] + g[1]]);
        assert!(gsum[0].abs() < 1e-13 && gsum[1].abs() < 1e-13);
    }

    #[test]
    fn edge_table_conforming_counts() {
        let m = build_macro_mesh(BBox::square(0.0, 1.0), 2).unwrap();
        let et = edge_table(&m);
        // Euler: V - E + T = 1 for a disk
        assert_eq!(
            m.num_vertices() as i64 - et.edges.len() as i64 + m.num_triangles() as i64,
            1
        );
        let nb = et.edge_is_boundary.iter().filter(|&&b| b).count();
        assert_eq!(nb, m.boundary_edges().len());
    }
}
