//! Conforming triangulations of a square box with interface-tracking local
//! refinement.
//!
//! The macro mesh is a criss-cross grid: every grid square is split into four
//! right-isosceles triangles around its center. Local refinement uses
//! newest-vertex bisection with the refinement edge fixed to the hypotenuse,
//! which keeps every element right-isosceles (hence non-obtuse) on the whole
//! hierarchy. Coarsening undoes bisections whose subtree stayed unmarked for
//! two consecutive adaptation calls.
//!
//! A `Mesh` is immutable once built; adaptation produces a new mesh. The
//! bisection forest is carried along so that refinement history can be
//! serialized and replayed exactly.

use std::collections::HashMap;

use crate::error::Error;
use crate::Result;

const NONE: u32 = u32::MAX;

/// Axis-aligned box domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl BBox {
    pub fn square(lo: f64, hi: f64) -> Self {
        BBox {
            min: [lo, lo],
            max: [hi, hi],
        }
    }

    pub fn side(&self) -> [f64; 2] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1]]
    }

    pub fn area(&self) -> f64 {
        let s = self.side();
        s[0] * s[1]
    }

    pub fn perimeter(&self) -> f64 {
        let s = self.side();
        2.0 * (s[0] + s[1])
    }
}

/// Interface-refinement parameters: coarse/fine target resolutions and the
/// band half-width in phase-field units.
#[derive(Debug, Clone, Copy)]
pub struct RefinementSpec {
    pub coarse_n: usize,
    pub fine_n: usize,
    pub band_delta: f64,
}

impl RefinementSpec {
    pub fn new(coarse_n: usize, fine_n: usize, band_delta: f64) -> Result<Self> {
        if coarse_n == 0 {
            return Err(Error::invalid_argument("coarse_n must be >= 1"));
        }
        let ratio = fine_n / coarse_n.max(1);
        if fine_n % coarse_n != 0 || !ratio.is_power_of_two() {
            return Err(Error::invalid_argument(format!(
                "fine_n ({fine_n}) must be coarse_n ({coarse_n}) times a power of 2"
            )));
        }
        if !(band_delta > 0.0 && band_delta < 1.0) {
            return Err(Error::invalid_argument(format!(
                "band_delta must lie in (0, 1), got {band_delta}"
            )));
        }
        Ok(RefinementSpec {
            coarse_n,
            fine_n,
            band_delta,
        })
    }

    /// Bisection level of fully refined elements: two bisections halve the
    /// diameter, so the fine grid sits `2 log2(fine_n/coarse_n)` levels down.
    pub fn fine_level(&self) -> u32 {
        2 * (self.fine_n / self.coarse_n).trailing_zeros()
    }
}

#[derive(Debug, Clone, Copy)]
struct TriNode {
    /// Vertex ids (a, b, peak); the refinement edge is (a, b).
    verts: [u32; 3],
    level: u32,
    parent: u32,
    children: [u32; 2],
    /// Midpoint vertex of the refinement edge, set when split.
    midpoint: u32,
    /// Consecutive adaptation calls with no marked leaf in the subtree.
    streak: u32,
    alive: bool,
}

impl TriNode {
    fn leaf(verts: [u32; 3], level: u32, parent: u32) -> Self {
        TriNode {
            verts,
            level,
            parent,
            children: [NONE, NONE],
            midpoint: NONE,
            streak: 0,
            alive: true,
        }
    }

    fn is_leaf(&self) -> bool {
        self.children[0] == NONE
    }
}

/// Immutable triangulation snapshot with its refinement forest.
pub struct Mesh {
    bbox: BBox,
    macro_n: usize,
    verts: Vec<[f64; 2]>,
    nodes: Vec<TriNode>,
    free_nodes: Vec<u32>,
    macro_roots: Vec<u32>,
    edge_mid: HashMap<(u32, u32), u32>,
    adapt_calls: u64,

    // compacted active view
    active: Vec<u32>,
    active_verts: Vec<u32>,
    vert_active: Vec<u32>,
    tris: Vec<[u32; 3]>,
    boundary_edges: Vec<[u32; 2]>,
    boundary_vertex: Vec<bool>,
    raw: bool,
}

fn edge_key(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Builds the criss-cross macro mesh of `n x n` grid squares, each split into
/// four right-isosceles triangles about the square center.
pub fn build_macro_mesh(bbox: BBox, n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::invalid_argument("macro resolution n must be >= 1"));
    }
    let side = bbox.side();
    if !(side[0] > 0.0 && side[1] > 0.0) {
        return Err(Error::invalid_argument("box must have positive extent"));
    }
    let nv_grid = (n + 1) * (n + 1);
    let mut verts = Vec::with_capacity(nv_grid + n * n);
    for j in 0..=n {
        for i in 0..=n {
            verts.push([
                bbox.min[0] + side[0] * i as f64 / n as f64,
                bbox.min[1] + side[1] * j as f64 / n as f64,
            ]);
        }
    }
    for j in 0..n {
        for i in 0..n {
            verts.push([
                bbox.min[0] + side[0] * (i as f64 + 0.5) / n as f64,
                bbox.min[1] + side[1] * (j as f64 + 0.5) / n as f64,
            ]);
        }
    }
    let corner = |i: usize, j: usize| (j * (n + 1) + i) as u32;
    let center = |i: usize, j: usize| (nv_grid + j * n + i) as u32;
    let mut nodes = Vec::with_capacity(4 * n * n);
    let mut macro_roots = Vec::with_capacity(4 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (c00, c10, c11, c01) = (corner(i, j), corner(i + 1, j), corner(i + 1, j + 1), corner(i, j + 1));
            let m = center(i, j);
            for verts3 in [[c00, c10, m], [c10, c11, m], [c11, c01, m], [c01, c00, m]] {
                macro_roots.push(nodes.len() as u32);
                nodes.push(TriNode::leaf(verts3, 0, NONE));
            }
        }
    }
    let mut mesh = Mesh {
        bbox,
        macro_n: n,
        verts,
        nodes,
        free_nodes: Vec::new(),
        macro_roots,
        edge_mid: HashMap::new(),
        adapt_calls: 0,
        active: Vec::new(),
        active_verts: Vec::new(),
        vert_active: Vec::new(),
        tris: Vec::new(),
        boundary_edges: Vec::new(),
        boundary_vertex: Vec::new(),
        raw: false,
    };
    mesh.rebuild_active();
    Ok(mesh)
}

impl Mesh {
    /// Wraps raw arrays as a fixed triangulation (test fixtures, file import).
    /// Triangles are reoriented counter-clockwise; refinement is unsupported.
    pub fn from_raw(verts: Vec<[f64; 2]>, tris: Vec<[usize; 3]>) -> Result<Mesh> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &verts {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        let mut nodes = Vec::with_capacity(tris.len());
        for t in &tris {
            let mut tv = [t[0] as u32, t[1] as u32, t[2] as u32];
            let a = signed_area2(&verts, tv);
            if a == 0.0 {
                return Err(Error::invalid_argument("degenerate triangle in raw mesh"));
            }
            if a < 0.0 {
                tv.swap(1, 2);
            }
            nodes.push(TriNode::leaf(tv, 0, NONE));
        }
        let mut mesh = Mesh {
            bbox: BBox { min: lo, max: hi },
            macro_n: 0,
            verts,
            nodes,
            free_nodes: Vec::new(),
            macro_roots: Vec::new(),
            edge_mid: HashMap::new(),
            adapt_calls: 0,
            active: Vec::new(),
            active_verts: Vec::new(),
            vert_active: Vec::new(),
            tris: Vec::new(),
            boundary_edges: Vec::new(),
            boundary_vertex: Vec::new(),
            raw: true,
        };
        mesh.rebuild_active();
        Ok(mesh)
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn macro_n(&self) -> usize {
        self.macro_n
    }

    pub fn num_vertices(&self) -> usize {
        self.active_verts.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.tris.len()
    }

    pub fn vertex(&self, i: usize) -> [f64; 2] {
        self.verts[self.active_verts[i] as usize]
    }

    /// Triangle as compact vertex indices, positively oriented, with the
    /// newest vertex (right-angle peak) last.
    pub fn triangle(&self, t: usize) -> [usize; 3] {
        let tv = self.tris[t];
        [tv[0] as usize, tv[1] as usize, tv[2] as usize]
    }

    pub fn triangle_level(&self, t: usize) -> u32 {
        self.nodes[self.active[t] as usize].level
    }

    pub fn boundary_edges(&self) -> &[[u32; 2]] {
        &self.boundary_edges
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.boundary_vertex[v]
    }

    pub fn triangle_corners(&self, t: usize) -> [[f64; 2]; 3] {
        let tv = self.triangle(t);
        [self.vertex(tv[0]), self.vertex(tv[1]), self.vertex(tv[2])]
    }

    pub fn area(&self, t: usize) -> f64 {
        let c = self.triangle_corners(t);
        0.5 * ((c[1][0] - c[0][0]) * (c[2][1] - c[0][1]) - (c[2][0] - c[0][0]) * (c[1][1] - c[0][1]))
    }

    pub fn diameter(&self, t: usize) -> f64 {
        let c = self.triangle_corners(t);
        let mut d: f64 = 0.0;
        for k in 0..3 {
            let p = c[k];
            let q = c[(k + 1) % 3];
            d = d.max((p[0] - q[0]).hypot(p[1] - q[1]));
        }
        d
    }

    /// Largest interior angle in radians.
    pub fn max_angle(&self, t: usize) -> f64 {
        let c = self.triangle_corners(t);
        let mut worst: f64 = 0.0;
        for k in 0..3 {
            let a = c[k];
            let b = c[(k + 1) % 3];
            let d = c[(k + 2) % 3];
            let u = [b[0] - a[0], b[1] - a[1]];
            let v = [d[0] - a[0], d[1] - a[1]];
            let dot = u[0] * v[0] + u[1] * v[1];
            let nu = u[0].hypot(u[1]);
            let nv = v[0].hypot(v[1]);
            worst = worst.max((dot / (nu * nv)).clamp(-1.0, 1.0).acos());
        }
        worst
    }

    pub fn h_min(&self) -> f64 {
        (0..self.num_triangles()).fold(f64::INFINITY, |m, t| m.min(self.diameter(t)))
    }

    pub fn h_max(&self) -> f64 {
        (0..self.num_triangles()).fold(0.0f64, |m, t| m.max(self.diameter(t)))
    }

    /// Triangles with at least one vertex inside the diffuse-interface band
    /// `|phi(P)| <= 1 - band_delta`.
    pub fn interface_band(&self, phi: &[f64], band_delta: f64) -> Vec<bool> {
        assert_eq!(phi.len(), self.num_vertices(), "phi must be a P1 nodal vector");
        let thresh = 1.0 - band_delta;
        let in_band: Vec<bool> = phi.iter().map(|&p| p.abs() <= thresh).collect();
        self.tris
            .iter()
            .map(|tv| tv.iter().any(|&v| in_band[v as usize]))
            .collect()
    }

    /// Triangles whose vertex values change sign; used together with
    /// [`Self::interface_band`] to seed refinement when the interface is
    /// thinner than the current local mesh size.
    pub fn sign_change_triangles(&self, phi: &[f64]) -> Vec<bool> {
        assert_eq!(phi.len(), self.num_vertices());
        self.tris
            .iter()
            .map(|tv| {
                let s: Vec<f64> = tv.iter().map(|&v| phi[v as usize]).collect();
                (s[0] > 0.0) != (s[1] > 0.0) || (s[0] > 0.0) != (s[2] > 0.0)
            })
            .collect()
    }

    /// Conformity scan: every edge must be shared by one (boundary) or two
    /// triangles. Returns the offending edge count.
    pub fn conformity_violations(&self) -> usize {
        let mut edges: Vec<(u32, u32)> = Vec::with_capacity(3 * self.tris.len());
        for tv in &self.tris {
            for k in 0..3 {
                edges.push(edge_key(tv[k], tv[(k + 1) % 3]));
            }
        }
        edges.sort_unstable();
        let mut bad = 0;
        let mut i = 0;
        while i < edges.len() {
            let mut j = i;
            while j < edges.len() && edges[j] == edges[i] {
                j += 1;
            }
            if j - i > 2 {
                bad += 1;
            }
            if j - i == 1 {
                // must lie on the boundary box
                let (a, b) = edges[i];
                if !(self.on_boundary(a) && self.on_boundary(b)) {
                    bad += 1;
                }
            }
            i = j;
        }
        bad
    }

    fn on_boundary(&self, compact_v: u32) -> bool {
        let p = self.vertex(compact_v as usize);
        let eps = 1e-12 * self.bbox.side()[0].max(self.bbox.side()[1]);
        (p[0] - self.bbox.min[0]).abs() < eps
            || (p[0] - self.bbox.max[0]).abs() < eps
            || (p[1] - self.bbox.min[1]).abs() < eps
            || (p[1] - self.bbox.max[1]).abs() < eps
    }

    // ---------------------------------------------------------------- adapt

    /// Newest-vertex bisection toward the refinement targets: marked
    /// triangles are refined to the fine level of `spec`, unmarked subtrees
    /// relax toward the macro level after two unmarked adaptation calls, and
    /// closure bisections keep the triangulation conforming.
    pub fn refine_to_indicator(&self, marked: &[bool], spec: &RefinementSpec) -> Result<Mesh> {
        if self.raw {
            return Err(Error::invalid_state(
                "raw meshes carry no refinement forest",
            ));
        }
        if marked.len() != self.num_triangles() {
            return Err(Error::invalid_argument(format!(
                "marker length {} != triangle count {}",
                marked.len(),
                self.num_triangles()
            )));
        }
        if spec.coarse_n != self.macro_n {
            return Err(Error::invalid_argument(format!(
                "spec coarse_n {} does not match macro mesh n {}",
                spec.coarse_n, self.macro_n
            )));
        }
        let fine_level = spec.fine_level();

        let mut m = self.clone_forest();
        m.adapt_calls += 1;

        // marked flags on forest leaves
        let mut leaf_marked: HashMap<u32, bool> = HashMap::new();
        for (t, &node) in self.active.iter().enumerate() {
            leaf_marked.insert(node, marked[t]);
        }

        m.update_streaks(&leaf_marked);
        m.coarsen_pass();
        m.refine_marked(&leaf_marked, fine_level)?;
        m.rebuild_active();
        debug_assert_eq!(m.conformity_violations(), 0);
        Ok(m)
    }

    fn clone_forest(&self) -> Mesh {
        Mesh {
            bbox: self.bbox,
            macro_n: self.macro_n,
            verts: self.verts.clone(),
            nodes: self.nodes.clone(),
            free_nodes: self.free_nodes.clone(),
            macro_roots: self.macro_roots.clone(),
            edge_mid: self.edge_mid.clone(),
            adapt_calls: self.adapt_calls,
            active: Vec::new(),
            active_verts: Vec::new(),
            vert_active: Vec::new(),
            tris: Vec::new(),
            boundary_edges: Vec::new(),
            boundary_vertex: Vec::new(),
            raw: false,
        }
    }

    /// Post-order walk updating per-node unmarked streaks.
    fn update_streaks(&mut self, leaf_marked: &HashMap<u32, bool>) {
        for &root in &self.macro_roots.clone() {
            self.update_streaks_rec(root, leaf_marked);
        }
    }

    fn update_streaks_rec(&mut self, id: u32, leaf_marked: &HashMap<u32, bool>) -> bool {
        let node = self.nodes[id as usize];
        let marked = if node.is_leaf() {
            *leaf_marked.get(&id).unwrap_or(&false)
        } else {
            let a = self.update_streaks_rec(node.children[0], leaf_marked);
            let b = self.update_streaks_rec(node.children[1], leaf_marked);
            a || b
        };
        let n = &mut self.nodes[id as usize];
        if marked {
            n.streak = 0;
        } else {
            n.streak = n.streak.saturating_add(1);
        }
        marked
    }

    /// Collapses bisections whose midpoint vertex is surrounded only by
    /// coarsenable sibling leaves (streak >= 2 on every parent).
    fn coarsen_pass(&mut self) {
        loop {
            // midpoint -> parent nodes, gathered deterministically
            let mut owners: HashMap<u32, Vec<u32>> = HashMap::new();
            let mut mids: Vec<u32> = Vec::new();
            for (id, n) in self.nodes.iter().enumerate() {
                if n.alive && !n.is_leaf() {
                    let e = owners.entry(n.midpoint).or_default();
                    if e.is_empty() {
                        mids.push(n.midpoint);
                    }
                    e.push(id as u32);
                }
            }
            let mut collapsed = 0usize;
            for mid in mids {
                let parents = &owners[&mid];
                let ok = parents.iter().all(|&p| {
                    let n = &self.nodes[p as usize];
                    n.streak >= 2
                        && n.children
                            .iter()
                            .all(|&c| self.nodes[c as usize].is_leaf())
                });
                if ok {
                    for &p in parents {
                        let children = self.nodes[p as usize].children;
                        for c in children {
                            self.nodes[c as usize].alive = false;
                            self.free_nodes.push(c);
                        }
                        let n = &mut self.nodes[p as usize];
                        n.children = [NONE, NONE];
                        n.midpoint = NONE;
                        collapsed += 1;
                    }
                }
            }
            if collapsed == 0 {
                break;
            }
        }
    }

    fn refine_marked(&mut self, leaf_marked: &HashMap<u32, bool>, fine_level: u32) -> Result<()> {
        // map refinement-session edges to incident leaves
        let mut edge_leaf: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        let mut work: Vec<u32> = Vec::new();
        for &root in &self.macro_roots.clone() {
            self.collect_leaves(root, &mut work);
        }
        for &leaf in &work {
            let tv = self.nodes[leaf as usize].verts;
            for k in 0..3 {
                edge_leaf
                    .entry(edge_key(tv[k], tv[(k + 1) % 3]))
                    .or_default()
                    .push(leaf);
            }
        }
        // queue: survivors of marked leaves (the marked leaf itself, or after
        // coarsening its closest live ancestor) are driven to fine_level
        let mut queue: Vec<u32> = Vec::new();
        for (&leaf, &m) in leaf_marked {
            if !m {
                continue;
            }
            let mut id = leaf;
            while !self.nodes[id as usize].alive {
                id = self.nodes[id as usize].parent;
            }
            queue.push(id);
        }
        queue.sort_unstable();
        queue.dedup();
        while let Some(id) = queue.pop() {
            let n = self.nodes[id as usize];
            if !n.alive {
                continue;
            }
            if !n.is_leaf() {
                queue.push(n.children[0]);
                queue.push(n.children[1]);
                continue;
            }
            if n.level >= fine_level {
                continue;
            }
            self.bisect_conforming(id, &mut edge_leaf)?;
            queue.push(id);
        }
        Ok(())
    }

    fn collect_leaves(&self, id: u32, out: &mut Vec<u32>) {
        let n = &self.nodes[id as usize];
        if n.is_leaf() {
            out.push(id);
        } else {
            self.collect_leaves(n.children[0], out);
            self.collect_leaves(n.children[1], out);
        }
    }

    fn leaf_across(
        &self,
        edge: (u32, u32),
        not: u32,
        edge_leaf: &HashMap<(u32, u32), Vec<u32>>,
    ) -> Option<u32> {
        edge_leaf.get(&edge).and_then(|ids| {
            ids.iter()
                .copied()
                .find(|&i| i != not && self.nodes[i as usize].alive && self.nodes[i as usize].is_leaf())
        })
    }

    fn bisect_conforming(
        &mut self,
        id: u32,
        edge_leaf: &mut HashMap<(u32, u32), Vec<u32>>,
    ) -> Result<()> {
        let mut stack = vec![id];
        while let Some(&top) = stack.last() {
            if stack.len() > 128 {
                return Err(Error::invalid_state(
                    "bisection closure recursion exceeded its bound",
                ));
            }
            let n = self.nodes[top as usize];
            if !n.is_leaf() {
                stack.pop();
                continue;
            }
            let e = edge_key(n.verts[0], n.verts[1]);
            match self.leaf_across(e, top, edge_leaf) {
                None => {
                    self.split(top, edge_leaf);
                    stack.pop();
                }
                Some(u) => {
                    let un = self.nodes[u as usize];
                    if edge_key(un.verts[0], un.verts[1]) == e {
                        self.split(top, edge_leaf);
                        self.split(u, edge_leaf);
                        stack.pop();
                    } else {
                        stack.push(u);
                    }
                }
            }
        }
        Ok(())
    }

    fn alloc_node(&mut self, node: TriNode) -> u32 {
        if let Some(id) = self.free_nodes.pop() {
            self.nodes[id as usize] = node;
            id
        } else {
            self.nodes.push(node);
            (self.nodes.len() - 1) as u32
        }
    }

    fn split(&mut self, id: u32, edge_leaf: &mut HashMap<(u32, u32), Vec<u32>>) {
        let n = self.nodes[id as usize];
        debug_assert!(n.is_leaf());
        let [a, b, c] = n.verts;
        let key = edge_key(a, b);
        let mid = *self.edge_mid.entry(key).or_insert_with(|| {
            let pa = self.verts[a as usize];
            let pb = self.verts[b as usize];
            self.verts.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
            (self.verts.len() - 1) as u32
        });
        // children keep CCW orientation; new peak is the midpoint
        let c0 = self.alloc_node(TriNode::leaf([c, a, mid], n.level + 1, id));
        let c1 = self.alloc_node(TriNode::leaf([b, c, mid], n.level + 1, id));
        {
            let n = &mut self.nodes[id as usize];
            n.children = [c0, c1];
            n.midpoint = mid;
            n.streak = 0;
        }
        for child in [c0, c1] {
            let tv = self.nodes[child as usize].verts;
            for k in 0..3 {
                edge_leaf
                    .entry(edge_key(tv[k], tv[(k + 1) % 3]))
                    .or_default()
                    .push(child);
            }
        }
    }

    fn rebuild_active(&mut self) {
        self.active.clear();
        if self.raw {
            for i in 0..self.nodes.len() {
                self.active.push(i as u32);
            }
        } else {
            let roots = self.macro_roots.clone();
            let mut leaves = Vec::new();
            for root in roots {
                self.collect_leaves(root, &mut leaves);
            }
            self.active = leaves;
        }
        // compact vertices in first-use order
        self.vert_active = vec![NONE; self.verts.len()];
        self.active_verts.clear();
        self.tris.clear();
        for &id in &self.active {
            let tv = self.nodes[id as usize].verts;
            let mut ct = [0u32; 3];
            for (k, &gv) in tv.iter().enumerate() {
                if self.vert_active[gv as usize] == NONE {
                    self.vert_active[gv as usize] = self.active_verts.len() as u32;
                    self.active_verts.push(gv);
                }
                ct[k] = self.vert_active[gv as usize];
            }
            self.tris.push(ct);
        }
        // boundary edges: edges incident to exactly one triangle
        let mut edges: Vec<(u32, u32)> = Vec::with_capacity(3 * self.tris.len());
        for tv in &self.tris {
            for k in 0..3 {
                edges.push(edge_key(tv[k], tv[(k + 1) % 3]));
            }
        }
        edges.sort_unstable();
        self.boundary_edges.clear();
        self.boundary_vertex = vec![false; self.active_verts.len()];
        let mut i = 0;
        while i < edges.len() {
            let mut j = i;
            while j < edges.len() && edges[j] == edges[i] {
                j += 1;
            }
            if j - i == 1 {
                let (a, b) = edges[i];
                self.boundary_edges.push([a, b]);
                self.boundary_vertex[a as usize] = true;
                self.boundary_vertex[b as usize] = true;
            }
            i = j;
        }
    }

    // ------------------------------------------------------- point location

    /// Locates a point: returns the active triangle containing it plus its
    /// barycentric coordinates. Points on the box are clamped inward.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        if self.raw || self.macro_n == 0 {
            return self.locate_brute(p);
        }
        let side = self.bbox.side();
        let n = self.macro_n;
        let fx = ((p[0] - self.bbox.min[0]) / side[0] * n as f64).floor();
        let fy = ((p[1] - self.bbox.min[1]) / side[1] * n as f64).floor();
        let ci = (fx as isize).clamp(0, n as isize - 1) as usize;
        let cj = (fy as isize).clamp(0, n as isize - 1) as usize;
        // search the cell and, on near-degenerate hits, its neighbors
        for (di, dj) in [(0isize, 0isize), (-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (1, 1), (-1, 1), (1, -1)] {
            let i = ci as isize + di;
            let j = cj as isize + dj;
            if i < 0 || j < 0 || i >= n as isize || j >= n as isize {
                continue;
            }
            let cell = (j as usize) * n + i as usize;
            for k in 0..4 {
                let root = self.macro_roots[cell * 4 + k];
                if let Some(hit) = self.descend(root, p) {
                    return Some(hit);
                }
            }
        }
        self.locate_brute(p)
    }

    fn descend(&self, root: u32, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        let mut id = root;
        if self.bary_global(id, p).is_none() {
            return None;
        }
        loop {
            let n = &self.nodes[id as usize];
            if n.is_leaf() {
                let active_idx = self.active.iter().position(|&a| a == id)?;
                let b = self.bary_global(id, p)?;
                return Some((active_idx, b));
            }
            // pick the child actually containing p (max of min-barycentric)
            let b0 = self.bary_global(n.children[0], p);
            let b1 = self.bary_global(n.children[1], p);
            id = match (b0, b1) {
                (Some(_), None) => n.children[0],
                (None, Some(_)) => n.children[1],
                (Some(x), Some(y)) => {
                    let mx = x.iter().cloned().fold(f64::INFINITY, f64::min);
                    let my = y.iter().cloned().fold(f64::INFINITY, f64::min);
                    if mx >= my {
                        n.children[0]
                    } else {
                        n.children[1]
                    }
                }
                (None, None) => return None,
            };
        }
    }

    fn bary_global(&self, id: u32, p: [f64; 2]) -> Option<[f64; 3]> {
        let tv = self.nodes[id as usize].verts;
        let c = [
            self.verts[tv[0] as usize],
            self.verts[tv[1] as usize],
            self.verts[tv[2] as usize],
        ];
        bary(&c, p, 1e-10 * self.diameter_of(&c))
    }

    fn diameter_of(&self, c: &[[f64; 2]; 3]) -> f64 {
        let mut d: f64 = 0.0;
        for k in 0..3 {
            let p = c[k];
            let q = c[(k + 1) % 3];
            d = d.max((p[0] - q[0]).hypot(p[1] - q[1]));
        }
        d
    }

    fn locate_brute(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        for t in 0..self.num_triangles() {
            let c = self.triangle_corners(t);
            if let Some(b) = bary(&c, p, 1e-10 * self.diameter_of(&c)) {
                return Some((t, b));
            }
        }
        None
    }

    /// Evaluates a P1 nodal field at an arbitrary point of the domain.
    pub fn eval_p1(&self, field: &[f64], p: [f64; 2]) -> Option<f64> {
        let (t, b) = self.locate(p)?;
        let tv = self.triangle(t);
        Some(b[0] * field[tv[0]] + b[1] * field[tv[1]] + b[2] * field[tv[2]])
    }

    // -------------------------------------------------------- serialization

    /// Depth-first encoding of the forest (1 = split, 0 = leaf), with split
    /// streak values, enough to replay the refinement history bit-exactly.
    pub fn encode_forest(&self) -> (Vec<u8>, Vec<u32>, u64) {
        let mut shape = Vec::new();
        let mut streaks = Vec::new();
        for &root in &self.macro_roots {
            self.encode_rec(root, &mut shape, &mut streaks);
        }
        (shape, streaks, self.adapt_calls)
    }

    fn encode_rec(&self, id: u32, shape: &mut Vec<u8>, streaks: &mut Vec<u32>) {
        let n = &self.nodes[id as usize];
        streaks.push(n.streak);
        if n.is_leaf() {
            shape.push(0);
        } else {
            shape.push(1);
            self.encode_rec(n.children[0], shape, streaks);
            self.encode_rec(n.children[1], shape, streaks);
        }
    }

    /// Rebuilds a mesh from [`Self::encode_forest`] output.
    pub fn decode_forest(
        bbox: BBox,
        macro_n: usize,
        shape: &[u8],
        streaks: &[u32],
        adapt_calls: u64,
    ) -> Result<Mesh> {
        let mut mesh = build_macro_mesh(bbox, macro_n)?;
        let mut pos = 0usize;
        let mut edge_leaf: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for ri in 0..mesh.macro_roots.len() {
            let root = mesh.macro_roots[ri];
            mesh.replay_rec(root, shape, streaks, &mut pos, &mut edge_leaf)?;
        }
        if pos != shape.len() {
            return Err(Error::invalid_state("forest encoding length mismatch"));
        }
        mesh.adapt_calls = adapt_calls;
        mesh.rebuild_active();
        Ok(mesh)
    }

    fn replay_rec(
        &mut self,
        id: u32,
        shape: &[u8],
        streaks: &[u32],
        pos: &mut usize,
        edge_leaf: &mut HashMap<(u32, u32), Vec<u32>>,
    ) -> Result<()> {
        if *pos >= shape.len() {
            return Err(Error::invalid_state("forest encoding truncated"));
        }
        let tag = shape[*pos];
        let streak = streaks[*pos];
        *pos += 1;
        self.nodes[id as usize].streak = streak;
        if tag == 1 {
            self.split(id, edge_leaf);
            let [c0, c1] = self.nodes[id as usize].children;
            self.replay_rec(c0, shape, streaks, pos, edge_leaf)?;
            self.replay_rec(c1, shape, streaks, pos, edge_leaf)?;
        }
        Ok(())
    }
}

fn signed_area2(verts: &[[f64; 2]], tv: [u32; 3]) -> f64 {
    let a = verts[tv[0] as usize];
    let b = verts[tv[1] as usize];
    let c = verts[tv[2] as usize];
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn bary(c: &[[f64; 2]; 3], p: [f64; 2], tol: f64) -> Option<[f64; 3]> {
    let det = (c[1][0] - c[0][0]) * (c[2][1] - c[0][1]) - (c[2][0] - c[0][0]) * (c[1][1] - c[0][1]);
    if det == 0.0 {
        return None;
    }
    let l1 = ((p[0] - c[0][0]) * (c[2][1] - c[0][1]) - (c[2][0] - c[0][0]) * (p[1] - c[0][1])) / det;
    let l2 = ((c[1][0] - c[0][0]) * (p[1] - c[0][1]) - (p[0] - c[0][0]) * (c[1][1] - c[0][1])) / det;
    let l0 = 1.0 - l1 - l2;
    let rel = tol / (c[1][0] - c[0][0]).hypot(c[1][1] - c[0][1]).max(1e-300);
    let eps = rel.max(1e-12);
    if l0 >= -eps && l1 >= -eps && l2 >= -eps {
        Some([l0, l1, l2])
    } else {
        None
    }
}
