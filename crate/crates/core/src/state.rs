//! Time-level solution state.

use crate::matfun::Sym2;

/// Nodal solution vectors of one time level. Scalar fields and the three
/// tensor components are P1 (one value per mesh vertex); the velocity is the
/// full P2 vector field including its boundary zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub phi: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub p: Vec<f64>,
    pub v: Vec<f64>,
    /// Tensor components (xx, xy, yy).
    pub b: [Vec<f64>; 3],
}

impl State {
    /// Pure-phase quiescent state: phi = phi0, everything else relaxed
    /// (sigma = mu = 0, v = 0, B = I).
    pub fn quiescent(num_vertices: usize, n_v_full: usize) -> State {
        State {
            phi: vec![0.0; num_vertices],
            mu: vec![0.0; num_vertices],
            sigma: vec![0.0; num_vertices],
            p: vec![0.0; num_vertices],
            v: vec![0.0; n_v_full],
            b: [
                vec![1.0; num_vertices],
                vec![0.0; num_vertices],
                vec![1.0; num_vertices],
            ],
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.phi.len()
    }

    #[inline]
    pub fn b_at(&self, v: usize) -> Sym2 {
        Sym2::new(self.b[0][v], self.b[1][v], self.b[2][v])
    }

    pub fn set_b_at(&mut self, v: usize, b: Sym2) {
        self.b[0][v] = b.xx;
        self.b[1][v] = b.xy;
        self.b[2][v] = b.yy;
    }

    /// Smallest eigenvalue of B over all vertices.
    pub fn min_eig_b(&self) -> f64 {
        (0..self.num_vertices()).fold(f64::INFINITY, |m, v| m.min(self.b_at(v).min_eigenvalue()))
    }
}
