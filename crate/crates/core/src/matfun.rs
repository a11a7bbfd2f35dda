//! Spectral calculus on symmetric 2x2 matrices.
//!
//! Scalar functions are extended to symmetric matrices through the closed
//! form eigendecomposition. The module carries the regularized logarithm
//! family `G_delta`, its inverse-derivative cut-off `beta_delta`, the upper
//! cut-off `G^L` and `H_delta = G^{1/delta}`, together with the eight
//! trace/pairing inequalities they satisfy, evaluated as runtime checks.

use crate::error::Error;
use crate::Result;

/// Symmetric 2x2 matrix stored as (xx, xy, yy).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

/// Eigendecomposition of a [`Sym2`]: `m = R diag(lo, hi) R^T` with
/// `R = [[c, -s], [s, c]]`, i.e. `(c, s)` is the unit eigenvector of `hi`.
#[derive(Debug, Clone, Copy)]
pub struct Eigen2 {
    pub lo: f64,
    pub hi: f64,
    pub c: f64,
    pub s: f64,
}

impl Sym2 {
    pub const IDENTITY: Sym2 = Sym2 {
        xx: 1.0,
        xy: 0.0,
        yy: 1.0,
    };

    pub const ZERO: Sym2 = Sym2 {
        xx: 0.0,
        xy: 0.0,
        yy: 0.0,
    };

    pub fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Sym2 { xx, xy, yy }
    }

    pub fn diag(a: f64, b: f64) -> Self {
        Sym2 {
            xx: a,
            xy: 0.0,
            yy: b,
        }
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    /// Frobenius norm; matrix norms written |.| follow this convention.
    pub fn norm(&self) -> f64 {
        (self.xx * self.xx + 2.0 * self.xy * self.xy + self.yy * self.yy).sqrt()
    }

    /// Full contraction a : b = sum_ij a_ij b_ij.
    pub fn ddot(&self, o: &Sym2) -> f64 {
        self.xx * o.xx + 2.0 * self.xy * o.xy + self.yy * o.yy
    }

    pub fn add(&self, o: &Sym2) -> Sym2 {
        Sym2::new(self.xx + o.xx, self.xy + o.xy, self.yy + o.yy)
    }

    pub fn sub(&self, o: &Sym2) -> Sym2 {
        Sym2::new(self.xx - o.xx, self.xy - o.xy, self.yy - o.yy)
    }

    pub fn scale(&self, f: f64) -> Sym2 {
        Sym2::new(f * self.xx, f * self.xy, f * self.yy)
    }

    /// Matrix product of two symmetric matrices (not symmetric in general);
    /// returns the full 2x2 result row-major.
    pub fn mul_full(&self, o: &Sym2) -> [[f64; 2]; 2] {
        [
            [
                self.xx * o.xx + self.xy * o.xy,
                self.xx * o.xy + self.xy * o.yy,
            ],
            [
                self.xy * o.xx + self.yy * o.xy,
                self.xy * o.xy + self.yy * o.yy,
            ],
        ]
    }

    /// Eigendecomposition with ordered eigenvalues `lo <= hi`.
    ///
    /// Matrices with |xy| below 1e-14 of the norm scale are treated as
    /// diagonal, which avoids cancellation near repeated eigenvalues.
    pub fn eigen(&self) -> Eigen2 {
        let scale = self.norm();
        if self.xy.abs() <= 1e-14 * scale || scale == 0.0 {
            return if self.xx <= self.yy {
                Eigen2 {
                    lo: self.xx,
                    hi: self.yy,
                    c: 0.0,
                    s: 1.0,
                }
            } else {
                Eigen2 {
                    lo: self.yy,
                    hi: self.xx,
                    c: 1.0,
                    s: 0.0,
                }
            };
        }
        let mean = 0.5 * (self.xx + self.yy);
        let diff = 0.5 * (self.xx - self.yy);
        let r = diff.hypot(self.xy);
        let lo = mean - r;
        let hi = mean + r;
        // eigenvector of hi: (xy, hi - xx) and (hi - yy, xy) are both valid;
        // pick the better-conditioned one
        let (ex, ey) = if diff >= 0.0 {
            (diff + r, self.xy)
        } else {
            (self.xy, r - diff)
        };
        let n = ex.hypot(ey);
        Eigen2 {
            lo,
            hi,
            c: ex / n,
            s: ey / n,
        }
    }

    /// Reassembles `R diag(flo, fhi) R^T` from an eigenframe.
    pub fn from_eigen(e: &Eigen2, flo: f64, fhi: f64) -> Sym2 {
        let (c, s) = (e.c, e.s);
        Sym2 {
            xx: fhi * c * c + flo * s * s,
            xy: (fhi - flo) * c * s,
            yy: fhi * s * s + flo * c * c,
        }
    }

    /// Applies a scalar function to the eigenvalues, keeping the eigenvectors.
    pub fn spectral_apply<F: Fn(f64) -> f64>(&self, f: F) -> Sym2 {
        let e = self.eigen();
        Sym2::from_eigen(&e, f(e.lo), f(e.hi))
    }

    /// Fallible variant of [`Self::spectral_apply`] for partial functions.
    pub fn try_spectral_apply<F: Fn(f64) -> Result<f64>>(&self, f: F) -> Result<Sym2> {
        let e = self.eigen();
        Ok(Sym2::from_eigen(&e, f(e.lo)?, f(e.hi)?))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen().lo
    }

    /// Matrix logarithm; eigenvalues must be positive.
    pub fn ln(&self) -> Result<Sym2> {
        self.try_spectral_apply(|s| {
            if s > 0.0 {
                Ok(s.ln())
            } else {
                Err(Error::domain(format!("ln of eigenvalue {s} <= 0")))
            }
        })
    }

    /// Matrix inverse through the eigenframe; eigenvalues must be nonzero.
    pub fn inv(&self) -> Result<Sym2> {
        self.try_spectral_apply(|s| {
            if s != 0.0 {
                Ok(1.0 / s)
            } else {
                Err(Error::domain("inverse of singular matrix"))
            }
        })
    }

    /// Negative part, `min{s, 0}` applied spectrally.
    pub fn negative_part(&self) -> Sym2 {
        self.spectral_apply(|s| s.min(0.0))
    }
}

/// Regularization parameters `0 < delta <= 1/2 < 1 < L`.
#[derive(Debug, Clone, Copy)]
pub struct RegParam {
    pub delta: f64,
    pub big_l: f64,
}

impl RegParam {
    pub fn new(delta: f64, big_l: f64) -> Result<Self> {
        if !(delta > 0.0 && delta <= 0.5) {
            return Err(Error::invalid_argument(format!(
                "delta must lie in (0, 1/2], got {delta}"
            )));
        }
        if !(big_l > 1.0) {
            return Err(Error::invalid_argument(format!(
                "L must exceed 1, got {big_l}"
            )));
        }
        Ok(RegParam { delta, big_l })
    }
}

/// Lower-regularized logarithm: ln(s) for s >= delta, linear continuation below.
pub fn g_delta(s: f64, delta: f64) -> f64 {
    if s < delta {
        s / delta + delta.ln() - 1.0
    } else {
        s.ln()
    }
}

/// Derivative of [`g_delta`]: 1 / max{s, delta}.
pub fn g_delta_prime(s: f64, delta: f64) -> f64 {
    1.0 / s.max(delta)
}

/// Inverse of the derivative of G_delta: max{s, delta}.
pub fn beta_delta(s: f64, delta: f64) -> f64 {
    s.max(delta)
}

/// Upper-regularized logarithm: ln(s) on (0, L), linear continuation above.
pub fn g_upper(s: f64, big_l: f64) -> Result<f64> {
    if s <= 0.0 {
        return Err(Error::domain(format!("G^L requires s > 0, got {s}")));
    }
    Ok(if s < big_l {
        s.ln()
    } else {
        s / big_l + big_l.ln() - 1.0
    })
}

/// Cut-off from above: min{s, L}.
pub fn beta_upper(s: f64, big_l: f64) -> Result<f64> {
    if s <= 0.0 {
        return Err(Error::domain(format!("beta^L requires s > 0, got {s}")));
    }
    Ok(s.min(big_l))
}

/// `H_delta(s) = G^{1/delta}(s)` for s > 0.
pub fn h_delta(s: f64, delta: f64) -> Result<f64> {
    g_upper(s, 1.0 / delta)
}

/// Spectral `beta_delta`.
pub fn beta_delta_mat(m: &Sym2, delta: f64) -> Sym2 {
    m.spectral_apply(|s| beta_delta(s, delta))
}

/// Spectral `G_delta`.
pub fn g_delta_mat(m: &Sym2, delta: f64) -> Sym2 {
    m.spectral_apply(|s| g_delta(s, delta))
}

/// Spectral `G_delta'`.
pub fn g_delta_prime_mat(m: &Sym2, delta: f64) -> Sym2 {
    m.spectral_apply(|s| g_delta_prime(s, delta))
}

/// Trace part of the elastic energy density, (1/2) tr(B - ln B) per unit
/// elasticity parameter. The argument has to be positive definite.
pub fn elastic_trace_energy(b: &Sym2) -> Result<f64> {
    let ln_b = b.ln()?;
    Ok(0.5 * (b.trace() - ln_b.trace()))
}

/// Elastic stress T_el = kappa (B - I).
pub fn elastic_stress(b: &Sym2, kappa: f64) -> Sym2 {
    b.sub(&Sym2::IDENTITY).scale(kappa)
}

/// Outcome of evaluating the eight regularization inequalities on a pair
/// (Phi, Psi). `slack[i]` is lhs - rhs of inequality i (residual norm for
/// the identity (a)), so every entry should be >= 0 up to roundoff; (g) and
/// (h) require delta <= 1/2 and are reported as passed otherwise.
#[derive(Debug, Clone, Copy)]
pub struct Lemma21Report {
    pub slack: [f64; 8],
    pub pass: [bool; 8],
}

impl Lemma21Report {
    pub fn all_pass(&self) -> bool {
        self.pass.iter().all(|&p| p)
    }
}

/// Evaluates the eight relations of the regularization lemma on (Phi, Psi).
///
/// `tol_eq` is the tolerance for the identity (a); `tol_ineq` is the allowed
/// negative slack for the inequalities (b)-(h).
pub fn lemma21_check(
    phi: &Sym2,
    psi: &Sym2,
    delta: f64,
    tol_eq: f64,
    tol_ineq: f64,
) -> Lemma21Report {
    let d = 2.0;
    let beta_phi = beta_delta_mat(phi, delta);
    let gp_phi = g_delta_prime_mat(phi, delta);
    let gp_psi = g_delta_prime_mat(psi, delta);
    let g_phi = g_delta_mat(phi, delta);
    let g_psi = g_delta_mat(psi, delta);

    // (a) beta_delta(Phi) G_delta'(Phi) = I, both orders
    let p1 = beta_phi.mul_full(&gp_phi);
    let p2 = gp_phi.mul_full(&beta_phi);
    let mut res_a = 0.0f64;
    for (i, row) in p1.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let id = if i == j { 1.0 } else { 0.0 };
            res_a = res_a.max((v - id).abs()).max((p2[i][j] - id).abs());
        }
    }

    // (b) tr(beta + beta^{-1} - 2I) >= 0
    let beta_inv = beta_phi
        .inv()
        .expect("beta_delta has eigenvalues >= delta > 0");
    let s_b = beta_phi.trace() + beta_inv.trace() - 2.0 * d;

    // (c) tr(Phi - G_delta(Phi) - I) >= 0
    let s_c = phi.trace() - g_phi.trace() - d;

    // (d) (Phi - beta_delta(Phi)) : (I - G_delta'(Phi)) >= 0
    let s_d = phi.sub(&beta_phi).ddot(&Sym2::IDENTITY.sub(&gp_phi));

    // (e) (Phi - Psi) : G_delta'(Psi) >= tr(G_delta(Phi) - G_delta(Psi))
    let s_e = phi.sub(psi).ddot(&gp_psi) - (g_phi.trace() - g_psi.trace());

    // (f) -(Phi - Psi) : (G'(Phi) - G'(Psi)) >= delta^2 |G'(Phi) - G'(Psi)|^2
    let dgp = gp_phi.sub(&gp_psi);
    let s_f = -phi.sub(psi).ddot(&dgp) - delta * delta * dgp.norm() * dgp.norm();

    // (g) tr(Phi - G_delta(Phi)) >= max{ |Phi|/2, |[Phi]_-|/(2 delta) }
    let lhs_g = phi.trace() - g_phi.trace();
    let rhs_g = (0.5 * phi.norm()).max(phi.negative_part().norm() / (2.0 * delta));
    let s_g = lhs_g - rhs_g;

    // (h) Phi : (I - G_delta'(Phi)) >= |Phi|/2 - d
    let s_h = phi.ddot(&Sym2::IDENTITY.sub(&gp_phi)) - (0.5 * phi.norm() - d);

    let half_only = delta <= 0.5;
    let slack = [-res_a, s_b, s_c, s_d, s_e, s_f, s_g, s_h];
    let pass = [
        res_a <= tol_eq,
        s_b >= -tol_ineq,
        s_c >= -tol_ineq,
        s_d >= -tol_ineq,
        s_e >= -tol_ineq,
        s_f >= -tol_ineq,
        !half_only || s_g >= -tol_ineq,
        !half_only || s_h >= -tol_ineq,
    ];
    Lemma21Report { slack, pass }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Sym2 {
        // random eigenvalues in [lo, hi] conjugated by a random rotation
        let l1 = rng.gen_range(lo..hi);
        let l2 = rng.gen_range(lo..hi);
        let t = rng.gen_range(0.0..std::f64::consts::PI);
        let e = Eigen2 {
            lo: l1.min(l2),
            hi: l1.max(l2),
            c: t.cos(),
            s: t.sin(),
        };
        Sym2::from_eigen(&e, e.lo, e.hi)
    }

    #[test]
    fn identity_is_fixed_point() {
        let m = Sym2::new(1.3, -0.4, 0.7);
        let out = m.spectral_apply(|s| s);
        assert!((out.xx - m.xx).abs() < 1e-14);
        assert!((out.xy - m.xy).abs() < 1e-14);
        assert!((out.yy - m.yy).abs() < 1e-14);
    }

    #[test]
    fn beta_half_on_diagonal() {
        // beta_delta(s) = max{s, delta}
        let m = Sym2::diag(-1.0, 3.0);
        let out = beta_delta_mat(&m, 0.5);
        assert_eq!(out.xx, 0.5);
        assert_eq!(out.yy, 3.0);
        assert_eq!(out.xy, 0.0);
        assert_eq!(beta_delta(0.3, 0.5), 0.5);
        assert_eq!(beta_delta(2.0, 0.5), 2.0);
    }

    #[test]
    fn g_prime_of_identity() {
        for delta in [0.5, 0.25, 0.01] {
            let out = g_delta_prime_mat(&Sym2::IDENTITY, delta);
            assert!((out.xx - 1.0).abs() < 1e-15);
            assert!((out.yy - 1.0).abs() < 1e-15);
            assert_eq!(out.xy, 0.0);
        }
    }

    #[test]
    fn knee_continuity() {
        let delta = 0.5;
        assert!((g_delta(delta, delta) - delta.ln()).abs() < 1e-15);
        assert!((g_delta(delta - 1e-12, delta) - delta.ln()).abs() < 1e-11);
        let big_l = 3.0;
        assert!((g_upper(big_l, big_l).unwrap() - big_l.ln()).abs() < 1e-15);
        assert!((g_upper(big_l, big_l).unwrap() - 1.0986122886681098).abs() < 1e-12);
        assert!((g_delta(0.5, 0.5) + 0.6931471805599453).abs() < 1e-12);
        // H_delta(s) = G^{1/delta}(s)
        assert_eq!(h_delta(2.0, 0.25).unwrap(), g_upper(2.0, 4.0).unwrap());
    }

    #[test]
    fn g_upper_rejects_nonpositive() {
        assert!(g_upper(0.0, 3.0).is_err());
        assert!(g_upper(-1.0, 3.0).is_err());
        assert!(Sym2::diag(1.0, -2.0).ln().is_err());
    }

    #[test]
    fn elastic_energy_and_stress() {
        // relaxed state
        let e = elastic_trace_energy(&Sym2::IDENTITY).unwrap();
        assert!((e - 1.0).abs() < 1e-15);
        let t = elastic_stress(&Sym2::IDENTITY, 1e4);
        assert_eq!(t.norm(), 0.0);
        // 2I under kappa = 1e4
        let t = elastic_stress(&Sym2::diag(2.0, 2.0), 1e4);
        assert!((t.norm() - 1e4 * 2.0f64.sqrt()).abs() < 1e-9);
        // blow-up as det -> 0
        let e = elastic_trace_energy(&Sym2::diag(1.0, 1e-8)).unwrap();
        assert!((e - 0.5 * (1.0 + 1e-8 - (1e-8f64).ln())).abs() < 1e-12);
        assert!((e - 9.71).abs() < 0.01);
        let mut last = 0.0;
        for k in 1..8 {
            let e = elastic_trace_energy(&Sym2::diag(1.0, 10f64.powi(-k))).unwrap();
            assert!(e > last);
            last = e;
        }
    }

    #[test]
    fn lemma_trivial_pair() {
        let r = lemma21_check(&Sym2::IDENTITY, &Sym2::IDENTITY, 0.5, 1e-12, 1e-10);
        assert!(r.all_pass(), "slack = {:?}", r.slack);
        // (f) holds with both sides zero
        assert!(r.slack[5].abs() < 1e-15);
    }

    #[test]
    fn lemma_g_hand_computed() {
        // Phi = diag(-2, 4), delta = 1/4:
        // tr(Phi - G(Phi)) = (-2 - (-8 + ln(1/4) - 1)) + (4 - ln 4)
        let phi = Sym2::diag(-2.0, 4.0);
        let delta = 0.25;
        let lhs = phi.trace() - g_delta_mat(&phi, delta).trace();
        let expect = (-2.0 - (-2.0 / delta + delta.ln() - 1.0)) + (4.0 - 4.0f64.ln());
        assert!((lhs - expect).abs() < 1e-12);
        assert!(lhs >= phi.negative_part().norm() / (2.0 * delta)); // = 4
        let r = lemma21_check(&phi, &Sym2::IDENTITY, delta, 1e-12, 1e-10);
        assert!(r.all_pass(), "slack = {:?}", r.slack);
    }

    #[test]
    fn lemma_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for delta in [0.5, 0.25, 0.01] {
            for _ in 0..2000 {
                let phi = random_sym(&mut rng, -10.0, 10.0);
                let psi = random_sym(&mut rng, -10.0, 10.0);
                let r = lemma21_check(&phi, &psi, delta, 1e-12, 1e-10);
                assert!(
                    r.all_pass(),
                    "failed: phi={phi:?} psi={psi:?} delta={delta} slack={:?}",
                    r.slack
                );
            }
        }
    }

    #[test]
    fn cutoff_floors_min_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let m = random_sym(&mut rng, -5.0, 5.0);
            let b = beta_delta_mat(&m, 0.25);
            assert!(b.min_eigenvalue() >= 0.25 - 1e-14);
        }
    }

    proptest! {
        #[test]
        fn spectral_commutes_with_rotation(
            l1 in -5.0f64..5.0, l2 in -5.0f64..5.0, t in 0.0f64..3.15, t2 in 0.0f64..3.15
        ) {
            // f(Q^T M Q) = Q^T f(M) Q for rotations Q
            let e = Eigen2 { lo: l1.min(l2), hi: l1.max(l2), c: t.cos(), s: t.sin() };
            let m = Sym2::from_eigen(&e, e.lo, e.hi);
            let (c, s) = (t2.cos(), t2.sin());
            let rot = |a: &Sym2| Sym2 {
                xx: c * c * a.xx + 2.0 * c * s * a.xy + s * s * a.yy,
                xy: c * s * (a.yy - a.xx) + (c * c - s * s) * a.xy,
                yy: s * s * a.xx - 2.0 * c * s * a.xy + c * c * a.yy,
            };
            let f = |x: f64| (x * 0.3).tanh() + 0.1 * x;
            let a = rot(&m).spectral_apply(f);
            let b = rot(&m.spectral_apply(f));
            prop_assert!((a.xx - b.xx).abs() < 1e-12);
            prop_assert!((a.xy - b.xy).abs() < 1e-12);
            prop_assert!((a.yy - b.yy).abs() < 1e-12);
        }

        #[test]
        fn g_delta_concave(s in -3.0f64..6.0, t in -3.0f64..6.0, lam in 0.0f64..1.0) {
            for delta in [0.5, 0.25, 0.01] {
                let mid = g_delta(lam * s + (1.0 - lam) * t, delta);
                let chord = lam * g_delta(s, delta) + (1.0 - lam) * g_delta(t, delta);
                prop_assert!(mid >= chord - 1e-12);
            }
        }

        #[test]
        fn beta_and_gprime_multiply_to_identity(
            l1 in -8.0f64..8.0, l2 in -8.0f64..8.0, t in 0.0f64..3.15
        ) {
            let e = Eigen2 { lo: l1.min(l2), hi: l1.max(l2), c: t.cos(), s: t.sin() };
            let m = Sym2::from_eigen(&e, e.lo, e.hi);
            let b = beta_delta_mat(&m, 0.25);
            let g = g_delta_prime_mat(&m, 0.25);
            let p = b.mul_full(&g);
            let q = g.mul_full(&b);
            for i in 0..2 {
                for j in 0..2 {
                    let id = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((p[i][j] - id).abs() < 1e-12);
                    prop_assert!((p[i][j] - q[i][j]).abs() < 1e-12);
                }
            }
        }
    }
}
