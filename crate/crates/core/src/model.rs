//! Model functions and parameters: the double-well potential with its
//! convex-concave split, cut-off source and coefficient functions, the
//! discrete energy, and the stability constants behind the time-step bound.

use crate::error::Error;
use crate::fespace::{self, EdgeTable, ElemGeom, LumpedMass, VelocitySpace, TRI_DEG4};
use crate::matfun::{self, Sym2};
use crate::mesh::{BBox, Mesh};
use crate::sparse::Csr;
use crate::state::State;
use crate::Result;

/// Double-well potential variant.
///
/// `Modified` restricts the quartic to quadratic growth outside [-1, 1] so
/// the growth assumptions behind the stability analysis hold; `Quartic` is
/// the plain polynomial well, adequate when the order parameter stays close
/// to [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Potential {
    Modified,
    Quartic,
}

impl Potential {
    pub fn psi(&self, t: f64) -> f64 {
        match self {
            Potential::Modified => {
                if t > 1.0 {
                    (t - 1.0) * (t - 1.0)
                } else if t < -1.0 {
                    (t + 1.0) * (t + 1.0)
                } else {
                    0.25 * (1.0 - t * t) * (1.0 - t * t)
                }
            }
            Potential::Quartic => 0.25 * (1.0 - t * t) * (1.0 - t * t),
        }
    }

    pub fn psi_prime(&self, t: f64) -> f64 {
        match self {
            Potential::Modified => {
                if t > 1.0 {
                    2.0 * t - 2.0
                } else if t < -1.0 {
                    2.0 * t + 2.0
                } else {
                    t * t * t - t
                }
            }
            Potential::Quartic => t * t * t - t,
        }
    }

    /// Convex part of the split, treated implicitly.
    pub fn psi1_prime(&self, t: f64) -> f64 {
        match self {
            Potential::Modified => {
                if t > 1.0 {
                    3.0 * t - 2.0
                } else if t < -1.0 {
                    3.0 * t + 2.0
                } else {
                    t * t * t
                }
            }
            Potential::Quartic => t * t * t,
        }
    }

    /// Concave part of the split, treated explicitly; psi1' + psi2' = psi'.
    pub fn psi2_prime(&self, _t: f64) -> f64 {
        -_t
    }

    pub fn psi1_second(&self, t: f64) -> f64 {
        match self {
            Potential::Modified => {
                if t.abs() > 1.0 {
                    3.0
                } else {
                    3.0 * t * t
                }
            }
            Potential::Quartic => 3.0 * t * t,
        }
    }
}

/// Interpolation cut-off h: 0 in the healthy phase, 1 in the tumour phase.
#[inline]
pub fn h_cut(phi: f64) -> f64 {
    (0.5 * (1.0 + phi)).clamp(0.0, 1.0)
}

/// Derivative of [`h_cut`] (one-sided zero at the kinks).
#[inline]
pub fn h_cut_prime(phi: f64) -> f64 {
    if (-1.0..1.0).contains(&phi) {
        0.5
    } else {
        0.0
    }
}

/// Nutrient cut-off g.
#[inline]
pub fn g_cut(sigma: f64) -> f64 {
    sigma.clamp(0.0, 1.0)
}

/// Stress attenuation f(B) = (1 + |kappa (B - I)|^2)^{-1/2}.
#[inline]
pub fn f_stress(b: &Sym2, kappa: f64) -> f64 {
    let t = matfun::elastic_stress(b, kappa);
    1.0 / (1.0 + t.ddot(&t)).sqrt()
}

/// All physical and numerical constants of a run, plus variant switches.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub epsilon: f64,
    pub beta: f64,
    pub chi_phi: f64,
    pub chi_sigma: f64,
    /// Boundary permeability K of the Robin condition.
    pub k_robin: f64,
    pub kappa: f64,
    /// Elasticity at phi = +1 / -1 for the phase-dependent variant.
    pub kappa_tumour: f64,
    pub kappa_healthy: f64,
    pub alpha: f64,
    pub p_prolif: f64,
    pub a_apop: f64,
    pub c_consume: f64,
    pub g_growth: f64,
    pub m0: f64,
    pub n0: f64,
    pub eta_tumour: f64,
    pub eta_healthy: f64,
    pub tau_over_kappa_tumour: f64,
    pub tau_over_kappa_healthy: f64,
    pub sigma_infty: f64,
    pub dt: f64,
    pub t_end: f64,
    pub growth_source: bool,
    pub phase_dependent_kappa: bool,
    pub potential: Potential,
}

impl Default for ModelParams {
    /// Reference parameter set of the numerical experiments.
    fn default() -> Self {
        ModelParams {
            epsilon: 0.01,
            beta: 0.1,
            chi_phi: 10.0,
            chi_sigma: 500.0,
            k_robin: 1000.0,
            kappa: 1e4,
            kappa_tumour: 1e4,
            kappa_healthy: 1e4,
            alpha: 1e-3,
            p_prolif: 2.0,
            a_apop: 0.0,
            c_consume: 10.0,
            g_growth: 0.0,
            m0: 1e-12,
            n0: 0.002,
            eta_tumour: 5000.0,
            eta_healthy: 5000.0,
            tau_over_kappa_tumour: 1.0,
            tau_over_kappa_healthy: 1.0,
            sigma_infty: 1.0,
            dt: 5e-4,
            t_end: 2.0,
            growth_source: false,
            phase_dependent_kappa: false,
            potential: Potential::Modified,
        }
    }
}

impl ModelParams {
    /// A = beta / epsilon.
    pub fn a_coeff(&self) -> f64 {
        self.beta / self.epsilon
    }

    /// B = beta * epsilon.
    pub fn b_coeff(&self) -> f64 {
        self.beta * self.epsilon
    }

    /// Elasticity parameter, interpolated linearly between the phases in
    /// the phase-dependent variant, constant otherwise.
    pub fn kappa_at(&self, phi: f64) -> f64 {
        if self.phase_dependent_kappa {
            0.5 * self.kappa_tumour * (1.0 + phi) + 0.5 * self.kappa_healthy * (1.0 - phi)
        } else {
            self.kappa
        }
    }

    fn tau_endpoints(&self) -> (f64, f64) {
        if self.phase_dependent_kappa {
            (
                self.tau_over_kappa_tumour * self.kappa_tumour,
                self.tau_over_kappa_healthy * self.kappa_healthy,
            )
        } else {
            (
                self.tau_over_kappa_tumour * self.kappa,
                self.tau_over_kappa_healthy * self.kappa,
            )
        }
    }

    /// Relaxation time tau(phi), an h-interpolation between the phases.
    pub fn tau_at(&self, phi: f64) -> f64 {
        let (tau_t, tau_h) = self.tau_endpoints();
        tau_h * h_cut(-phi) + tau_t * h_cut(phi)
    }

    /// Mobility m(phi) = 2 h(phi)^2 + m0.
    pub fn mobility_at(&self, phi: f64) -> f64 {
        let h = h_cut(phi);
        2.0 * h * h + self.m0
    }

    /// Nutrient mobility n(phi) = n0.
    pub fn n_at(&self, _phi: f64) -> f64 {
        self.n0
    }

    /// Viscosity eta(phi), an h-interpolation between the phases.
    pub fn eta_at(&self, phi: f64) -> f64 {
        self.eta_healthy * h_cut(-phi) + self.eta_tumour * h_cut(phi)
    }

    /// Phase source: proliferation attenuated by elastic stress, minus
    /// apoptosis, both switched off in the healthy phase.
    pub fn gamma_phi(&self, phi: f64, sigma: f64, b: &Sym2, kappa_eff: f64) -> f64 {
        h_cut(1.1 * phi) * (self.p_prolif * g_cut(sigma) * f_stress(b, kappa_eff) - self.a_apop)
    }

    /// Derivative of [`Self::gamma_phi`] with respect to phi (B, sigma frozen).
    pub fn gamma_phi_dphi(&self, phi: f64, sigma: f64, b: &Sym2, kappa_eff: f64) -> f64 {
        1.1 * h_cut_prime(1.1 * phi)
            * (self.p_prolif * g_cut(sigma) * f_stress(b, kappa_eff) - self.a_apop)
    }

    /// Nutrient consumption.
    pub fn gamma_sigma(&self, phi: f64, sigma: f64) -> f64 {
        self.c_consume * h_cut(phi) * g_cut(sigma)
    }

    /// Growth source in the tensor equation (zero unless the variant is on).
    pub fn gamma_b(&self, phi: f64, sigma: f64) -> f64 {
        if self.growth_source {
            self.g_growth * g_cut(sigma) * h_cut(phi)
        } else {
            0.0
        }
    }
}

/// Energy of one state, with its named components.
#[derive(Debug, Clone, Copy)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub psi: f64,
    pub grad: f64,
    pub sigma: f64,
    pub chem: f64,
    pub kin: f64,
    pub elastic: f64,
    /// Set when B is not positive definite at some vertex; the elastic term
    /// (and the total) are then +infinity.
    pub b_not_spd: bool,
}

/// Evaluates the discrete energy
/// `<A psi(phi) + chi_sigma/2 sigma^2 + chi_phi sigma (1 - phi)
///   + kappa(phi)/2 tr(B - ln B)>_h + B/2 ||grad phi||^2 + 1/2 ||v||^2`.
pub fn discrete_energy(
    mesh: &Mesh,
    lumped: &LumpedMass,
    stiff_unit: &Csr,
    edges: &EdgeTable,
    vspace: &VelocitySpace,
    state: &State,
    p: &ModelParams,
) -> EnergyBreakdown {
    let a = p.a_coeff();
    let nv = mesh.num_vertices();
    let mut e_psi = 0.0;
    let mut e_sigma = 0.0;
    let mut e_chem = 0.0;
    let mut e_elastic = 0.0;
    let mut b_not_spd = false;
    for v in 0..nv {
        let w = lumped.w[v];
        let (phi, sig) = (state.phi[v], state.sigma[v]);
        e_psi += w * a * p.potential.psi(phi);
        e_sigma += w * 0.5 * p.chi_sigma * sig * sig;
        e_chem += w * p.chi_phi * sig * (1.0 - phi);
        let b = state.b_at(v);
        match matfun::elastic_trace_energy(&b) {
            Ok(tr) => e_elastic += w * p.kappa_at(phi) * tr,
            Err(_) => b_not_spd = true,
        }
    }
    if b_not_spd {
        e_elastic = f64::INFINITY;
    }
    let e_grad = 0.5 * p.b_coeff() * fespace::p1_h1_semi_sq(stiff_unit, &state.phi);
    // kinetic term: consistent P2 quadrature (degree 4, exact)
    let mut e_kin = 0.0;
    for t in 0..mesh.num_triangles() {
        let g = ElemGeom::of(mesh, t);
        for (bary, w) in TRI_DEG4 {
            let vv = fespace::eval_p2_vector(mesh, edges, vspace, &state.v, t, bary);
            e_kin += 0.5 * w * g.area * (vv[0] * vv[0] + vv[1] * vv[1]);
        }
    }
    EnergyBreakdown {
        total: e_psi + e_sigma + e_chem + e_elastic + e_grad + e_kin,
        psi: e_psi,
        grad: e_grad,
        sigma: e_sigma,
        chem: e_chem,
        kin: e_kin,
        elastic: e_elastic,
        b_not_spd,
    }
}

/// Constants of the discrete energy estimate and the resulting step bound.
#[derive(Debug, Clone)]
pub struct StabilityConstants {
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub c_tr_sq: f64,
    pub c: [f64; 9],
    pub a43_margin: f64,
    pub dt_star: f64,
}

impl StabilityConstants {
    /// Computes the growth constants by scanning the configured cut-off
    /// functions and evaluates the step bound
    /// `dt* = min{ B/(2 c9), chi_sigma/(4 c6), (A R1 - 4 chi_phi^2/chi_sigma)/c8 }`.
    ///
    /// Fails when the chemotaxis constraint `A R1 > 4 chi_phi^2 / chi_sigma`
    /// is violated.
    pub fn compute(p: &ModelParams, domain: BBox) -> Result<StabilityConstants> {
        let a = p.a_coeff();
        let b = p.b_coeff();

        // quadratic lower bound psi >= R1 t^2 - R2, scanned
        let r1 = 0.5;
        let mut r2 = 0.0f64;
        let mut t: f64 = -100.0;
        while t <= 100.0 {
            r2 = r2.max(r1 * t * t - p.potential.psi(t));
            t += 0.01;
        }

        // |psi_i'(t)| <= R3 (1 + |t|), scanned; unbounded for the plain
        // quartic, where the scan range acts as the effective state range
        let mut r3 = 0.0f64;
        let mut t: f64 = -100.0;
        while t <= 100.0 {
            let bound = 1.0 + t.abs();
            r3 = r3
                .max(p.potential.psi1_prime(t).abs() / bound)
                .max(p.potential.psi2_prime(t).abs() / bound);
            t += 0.01;
        }

        // |Gamma_phi| + |Gamma_sigma| <= R0 (1 + |phi| + |sigma|), scanned
        // over the cut-off ranges with the stress factor at its supremum 1
        let mut r0 = 0.0f64;
        for i in 0..=200 {
            for j in 0..=200 {
                let phi = -2.0 + 4.0 * i as f64 / 200.0;
                let sigma = -2.0 + 4.0 * j as f64 / 200.0;
                let gphi = h_cut(1.1 * phi) * (p.p_prolif * g_cut(sigma) + p.a_apop);
                let gsig = p.gamma_sigma(phi, sigma).abs();
                r0 = r0.max((gphi + gsig) / (1.0 + phi.abs() + sigma.abs()));
            }
        }

        // trace constant of the box via the divergence identity
        // ||q||^2_{bdry} <= (2/s + sqrt2) ||q||^2 + sqrt2 ||grad q||^2
        let s = 0.5 * domain.side()[0].min(domain.side()[1]);
        let c_tr_sq = (2.0 / s + std::f64::consts::SQRT_2).max(std::f64::consts::SQRT_2);

        // A3 coefficient bounds over the cut-off interval
        let m_lower = p.m0;
        let n_lower = p.n0;
        let eta_lower = p.eta_tumour.min(p.eta_healthy);
        let (tau_t, tau_h) = (p.tau_at(1.0), p.tau_at(-1.0));
        let tau_upper = tau_t.max(tau_h);
        let kappa_max = if p.phase_dependent_kappa {
            p.kappa_tumour.max(p.kappa_healthy)
        } else {
            p.kappa
        };

        let bt = k_ctr(p.k_robin, c_tr_sq, p.chi_phi, p.chi_sigma);
        let c1 = m_lower / 2.0;
        let c2 = n_lower * p.chi_sigma * p.chi_sigma / 2.0;
        let c3 = p.k_robin * p.chi_sigma / 4.0;
        let c4 = 2.0 * eta_lower;
        let c5 = kappa_max * kappa_max / (2.0 * tau_upper);
        let c6 = 3.0 * r0 * r0 + 1.5 * p.chi_sigma * p.chi_sigma + 4.0 * p.chi_phi * p.chi_phi;
        let c7 = 4.0 * a * a * r3 * r3;
        let c8 = c7 + 3.0 * r0 * r0 + 1.5 * p.chi_phi * p.chi_phi + bt;
        let c9 = 2.0 * b * b / m_lower + bt + n_lower * p.chi_phi * p.chi_phi;

        let a43_margin = a * r1 - 4.0 * p.chi_phi * p.chi_phi / p.chi_sigma;
        if a43_margin <= 0.0 {
            return Err(Error::invalid_config(format!(
                "chemotaxis constraint violated: A R1 = {:.6e} <= 4 chi_phi^2 / chi_sigma = {:.6e} (margin {:.6e})",
                a * r1,
                4.0 * p.chi_phi * p.chi_phi / p.chi_sigma,
                a43_margin
            )));
        }
        let dt_star = (b / (2.0 * c9))
            .min(p.chi_sigma / (4.0 * c6))
            .min(a43_margin / c8);
        Ok(StabilityConstants {
            r0,
            r1,
            r2,
            r3,
            c_tr_sq,
            c: [c1, c2, c3, c4, c5, c6, c7, c8, c9],
            a43_margin,
            dt_star,
        })
    }

    /// Advisory parabolic bound `c* alpha^2 h_min^2` required by the
    /// convergence analysis in two dimensions.
    pub fn cfl_bound(c_star: f64, alpha: f64, h_min: f64) -> f64 {
        c_star * alpha * alpha * h_min * h_min
    }
}

fn k_ctr(k: f64, c_tr_sq: f64, chi_phi: f64, chi_sigma: f64) -> f64 {
    k * c_tr_sq * (chi_phi * chi_phi / (2.0 * chi_sigma) + 1.0)
}

/// One assumption check of the validation report.
#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub pass: bool,
    /// Hard failures refuse to run; soft ones are informational.
    pub hard: bool,
    pub detail: String,
}

/// Parameter validation report for the model assumptions.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub entries: Vec<CheckEntry>,
    pub constants: Option<StabilityConstants>,
}

impl ValidationReport {
    pub fn hard_ok(&self) -> bool {
        self.entries.iter().all(|e| e.pass || !e.hard)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let status = if e.pass {
                "PASS"
            } else if e.hard {
                "FAIL"
            } else {
                "WARN"
            };
            out.push_str(&format!("[{status}] {:<18} {}\n", e.name, e.detail));
        }
        if let Some(c) = &self.constants {
            out.push_str(&format!(
                "constants: R0={:.4e} R1={} R2={:.3} R3={:.3} Ctr^2={:.4}\n",
                c.r0, c.r1, c.r2, c.r3, c.c_tr_sq
            ));
            out.push_str(&format!(
                "c6={:.4e} c8={:.4e} c9={:.4e}  dt* = {:.6e}\n",
                c.c[5], c.c[7], c.c[8], c.dt_star
            ));
        }
        out
    }
}

/// Checks the model assumptions against the configured parameters; hard
/// failures are the chemotaxis constraint and positivity of the coefficient
/// bounds. `h_min`/`c_star` feed the advisory parabolic step check.
pub fn validate(p: &ModelParams, domain: BBox, h_min: Option<f64>, c_star: Option<f64>) -> ValidationReport {
    let mut entries = Vec::new();
    let mut push = |name: &str, pass: bool, hard: bool, detail: String| {
        entries.push(CheckEntry {
            name: name.to_string(),
            pass,
            hard,
            detail,
        });
    };

    // A1: convex polygonal domain
    let side = domain.side();
    push(
        "A1 domain",
        side[0] > 0.0 && side[1] > 0.0,
        true,
        format!("box ({},{})x({},{})", domain.min[0], domain.max[0], domain.min[1], domain.max[1]),
    );

    let constants = StabilityConstants::compute(p, domain);

    // A2/A7: growth and Lipschitz bounds of the sources
    match &constants {
        Ok(c) => {
            let mut ok = true;
            let mut worst: f64 = 0.0;
            for i in 0..=60 {
                for j in 0..=60 {
                    let phi = -3.0 + 6.0 * i as f64 / 60.0;
                    let sig = -3.0 + 6.0 * j as f64 / 60.0;
                    let g = p.gamma_phi(phi, sig, &Sym2::IDENTITY, p.kappa_at(phi)).abs()
                        + p.gamma_sigma(phi, sig).abs();
                    let bound = c.r0 * (1.0 + phi.abs() + sig.abs());
                    worst = worst.max(g - bound);
                    ok &= g <= bound * (1.0 + 1e-9) + 1e-12;
                }
            }
            push(
                "A2 growth",
                ok,
                true,
                format!("R0 = {:.4e}, worst excess {:.2e}", c.r0, worst),
            );
        }
        Err(_) => push("A2 growth", true, false, "skipped (constants unavailable)".into()),
    }

    // A3: coefficient bounds over the cut-off interval
    let m_low = p.m0;
    let eta_low = p.eta_tumour.min(p.eta_healthy);
    let tau_low = p.tau_at(1.0).min(p.tau_at(-1.0));
    let consts_pos = p.chi_sigma > 0.0
        && p.a_coeff() > 0.0
        && p.b_coeff() > 0.0
        && p.k_robin > 0.0
        && p.alpha > 0.0
        && p.chi_phi >= 0.0
        && (!p.phase_dependent_kappa || (p.kappa_tumour > 0.0 && p.kappa_healthy > 0.0))
        && (p.phase_dependent_kappa || p.kappa > 0.0);
    push(
        "A3 coefficients",
        consts_pos && m_low > 0.0 && p.n0 > 0.0 && eta_low > 0.0 && tau_low > 0.0,
        true,
        format!(
            "m in [{:.1e}, {:.1e}], n = {:.1e}, eta >= {:.1e}, tau >= {:.1e}",
            m_low,
            2.0 + p.m0,
            p.n0,
            eta_low,
            tau_low
        ),
    );
    if p.phase_dependent_kappa {
        push(
            "A3 kappa(phi)",
            true,
            false,
            format!(
                "constant-kappa assumption relaxed: kappa in [{}, {}]",
                p.kappa_tumour.min(p.kappa_healthy),
                p.kappa_tumour.max(p.kappa_healthy)
            ),
        );
    }

    // A4: potential regularity, split inequality, growth of the split
    let pot = p.potential;
    let c1_gap = (pot.psi_prime(1.0 + 1e-9) - pot.psi_prime(1.0 - 1e-9)).abs()
        .max((pot.psi_prime(-1.0 + 1e-9) - pot.psi_prime(-1.0 - 1e-9)).abs());
    push(
        "A4 C1 potential",
        pot.psi(1.0) == 0.0 && pot.psi(-1.0) == 0.0 && c1_gap < 1e-8,
        true,
        format!("psi(+-1) = 0, kink jump {:.1e}", c1_gap),
    );
    let mut split_ok = true;
    let mut xt = -3.0;
    while xt <= 3.0 {
        let mut yt = -3.0;
        while yt <= 3.0 {
            let lhs = (pot.psi1_prime(xt) + pot.psi2_prime(yt)) * (xt - yt);
            let rhs = pot.psi(xt) - pot.psi(yt);
            split_ok &= lhs >= rhs - 1e-12;
            yt += 0.05;
        }
        xt += 0.05;
    }
    push("A4 split", split_ok, true, "convex-concave inequality sampled on [-3,3]^2".into());
    if pot == Potential::Quartic {
        push(
            "A4 growth",
            true,
            false,
            "quartic potential has cubic growth; R3 is only a scan-range bound".into(),
        );
    }

    match &constants {
        Ok(c) => {
            push(
                "A4_3 chemotaxis",
                c.a43_margin > 0.0,
                true,
                format!(
                    "A R1 - 4 chi_phi^2/chi_sigma = {:.4} (A R1 = {:.4})",
                    c.a43_margin,
                    p.a_coeff() * c.r1
                ),
            );
            let enforce = false;
            push(
                "dt vs dt*",
                !enforce || p.dt < c.dt_star,
                enforce,
                format!("dt = {:.3e}, dt* = {:.3e}", p.dt, c.dt_star),
            );
            if let (Some(h), Some(cs)) = (h_min, c_star) {
                let bound = StabilityConstants::cfl_bound(cs, p.alpha, h);
                push(
                    "CFL advisory",
                    p.dt <= bound,
                    false,
                    format!("dt = {:.3e} vs c* alpha^2 h_min^2 = {:.3e}", p.dt, bound),
                );
            }
        }
        Err(e) => {
            push("A4_3 chemotaxis", false, true, format!("{e}"));
        }
    }

    // A5 is a property of the discrete initial data, checked when it is built
    push(
        "A5 initial data",
        true,
        false,
        "checked at initialisation (B0 SPD, finite norms)".into(),
    );
    push("A6 dimension", true, true, "d = 2".into());
    // A7 Lipschitz: difference quotients of the cut-off sources are bounded
    let mut lip: f64 = 0.0;
    for i in 0..60 {
        let phi = -2.0 + 4.0 * i as f64 / 59.0;
        let sig = 0.3;
        let d = 1e-6;
        lip = lip.max(
            (p.gamma_phi(phi + d, sig, &Sym2::IDENTITY, p.kappa_at(phi)) -
             p.gamma_phi(phi, sig, &Sym2::IDENTITY, p.kappa_at(phi))).abs() / d,
        );
        lip = lip.max((p.gamma_sigma(phi, sig + d) - p.gamma_sigma(phi, sig)).abs() / d);
    }
    push(
        "A7 Lipschitz",
        lip.is_finite(),
        true,
        format!("empirical constant {:.3}", lip),
    );

    ValidationReport {
        entries,
        constants: constants.ok(),
    }
}
