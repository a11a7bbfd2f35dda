//! Per-step assembly of the four subsystems of the decoupled scheme:
//! the nonlinear Cahn-Hilliard pair (phi, mu), the nutrient equation, the
//! Taylor-Hood saddle for (v, p) and the linear tensor system for B.
//!
//! Time-derivative, relaxation, source and Robin terms are mass-lumped;
//! everything else uses the degree-4 element rule. Element loops run in
//! fixed-size chunks merged in element order, so assembly is deterministic
//! for any thread count.

use rayon::prelude::*;

use crate::error::Error;
use crate::fespace::{
    self, edge_table, lumped_mass, p1_consistent_mass, p1_stiffness, Coeff, EdgeTable, ElemGeom,
    LumpedMass, VelocitySpace, TRI_DEG4,
};
use crate::matfun::Sym2;
use crate::mesh::Mesh;
use crate::model::ModelParams;
use crate::sparse::{Coo, Csr};
use crate::Result;

/// Assembled structures tied to one mesh: lumped and consistent P1 mass,
/// unit stiffness, edge table and the reduced velocity space.
pub struct Spaces {
    pub lumped: LumpedMass,
    pub mass: Csr,
    pub stiff_unit: Csr,
    pub edges: EdgeTable,
    pub vspace: VelocitySpace,
}

impl Spaces {
    pub fn build(mesh: &Mesh) -> Result<Spaces> {
        let edges = edge_table(mesh);
        let vspace = VelocitySpace::new(mesh, &edges);
        Ok(Spaces {
            lumped: lumped_mass(mesh),
            mass: p1_consistent_mass(mesh),
            stiff_unit: p1_stiffness(mesh, Coeff::Const(1.0))?,
            edges,
            vspace,
        })
    }
}

/// Linear system `A x = rhs`.
pub struct LinearBlock {
    pub a: Csr,
    pub rhs: Vec<f64>,
}

const CHUNK: usize = 256;

struct ChunkOut {
    coo: Coo,
    rhs: Vec<(u32, f64)>,
}

/// Runs `f` over all elements in fixed chunks and merges the outputs in
/// element order (deterministic for any thread count).
fn assemble_elements<F>(ntris: usize, nrows: usize, ncols: usize, f: F) -> (Coo, Vec<f64>)
where
    F: Fn(usize, &mut Coo, &mut Vec<(u32, f64)>) + Sync,
{
    let nchunks = ntris.div_ceil(CHUNK);
    let outs: Vec<ChunkOut> = (0..nchunks)
        .into_par_iter()
        .map(|ci| {
            let mut coo = Coo::new(nrows, ncols);
            let mut rhs = Vec::new();
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(ntris);
            for t in lo..hi {
                f(t, &mut coo, &mut rhs);
            }
            ChunkOut { coo, rhs }
        })
        .collect();
    let mut coo = Coo::new(nrows, ncols);
    let mut rhs = vec![0.0; nrows];
    for out in outs {
        coo.append(&out.coo);
        for (i, v) in out.rhs {
            rhs[i as usize] += v;
        }
    }
    (coo, rhs)
}

/// `c_i = int f v . grad(lambda_i)` for a P1 field `f` and P2 velocity `v`.
pub fn scalar_convection(mesh: &Mesh, spaces: &Spaces, f_nodal: &[f64], v_full: &[f64]) -> Vec<f64> {
    let nv = mesh.num_vertices();
    let (_, rhs) = assemble_elements(mesh.num_triangles(), nv, nv, |t, _, rhs| {
        let g = ElemGeom::of(mesh, t);
        let tv = mesh.triangle(t);
        let nodes = spaces.vspace.local_nodes(mesh, &spaces.edges, t);
        for (bary, w) in TRI_DEG4 {
            let sh = fespace::p2_values(bary);
            let mut vq = [0.0f64; 2];
            for (k, &n) in nodes.iter().enumerate() {
                vq[0] += sh[k] * v_full[2 * n];
                vq[1] += sh[k] * v_full[2 * n + 1];
            }
            let fq = bary[0] * f_nodal[tv[0]] + bary[1] * f_nodal[tv[1]] + bary[2] * f_nodal[tv[2]];
            let scale = w * g.area * fq;
            for i in 0..3 {
                let dot = vq[0] * g.grad_l[i][0] + vq[1] * g.grad_l[i][1];
                rhs.push((tv[i] as u32, scale * dot));
            }
        }
    });
    rhs
}

// ---------------------------------------------------------------------------
// Cahn-Hilliard block
// ---------------------------------------------------------------------------

/// Nonlinear residual and Jacobian of the coupled (phi, mu) system with the
/// convex part of the potential implicit. Unknown layout: [phi; mu].
pub struct ChBlock<'a> {
    mesh: &'a Mesh,
    lumped: &'a LumpedMass,
    p: &'a ModelParams,
    dt: f64,
    a_coeff: f64,
    b_coeff: f64,
    phi_old: &'a [f64],
    sigma_star: &'a [f64],
    kappa_star: Vec<f64>,
    b_star: Vec<Sym2>,
    /// Extra chemical-potential term of the phase-dependent elasticity
    /// variant, (kappa_1 - kappa_-1)/4 tr(B - ln B) per vertex.
    variant_mu: Vec<f64>,
    k_m: Csr,
    stiff_unit: &'a Csr,
    conv: Vec<f64>,
}

impl<'a> ChBlock<'a> {
    /// Builds the block from previous-step fields; `sigma_star`, `b_star`
    /// and `v_star` are the sweep-available values of the other subsystems.
    pub fn new(
        mesh: &'a Mesh,
        spaces: &'a Spaces,
        p: &'a ModelParams,
        dt: f64,
        phi_old: &'a [f64],
        sigma_star: &'a [f64],
        b_star_comp: &[Vec<f64>; 3],
        v_star: &[f64],
    ) -> Result<ChBlock<'a>> {
        let nv = mesh.num_vertices();
        if phi_old.len() != nv || sigma_star.len() != nv {
            return Err(Error::invalid_state("field length does not match mesh"));
        }
        let mobility: Vec<f64> = phi_old.iter().map(|&f| p.mobility_at(f)).collect();
        let k_m = p1_stiffness(mesh, Coeff::Nodal(&mobility))?;
        let conv = scalar_convection(mesh, spaces, phi_old, v_star);
        let kappa_star: Vec<f64> = phi_old.iter().map(|&f| p.kappa_at(f)).collect();
        let b_star: Vec<Sym2> = (0..nv)
            .map(|v| Sym2::new(b_star_comp[0][v], b_star_comp[1][v], b_star_comp[2][v]))
            .collect();
        let mut variant_mu = vec![0.0; nv];
        if p.phase_dependent_kappa {
            let dk = 0.25 * (p.kappa_tumour - p.kappa_healthy);
            for v in 0..nv {
                let b = b_star[v];
                let tr = b
                    .ln()
                    .map(|l| b.trace() - l.trace())
                    .unwrap_or(f64::INFINITY);
                variant_mu[v] = dk * tr;
            }
        }
        Ok(ChBlock {
            mesh,
            lumped: &spaces.lumped,
            p,
            dt,
            a_coeff: p.a_coeff(),
            b_coeff: p.b_coeff(),
            phi_old,
            sigma_star,
            kappa_star,
            b_star,
            variant_mu,
            k_m,
            stiff_unit: &spaces.stiff_unit,
            conv,
        })
    }

    pub fn unknowns(&self) -> usize {
        2 * self.mesh.num_vertices()
    }

    /// Residual of the coupled pair at (phi, mu), written into `out`.
    pub fn residual(&self, phi: &[f64], mu: &[f64], out: &mut [f64]) {
        let nv = self.mesh.num_vertices();
        let kmu = self.k_m.apply(mu);
        let kphi = self.stiff_unit.apply(phi);
        let pot = self.p.potential;
        for v in 0..nv {
            let w = self.lumped.w[v];
            let gamma = self.p.gamma_phi(
                phi[v],
                self.sigma_star[v],
                &self.b_star[v],
                self.kappa_star[v],
            );
            out[v] = w * ((phi[v] - self.phi_old[v]) / self.dt - gamma) + kmu[v] - self.conv[v];
            out[nv + v] = w
                * (-mu[v]
                    + self.a_coeff * (pot.psi1_prime(phi[v]) + pot.psi2_prime(self.phi_old[v]))
                    - self.p.chi_phi * self.sigma_star[v]
                    + self.variant_mu[v])
                + self.b_coeff * kphi[v];
        }
    }

    /// Exact Jacobian at `phi` (the mu-equation is linear in mu).
    pub fn jacobian(&self, phi: &[f64]) -> Csr {
        let nv = self.mesh.num_vertices();
        let mut coo = Coo::with_capacity(2 * nv, 2 * nv, self.k_m.nnz() + self.stiff_unit.nnz() + 3 * nv);
        let pot = self.p.potential;
        for v in 0..nv {
            let w = self.lumped.w[v];
            let dgamma = self.p.gamma_phi_dphi(
                phi[v],
                self.sigma_star[v],
                &self.b_star[v],
                self.kappa_star[v],
            );
            coo.push(v, v, w * (1.0 / self.dt - dgamma));
            coo.push(nv + v, v, w * self.a_coeff * pot.psi1_second(phi[v]));
            coo.push(nv + v, nv + v, -w);
        }
        for r in 0..nv {
            let (cols, vals) = self.k_m.row(r);
            for (c, val) in cols.iter().zip(vals) {
                coo.push(r, nv + *c as usize, *val);
            }
            let (cols, vals) = self.stiff_unit.row(r);
            for (c, val) in cols.iter().zip(vals) {
                coo.push(nv + r, *c as usize, self.b_coeff * *val);
            }
        }
        coo.to_csr()
    }
}

// ---------------------------------------------------------------------------
// Nutrient equation
// ---------------------------------------------------------------------------

/// Linear system for sigma^n: lumped time term, implicitly linearized
/// consumption (clamp state frozen at the previous sigma), diffusive flux
/// against `chi_sigma sigma - chi_phi phi`, explicit convection and the
/// lumped Robin boundary term.
#[allow(clippy::too_many_arguments)]
pub fn assemble_nutrient(
    mesh: &Mesh,
    spaces: &Spaces,
    p: &ModelParams,
    dt: f64,
    phi_old: &[f64],
    phi_new: &[f64],
    sigma_old: &[f64],
    v_star: &[f64],
    sigma_infty: &[f64],
) -> Result<LinearBlock> {
    let nv = mesh.num_vertices();
    let n_field: Vec<f64> = phi_old.iter().map(|&f| p.n_at(f)).collect();
    let k_n = p1_stiffness(mesh, Coeff::Nodal(&n_field))?;
    let conv = scalar_convection(mesh, spaces, sigma_old, v_star);
    let mut coo = Coo::with_capacity(nv, nv, k_n.nnz() + 2 * nv);
    let mut rhs = vec![0.0; nv];
    for v in 0..nv {
        let w = spaces.lumped.w[v];
        let wb = spaces.lumped.wb[v];
        let mut diag = w / dt;
        // consumption C h(phi^n) g(sigma): linear inside the clamp, frozen
        // at the bound outside
        let ch = p.c_consume * crate::model::h_cut(phi_new[v]);
        if sigma_old[v] > 1.0 {
            rhs[v] -= w * ch;
        } else if sigma_old[v] >= 0.0 {
            diag += w * ch;
        }
        diag += p.k_robin * wb;
        coo.push(v, v, diag);
        rhs[v] += w * sigma_old[v] / dt + conv[v] + p.k_robin * wb * sigma_infty[v];
    }
    let kphi = k_n.apply(phi_new);
    for r in 0..nv {
        let (cols, vals) = k_n.row(r);
        for (c, val) in cols.iter().zip(vals) {
            coo.push(r, *c as usize, p.chi_sigma * *val);
        }
        rhs[r] += p.chi_phi * kphi[r];
    }
    Ok(LinearBlock {
        a: coo.to_csr(),
        rhs,
    })
}

// ---------------------------------------------------------------------------
// Taylor-Hood saddle
// ---------------------------------------------------------------------------

/// Assembly options for the momentum/continuity saddle.
pub struct SaddleOpts<'a> {
    /// 1/dt for the evolution equation, 0 for steady Stokes.
    pub time_coeff: f64,
    /// Full previous velocity for the time term (None = zero).
    pub v_old: Option<&'a [f64]>,
    /// Full convecting velocity of the skew pair (None = Stokes).
    pub conv_vel: Option<&'a [f64]>,
    /// Nodal viscosity I_h[eta(phi)].
    pub eta: &'a [f64],
}

/// Right-hand forcing of the momentum equation.
pub enum SaddleForcing<'a> {
    /// Coupled-run forcing built from the other fields.
    Fields {
        kappa: &'a [f64],
        b: &'a [Vec<f64>; 3],
        phi_old: &'a [f64],
        sigma_old: &'a [f64],
        mu_new: &'a [f64],
        phi_new: &'a [f64],
        sigma_new: &'a [f64],
        chi_phi: f64,
        chi_sigma: f64,
        /// (kappa_1 - kappa_-1)/4 of the phase-dependent variant (0 = off).
        variant_coeff: f64,
        /// Nodal I_h[tr(B - ln B)] when the variant is on.
        trace_b: Option<&'a [f64]>,
    },
    /// Manufactured body force, integrated with a refined composite rule.
    Analytic {
        force: &'a (dyn Fn([f64; 2]) -> [f64; 2] + Sync),
        quad_level: u32,
    },
}

/// Saddle system over [v_reduced; p; lambda] where the scalar multiplier
/// lambda enforces the zero mean of the pressure.
pub struct SaddleBlock {
    pub a: Csr,
    pub rhs: Vec<f64>,
    pub n_vred: usize,
    pub n_p: usize,
}

pub fn assemble_saddle(
    mesh: &Mesh,
    spaces: &Spaces,
    opts: &SaddleOpts,
    forcing: &SaddleForcing,
) -> Result<SaddleBlock> {
    let nv = mesh.num_vertices();
    if opts.eta.len() != nv {
        return Err(Error::invalid_state("viscosity field length mismatch"));
    }
    let vs = &spaces.vspace;
    let nr = vs.n_reduced();
    let np = nv;
    let n = nr + np + 1;

    let (coo, mut rhs) = assemble_elements(mesh.num_triangles(), n, n, |t, coo, rhs| {
        let g = ElemGeom::of(mesh, t);
        let tv = mesh.triangle(t);
        let nodes = vs.local_nodes(mesh, &spaces.edges, t);
        let red: Vec<[Option<usize>; 2]> = nodes
            .iter()
            .map(|&node| {
                let mut r = [None, None];
                for comp in 0..2 {
                    let idx = vs.reduced_of_full[2 * node + comp];
                    if idx != u32::MAX {
                        r[comp] = Some(idx as usize);
                    }
                }
                r
            })
            .collect();
        let mut a_local = [[0.0f64; 12]; 12]; // (node, comp) = 2*k + comp
        let mut f_local = [0.0f64; 12];
        let mut d_local = [[0.0f64; 12]; 3]; // pressure row x velocity col

        for (bary, wq) in TRI_DEG4 {
            let w = wq * g.area;
            let sh = fespace::p2_values(bary);
            let gr = fespace::p2_grads(bary, &g.grad_l);
            let eta_q = bary[0] * opts.eta[tv[0]] + bary[1] * opts.eta[tv[1]] + bary[2] * opts.eta[tv[2]];
            // convecting velocity at the point
            let mut vc = [0.0f64; 2];
            if let Some(cv) = opts.conv_vel {
                for (k, &node) in nodes.iter().enumerate() {
                    vc[0] += sh[k] * cv[2 * node];
                    vc[1] += sh[k] * cv[2 * node + 1];
                }
            }
            let mut vold_q = [0.0f64; 2];
            if let Some(vo) = opts.v_old {
                for (k, &node) in nodes.iter().enumerate() {
                    vold_q[0] += sh[k] * vo[2 * node];
                    vold_q[1] += sh[k] * vo[2 * node + 1];
                }
            }
            for i in 0..6 {
                for j in 0..6 {
                    let mass = opts.time_coeff * sh[i] * sh[j];
                    let lap = gr[i][0] * gr[j][0] + gr[i][1] * gr[j][1];
                    let skew = if opts.conv_vel.is_some() {
                        0.5 * ((vc[0] * gr[j][0] + vc[1] * gr[j][1]) * sh[i]
                            - (vc[0] * gr[i][0] + vc[1] * gr[i][1]) * sh[j])
                    } else {
                        0.0
                    };
                    for a in 0..2 {
                        // same-component part
                        a_local[2 * i + a][2 * j + a] += w * (mass + skew + eta_q * lap);
                        // deviatoric coupling of 2 eta D(u):D(w)
                        for b in 0..2 {
                            a_local[2 * i + a][2 * j + b] += w * eta_q * gr[j][a] * gr[i][b];
                        }
                    }
                }
                if opts.v_old.is_some() {
                    for a in 0..2 {
                        f_local[2 * i + a] += w * opts.time_coeff * vold_q[a] * sh[i];
                    }
                }
            }
            // pressure coupling: D[q][j, b] = int d_b(psi_j) lambda_q
            for q in 0..3 {
                for j in 0..6 {
                    for b in 0..2 {
                        d_local[q][2 * j + b] += w * bary[q] * gr[j][b];
                    }
                }
            }
            // forcing
            match forcing {
                SaddleForcing::Fields {
                    kappa,
                    b,
                    phi_old,
                    sigma_old,
                    mu_new,
                    phi_new,
                    sigma_new,
                    chi_phi,
                    chi_sigma,
                    variant_coeff,
                    trace_b,
                } => {
                    let lin = |f: &[f64]| bary[0] * f[tv[0]] + bary[1] * f[tv[1]] + bary[2] * f[tv[2]];
                    let grad_p1 = |f: &[f64]| {
                        let mut gv = [0.0f64; 2];
                        for k in 0..3 {
                            gv[0] += f[tv[k]] * g.grad_l[k][0];
                            gv[1] += f[tv[k]] * g.grad_l[k][1];
                        }
                        gv
                    };
                    let kq = lin(kappa);
                    // kappa (B - I) at the quadrature point
                    let bq = [lin(&b[0]) - 1.0, lin(&b[1]), lin(&b[2]) - 1.0];
                    let gmu = grad_p1(mu_new);
                    let gphi = grad_p1(phi_new);
                    let gsig = grad_p1(sigma_new);
                    let phiq = lin(phi_old);
                    let sigq = lin(sigma_old);
                    let chem = [
                        phiq * gmu[0] + sigq * (chi_sigma * gsig[0] - chi_phi * gphi[0]),
                        phiq * gmu[1] + sigq * (chi_sigma * gsig[1] - chi_phi * gphi[1]),
                    ];
                    let mut extra = [0.0f64; 2];
                    if let Some(tb) = trace_b {
                        let gtb = grad_p1(tb);
                        extra = [
                            variant_coeff * phiq * gtb[0],
                            variant_coeff * phiq * gtb[1],
                        ];
                    }
                    for i in 0..6 {
                        // -(kappa (B - I)) : grad w, row a: sum_l [k(B-I)]_{a l} d_l psi_i
                        let sxx = kq * bq[0];
                        let sxy = kq * bq[1];
                        let syy = kq * bq[2];
                        f_local[2 * i] += w * (-(sxx * gr[i][0] + sxy * gr[i][1])
                            - chem[0] * sh[i]
                            + extra[0] * sh[i]);
                        f_local[2 * i + 1] += w * (-(sxy * gr[i][0] + syy * gr[i][1])
                            - chem[1] * sh[i]
                            + extra[1] * sh[i]);
                    }
                }
                SaddleForcing::Analytic { .. } => {}
            }
        }
        if let SaddleForcing::Analytic { force, quad_level } = forcing {
            for (bary, wq) in fespace::tri_deg4_composite(*quad_level) {
                let w = wq * g.area;
                let sh = fespace::p2_values(bary);
                let fv = force(g.point(bary));
                for i in 0..6 {
                    f_local[2 * i] += w * fv[0] * sh[i];
                    f_local[2 * i + 1] += w * fv[1] * sh[i];
                }
            }
        }

        // scatter: momentum rows
        for i in 0..6 {
            for a in 0..2 {
                let Some(ri) = red[i][a] else { continue };
                for j in 0..6 {
                    for b in 0..2 {
                        if let Some(rj) = red[j][b] {
                            let v = a_local[2 * i + a][2 * j + b];
                            if v != 0.0 {
                                coo.push(ri, rj, v);
                            }
                        }
                    }
                }
                // -D^T p
                for q in 0..3 {
                    let v = d_local[q][2 * i + a];
                    if v != 0.0 {
                        coo.push(ri, nr + tv[q], -v);
                    }
                }
                let fv = f_local[2 * i + a];
                if fv != 0.0 {
                    rhs.push((ri as u32, fv));
                }
            }
        }
        // continuity rows: -D v + lambda column handled globally
        for q in 0..3 {
            for j in 0..6 {
                for b in 0..2 {
                    if let Some(rj) = red[j][b] {
                        let v = d_local[q][2 * j + b];
                        if v != 0.0 {
                            coo.push(nr + tv[q], rj, -v);
                        }
                    }
                }
            }
        }
    });

    let mut coo = coo;
    // zero-mean pressure multiplier: symmetric row/column of lumped weights
    for q in 0..np {
        let w = spaces.lumped.w[q];
        coo.push(nr + q, nr + np, w);
        coo.push(nr + np, nr + q, w);
    }
    rhs[nr + np] = 0.0;
    Ok(SaddleBlock {
        a: coo.to_csr(),
        rhs,
        n_vred: nr,
        n_p: np,
    })
}

/// Pressure-test residuals of the divergence constraint,
/// `r_q = int div(v) lambda_q dx`.
pub fn divergence_residual(mesh: &Mesh, spaces: &Spaces, v_full: &[f64]) -> Vec<f64> {
    let nv = mesh.num_vertices();
    let (_, rhs) = assemble_elements(mesh.num_triangles(), nv, nv, |t, _, rhs| {
        let g = ElemGeom::of(mesh, t);
        let tv = mesh.triangle(t);
        let nodes = spaces.vspace.local_nodes(mesh, &spaces.edges, t);
        for (bary, wq) in TRI_DEG4 {
            let w = wq * g.area;
            let gr = fespace::p2_grads(bary, &g.grad_l);
            let mut div = 0.0;
            for (k, &node) in nodes.iter().enumerate() {
                div += gr[k][0] * v_full[2 * node] + gr[k][1] * v_full[2 * node + 1];
            }
            for q in 0..3 {
                rhs.push((tv[q] as u32, w * div * bary[q]));
            }
        }
    });
    rhs
}

// ---------------------------------------------------------------------------
// Oldroyd-B tensor system
// ---------------------------------------------------------------------------

/// Assembles the linear system for the three components of B^n. Unknown
/// layout: dof = 3 * vertex + comp with comp in {xx, xy, yy}; the xy slot
/// carries the factor-two weight of the symmetric inner product.
#[allow(clippy::too_many_arguments)]
pub fn assemble_oldroyd(
    mesh: &Mesh,
    spaces: &Spaces,
    p: &ModelParams,
    dt: f64,
    phi_old: &[f64],
    sigma_old: &[f64],
    phi_new: &[f64],
    b_old: &[Vec<f64>; 3],
    v_new: &[f64],
    v_old: &[f64],
    lump_products: bool,
) -> Result<LinearBlock> {
    let nv = mesh.num_vertices();
    if phi_old.len() != nv || b_old[0].len() != nv {
        return Err(Error::invalid_state("field length does not match mesh"));
    }
    let n = 3 * nv;
    // E_c : E_c' diagonal weights of the symmetric component basis
    const COMP_W: [f64; 3] = [1.0, 2.0, 1.0];
    // products E_c E_c' as full 2x2 matrices, row-major
    const fn emat(c: usize) -> [[f64; 2]; 2] {
        match c {
            0 => [[1.0, 0.0], [0.0, 0.0]],
            1 => [[0.0, 1.0], [1.0, 0.0]],
            _ => [[0.0, 0.0], [0.0, 1.0]],
        }
    }
    let mut eprod = [[[[0.0f64; 2]; 2]; 3]; 3];
    for c in 0..3 {
        for cp in 0..3 {
            let (ec, ep) = (emat(c), emat(cp));
            for i in 0..2 {
                for k in 0..2 {
                    let mut s = 0.0;
                    for j in 0..2 {
                        s += ec[i][j] * ep[j][k];
                    }
                    eprod[c][cp][i][k] = s;
                }
            }
        }
    }

    let (mut coo, mut rhs) = assemble_elements(mesh.num_triangles(), n, n, |t, coo, rhs| {
        let g = ElemGeom::of(mesh, t);
        let tv = mesh.triangle(t);
        let nodes = spaces.vspace.local_nodes(mesh, &spaces.edges, t);
        // alpha grad B : grad C, componentwise stiffness
        for i in 0..3 {
            for j in 0..3 {
                let lap = g.area
                    * (g.grad_l[i][0] * g.grad_l[j][0] + g.grad_l[i][1] * g.grad_l[j][1]);
                for c in 0..3 {
                    coo.push(3 * tv[i] + c, 3 * tv[j] + c, p.alpha * COMP_W[c] * lap);
                }
            }
        }
        for (bary, wq) in TRI_DEG4 {
            let w = wq * g.area;
            let gr2 = fespace::p2_grads(bary, &g.grad_l);
            // velocity gradient (d v_i / d x_k) and value at the point
            let mut gv = [[0.0f64; 2]; 2];
            let mut vq = [0.0f64; 2];
            let sh = fespace::p2_values(bary);
            for (k, &node) in nodes.iter().enumerate() {
                for i in 0..2 {
                    vq[i] += sh[k] * v_old[2 * node + i];
                    for x in 0..2 {
                        gv[i][x] += gr2[k][x] * v_new[2 * node + i];
                    }
                }
            }
            // -2 grad v : (C B) coupling
            if !lump_products {
                for pl in 0..3 {
                    for ql in 0..3 {
                        let lam = bary[pl] * bary[ql];
                        for c in 0..3 {
                            for cp in 0..3 {
                                let mut s = 0.0;
                                for i in 0..2 {
                                    for k in 0..2 {
                                        s += gv[i][k] * eprod[c][cp][i][k];
                                    }
                                }
                                if s != 0.0 {
                                    coo.push(
                                        3 * tv[pl] + c,
                                        3 * tv[ql] + cp,
                                        -2.0 * w * lam * s,
                                    );
                                }
                            }
                        }
                    }
                }
            } else {
                // lumped variant: -2 grad v : I_h[C B] couples only equal
                // vertices, with int_T lambda_P grad v weights
                for pl in 0..3 {
                    let lam = bary[pl];
                    for c in 0..3 {
                        for cp in 0..3 {
                            let mut s = 0.0;
                            for i in 0..2 {
                                for k in 0..2 {
                                    s += gv[i][k] * eprod[c][cp][i][k];
                                }
                            }
                            if s != 0.0 {
                                coo.push(3 * tv[pl] + c, 3 * tv[pl] + cp, -2.0 * w * lam * s);
                            }
                        }
                    }
                }
            }
            // convection -B : ((v_old . grad) C)
            for pl in 0..3 {
                let vdotg = vq[0] * g.grad_l[pl][0] + vq[1] * g.grad_l[pl][1];
                for ql in 0..3 {
                    let lam = bary[ql];
                    for c in 0..3 {
                        let val = -COMP_W[c] * w * lam * vdotg;
                        if val != 0.0 {
                            coo.push(3 * tv[pl] + c, 3 * tv[ql] + c, val);
                        }
                    }
                }
            }
        }
    });

    // lumped time, relaxation and growth terms
    for v in 0..nv {
        let w = spaces.lumped.w[v];
        let kappa_eff = p.kappa_at(phi_new[v]);
        let relax = kappa_eff / p.tau_at(phi_old[v]);
        let growth = p.gamma_b(phi_old[v], sigma_old[v]);
        let a_diag = 1.0 / dt + relax + growth;
        for c in 0..3 {
            coo.push(3 * v + c, 3 * v + c, COMP_W[c] * w * a_diag);
            let identity = if c == 1 { 0.0 } else { 1.0 };
            rhs[3 * v + c] += COMP_W[c] * w * (b_old[c][v] / dt + relax * identity);
        }
    }

    Ok(LinearBlock {
        a: coo.to_csr(),
        rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_macro_mesh, BBox};
    use crate::sparse::dense_solve;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_setup(n: usize) -> (Mesh, Spaces, ModelParams) {
        let mesh = build_macro_mesh(BBox::square(-5.0, 5.0), n).unwrap();
        let spaces = Spaces::build(&mesh).unwrap();
        (mesh, spaces, ModelParams::default())
    }

    fn b_identity(nv: usize) -> [Vec<f64>; 3] {
        [vec![1.0; nv], vec![0.0; nv], vec![1.0; nv]]
    }

    #[test]
    fn ch_residual_lumped_time_term() {
        // single-element residual of the time term is (area/3) dphi / dt
        let (mesh, spaces, p) = small_setup(1);
        let nv = mesh.num_vertices();
        let phi_old = vec![1.0; nv];
        let sigma = vec![0.0; nv];
        let b = b_identity(nv);
        let v = vec![0.0; spaces.vspace.n_full];
        let dt = 0.25;
        let ch = ChBlock::new(&mesh, &spaces, &p, dt, &phi_old, &sigma, &b, &v).unwrap();
        let mut phi = phi_old.clone();
        phi[0] += 0.1;
        let mu = vec![0.0; nv];
        let mut out = vec![0.0; 2 * nv];
        ch.residual(&phi, &mu, &mut out);
        let expect = spaces.lumped.w[0] * 0.1 / dt;
        assert!((out[0] - expect).abs() < 1e-12 * expect.abs());
    }

    #[test]
    fn ch_stationary_pure_phase() {
        // phi = 1, sigma = 0, v = 0: residual vanishes at (phi, mu) = (1, 0)
        let (mesh, spaces, p) = small_setup(2);
        let nv = mesh.num_vertices();
        let phi_old = vec![1.0; nv];
        let sigma = vec![0.0; nv];
        let b = b_identity(nv);
        let v = vec![0.0; spaces.vspace.n_full];
        let ch = ChBlock::new(&mesh, &spaces, &p, p.dt, &phi_old, &sigma, &b, &v).unwrap();
        let mu = vec![0.0; nv];
        let mut out = vec![0.0; 2 * nv];
        ch.residual(&phi_old, &mu, &mut out);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-12);
    }

    #[test]
    fn ch_jacobian_matches_finite_differences() {
        // central finite differences on the 4-element mesh with random state
        let (mesh, spaces, p) = small_setup(1);
        let nv = mesh.num_vertices();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phi_old: Vec<f64> = (0..nv).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let sigma: Vec<f64> = (0..nv).map(|_| rng.gen_range(0.1..0.9)).collect();
        let b = b_identity(nv);
        let mut v = vec![0.0; spaces.vspace.n_full];
        for x in v.iter_mut() {
            *x = rng.gen_range(-0.1..0.1);
        }
        let ch = ChBlock::new(&mesh, &spaces, &p, p.dt, &phi_old, &sigma, &b, &v).unwrap();
        let phi: Vec<f64> = (0..nv).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let mu: Vec<f64> = (0..nv).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jac = ch.jacobian(&phi).to_dense();
        let m = 2 * nv;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for col in 0..m {
            let h = 1e-6;
            let mut xp = [phi.clone(), mu.clone()].concat();
            let mut xm = xp.clone();
            xp[col] += h;
            xm[col] -= h;
            let mut rp = vec![0.0; m];
            let mut rm = vec![0.0; m];
            ch.residual(&xp[..nv], &xp[nv..], &mut rp);
            ch.residual(&xm[..nv], &xm[nv..], &mut rm);
            for row in 0..m {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                worst = worst.max((jac[row][col] - fd).abs());
                scale = scale.max(fd.abs());
            }
        }
        assert!(worst <= 1e-6 * scale.max(1.0), "worst {worst}, scale {scale}");
    }

    #[test]
    fn nutrient_conserves_constant_without_flux() {
        // K = 0, Gamma = 0, v = 0, chi_phi = 0: constants are stationary
        let (mesh, spaces, mut p) = small_setup(2);
        p.k_robin = 0.0;
        p.chi_phi = 0.0;
        p.c_consume = 0.0;
        let nv = mesh.num_vertices();
        let phi = vec![-1.0; nv];
        let sigma_old = vec![0.7; nv];
        let v = vec![0.0; spaces.vspace.n_full];
        let sig_inf = vec![1.0; nv];
        let blk =
            assemble_nutrient(&mesh, &spaces, &p, p.dt, &phi, &phi, &sigma_old, &v, &sig_inf)
                .unwrap();
        let x = dense_solve(&blk.a.to_dense(), &blk.rhs).unwrap();
        for v in &x {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn nutrient_robin_row_lumping() {
        // boundary vertex with two incident edges of length l gets K*l on
        // the diagonal and K*l*sigma_inf on the right-hand side
        let (mesh, spaces, mut p) = small_setup(2);
        p.c_consume = 0.0;
        let nv = mesh.num_vertices();
        let phi = vec![-1.0; nv];
        let sigma_old = vec![0.0; nv];
        let v = vec![0.0; spaces.vspace.n_full];
        let sig_inf = vec![2.5; nv];
        let dt = 1.0;
        let blk =
            assemble_nutrient(&mesh, &spaces, &p, dt, &phi, &phi, &sigma_old, &v, &sig_inf)
                .unwrap();
        let mut p0 = p.clone();
        p0.k_robin = 0.0;
        let blk0 =
            assemble_nutrient(&mesh, &spaces, &p0, dt, &phi, &phi, &sigma_old, &v, &sig_inf)
                .unwrap();
        let d = blk.a.diagonal();
        let d0 = blk0.a.diagonal();
        // a non-corner boundary vertex has two incident edges of length 5
        // at n = 2, so the Robin term adds K * 5 and K * 5 * sigma_inf
        let mut checked = false;
        for vtx in 0..nv {
            let wb = spaces.lumped.wb[vtx];
            if wb > 0.0 && (wb - 5.0).abs() < 1e-12 {
                let add = p.k_robin * 5.0;
                assert!((d[vtx] - d0[vtx] - add).abs() < 1e-9 * add);
                assert!((blk.rhs[vtx] - blk0.rhs[vtx] - add * 2.5).abs() < 1e-9 * add * 2.5);
                checked = true;
            }
        }
        assert!(checked);
    }

    #[test]
    fn saddle_zero_forcing_gives_zero_solution() {
        let (mesh, spaces, p) = small_setup(2);
        let nv = mesh.num_vertices();
        let eta: Vec<f64> = vec![p.eta_at(0.0); nv];
        let zero = vec![0.0; nv];
        let b = b_identity(nv);
        let kappa = vec![p.kappa; nv];
        let opts = SaddleOpts {
            time_coeff: 1.0 / p.dt,
            v_old: None,
            conv_vel: None,
            eta: &eta,
        };
        let forcing = SaddleForcing::Fields {
            kappa: &kappa,
            b: &b,
            phi_old: &zero,
            sigma_old: &zero,
            mu_new: &zero,
            phi_new: &zero,
            sigma_new: &zero,
            chi_phi: p.chi_phi,
            chi_sigma: p.chi_sigma,
            variant_coeff: 0.0,
            trace_b: None,
        };
        let blk = assemble_saddle(&mesh, &spaces, &opts, &forcing).unwrap();
        let x = dense_solve(&blk.a.to_dense(), &blk.rhs).unwrap();
        for v in &x {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn skew_convection_is_antisymmetric() {
        let (mesh, spaces, _) = small_setup(2);
        let nv = mesh.num_vertices();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut v_old = vec![0.0; spaces.vspace.n_full];
        for x in v_old.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        // eta -> 0 and time_coeff = 0 isolates the skew pair
        let eta = vec![1e-30; nv];
        let zero = vec![0.0; nv];
        let b = b_identity(nv);
        let kappa = vec![0.0; nv];
        let opts = SaddleOpts {
            time_coeff: 0.0,
            v_old: None,
            conv_vel: Some(&v_old),
            eta: &eta,
        };
        let forcing = SaddleForcing::Fields {
            kappa: &kappa,
            b: &b,
            phi_old: &zero,
            sigma_old: &zero,
            mu_new: &zero,
            phi_new: &zero,
            sigma_new: &zero,
            chi_phi: 0.0,
            chi_sigma: 0.0,
            variant_coeff: 0.0,
            trace_b: None,
        };
        let blk = assemble_saddle(&mesh, &spaces, &opts, &forcing).unwrap();
        let nr = blk.n_vred;
        for _ in 0..10 {
            let w: Vec<f64> = (0..blk.a.nrows())
                .map(|i| if i < nr { rng.gen_range(-1.0..1.0) } else { 0.0 })
                .collect();
            let aw = blk.a.apply(&w);
            let quad: f64 = w.iter().take(nr).zip(aw.iter().take(nr)).map(|(a, b)| a * b).sum();
            let norm: f64 = w.iter().map(|x| x * x).sum();
            assert!(quad.abs() <= 1e-12 * norm, "w^T N w = {quad}");
        }
    }

    #[test]
    fn oldroyd_constant_state_recurrence() {
        // nodewise oracle B^n = (B_old + dt (kappa/tau) I) / (1 + dt (kappa/tau + gamma))
        let (mesh, spaces, mut p) = small_setup(2);
        p.growth_source = true;
        p.g_growth = 0.5;
        let nv = mesh.num_vertices();
        let phi = vec![1.0; nv];
        let sigma = vec![1.0; nv];
        let b_old = [vec![2.0; nv], vec![0.3; nv], vec![1.0; nv]];
        let v = vec![0.0; spaces.vspace.n_full];
        let dt = 0.5;
        let blk = assemble_oldroyd(
            &mesh, &spaces, &p, dt, &phi, &sigma, &phi, &b_old, &v, &v, false,
        )
        .unwrap();
        let x = dense_solve(&blk.a.to_dense(), &blk.rhs).unwrap();
        let rate = p.kappa_at(1.0) / p.tau_at(1.0); // = 1 for the reference set
        let gamma = p.gamma_b(1.0, 1.0);
        for v in 0..nv {
            for (c, old, idn) in [(0usize, 2.0, 1.0), (1, 0.3, 0.0), (2, 1.0, 1.0)] {
                let expect = (old + dt * rate * idn) / (1.0 + dt * (rate + gamma));
                assert!(
                    (x[3 * v + c] - expect).abs() < 1e-12,
                    "comp {c}: {} vs {expect}",
                    x[3 * v + c]
                );
            }
        }
    }

    #[test]
    fn oldroyd_relaxed_fixed_point() {
        let (mesh, spaces, p) = small_setup(2);
        let nv = mesh.num_vertices();
        let phi = vec![0.3; nv];
        let sigma = vec![0.5; nv];
        let b_old = b_identity(nv);
        let v = vec![0.0; spaces.vspace.n_full];
        let blk = assemble_oldroyd(
            &mesh, &spaces, &p, p.dt, &phi, &sigma, &phi, &b_old, &v, &v, false,
        )
        .unwrap();
        let x = dense_solve(&blk.a.to_dense(), &blk.rhs).unwrap();
        for v in 0..nv {
            assert!((x[3 * v] - 1.0).abs() < 1e-12);
            assert!(x[3 * v + 1].abs() < 1e-12);
            assert!((x[3 * v + 2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_residual_of_divergence_free_field() {
        let (mesh, spaces, _) = small_setup(2);
        // rigid rotation v = (-y, x) is divergence-free but nonzero inside
        let mut v = vec![0.0; spaces.vspace.n_full];
        let et = &spaces.edges;
        for node in 0..spaces.vspace.n_nodes {
            let pt = if node < mesh.num_vertices() {
                mesh.vertex(node)
            } else {
                let e = et.edges[node - mesh.num_vertices()];
                let a = mesh.vertex(e[0] as usize);
                let b = mesh.vertex(e[1] as usize);
                [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
            };
            v[2 * node] = -pt[1];
            v[2 * node + 1] = pt[0];
        }
        let r = divergence_residual(&mesh, &spaces, &v);
        for x in r {
            assert!(x.abs() < 1e-12);
        }
    }
}
