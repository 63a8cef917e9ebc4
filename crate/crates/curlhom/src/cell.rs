//! Unit-cell solvers: scalar potentials, correctors, effective tensors, and
//! the constrained curl-div system behind the corrector recurrences.
//!
//! All solves are spectral collocation with Krylov iterations. Convergence is
//! judged on the original equations, never on the normal-equation residual
//! alone, and every reduction is sequential so repeated runs agree bitwise.

use crate::error::{CurlhomError, Result};
use crate::field::{C64, MatrixField, ScalarField, VectorField};
use crate::grid::Geometry;
use crate::spectral::SpectralEngine;

/// Mean of the matrix trace over the cell divided by 3; the scalar scale
/// used by the spectral preconditioners.
pub fn mean_scale(beta: &MatrixField) -> f64 {
    let mut s = 0.0;
    for e in &beta.m {
        s += (e[0] + e[1] + e[2]) / 3.0;
    }
    s / beta.m.len() as f64
}

/// Column `k` of the matrix field as a vector field.
fn matrix_column(beta: &MatrixField, k: usize) -> VectorField {
    let mut out = VectorField::zeros(&beta.geom);
    for (idx, e) in beta.m.iter().enumerate() {
        let col = match k {
            0 => [e[0], e[3], e[4]],
            1 => [e[3], e[1], e[5]],
            _ => [e[4], e[5], e[2]],
        };
        out.set(
            idx,
            [
                C64::new(col[0], 0.0),
                C64::new(col[1], 0.0),
                C64::new(col[2], 0.0),
            ],
        );
    }
    out
}

/// Applies `x -> -div(beta grad x)`.
fn apply_potential_op(eng: &SpectralEngine, beta: &MatrixField, x: &ScalarField) -> ScalarField {
    let g = eng.grad(x);
    let bg = beta.mul_field(&g);
    let mut d = eng.div(&bg);
    d.scale(C64::new(-1.0, 0.0));
    d
}

/// Spectral preconditioner `rhat -> rhat / (beta0 |k|^2)`, zero on the
/// mean and Nyquist modes.
fn precond_potential(eng: &SpectralEngine, beta0: f64, r: &ScalarField) -> ScalarField {
    let mut spec = r.data.clone();
    eng.forward(&mut spec);
    eng.for_each_mode(|idx, k| {
        let kk = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        spec[idx] = if kk > 0.0 {
            spec[idx] / (beta0 * kk)
        } else {
            C64::new(0.0, 0.0)
        };
    });
    eng.inverse(&mut spec);
    ScalarField {
        geom: r.geom.clone(),
        data: spec,
    }
}

/// Preconditioned CG for `-div(beta grad x) = b` on the mean-free subspace.
pub fn solve_potential(
    eng: &SpectralEngine,
    beta: &MatrixField,
    b: &ScalarField,
    x0: Option<&ScalarField>,
    tol: f64,
    max_iter: usize,
) -> Result<(ScalarField, usize)> {
    let beta0 = mean_scale(beta);
    let bnorm = b.l2_norm();
    if bnorm == 0.0 {
        return Ok((ScalarField::zeros(&b.geom), 0));
    }
    let mut x = match x0 {
        Some(g) => g.clone(),
        None => ScalarField::zeros(&b.geom),
    };
    let mut r = b.clone();
    let ax = apply_potential_op(eng, beta, &x);
    r.add_scaled(C64::new(-1.0, 0.0), &ax);
    let mut z = precond_potential(eng, beta0, &r);
    let mut p = z.clone();
    let mut rz = z.inner(&r).re;
    for it in 0..max_iter {
        if r.l2_norm() <= tol * bnorm {
            return Ok((x, it));
        }
        let q = apply_potential_op(eng, beta, &p);
        let pq = p.inner(&q).re;
        if pq <= 0.0 {
            return Err(CurlhomError::SolverStalled {
                stage: "cell potential",
                iterations: it,
                residual: r.l2_norm() / bnorm,
                target: tol,
            });
        }
        let alpha = C64::new(rz / pq, 0.0);
        x.add_scaled(alpha, &p);
        r.add_scaled(-alpha, &q);
        z = precond_potential(eng, beta0, &r);
        let rz_new = z.inner(&r).re;
        let beta_cg = C64::new(rz_new / rz, 0.0);
        rz = rz_new;
        let mut p_new = z.clone();
        p_new.add_scaled(beta_cg, &p);
        p = p_new;
    }
    let residual = r.l2_norm() / bnorm;
    if residual <= tol {
        return Ok((x, max_iter));
    }
    Err(CurlhomError::SolverStalled {
        stage: "cell potential",
        iterations: max_iter,
        residual,
        target: tol,
    })
}

/// Cell-problem output: potentials, correctors, fluxes, effective tensor.
#[derive(Debug, Clone)]
pub struct CellSolution {
    pub potentials: [ScalarField; 3],
    /// `e_k + grad(phi_k)`.
    pub correctors: [VectorField; 3],
    /// `beta (e_k + grad(phi_k))`, the gauge fields of the curl-div solver.
    pub flux: [VectorField; 3],
    /// Symmetrized effective tensor in Voigt order xx,yy,zz,xy,xz,yz.
    pub tensor: [f64; 6],
    /// Largest relative asymmetry removed by the symmetrization.
    pub asymmetry: f64,
    pub iterations: [usize; 3],
}

/// Solves the three cell problems `div(beta (grad phi_k + e_k)) = 0` and
/// assembles correctors and the effective tensor.
pub fn solve_cell(
    eng: &SpectralEngine,
    beta: &MatrixField,
    tol: f64,
    max_iter: usize,
    warm: Option<&CellSolution>,
) -> Result<CellSolution> {
    let geom = &beta.geom;
    let mut potentials = Vec::with_capacity(3);
    let mut correctors = Vec::with_capacity(3);
    let mut flux = Vec::with_capacity(3);
    let mut iterations = [0usize; 3];
    for k in 0..3 {
        // div(beta (grad phi + e_k)) = 0 becomes -div(beta grad phi) = div(beta e_k)
        let col = matrix_column(beta, k);
        let b = eng.div(&col);
        let guess = warm.map(|w| &w.potentials[k]);
        let (phi, iters) = solve_potential(eng, beta, &b, guess, tol, max_iter)?;
        iterations[k] = iters;
        let mut zeta = eng.grad(&phi);
        for idx in 0..geom.len() {
            zeta.comps[k][idx] += 1.0;
        }
        flux.push(beta.mul_field(&zeta));
        correctors.push(zeta);
        potentials.push(phi);
    }
    // tensor[k][p] = |cell|^-1 (beta zeta_p, zeta_k)
    let mut full = [[0.0f64; 3]; 3];
    for k in 0..3 {
        for p in 0..3 {
            full[k][p] = correctors[k].inner(&flux[p]).re / geom.volume;
        }
    }
    let mut asym = 0.0f64;
    let scale = full.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
    for k in 0..3 {
        for p in (k + 1)..3 {
            asym = asym.max((full[k][p] - full[p][k]).abs() / scale.max(1e-300));
        }
    }
    let tensor = [
        full[0][0],
        full[1][1],
        full[2][2],
        0.5 * (full[0][1] + full[1][0]),
        0.5 * (full[0][2] + full[2][0]),
        0.5 * (full[1][2] + full[2][1]),
    ];
    let correctors: [VectorField; 3] = correctors.try_into().unwrap();
    let flux: [VectorField; 3] = flux.try_into().unwrap();
    let potentials: [ScalarField; 3] = potentials.try_into().unwrap();
    Ok(CellSolution {
        potentials,
        correctors,
        flux,
        tensor,
        asymmetry: asym,
        iterations,
    })
}

/// Normalized solvability residuals of the curl-div system: pairings of the
/// curl data against the correctors, and the mean of the divergence data.
pub fn compatibility_residuals(
    f: &VectorField,
    g: &ScalarField,
    correctors: &[VectorField; 3],
) -> ([f64; 3], f64) {
    let fnorm = f.l2_norm();
    let gnorm = g.l2_norm();
    let vol = f.geom.volume;
    let mut pairing = [0.0f64; 3];
    for k in 0..3 {
        let p = correctors[k].inner(f).norm();
        pairing[k] = p / (fnorm * correctors[k].l2_norm()).max(1e-300);
    }
    if fnorm == 0.0 {
        pairing = [0.0; 3];
    }
    let mean = if gnorm == 0.0 {
        0.0
    } else {
        let mut s = C64::new(0.0, 0.0);
        for z in &g.data {
            s += z;
        }
        let w = vol / g.data.len() as f64;
        (s * w).norm() / (gnorm * vol.sqrt())
    };
    (pairing, mean)
}

/// Result of the constrained curl-div solve.
#[derive(Debug, Clone)]
pub struct CurlDivSolve {
    pub w: VectorField,
    pub curl_residual: f64,
    pub div_residual: f64,
    pub gauge_residual: f64,
    pub iterations: usize,
}

struct CurlDivOperator<'a> {
    eng: &'a SpectralEngine,
    beta: &'a MatrixField,
    /// Unit-normalized gauge fields (nodal). Kept exactly as sampled: the
    /// flux fields satisfy `rot(beta^{-1} q) = 0` nodewise, so they span the
    /// kernel of the curl-div pair and pin the solution without perturbing
    /// the residuals. Band-limiting them would break that identity.
    gauge: [VectorField; 3],
    gamma: f64,
    beta0: f64,
}

impl<'a> CurlDivOperator<'a> {
    fn new(eng: &'a SpectralEngine, beta: &'a MatrixField, flux: &[VectorField; 3]) -> Self {
        let beta0 = mean_scale(beta);
        let ell = eng.geom.volume.cbrt();
        let k1 = crate::grid::TAU / ell;
        let gamma = k1 * k1 / (beta0 * beta0);
        let gauge = [0, 1, 2].map(|k| {
            let mut q = flux[k].clone();
            let n = q.l2_norm();
            q.scale(C64::new(1.0 / n.max(1e-300), 0.0));
            q
        });
        Self {
            eng,
            beta,
            gauge,
            gamma,
            beta0,
        }
    }

    /// rot(beta^{-1} w) as a spectrum, given the spectrum of `w`.
    /// Also returns the nodal `w` for reuse.
    fn curl_of(&self, w_s: &VectorField) -> (VectorField, VectorField) {
        let mut w = w_s.clone();
        self.eng.inverse_vector(&mut w);
        let mut t = self.beta.mul_inv_field(&w);
        self.eng.forward_vector(&mut t);
        self.eng.curl_spectrum_in_place(&mut t);
        (t, w)
    }

    /// Normal operator `N w = C*C w + D*D w + gamma^2 K*K w` on spectra.
    fn apply(&self, w_s: &VectorField) -> VectorField {
        let (cw_s, w) = self.curl_of(w_s);
        // C*(Cw) = beta^{-1} rot(Cw)
        let mut rot_cw = cw_s;
        self.eng.curl_spectrum_in_place(&mut rot_cw);
        self.eng.inverse_vector(&mut rot_cw);
        let mut nodal = self.beta.mul_inv_field(&rot_cw);
        // gauge term: gamma^2 sum_k <q_k, w> q_k
        let g2 = self.gamma * self.gamma;
        for k in 0..3 {
            let c = self.gauge[k].inner(&w);
            nodal.add_scaled(c * g2, &self.gauge[k]);
        }
        let mut out = nodal;
        self.eng.forward_vector(&mut out);
        // longitudinal term k (k . w) added in spectral space
        self.eng.for_each_mode(|idx, k| {
            let v = w_s.at(idx);
            let d = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
            let mut o = out.at(idx);
            for c in 0..3 {
                o[c] += k[c] * d;
            }
            out.set(idx, o);
        });
        out
    }

    /// Spectral preconditioner for the normal operator.
    fn precondition(&self, r_s: &VectorField) -> VectorField {
        let mut z = VectorField::zeros(&self.eng.geom);
        let b2 = self.beta0 * self.beta0;
        let g2 = self.gamma * self.gamma;
        self.eng.for_each_mode(|idx, k| {
            let v = r_s.at(idx);
            let kk = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            if kk == 0.0 {
                z.set(idx, [v[0] / g2, v[1] / g2, v[2] / g2]);
            } else {
                let d = (k[0] * v[0] + k[1] * v[1] + k[2] * v[2]) / kk;
                let long = [d * k[0], d * k[1], d * k[2]];
                let mut o = [C64::new(0.0, 0.0); 3];
                for c in 0..3 {
                    o[c] = (b2 * (v[c] - long[c]) + long[c]) / kk;
                }
                z.set(idx, o);
            }
        });
        z
    }
}

/// Spectral (Parseval) inner product of two spectra.
fn spectral_inner(geom: &Geometry, a: &VectorField, b: &VectorField) -> C64 {
    let mut s = C64::new(0.0, 0.0);
    for c in 0..3 {
        for (x, y) in a.comps[c].iter().zip(&b.comps[c]) {
            s += x.conj() * y;
        }
    }
    s * geom.volume
}

/// Solves `rot(beta^{-1} w) = f`, `div w = g`, `<flux_k, w> = 0` by
/// preconditioned CG on the normal equations, stopping on the residuals of
/// the original equations.
pub fn solve_curl_div(
    eng: &SpectralEngine,
    beta: &MatrixField,
    flux: &[VectorField; 3],
    f: &VectorField,
    g: &ScalarField,
    tol: f64,
    max_iter: usize,
    warm: Option<&VectorField>,
) -> Result<CurlDivSolve> {
    let op = CurlDivOperator::new(eng, beta, flux);
    let fnorm = f.l2_norm();
    let gnorm = g.l2_norm();
    let scale = fnorm.max(gnorm);
    if scale == 0.0 {
        return Ok(CurlDivSolve {
            w: VectorField::zeros(&eng.geom),
            curl_residual: 0.0,
            div_residual: 0.0,
            gauge_residual: 0.0,
            iterations: 0,
        });
    }

    // rhs = C* f + D* g = beta^{-1} rot f - grad g, assembled as a spectrum
    let mut rot_f = f.clone();
    eng.forward_vector(&mut rot_f);
    eng.curl_spectrum_in_place(&mut rot_f);
    eng.inverse_vector(&mut rot_f);
    let mut rhs = beta.mul_inv_field(&rot_f);
    eng.forward_vector(&mut rhs);
    let mut g_s = g.data.clone();
    eng.forward(&mut g_s);
    eng.for_each_mode(|idx, k| {
        let ik = C64::new(0.0, 1.0) * g_s[idx];
        let mut v = rhs.at(idx);
        for c in 0..3 {
            v[c] -= ik * k[c];
        }
        rhs.set(idx, v);
    });

    // spectra of the data for residual checks
    let mut f_s = f.clone();
    eng.forward_vector(&mut f_s);

    let mut x = match warm {
        Some(w0) => {
            let mut s = w0.clone();
            eng.forward_vector(&mut s);
            s
        }
        None => VectorField::zeros(&eng.geom),
    };

    let residuals = |x_s: &VectorField| -> (f64, f64, f64, VectorField) {
        let (cw_s, w) = op.curl_of(x_s);
        let mut cr = 0.0f64;
        let mut dr = 0.0f64;
        let vol = eng.geom.volume;
        eng.for_each_mode(|idx, k| {
            let cv = cw_s.at(idx);
            let fv = f_s.at(idx);
            for c in 0..3 {
                cr += (cv[c] - fv[c]).norm_sqr();
            }
            let wv = x_s.at(idx);
            let dv = C64::new(0.0, 1.0) * (k[0] * wv[0] + k[1] * wv[1] + k[2] * wv[2]);
            dr += (dv - g_s[idx]).norm_sqr();
        });
        let mut gr = 0.0f64;
        for k in 0..3 {
            gr = gr.max(op.gauge[k].inner(&w).norm());
        }
        ((vol * cr).sqrt(), (vol * dr).sqrt(), gr, w)
    };

    let mut r = rhs.clone();
    let ax = op.apply(&x);
    r.add_scaled(C64::new(-1.0, 0.0), &ax);
    let mut z = op.precondition(&r);
    let mut p = z.clone();
    let mut rz = spectral_inner(&eng.geom, &z, &r).re;
    let check_every = 5;
    let mut done = None;
    let debug = std::env::var_os("CURLHOM_DEBUG").is_some();
    for it in 0..=max_iter {
        if it % check_every == 0 || it == max_iter {
            let (cr, dr, gr, w) = residuals(&x);
            let wnorm = w.l2_norm().max(1e-300);
            if debug {
                eprintln!(
                    "curl-div it {it}: curl {:.3e} div {:.3e} gauge {:.3e} rz {rz:.3e}",
                    cr / scale,
                    dr / scale,
                    gr / wnorm
                );
            }
            if cr <= tol * scale && dr <= tol * scale && gr <= tol * wnorm.max(scale) {
                done = Some(CurlDivSolve {
                    w,
                    curl_residual: cr / scale,
                    div_residual: dr / scale,
                    gauge_residual: gr / wnorm,
                    iterations: it,
                });
                break;
            }
            if it == max_iter {
                return Err(CurlhomError::SolverStalled {
                    stage: "cell curl-div",
                    iterations: it,
                    residual: (cr.max(dr) / scale).max(gr / wnorm),
                    target: tol,
                });
            }
        }
        let q = op.apply(&p);
        let pq = spectral_inner(&eng.geom, &p, &q).re;
        if pq <= 0.0 {
            return Err(CurlhomError::SolverStalled {
                stage: "cell curl-div",
                iterations: it,
                residual: f64::NAN,
                target: tol,
            });
        }
        let alpha = C64::new(rz / pq, 0.0);
        x.add_scaled(alpha, &p);
        r.add_scaled(-alpha, &q);
        z = op.precondition(&r);
        let rz_new = spectral_inner(&eng.geom, &z, &r).re;
        let beta_cg = C64::new(rz_new / rz, 0.0);
        rz = rz_new;
        let mut p_new = z;
        p_new.add_scaled(beta_cg, &p);
        p = p_new;
    }
    Ok(done.expect("loop exits via break or error"))
}
