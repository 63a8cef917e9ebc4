//! Block Maxwell operators on the macro box and their resolvents.
//!
//! Both scales share one shape: `(u, v)` maps to
//! `(i rot(mu^{-1} v), -i rot(alpha^{-1} u))`. The fine operator samples the
//! oscillatory coefficients at `x/eps`, the homogenized one uses effective
//! tensor fields. The resolvent for `Im E > 0` is a conjugate-gradient solve
//! of the normal equations on the divergence-free subspace, preconditioned
//! per Fourier mode by the exact constant-coefficient inverse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coeff::{CoefficientModel, Side};
use crate::effective::EffectiveTensors;
use crate::error::{CurlhomError, Result};
use crate::field::{weighted_inner, C64, FieldPair, MatrixField, ScalarField};
use crate::grid::{Geometry, Lattice, MacroGrid};
use crate::spectral::SpectralEngine;

/// Which scale the operator lives on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OperatorKind {
    /// Oscillatory coefficients sampled at `x/epsilon`.
    Fine { epsilon: f64 },
    /// Effective-tensor coefficients.
    Homogenized,
}

/// Resolvent output with the measured relative residual.
#[derive(Debug, Clone)]
pub struct ResolventSolution {
    pub state: FieldPair,
    pub residual: f64,
    pub iterations: usize,
    /// Relative residual after each iteration, starting at the initial one.
    pub history: Vec<f64>,
}

/// Block curl operator with spatially varying SPD weights.
pub struct MaxwellOperator {
    grid: MacroGrid,
    geom: Geometry,
    alpha: MatrixField,
    mu: MatrixField,
    kind: OperatorKind,
    eng: SpectralEngine,
}

impl std::fmt::Debug for MaxwellOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaxwellOperator")
            .field("grid", &self.grid)
            .field("kind", &self.kind)
            .finish_non_exhaustive()
    }
}

impl MaxwellOperator {
    /// Fine-scale operator with coefficients sampled at `x/epsilon`.
    ///
    /// Refuses grids with fewer than 8 nodes per oscillation period on any
    /// axis; coarser sampling aliases the coefficient.
    pub fn assemble_fine(
        model: &CoefficientModel,
        lattice: &Lattice,
        epsilon: f64,
        fine: &MacroGrid,
    ) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(CurlhomError::Config("epsilon must be positive".into()));
        }
        if !lattice.is_diagonal() {
            return Err(CurlhomError::Config(
                "fine operator assembly needs an axis-aligned cell lattice".into(),
            ));
        }
        if (model.support_radius - fine.support_radius()).abs() > 1e-12 {
            return Err(CurlhomError::Config(format!(
                "model support radius {} does not match the grid's {}",
                model.support_radius,
                fine.support_radius()
            )));
        }
        let geom = fine.geometry();
        for d in 0..3 {
            let period = epsilon * lattice.basis()[d][d];
            let nodes_per_period = period / geom.spacing(d);
            if nodes_per_period < 8.0 - 1e-9 {
                return Err(CurlhomError::UnderResolved {
                    axis: d,
                    actual: nodes_per_period,
                    required: (8.0 * fine.side() / period).ceil() as usize,
                });
            }
        }
        let alpha = model.sample_oscillatory(Side::Electric, epsilon, &geom, lattice)?;
        let mu = model.sample_oscillatory(Side::Magnetic, epsilon, &geom, lattice)?;
        Ok(Self {
            grid: fine.clone(),
            eng: SpectralEngine::new(&geom),
            geom,
            alpha,
            mu,
            kind: OperatorKind::Fine { epsilon },
        })
    }

    /// Homogenized operator built from effective tensor fields.
    pub fn homogenized(tensors: &EffectiveTensors) -> Self {
        let geom = tensors.macro_grid.geometry();
        Self {
            grid: tensors.macro_grid.clone(),
            eng: SpectralEngine::new(&geom),
            geom,
            alpha: tensors.lambda(Side::Electric).clone(),
            mu: tensors.lambda(Side::Magnetic).clone(),
            kind: OperatorKind::Homogenized,
        }
    }

    /// Constant-identity media, the exactly solvable baseline.
    pub fn identity(grid: &MacroGrid) -> Self {
        let geom = grid.geometry();
        Self {
            grid: grid.clone(),
            eng: SpectralEngine::new(&geom),
            alpha: MatrixField::identity(&geom),
            mu: MatrixField::identity(&geom),
            geom,
            kind: OperatorKind::Homogenized,
        }
    }

    pub fn grid(&self) -> &MacroGrid {
        &self.grid
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn engine(&self) -> &SpectralEngine {
        &self.eng
    }

    pub fn alpha(&self) -> &MatrixField {
        &self.alpha
    }

    pub fn mu(&self) -> &MatrixField {
        &self.mu
    }

    /// Norm in the coefficient-weighted pair product of this operator.
    pub fn weighted_norm(&self, p: &FieldPair) -> f64 {
        crate::field::weighted_norm(p, &self.alpha, &self.mu)
    }

    fn check_pair(&self, s: &FieldPair) -> Result<()> {
        if *s.geom() != self.geom {
            return Err(CurlhomError::Grid(
                "field pair does not live on the operator's grid".into(),
            ));
        }
        Ok(())
    }

    fn check_shift(e: C64) -> Result<()> {
        if !(e.im > 0.0) {
            return Err(CurlhomError::Config(format!(
                "spectral shift must have positive imaginary part, got {e}"
            )));
        }
        Ok(())
    }

    /// Applies the block operator `(i rot(mu^{-1} v), -i rot(alpha^{-1} u))`.
    pub fn apply(&self, s: &FieldPair) -> Result<FieldPair> {
        self.check_pair(s)?;
        Ok(self.apply_raw(s))
    }

    fn apply_raw(&self, s: &FieldPair) -> FieldPair {
        let mut u = self.eng.curl(&self.mu.mul_inv_field(&s.v));
        u.scale(C64::new(0.0, 1.0));
        let mut v = self.eng.curl(&self.alpha.mul_inv_field(&s.u));
        v.scale(C64::new(0.0, -1.0));
        FieldPair { u, v }
    }

    // Adjoint in the plain pair product: multiplication and curl swap order.
    fn adjoint_raw(&self, s: &FieldPair) -> FieldPair {
        let mut u = self.alpha.mul_inv_field(&self.eng.curl(&s.v));
        u.scale(C64::new(0.0, 1.0));
        let mut v = self.mu.mul_inv_field(&self.eng.curl(&s.u));
        v.scale(C64::new(0.0, -1.0));
        FieldPair { u, v }
    }

    fn shifted(&self, s: &FieldPair, e: C64) -> FieldPair {
        let mut out = self.apply_raw(s);
        out.add_scaled(-e, s);
        out
    }

    fn shifted_adjoint(&self, r: &FieldPair, e: C64) -> FieldPair {
        let mut out = self.adjoint_raw(r);
        out.add_scaled(-e.conj(), r);
        out
    }

    fn leray_pair(&self, p: &mut FieldPair) {
        self.eng.leray(&mut p.u);
        self.eng.leray(&mut p.v);
    }

    /// Per-mode inverse of the identity-media normal operator
    /// `|k|^2 + |E|^2 - 2 Re(E) M_k`, followed by the leray projection. The
    /// denominator factors as `((|k| - Re E)^2 + (Im E)^2) ((|k| + Re E)^2 +
    /// (Im E)^2)`, positive whenever `Im E != 0`.
    fn precondition(&self, g: &FieldPair, e: C64) -> FieldPair {
        let mut u = g.u.clone();
        let mut v = g.v.clone();
        self.eng.forward_vector(&mut u);
        self.eng.forward_vector(&mut v);
        let ee = e.norm_sqr();
        let bt = 2.0 * e.re;
        self.eng.for_each_mode(|idx, k| {
            let kk = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            let a = kk + ee;
            let den = a * a - bt * bt * kk;
            let uh = u.at(idx);
            let vh = v.at(idx);
            let ku = cross(k, uh);
            let kv = cross(k, vh);
            u.set(
                idx,
                [
                    (a * uh[0] - bt * kv[0]) / den,
                    (a * uh[1] - bt * kv[1]) / den,
                    (a * uh[2] - bt * kv[2]) / den,
                ],
            );
            v.set(
                idx,
                [
                    (a * vh[0] + bt * ku[0]) / den,
                    (a * vh[1] + bt * ku[1]) / den,
                    (a * vh[2] + bt * ku[2]) / den,
                ],
            );
        });
        self.eng.leray_spectrum_in_place(&mut u);
        self.eng.leray_spectrum_in_place(&mut v);
        self.eng.inverse_vector(&mut u);
        self.eng.inverse_vector(&mut v);
        FieldPair { u, v }
    }

    /// Solves `(op - E) s = f` for `Im E > 0` on the divergence-free
    /// subspace; `f` is projected there first.
    pub fn resolvent_solve(
        &self,
        f: &FieldPair,
        e: C64,
        tol: f64,
        max_iter: usize,
    ) -> Result<ResolventSolution> {
        Self::check_shift(e)?;
        self.check_pair(f)?;
        let mut rhs = f.clone();
        self.leray_pair(&mut rhs);
        let fnorm = rhs.l2_norm();
        if fnorm == 0.0 {
            return Ok(ResolventSolution {
                state: FieldPair::zeros(&self.geom),
                residual: 0.0,
                iterations: 0,
                history: vec![0.0],
            });
        }
        self.run_cgnr(&rhs, fnorm, e, tol, max_iter, "maxwell resolvent")
    }

    // Preconditioned CG on the normal equations, everything kept inside the
    // divergence-free subspace: the operator maps it to itself and the
    // preconditioner re-projects, so no extra projections are needed.
    fn run_cgnr(
        &self,
        rhs: &FieldPair,
        scale: f64,
        e: C64,
        tol: f64,
        max_iter: usize,
        stage: &'static str,
    ) -> Result<ResolventSolution> {
        let debug = std::env::var_os("CURLHOM_DEBUG").is_some();
        let one = C64::new(1.0, 0.0);
        let mut s = FieldPair::zeros(&self.geom);
        let mut r = rhs.clone();
        let mut relres = 1.0;
        let mut history = vec![relres];
        let mut g = self.shifted_adjoint(&r, e);
        let mut z = self.precondition(&g, e);
        let mut rho = g.inner(&z).re;
        let mut p = z.clone();
        let mut iterations = 0;
        let mut converged = relres <= tol;
        while !converged && iterations < max_iter {
            iterations += 1;
            let w = self.shifted(&p, e);
            let wn2 = w.inner(&w).re;
            if !(wn2 > 0.0) || !(rho > 0.0) {
                break;
            }
            let step = rho / wn2;
            s.add_scaled(C64::new(step, 0.0), &p);
            r.add_scaled(C64::new(-step, 0.0), &w);
            relres = r.l2_norm() / scale;
            if debug {
                eprintln!("{stage}: iter {iterations} relres {relres:.3e}");
            }
            if relres <= tol {
                // refresh the residual before declaring victory; restart the
                // direction set from it if round-off drift hid a gap
                let mut rt = rhs.clone();
                rt.add_scaled(-one, &self.shifted(&s, e));
                relres = rt.l2_norm() / scale;
                r = rt;
                history.push(relres);
                if relres <= tol {
                    converged = true;
                    break;
                }
                g = self.shifted_adjoint(&r, e);
                z = self.precondition(&g, e);
                rho = g.inner(&z).re;
                p = z.clone();
                continue;
            }
            history.push(relres);
            g = self.shifted_adjoint(&r, e);
            z = self.precondition(&g, e);
            let rho_next = g.inner(&z).re;
            let beta = rho_next / rho;
            rho = rho_next;
            p.scale(C64::new(beta, 0.0));
            p.add_scaled(one, &z);
        }
        if !converged && relres > tol {
            return Err(CurlhomError::SolverStalled {
                stage,
                iterations,
                residual: relres,
                target: tol,
            });
        }
        self.leray_pair(&mut s);
        Ok(ResolventSolution {
            state: s,
            residual: relres,
            iterations,
            history,
        })
    }

    /// Solves `(op - E) s = f` with prescribed divergences `div u = g_u`,
    /// `div v = g_v` instead of zero.
    ///
    /// The gradient lift `grad(laplace^{-1} g)` carries the divergence; the
    /// remainder is a plain resolvent solve. The data must be compatible:
    /// zero-mean `g`, and `f - (op - E) lift` divergence-free to a couple of
    /// orders above the solve tolerance.
    pub fn solve_with_divergence(
        &self,
        f: &FieldPair,
        g_u: &ScalarField,
        g_v: &ScalarField,
        e: C64,
        tol: f64,
        max_iter: usize,
    ) -> Result<ResolventSolution> {
        Self::check_shift(e)?;
        self.check_pair(f)?;
        for g in [g_u, g_v] {
            if g.geom != self.geom {
                return Err(CurlhomError::Grid(
                    "divergence data does not live on the operator's grid".into(),
                ));
            }
            let m = g.mean().norm();
            if m > 1e-10 * g.l2_norm().max(1e-300) {
                return Err(CurlhomError::Config(format!(
                    "divergence data must have zero mean, got {m:.3e}"
                )));
            }
        }
        let lift = FieldPair {
            u: self.eng.grad(&self.eng.poisson_inverse(g_u)),
            v: self.eng.grad(&self.eng.poisson_inverse(g_v)),
        };
        let mut lift_defect = 0.0f64;
        for (w, g) in [(&lift.u, g_u), (&lift.v, g_v)] {
            let mut d = self.eng.div(w);
            d.add_scaled(C64::new(-1.0, 0.0), g);
            lift_defect = lift_defect.max(d.l2_norm());
        }
        let mut rhs = f.clone();
        rhs.add_scaled(C64::new(-1.0, 0.0), &self.shifted(&lift, e));
        let raw = rhs.l2_norm();
        let scale = f.l2_norm().max(raw);
        let mut proj = rhs.clone();
        self.leray_pair(&mut proj);
        let mut off = rhs.clone();
        off.add_scaled(C64::new(-1.0, 0.0), &proj);
        let compat_tol = (100.0 * tol).max(1e-9);
        let defect = (off.l2_norm() + lift_defect) / scale.max(1e-300);
        if defect > compat_tol {
            return Err(CurlhomError::DivergenceMismatch {
                defect,
                tol: compat_tol,
            });
        }
        let pnorm = proj.l2_norm();
        let inner = if pnorm == 0.0 {
            ResolventSolution {
                state: FieldPair::zeros(&self.geom),
                residual: 0.0,
                iterations: 0,
                history: vec![0.0],
            }
        } else {
            self.run_cgnr(&proj, pnorm, e, tol, max_iter, "divergence-lifted resolvent")?
        };
        let mut state = inner.state;
        state.add_scaled(C64::new(1.0, 0.0), &lift);
        let mut res = f.clone();
        res.add_scaled(C64::new(-1.0, 0.0), &self.shifted(&state, e));
        Ok(ResolventSolution {
            state,
            residual: res.l2_norm() / scale.max(1e-300),
            iterations: inner.iterations,
            history: inner.history,
        })
    }

    /// Worst relative symmetry defect of the operator in its weighted pair
    /// product over seeded random divergence-free pairs.
    pub fn selfadjointness_defect(&self, trials: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..trials.max(1) {
            let mut p = random_pair(&self.geom, &mut rng);
            let mut q = random_pair(&self.geom, &mut rng);
            self.leray_pair(&mut p);
            self.leray_pair(&mut q);
            let mp = self.apply_raw(&p);
            let mq = self.apply_raw(&q);
            let lhs = weighted_inner(&mp, &q, &self.alpha, &self.mu);
            let rhs = weighted_inner(&p, &mq, &self.alpha, &self.mu);
            let denom = self.weighted_norm(&p) * self.weighted_norm(&q);
            if denom > 0.0 {
                worst = worst.max((lhs - rhs).norm() / denom);
            }
        }
        worst
    }
}

fn cross(k: [f64; 3], a: [C64; 3]) -> [C64; 3] {
    [
        k[1] * a[2] - k[2] * a[1],
        k[2] * a[0] - k[0] * a[2],
        k[0] * a[1] - k[1] * a[0],
    ]
}

fn draw(rng: &mut impl Rng) -> C64 {
    C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

fn random_pair(geom: &Geometry, rng: &mut impl Rng) -> FieldPair {
    let mut p = FieldPair::zeros(geom);
    for idx in 0..geom.len() {
        p.u.set(idx, [draw(rng), draw(rng), draw(rng)]);
        p.v.set(idx, [draw(rng), draw(rng), draw(rng)]);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effective::effective_fields;
    use crate::field::VectorField;
    use crate::grid::CellGrid;
    use std::f64::consts::TAU;

    const I: C64 = C64::new(0.0, 1.0);

    fn grid(side: f64, radius: f64, n: usize) -> MacroGrid {
        MacroGrid::new(side, radius, [n, n, n]).unwrap()
    }

    fn laminate_fine(n: usize, side: f64, radius: f64, eps: f64) -> MaxwellOperator {
        let model = CoefficientModel::laminate(0, radius);
        MaxwellOperator::assemble_fine(&model, &Lattice::unit_cube(), eps, &grid(side, radius, n))
            .unwrap()
    }

    fn rel_err(got: &FieldPair, want: &FieldPair) -> f64 {
        let mut d = got.clone();
        d.add_scaled(C64::new(-1.0, 0.0), want);
        d.l2_norm() / want.l2_norm()
    }

    fn divergence_defect(op: &MaxwellOperator, p: &FieldPair) -> f64 {
        let eng = op.engine();
        let d = eng.div(&p.u).l2_norm().max(eng.div(&p.v).l2_norm());
        d / p.l2_norm().max(1e-300)
    }

    #[test]
    fn apply_zero_and_output_stays_divergence_free() {
        let op = MaxwellOperator::identity(&grid(2.0, 0.75, 8));
        let zero = FieldPair::zeros(&op.geom);
        assert_eq!(op.apply(&zero).unwrap().l2_norm(), 0.0);

        // output of the block curl is divergence-free even for rough input
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_pair(&op.geom, &mut rng);
        let out = op.apply(&p).unwrap();
        assert!(divergence_defect(&op, &out) < 1e-11);
    }

    #[test]
    fn single_mode_curl_matches_hand_derivative() {
        let side = 2.0;
        let op = MaxwellOperator::identity(&grid(side, 0.75, 16));
        let k = TAU / side;
        let s = FieldPair {
            u: VectorField::from_fn(&op.geom, |x| {
                [
                    C64::new((k * x[2]).cos(), 0.0),
                    C64::new(0.0, 0.0),
                    C64::new(0.0, 0.0),
                ]
            }),
            v: VectorField::zeros(&op.geom),
        };
        let out = op.apply(&s).unwrap();
        assert!(out.u.max_abs() < 1e-12);
        let want = VectorField::from_fn(&op.geom, |x| {
            [
                C64::new(0.0, 0.0),
                C64::new(0.0, k * (k * x[2]).sin()),
                C64::new(0.0, 0.0),
            ]
        });
        let mut d = out.v.clone();
        d.add_scaled(C64::new(-1.0, 0.0), &want);
        assert!(d.max_abs() < 1e-12);
    }

    #[test]
    fn identity_resolvent_matches_per_mode_inversion() {
        let side = 2.0;
        let op = MaxwellOperator::identity(&grid(side, 0.75, 16));
        let k = TAU / side;
        let f = FieldPair {
            u: VectorField::from_fn(&op.geom, |x| {
                [(I * (k * x[2])).exp(), C64::new(0.0, 0.0), C64::new(0.0, 0.0)]
            }),
            v: VectorField::zeros(&op.geom),
        };
        for e in [I, C64::new(0.4, 1.3)] {
            let sol = op.resolvent_solve(&f, e, 1e-12, 50).unwrap();
            // per-mode inverse: s = (M_k + E) f / (|k|^2 - E^2)
            let den = C64::new(k * k, 0.0) - e * e;
            let want = FieldPair {
                u: VectorField::from_fn(&op.geom, |x| {
                    [e * (I * (k * x[2])).exp() / den, C64::new(0.0, 0.0), C64::new(0.0, 0.0)]
                }),
                v: VectorField::from_fn(&op.geom, |x| {
                    [C64::new(0.0, 0.0), k * (I * (k * x[2])).exp() / den, C64::new(0.0, 0.0)]
                }),
            };
            assert!(rel_err(&sol.state, &want) < 1e-10, "shift {e}");
            // the per-mode preconditioner is exact for identity media
            assert!(sol.iterations <= 2, "iterations {}", sol.iterations);
            assert!(sol.residual <= 1e-12);
        }
    }

    #[test]
    fn fine_laminate_resolvent_recovers_manufactured_state() {
        let op = laminate_fine(16, 2.0, 0.75, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut s = random_pair(&op.geom, &mut rng);
        op.leray_pair(&mut s);
        let f = op.shifted(&s, I);
        let sol = op.resolvent_solve(&f, I, 1e-11, 400).unwrap();
        assert!(sol.residual <= 1e-11);
        assert!(rel_err(&sol.state, &s) < 1e-8);
        assert!(divergence_defect(&op, &sol.state) < 1e-10);
    }

    #[test]
    fn selfadjoint_in_weighted_product_on_all_media() {
        let ident = MaxwellOperator::identity(&grid(2.0, 0.75, 12));
        assert!(ident.selfadjointness_defect(2, 5) < 1e-11);

        let fine = laminate_fine(64, 1.0, 0.375, 0.125);
        assert!(fine.selfadjointness_defect(2, 7) < 1e-9);

        let model = CoefficientModel::laminate(0, 0.75);
        let cell = CellGrid::new(Lattice::unit_cube(), [32, 4, 4]).unwrap();
        let tensors =
            effective_fields(&model, &grid(2.0, 0.75, 6), &cell, 1e-11, 4000).unwrap();
        let hom = MaxwellOperator::homogenized(&tensors);
        assert!(hom.selfadjointness_defect(2, 9) < 1e-9);
    }

    #[test]
    fn resolvent_bound_and_first_identity_hold() {
        let op = laminate_fine(16, 2.0, 0.75, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut f = random_pair(&op.geom, &mut rng);
        op.leray_pair(&mut f);
        let e1 = I;
        let e2 = C64::new(0.5, 2.0);
        let s1 = op.resolvent_solve(&f, e1, 1e-11, 600).unwrap();
        let s2 = op.resolvent_solve(&f, e2, 1e-11, 600).unwrap();
        // weighted resolvent bound, 1/Im E
        let fw = op.weighted_norm(&f);
        assert!(op.weighted_norm(&s1.state) <= fw * (1.0 + 1e-8));
        assert!(op.weighted_norm(&s2.state) <= fw / 2.0 * (1.0 + 1e-8));
        // first resolvent identity
        let nested = op.resolvent_solve(&s2.state, e1, 1e-11, 600).unwrap();
        let mut lhs = s1.state.clone();
        lhs.add_scaled(C64::new(-1.0, 0.0), &s2.state);
        let mut rhs = nested.state.clone();
        rhs.scale(e1 - e2);
        let mut d = lhs.clone();
        d.add_scaled(C64::new(-1.0, 0.0), &rhs);
        assert!(d.l2_norm() / lhs.l2_norm() < 1e-8);
    }

    #[test]
    fn divergence_lift_solve_matches_manufactured() {
        let op = laminate_fine(16, 2.0, 0.75, 1.0);
        let eng = op.engine();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut t = random_pair(&op.geom, &mut rng);
        op.leray_pair(&mut t);
        // add gradient parts so the target carries prescribed divergences
        for w in [&mut t.u, &mut t.v] {
            let noise = ScalarField::from_fn(&op.geom, |_| C64::new(0.0, 0.0));
            let mut phi = noise;
            for idx in 0..op.geom.len() {
                phi.data[idx] = draw(&mut rng);
            }
            let lift = eng.grad(&eng.poisson_inverse(&phi));
            w.add_scaled(C64::new(1.0, 0.0), &lift);
        }
        let g_u = eng.div(&t.u);
        let g_v = eng.div(&t.v);
        assert!(g_u.l2_norm() > 1e-3);
        let f = op.shifted(&t, I);
        let sol = op.solve_with_divergence(&f, &g_u, &g_v, I, 1e-11, 600).unwrap();
        assert!(rel_err(&sol.state, &t) < 1e-8);
        assert!(sol.residual < 1e-9);
        let mut du = eng.div(&sol.state.u);
        du.add_scaled(C64::new(-1.0, 0.0), &g_u);
        assert!(du.l2_norm() / g_u.l2_norm() < 1e-9);

        // inconsistent divergence data is refused
        let mut bad = g_u.clone();
        bad.scale(C64::new(2.0, 0.0));
        let err = op.solve_with_divergence(&f, &bad, &g_v, I, 1e-11, 600).unwrap_err();
        assert!(matches!(err, CurlhomError::DivergenceMismatch { .. }));

        // nonzero mean has no periodic lift
        let mut offset = g_u.clone();
        for idx in 0..op.geom.len() {
            offset.data[idx] += C64::new(1.0, 0.0);
        }
        let err = op.solve_with_divergence(&f, &offset, &g_v, I, 1e-11, 600).unwrap_err();
        assert!(matches!(err, CurlhomError::Config(_)));
    }

    #[test]
    fn assembly_and_shift_gates() {
        let model = CoefficientModel::laminate(0, 0.75);
        let cube = Lattice::unit_cube();
        let g = grid(2.0, 0.75, 16);
        // 16 nodes over a box of side 2 resolve a period of 1/8 far too coarsely
        let err = MaxwellOperator::assemble_fine(&model, &cube, 0.125, &g).unwrap_err();
        assert!(matches!(err, CurlhomError::UnderResolved { axis: 0, .. }));
        assert!(matches!(
            MaxwellOperator::assemble_fine(&model, &cube, 0.0, &g).unwrap_err(),
            CurlhomError::Config(_)
        ));
        let skewed = Lattice::new([[1.0, 0.2, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(
            MaxwellOperator::assemble_fine(&model, &skewed, 1.0, &g).unwrap_err(),
            CurlhomError::Config(_)
        ));
        let smaller = CoefficientModel::laminate(0, 0.5);
        assert!(matches!(
            MaxwellOperator::assemble_fine(&smaller, &cube, 1.0, &g).unwrap_err(),
            CurlhomError::Config(_)
        ));

        let op = MaxwellOperator::identity(&g);
        let f = FieldPair::zeros(&op.geom);
        for e in [C64::new(1.0, 0.0), C64::new(0.3, -0.2)] {
            assert!(matches!(
                op.resolvent_solve(&f, e, 1e-10, 10).unwrap_err(),
                CurlhomError::Config(_)
            ));
        }
        let other = FieldPair::zeros(&grid(2.0, 0.75, 8).geometry());
        assert!(matches!(
            op.apply(&other).unwrap_err(),
            CurlhomError::Grid(_)
        ));
    }
}
