//! Two-scale fields: one cell field per macro node.
//!
//! Macro calculus (`rot_x`, `div_x`) acts across nodes by transposed FFT
//! passes, one macro transform per cell node, so the mixed identities
//! `div_x rot_x = 0` and `mean_y rot_x = rot_x mean_y` hold to round-off.
//! Evaluation at `y = x/eps` is exact trigonometric interpolation of the
//! stored arrays, organized by congruence classes of fine nodes that share
//! one cell coordinate.

use crate::error::{CurlhomError, Result};
use crate::field::{C64, ScalarField, VectorField};
use crate::grid::{Geometry, Lattice};
use crate::spectral::SpectralEngine;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Complex 3-vector field over (macro node, cell node); `None` marks a node
/// where the field is identically zero.
#[derive(Debug, Clone)]
pub struct TwoScaleField {
    pub macro_geom: Geometry,
    pub cell_geom: Geometry,
    nodes: Vec<Option<VectorField>>,
}

/// Scalar companion of [`TwoScaleField`].
#[derive(Debug, Clone)]
pub struct TwoScaleScalar {
    pub macro_geom: Geometry,
    pub cell_geom: Geometry,
    nodes: Vec<Option<ScalarField>>,
}

impl TwoScaleField {
    pub fn zeros(macro_geom: &Geometry, cell_geom: &Geometry) -> Self {
        Self {
            macro_geom: macro_geom.clone(),
            cell_geom: cell_geom.clone(),
            nodes: vec![None; macro_geom.len()],
        }
    }

    pub fn node(&self, idx: usize) -> Option<&VectorField> {
        self.nodes[idx].as_ref()
    }

    pub fn node_mut(&mut self, idx: usize) -> Option<&mut VectorField> {
        self.nodes[idx].as_mut()
    }

    pub fn set_node(&mut self, idx: usize, f: VectorField) {
        debug_assert_eq!(f.geom, self.cell_geom);
        self.nodes[idx] = Some(f);
    }

    pub fn stored_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_some()).count()
    }

    /// Cell mean per macro node as a macro vector field.
    pub fn mean_y(&self) -> VectorField {
        let mut out = VectorField::zeros(&self.macro_geom);
        for (m, n) in self.nodes.iter().enumerate() {
            if let Some(f) = n {
                out.set(m, f.mean());
            }
        }
        out
    }

    /// Norm of `L2(box) x L2(cell)` with midpoint quadrature on both scales.
    pub fn l2_norm(&self) -> f64 {
        let w = self.macro_geom.volume / self.macro_geom.len() as f64;
        let mut s = 0.0;
        for n in self.nodes.iter().flatten() {
            let b = n.l2_norm();
            s += b * b;
        }
        (w * s).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.nodes
            .iter()
            .flatten()
            .map(|n| n.max_abs())
            .fold(0.0, f64::max)
    }

    /// Largest nodal max-norm over macro nodes failing the predicate.
    pub fn max_abs_where(&self, mut keep: impl FnMut(usize) -> bool) -> f64 {
        let mut worst = 0.0f64;
        for (m, n) in self.nodes.iter().enumerate() {
            if let Some(f) = n {
                if keep(m) {
                    worst = worst.max(f.max_abs());
                }
            }
        }
        worst
    }

    pub fn scale(&mut self, a: C64) {
        for n in self.nodes.iter_mut().flatten() {
            n.scale(a);
        }
    }

    /// self += a * x, materializing nodes that were zero here.
    pub fn add_scaled(&mut self, a: C64, x: &Self) {
        debug_assert_eq!(self.macro_geom, x.macro_geom);
        for (n, o) in self.nodes.iter_mut().zip(&x.nodes) {
            if let Some(f) = o {
                match n {
                    Some(g) => g.add_scaled(a, f),
                    None => {
                        let mut g = VectorField::zeros(&self.cell_geom);
                        g.add_scaled(a, f);
                        *n = Some(g);
                    }
                }
            }
        }
    }

    /// Macro curl across nodes: one forward/inverse macro transform per cell
    /// node and component, cross product applied per macro mode.
    pub fn rot_x(&self, macro_eng: &SpectralEngine) -> Self {
        self.macro_pass(macro_eng, |k, f| {
            [
                C64::new(0.0, 1.0) * (k[1] * f[2] - k[2] * f[1]),
                C64::new(0.0, 1.0) * (k[2] * f[0] - k[0] * f[2]),
                C64::new(0.0, 1.0) * (k[0] * f[1] - k[1] * f[0]),
            ]
        })
    }

    /// Macro divergence across nodes, same transposed scheme.
    pub fn div_x(&self, macro_eng: &SpectralEngine) -> TwoScaleScalar {
        debug_assert_eq!(macro_eng.geom, self.macro_geom);
        let nm = self.macro_geom.len();
        let nc = self.cell_geom.len();
        let mut out: Vec<Option<ScalarField>> = (0..nm)
            .map(|_| Some(ScalarField::zeros(&self.cell_geom)))
            .collect();
        let mut lines = [vec![ZERO; nm], vec![ZERO; nm], vec![ZERO; nm]];
        for iy in 0..nc {
            for c in 0..3 {
                for (m, n) in self.nodes.iter().enumerate() {
                    lines[c][m] = n.as_ref().map_or(ZERO, |f| f.comps[c][iy]);
                }
                macro_eng.forward(&mut lines[c]);
            }
            let mut dl = vec![ZERO; nm];
            macro_eng.for_each_mode(|idx, k| {
                let s = k[0] * lines[0][idx] + k[1] * lines[1][idx] + k[2] * lines[2][idx];
                dl[idx] = C64::new(0.0, 1.0) * s;
            });
            macro_eng.inverse(&mut dl);
            for (m, slot) in out.iter_mut().enumerate() {
                slot.as_mut().unwrap().data[iy] = dl[m];
            }
        }
        TwoScaleScalar {
            macro_geom: self.macro_geom.clone(),
            cell_geom: self.cell_geom.clone(),
            nodes: out,
        }
    }

    fn macro_pass(
        &self,
        macro_eng: &SpectralEngine,
        per_mode: impl Fn([f64; 3], [C64; 3]) -> [C64; 3],
    ) -> Self {
        debug_assert_eq!(macro_eng.geom, self.macro_geom);
        let nm = self.macro_geom.len();
        let nc = self.cell_geom.len();
        let mut out: Vec<Option<VectorField>> = (0..nm)
            .map(|_| Some(VectorField::zeros(&self.cell_geom)))
            .collect();
        let mut lines = [vec![ZERO; nm], vec![ZERO; nm], vec![ZERO; nm]];
        for iy in 0..nc {
            for c in 0..3 {
                for (m, n) in self.nodes.iter().enumerate() {
                    lines[c][m] = n.as_ref().map_or(ZERO, |f| f.comps[c][iy]);
                }
                macro_eng.forward(&mut lines[c]);
            }
            let mut ol = [vec![ZERO; nm], vec![ZERO; nm], vec![ZERO; nm]];
            macro_eng.for_each_mode(|idx, k| {
                let f = [lines[0][idx], lines[1][idx], lines[2][idx]];
                let g = per_mode(k, f);
                ol[0][idx] = g[0];
                ol[1][idx] = g[1];
                ol[2][idx] = g[2];
            });
            for c in 0..3 {
                macro_eng.inverse(&mut ol[c]);
                for (m, slot) in out.iter_mut().enumerate() {
                    slot.as_mut().unwrap().comps[c][iy] = ol[c][m];
                }
            }
        }
        Self {
            macro_geom: self.macro_geom.clone(),
            cell_geom: self.cell_geom.clone(),
            nodes: out,
        }
    }

    /// Samples the field at `y = x/eps` on a fine grid over the same box.
    pub fn evaluate(
        &self,
        macro_eng: &SpectralEngine,
        cell_eng: &SpectralEngine,
        lattice: &Lattice,
        epsilon: f64,
        fine: &Geometry,
    ) -> Result<VectorField> {
        let plan = EvaluationPlan::new(&self.macro_geom, &self.cell_geom, lattice, epsilon, fine)?;
        plan.check_budget(self.stored_nodes())?;
        let nm = self.macro_geom.len();
        // cell values of every stored node on the class tensor grid
        let ys = plan.class_fracs();
        let ys_ref = [ys[0].as_slice(), ys[1].as_slice(), ys[2].as_slice()];
        let mut class_vals: Vec<Option<[Vec<C64>; 3]>> = vec![None; nm];
        for (m, n) in self.nodes.iter().enumerate() {
            if let Some(f) = n {
                let mut spec = f.clone();
                cell_eng.forward_vector(&mut spec);
                class_vals[m] = Some(cell_eng.evaluate_vector_on_grid(&spec, ys_ref));
            }
        }
        let mut out = VectorField::zeros(fine);
        let mut line = vec![ZERO; nm];
        let [p0, p1, p2] = plan.stride;
        for c2 in 0..p2 {
            for c1 in 0..p1 {
                for c0 in 0..p0 {
                    let class = (c2 * p1 + c1) * p0 + c0;
                    let xs = plan.class_macro_fracs([c0, c1, c2]);
                    let xs_ref = [xs[0].as_slice(), xs[1].as_slice(), xs[2].as_slice()];
                    for comp in 0..3 {
                        for (m, v) in class_vals.iter().enumerate() {
                            line[m] = v.as_ref().map_or(ZERO, |cv| cv[comp][class]);
                        }
                        macro_eng.forward(&mut line);
                        let vals = macro_eng.evaluate_spectrum_on_grid(&line, xs_ref);
                        plan.scatter(&vals, [c0, c1, c2], &mut out.comps[comp]);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl TwoScaleScalar {
    pub fn zeros(macro_geom: &Geometry, cell_geom: &Geometry) -> Self {
        Self {
            macro_geom: macro_geom.clone(),
            cell_geom: cell_geom.clone(),
            nodes: vec![None; macro_geom.len()],
        }
    }

    pub fn node(&self, idx: usize) -> Option<&ScalarField> {
        self.nodes[idx].as_ref()
    }

    pub fn set_node(&mut self, idx: usize, f: ScalarField) {
        debug_assert_eq!(f.geom, self.cell_geom);
        self.nodes[idx] = Some(f);
    }

    pub fn mean_y(&self) -> ScalarField {
        let mut out = ScalarField::zeros(&self.macro_geom);
        for (m, n) in self.nodes.iter().enumerate() {
            if let Some(f) = n {
                out.data[m] = f.mean();
            }
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        let w = self.macro_geom.volume / self.macro_geom.len() as f64;
        let mut s = 0.0;
        for n in self.nodes.iter().flatten() {
            let b = n.l2_norm();
            s += b * b;
        }
        (w * s).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.nodes
            .iter()
            .flatten()
            .map(|n| n.max_abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&mut self, a: C64) {
        for n in self.nodes.iter_mut().flatten() {
            n.scale(a);
        }
    }

    pub fn add_scaled(&mut self, a: C64, x: &Self) {
        debug_assert_eq!(self.macro_geom, x.macro_geom);
        for (n, o) in self.nodes.iter_mut().zip(&x.nodes) {
            if let Some(f) = o {
                match n {
                    Some(g) => g.add_scaled(a, f),
                    None => {
                        let mut g = ScalarField::zeros(&self.cell_geom);
                        g.add_scaled(a, f);
                        *n = Some(g);
                    }
                }
            }
        }
    }

    /// Scalar variant of [`TwoScaleField::evaluate`].
    pub fn evaluate(
        &self,
        macro_eng: &SpectralEngine,
        cell_eng: &SpectralEngine,
        lattice: &Lattice,
        epsilon: f64,
        fine: &Geometry,
    ) -> Result<ScalarField> {
        let plan = EvaluationPlan::new(&self.macro_geom, &self.cell_geom, lattice, epsilon, fine)?;
        let stored = self.nodes.iter().filter(|n| n.is_some()).count();
        plan.check_budget(stored)?;
        let nm = self.macro_geom.len();
        let ys = plan.class_fracs();
        let ys_ref = [ys[0].as_slice(), ys[1].as_slice(), ys[2].as_slice()];
        let mut class_vals: Vec<Option<Vec<C64>>> = vec![None; nm];
        for (m, n) in self.nodes.iter().enumerate() {
            if let Some(f) = n {
                let mut spec = f.data.clone();
                cell_eng.forward(&mut spec);
                class_vals[m] = Some(cell_eng.evaluate_spectrum_on_grid(&spec, ys_ref));
            }
        }
        let mut out = ScalarField::zeros(fine);
        let mut line = vec![ZERO; nm];
        let [p0, p1, p2] = plan.stride;
        for c2 in 0..p2 {
            for c1 in 0..p1 {
                for c0 in 0..p0 {
                    let class = (c2 * p1 + c1) * p0 + c0;
                    let xs = plan.class_macro_fracs([c0, c1, c2]);
                    let xs_ref = [xs[0].as_slice(), xs[1].as_slice(), xs[2].as_slice()];
                    for (m, v) in class_vals.iter().enumerate() {
                        line[m] = v.as_ref().map_or(ZERO, |cv| cv[class]);
                    }
                    macro_eng.forward(&mut line);
                    let vals = macro_eng.evaluate_spectrum_on_grid(&line, xs_ref);
                    plan.scatter(&vals, [c0, c1, c2], &mut out.data);
                }
            }
        }
        Ok(out)
    }
}

/// Commensurability data of a fine grid against the eps-scaled cell: per
/// axis, the box holds `periods` whole cell periods and each period spans
/// `stride` fine nodes.
#[derive(Debug, Clone)]
pub struct FineSampling {
    pub periods: [usize; 3],
    pub stride: [usize; 3],
}

/// Validates that `fine` samples the oscillation `y = x/eps` commensurately:
/// whole periods per box edge, integer nodes per period, at least 8 of them.
pub fn fine_sampling(fine: &Geometry, lattice: &Lattice, epsilon: f64) -> Result<FineSampling> {
    if !(epsilon > 0.0) {
        return Err(CurlhomError::Config("epsilon must be positive".into()));
    }
    if !lattice.is_diagonal() {
        return Err(CurlhomError::Config(
            "two-scale evaluation needs an axis-aligned cell lattice".into(),
        ));
    }
    let mut periods = [0usize; 3];
    let mut stride = [0usize; 3];
    for d in 0..3 {
        for r in 0..3 {
            if r != d && fine.basis[d][r].abs() > 1e-12 {
                return Err(CurlhomError::Config(
                    "two-scale evaluation needs an axis-aligned box".into(),
                ));
            }
        }
        let side = fine.basis[d][d];
        let period = epsilon * lattice.basis()[d][d];
        let m = side / period;
        if (m - m.round()).abs() > 1e-9 * m.max(1.0) || m.round() < 1.0 {
            return Err(CurlhomError::Incommensurate(format!(
                "axis {d}: box side {side} is not a whole number of periods {period}"
            )));
        }
        let m = m.round() as usize;
        if fine.n[d] % m != 0 {
            return Err(CurlhomError::Incommensurate(format!(
                "axis {d}: {} fine nodes do not split into {m} periods",
                fine.n[d]
            )));
        }
        let p = fine.n[d] / m;
        if p < 8 {
            return Err(CurlhomError::UnderResolved {
                axis: d,
                actual: p as f64,
                required: 8,
            });
        }
        periods[d] = m;
        stride[d] = p;
    }
    Ok(FineSampling { periods, stride })
}

/// Per-axis fractional cell coordinate shared by each congruence class of
/// fine nodes; class `c` on axis `d` covers the fine indices `c + j * stride`.
pub fn class_fractions(
    fine: &Geometry,
    lattice: &Lattice,
    epsilon: f64,
) -> Result<(FineSampling, [Vec<f64>; 3])> {
    let sampling = fine_sampling(fine, lattice, epsilon)?;
    let mut yfrac: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for d in 0..3 {
        let p = sampling.stride[d];
        let base = fine.origin[d] / (epsilon * lattice.basis()[d][d]);
        for c in 0..p {
            yfrac[d].push((base + c as f64 / p as f64).rem_euclid(1.0));
        }
    }
    Ok((sampling, yfrac))
}

/// Worked-out evaluation layout: class cell coordinates, per-class macro
/// coordinates, and the scatter map back into the fine array.
struct EvaluationPlan {
    periods: [usize; 3],
    stride: [usize; 3],
    fine_n: [usize; 3],
    /// fractional cell coordinate of class index c per axis
    yfrac: [Vec<f64>; 3],
}

impl EvaluationPlan {
    fn new(
        macro_geom: &Geometry,
        _cell_geom: &Geometry,
        lattice: &Lattice,
        epsilon: f64,
        fine: &Geometry,
    ) -> Result<Self> {
        for d in 0..3 {
            for r in 0..3 {
                if (fine.basis[d][r] - macro_geom.basis[d][r]).abs() > 1e-12 {
                    return Err(CurlhomError::Grid(
                        "fine grid box does not match the stored macro box".into(),
                    ));
                }
            }
            if (fine.origin[d] - macro_geom.origin[d]).abs() > 1e-12 {
                return Err(CurlhomError::Grid(
                    "fine grid origin does not match the stored macro box".into(),
                ));
            }
        }
        let (sampling, yfrac) = class_fractions(fine, lattice, epsilon)?;
        Ok(Self {
            periods: sampling.periods,
            stride: sampling.stride,
            fine_n: fine.n,
            yfrac,
        })
    }

    fn check_budget(&self, stored: usize) -> Result<()> {
        let classes: usize = self.stride.iter().product();
        // complex entries of the per-node class table, about 50 bytes each
        let entries = stored.saturating_mul(classes).saturating_mul(3);
        if entries > 1 << 25 {
            return Err(CurlhomError::Config(format!(
                "two-scale evaluation would stage {entries} complex entries; \
                 reduce the stored grid or the fine resolution"
            )));
        }
        Ok(())
    }

    fn class_fracs(&self) -> [Vec<f64>; 3] {
        self.yfrac.clone()
    }

    /// Fractional macro coordinates of the fine nodes in one class.
    fn class_macro_fracs(&self, class: [usize; 3]) -> [Vec<f64>; 3] {
        let mut out: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for d in 0..3 {
            let p = self.stride[d];
            let m = self.periods[d];
            for j in 0..m {
                out[d].push((class[d] + j * p) as f64 / self.fine_n[d] as f64);
            }
        }
        out
    }

    /// Writes class values (axis-0 fastest over period indices) into the
    /// strided fine-node positions of the class.
    fn scatter(&self, vals: &[C64], class: [usize; 3], out: &mut [C64]) {
        let [m0, m1, m2] = self.periods;
        let [p0, p1, p2] = self.stride;
        let [n0, n1, _] = self.fine_n;
        debug_assert_eq!(vals.len(), m0 * m1 * m2);
        for j2 in 0..m2 {
            let i2 = class[2] + j2 * p2;
            for j1 in 0..m1 {
                let i1 = class[1] + j1 * p1;
                let row = (i2 * n1 + i1) * n0;
                let src = (j2 * m1 + j1) * m0;
                for j0 in 0..m0 {
                    out[row + class[0] + j0 * p0] = vals[src + j0];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellGrid, MacroGrid, TAU};

    fn setup(nm: usize, nc: usize) -> (MacroGrid, CellGrid, SpectralEngine, SpectralEngine) {
        let mg = MacroGrid::new(2.0, 0.75, [nm; 3]).unwrap();
        let cg = CellGrid::cubic(nc).unwrap();
        let me = SpectralEngine::new(&mg.geometry());
        let ce = SpectralEngine::new(&cg.geometry());
        (mg, cg, me, ce)
    }

    /// Product field P(x) Q(y) with band-limited analytic factors.
    fn product_field(mg: &MacroGrid, cg: &CellGrid) -> TwoScaleField {
        let mgm = mg.geometry();
        let cgm = cg.geometry();
        let mut ts = TwoScaleField::zeros(&mgm, &cgm);
        for m in 0..mgm.len() {
            let x = mgm.node(mgm.coords(m));
            let p = pfac(x, mg.side());
            let mut f = VectorField::from_fn(&cgm, |y| {
                let q = (TAU * y[0]).sin() + 0.5 * (TAU * y[2]).cos();
                [
                    C64::new(q, 0.0),
                    C64::new(0.25 * q, -0.1 * q),
                    C64::new(0.0, 0.5),
                ]
            });
            f.scale(C64::new(p, 0.0));
            ts.set_node(m, f);
        }
        ts
    }

    fn pfac(x: [f64; 3], side: f64) -> f64 {
        (TAU * x[0] / side).cos() + 0.3 * (2.0 * TAU * x[1] / side).sin() + 1.5
    }

    #[test]
    fn div_of_rot_vanishes() {
        let (mg, cg, me, _ce) = setup(8, 6);
        let ts = product_field(&mg, &cg);
        let d = ts.rot_x(&me).div_x(&me);
        assert!(d.max_abs() < 1e-12 * ts.max_abs().max(1.0));
    }

    #[test]
    fn single_cell_column_matches_macro_curl() {
        let (mg, cg, me, _ce) = setup(8, 4);
        let mgm = mg.geometry();
        let cgm = cg.geometry();
        // only cell node 7 is populated, with a smooth macro profile
        let mut ts = TwoScaleField::zeros(&mgm, &cgm);
        let probe = 7usize;
        let mut col = VectorField::zeros(&mgm);
        for m in 0..mgm.len() {
            let x = mgm.node(mgm.coords(m));
            let vals = [
                C64::new(pfac(x, mg.side()), 0.0),
                C64::new((TAU * x[1] / mg.side()).sin(), 0.2),
                C64::new(0.0, pfac([x[2], x[0], x[1]], mg.side())),
            ];
            col.set(m, vals);
            let mut f = VectorField::zeros(&cgm);
            for c in 0..3 {
                f.comps[c][probe] = vals[c];
            }
            ts.set_node(m, f);
        }
        let rot = ts.rot_x(&me);
        let want = me.curl(&col);
        let mut worst = 0.0f64;
        for m in 0..mgm.len() {
            let got = rot.node(m).unwrap();
            for c in 0..3 {
                worst = worst.max((got.comps[c][probe] - want.comps[c][m]).norm());
                // other cell nodes stay empty
                for iy in 0..cgm.len() {
                    if iy != probe {
                        worst = worst.max(got.comps[c][iy].norm());
                    }
                }
            }
        }
        assert!(worst < 1e-12 * col.max_abs());
    }

    #[test]
    fn mean_commutes_with_macro_curl() {
        let (mg, cg, me, _ce) = setup(8, 6);
        let ts = product_field(&mg, &cg);
        let a = ts.rot_x(&me).mean_y();
        let b = me.curl(&ts.mean_y());
        let mut diff = a.clone();
        diff.add_scaled(C64::new(-1.0, 0.0), &b);
        assert!(diff.max_abs() < 1e-12 * a.max_abs().max(1.0));
    }

    #[test]
    fn evaluation_matches_separable_closed_form() {
        let (mg, cg, me, ce) = setup(8, 8);
        let ts = product_field(&mg, &cg);
        let eps = 0.5;
        // 2 / (0.5 * 1) = 4 periods, 16 nodes each
        let fine = MacroGrid::new(2.0, 0.75, [64; 3]).unwrap().geometry();
        let got = ts
            .evaluate(&me, &ce, cg.lattice(), eps, &fine)
            .unwrap();
        let mut worst = 0.0f64;
        for idx in 0..fine.len() {
            let x = fine.node(fine.coords(idx));
            let y = [x[0] / eps, x[1] / eps, x[2] / eps].map(|t| t.rem_euclid(1.0));
            let p = pfac(x, mg.side());
            let q = (TAU * y[0]).sin() + 0.5 * (TAU * y[2]).cos();
            let want = [
                C64::new(p * q, 0.0),
                C64::new(0.25 * p * q, -0.1 * p * q),
                C64::new(0.0, 0.5 * p),
            ];
            for c in 0..3 {
                worst = worst.max((got.comps[c][idx] - want[c]).norm());
            }
        }
        assert!(worst < 1e-11, "pointwise defect {worst:.3e}");
    }

    #[test]
    fn evaluation_agrees_on_shared_nodes_across_resolutions() {
        let (mg, cg, me, ce) = setup(8, 12);
        let ts = product_field(&mg, &cg);
        let eps = 0.5;
        let coarse = MacroGrid::new(2.0, 0.75, [32; 3]).unwrap().geometry();
        let fine = MacroGrid::new(2.0, 0.75, [64; 3]).unwrap().geometry();
        let a = ts
            .evaluate(&me, &ce, cg.lattice(), eps, &coarse)
            .unwrap();
        let b = ts.evaluate(&me, &ce, cg.lattice(), eps, &fine).unwrap();
        let mut worst = 0.0f64;
        for i2 in 0..32 {
            for i1 in 0..32 {
                for i0 in 0..32 {
                    let ia = coarse.index([i0, i1, i2]);
                    let ib = fine.index([2 * i0, 2 * i1, 2 * i2]);
                    for c in 0..3 {
                        worst = worst.max((a.comps[c][ia] - b.comps[c][ib]).norm());
                    }
                }
            }
        }
        assert!(worst < 1e-12 * a.max_abs());
    }

    #[test]
    fn evaluation_refuses_bad_sampling() {
        let (mg, cg, me, ce) = setup(8, 6);
        let ts = product_field(&mg, &cg);
        // 2 / 0.3 is not a whole number of periods
        let fine = MacroGrid::new(2.0, 0.75, [60; 3]).unwrap().geometry();
        match ts.evaluate(&me, &ce, cg.lattice(), 0.3, &fine) {
            Err(CurlhomError::Incommensurate(_)) => {}
            other => panic!("expected incommensurate refusal, got {other:?}"),
        }
        // commensurate but only 4 nodes per period
        let fine = MacroGrid::new(2.0, 0.75, [16; 3]).unwrap().geometry();
        match ts.evaluate(&me, &ce, cg.lattice(), 0.5, &fine) {
            Err(CurlhomError::UnderResolved { .. }) => {}
            other => panic!("expected resolution refusal, got {other:?}"),
        }
    }
}
