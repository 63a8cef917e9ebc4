//! Effective tensors over the macro grid and the nodal corrector multiplier.
//!
//! Each macro node carries a periodic cell problem; its correctors average
//! into a symmetric positive-definite tensor per side. Cell solves are pooled
//! across nodes that share the same cell pattern up to scale, since the
//! potentials are invariant under scaling the coefficient.

use std::collections::HashMap;

use crate::cell::{solve_cell, CellSolution};
use crate::coeff::{CoefficientModel, MaterialLaw, Side};
use crate::error::{CurlhomError, Result};
use crate::field::{
    sym3_eigenvalues, sym3_inv, FieldPair, MatrixField, ScalarField, VectorField,
};
use crate::grid::{CellGrid, MacroGrid};
use crate::spectral::SpectralEngine;
use serde::Serialize;

/// One banked cell solve: potentials of a distinct cell pattern plus the
/// tensor and diagnostics of that solve.
#[derive(Debug, Clone)]
pub struct PooledSolve {
    pub potentials: [ScalarField; 3],
    /// Tensor of the pattern as solved, at scale `solved_scale`.
    pub tensor: [f64; 6],
    pub solved_scale: f64,
    pub asymmetry: f64,
    pub iterations: [usize; 3],
    /// Smallest eigenvalues of `tensor - harmonic` and `arithmetic - tensor`.
    pub bounds_margins: (f64, f64),
}

/// Effective tensor fields with the cell solves that produced them.
#[derive(Debug, Clone)]
pub struct EffectiveTensors {
    pub macro_grid: MacroGrid,
    pub cell_grid: CellGrid,
    pub lambda_u: MatrixField,
    pub lambda_v: MatrixField,
    pool_u: Vec<PooledSolve>,
    pool_v: Vec<PooledSolve>,
    entry_u: Vec<Option<usize>>,
    entry_v: Vec<Option<usize>>,
}

/// Solve metadata aggregated for reports.
#[derive(Debug, Clone, Serialize)]
pub struct TensorProvenance {
    pub macro_nodes: usize,
    pub solved_nodes_u: usize,
    pub solved_nodes_v: usize,
    pub distinct_patterns_u: usize,
    pub distinct_patterns_v: usize,
    pub max_iterations: usize,
    pub max_asymmetry: f64,
    pub min_lower_margin: f64,
    pub min_upper_margin: f64,
}

impl EffectiveTensors {
    pub fn lambda(&self, side: Side) -> &MatrixField {
        match side {
            Side::Electric => &self.lambda_u,
            Side::Magnetic => &self.lambda_v,
        }
    }

    /// Banked solve behind a macro node, `None` where the medium is the
    /// identity.
    pub fn entry(&self, side: Side, node: usize) -> Option<&PooledSolve> {
        let (pool, entry) = match side {
            Side::Electric => (&self.pool_u, &self.entry_u),
            Side::Magnetic => (&self.pool_v, &self.entry_v),
        };
        entry[node].map(|i| &pool[i])
    }

    /// Correctors `e_k + grad(phi_k)` of the banked solve at a node, rebuilt
    /// from the pooled potentials. `None` at identity nodes.
    pub fn correctors_at(
        &self,
        side: Side,
        node: usize,
        eng: &SpectralEngine,
    ) -> Option<[VectorField; 3]> {
        self.entry(side, node)
            .map(|e| correctors_from_potentials(eng, &e.potentials))
    }

    /// Full cell solution at a node given the coefficient sampled there.
    /// Tensor entries come from the assembled field (node-scaled), the rest
    /// from the pooled solve. `None` at identity nodes.
    pub fn node_solution(
        &self,
        side: Side,
        node: usize,
        eng: &SpectralEngine,
        beta: &MatrixField,
    ) -> Option<CellSolution> {
        let pooled = self.entry(side, node)?;
        let correctors = correctors_from_potentials(eng, &pooled.potentials);
        let flux = [0, 1, 2].map(|k| beta.mul_field(&correctors[k]));
        Some(CellSolution {
            potentials: pooled.potentials.clone(),
            correctors,
            flux,
            tensor: *self.lambda(side).entry(node),
            asymmetry: pooled.asymmetry,
            iterations: pooled.iterations,
        })
    }

    pub fn provenance(&self) -> TensorProvenance {
        let stat = |pool: &[PooledSolve]| {
            if pool.is_empty() {
                return (0usize, 0.0f64, 0.0f64, 0.0f64);
            }
            pool.iter().fold((0usize, 0.0f64, f64::MAX, f64::MAX), |a, s| {
                (
                    a.0.max(*s.iterations.iter().max().unwrap()),
                    a.1.max(s.asymmetry),
                    a.2.min(s.bounds_margins.0),
                    a.3.min(s.bounds_margins.1),
                )
            })
        };
        let (it_u, asym_u, lo_u, hi_u) = stat(&self.pool_u);
        let (it_v, asym_v, lo_v, hi_v) = stat(&self.pool_v);
        TensorProvenance {
            macro_nodes: self.entry_u.len(),
            solved_nodes_u: self.entry_u.iter().filter(|e| e.is_some()).count(),
            solved_nodes_v: self.entry_v.iter().filter(|e| e.is_some()).count(),
            distinct_patterns_u: self.pool_u.len(),
            distinct_patterns_v: self.pool_v.len(),
            max_iterations: it_u.max(it_v),
            max_asymmetry: asym_u.max(asym_v),
            min_lower_margin: lo_u.min(lo_v),
            min_upper_margin: hi_u.min(hi_v),
        }
    }
}

fn correctors_from_potentials(
    eng: &SpectralEngine,
    pots: &[ScalarField; 3],
) -> [VectorField; 3] {
    [0, 1, 2].map(|k| {
        let mut z = eng.grad(&pots[k]);
        for v in &mut z.comps[k] {
            *v += 1.0;
        }
        z
    })
}

fn side_law(model: &CoefficientModel, side: Side) -> &MaterialLaw {
    match side {
        Side::Electric => &model.alpha,
        Side::Magnetic => &model.mu,
    }
}

fn sample_side(
    model: &CoefficientModel,
    side: Side,
    x: [f64; 3],
    cell: &CellGrid,
) -> Result<MatrixField> {
    let geom = cell.geometry();
    match side {
        Side::Electric => model.alpha_cell(x, &geom, cell.lattice()),
        Side::Magnetic => model.mu_cell(x, &geom, cell.lattice()),
    }
}

/// Smallest-eigenvalue margins of `tensor` against the harmonic and
/// arithmetic means of the coefficient: `(min eig(T - H), min eig(A - T))`.
/// Both are nonnegative up to tolerance for any admissible cell tensor.
pub fn bounds_margins(beta: &MatrixField, tensor: &[f64; 6]) -> (f64, f64) {
    let n = beta.geom.len() as f64;
    let mut arith = [0.0f64; 6];
    let mut harm_inv = [0.0f64; 6];
    for idx in 0..beta.geom.len() {
        for c in 0..6 {
            arith[c] += beta.entry(idx)[c];
            harm_inv[c] += beta.inv_entry(idx)[c];
        }
    }
    for c in 0..6 {
        arith[c] /= n;
        harm_inv[c] /= n;
    }
    let harm = sym3_inv(&harm_inv).expect("harmonic mean of an SPD field is SPD");
    let mut lower = [0.0f64; 6];
    let mut upper = [0.0f64; 6];
    for c in 0..6 {
        lower[c] = tensor[c] - harm[c];
        upper[c] = arith[c] - tensor[c];
    }
    (sym3_eigenvalues(&lower)[0], sym3_eigenvalues(&upper)[0])
}

/// Solves the cell problems of one side at a single macro point and returns
/// the full solution; the tensor sits in `CellSolution::tensor`.
pub fn effective_at(
    model: &CoefficientModel,
    side: Side,
    x: [f64; 3],
    cell: &CellGrid,
    eng: &SpectralEngine,
    tol: f64,
    max_iter: usize,
) -> Result<CellSolution> {
    if eng.geom != cell.geometry() {
        return Err(CurlhomError::Config(
            "spectral engine grid does not match the cell grid".into(),
        ));
    }
    let beta = sample_side(model, side, x, cell)?;
    solve_cell(eng, &beta, tol, max_iter, None)
}

/// Assembles both effective tensor fields over the macro grid, solving cell
/// problems at every node where the medium differs from the identity and
/// sharing solves between nodes with the same cell pattern up to scale.
pub fn effective_fields(
    model: &CoefficientModel,
    macro_grid: &MacroGrid,
    cell_grid: &CellGrid,
    tol: f64,
    max_iter: usize,
) -> Result<EffectiveTensors> {
    if (macro_grid.support_radius() - model.support_radius).abs() > 1e-12 {
        return Err(CurlhomError::Config(format!(
            "macro grid support radius {} does not match the model's {}",
            macro_grid.support_radius(),
            model.support_radius
        )));
    }
    let geom = macro_grid.geometry();
    let eng = SpectralEngine::new(&cell_grid.geometry());
    let mut sides = Vec::with_capacity(2);
    for side in [Side::Electric, Side::Magnetic] {
        let law = side_law(model, side);
        let mut pool: Vec<PooledSolve> = Vec::new();
        let mut keys: HashMap<u64, usize> = HashMap::new();
        let mut entry = vec![None; geom.len()];
        let mut entries = vec![[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]; geom.len()];
        let mut last: Option<CellSolution> = None;
        for idx in 0..geom.len() {
            let x = geom.node(geom.coords(idx));
            if law.is_identity_at(x, model.support_radius) {
                continue;
            }
            let (scale, key) = law.cell_pool_key(x, model.support_radius);
            let pos = match keys.get(&key) {
                Some(&p) => p,
                None => {
                    let beta = sample_side(model, side, x, cell_grid)?;
                    let sol = solve_cell(&eng, &beta, tol, max_iter, last.as_ref())?;
                    let margins = bounds_margins(&beta, &sol.tensor);
                    pool.push(PooledSolve {
                        potentials: sol.potentials.clone(),
                        tensor: sol.tensor,
                        solved_scale: scale,
                        asymmetry: sol.asymmetry,
                        iterations: sol.iterations,
                        bounds_margins: margins,
                    });
                    last = Some(sol);
                    keys.insert(key, pool.len() - 1);
                    pool.len() - 1
                }
            };
            let s = scale / pool[pos].solved_scale;
            let mut t = pool[pos].tensor;
            for c in &mut t {
                *c *= s;
            }
            entries[idx] = t;
            entry[idx] = Some(pos);
        }
        let lambda = MatrixField::from_entries(&geom, entries)?;
        sides.push((lambda, pool, entry));
    }
    let (lambda_v, pool_v, entry_v) = sides.pop().unwrap();
    let (lambda_u, pool_u, entry_u) = sides.pop().unwrap();
    Ok(EffectiveTensors {
        macro_grid: macro_grid.clone(),
        cell_grid: cell_grid.clone(),
        lambda_u,
        lambda_v,
        pool_u,
        pool_v,
        entry_u,
        entry_v,
    })
}

/// Nodal corrector multiplier on a fine macro grid: at each node the block
/// `beta(x, x/eps) Z(x, x/eps) Lambda(x)^{-1}` with correctors and tensors
/// taken from the nearest coarse collocation node.
#[derive(Debug, Clone)]
pub struct CorrectorBlocks {
    pub grid: MacroGrid,
    pub epsilon: f64,
    /// Row-major real 3x3 blocks per fine node.
    pub block_u: Vec<[f64; 9]>,
    pub block_v: Vec<[f64; 9]>,
}

const IDENTITY_BLOCK: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

impl CorrectorBlocks {
    fn blocks(&self, side: Side) -> &[[f64; 9]] {
        match side {
            Side::Electric => &self.block_u,
            Side::Magnetic => &self.block_v,
        }
    }

    /// Multiplies one side of a fine-grid field by the nodal blocks.
    pub fn apply_vector(&self, side: Side, f: &VectorField) -> Result<VectorField> {
        let blocks = self.blocks(side);
        if f.geom.len() != blocks.len() {
            return Err(CurlhomError::Grid(
                "field grid does not match the multiplier grid".into(),
            ));
        }
        let mut out = VectorField::zeros(&f.geom);
        for idx in 0..blocks.len() {
            let b = &blocks[idx];
            let v = f.at(idx);
            out.set(
                idx,
                [
                    b[0] * v[0] + b[1] * v[1] + b[2] * v[2],
                    b[3] * v[0] + b[4] * v[1] + b[5] * v[2],
                    b[6] * v[0] + b[7] * v[1] + b[8] * v[2],
                ],
            );
        }
        Ok(out)
    }

    pub fn apply(&self, p: &FieldPair) -> Result<FieldPair> {
        Ok(FieldPair {
            u: self.apply_vector(Side::Electric, &p.u)?,
            v: self.apply_vector(Side::Magnetic, &p.v)?,
        })
    }

    /// Largest entrywise departure of any block from the identity.
    pub fn max_identity_departure(&self) -> f64 {
        let mut worst = 0.0f64;
        for blocks in [&self.block_u, &self.block_v] {
            for b in blocks.iter() {
                for c in 0..9 {
                    worst = worst.max((b[c] - IDENTITY_BLOCK[c]).abs());
                }
            }
        }
        worst
    }
}

#[inline]
fn sym_get(m: &[f64; 6], r: usize, c: usize) -> f64 {
    const POS: [[usize; 3]; 3] = [[0, 3, 4], [3, 1, 5], [4, 5, 2]];
    m[POS[r][c]]
}

/// Builds the corrector multiplier for oscillation scale `epsilon` on the
/// fine grid, reading correctors and tensors from the nearest coarse node.
pub fn theta_multiplier(
    model: &CoefficientModel,
    tensors: &EffectiveTensors,
    epsilon: f64,
    fine: &MacroGrid,
) -> Result<CorrectorBlocks> {
    if !(epsilon > 0.0) {
        return Err(CurlhomError::Config("epsilon must be positive".into()));
    }
    if (fine.side() - tensors.macro_grid.side()).abs() > 1e-12
        || (fine.support_radius() - tensors.macro_grid.support_radius()).abs() > 1e-12
    {
        return Err(CurlhomError::Config(
            "fine grid box does not match the tensor grid".into(),
        ));
    }
    let lattice = tensors.cell_grid.lattice();
    if !lattice.is_diagonal() {
        return Err(CurlhomError::Config(
            "corrector multiplier needs an axis-aligned cell lattice".into(),
        ));
    }
    let fine_geom = fine.geometry();
    let coarse_geom = tensors.macro_grid.geometry();
    let nf = fine_geom.n;
    let nm = coarse_geom.n;
    for d in 0..3 {
        // one cell period spans epsilon times the lattice side
        let period = epsilon * lattice.basis()[d][d];
        let nodes_per_period = period / fine_geom.spacing(d);
        if nodes_per_period < 8.0 - 1e-9 {
            return Err(CurlhomError::UnderResolved {
                axis: d,
                actual: nodes_per_period,
                required: (8.0 * fine.side() / period).ceil() as usize,
            });
        }
    }

    // per-axis: nearest coarse index and fractional fast coordinate
    let mut owner: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut yfrac: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for d in 0..3 {
        let sd = lattice.basis()[d][d];
        for i in 0..nf[d] {
            let j = ((i * nm[d]) as f64 / nf[d] as f64 + 0.5).floor() as usize % nm[d];
            owner[d].push(j);
            let mut c = [0usize; 3];
            c[d] = i;
            let x = fine_geom.node(c)[d];
            yfrac[d].push((x / (epsilon * sd)).rem_euclid(1.0));
        }
    }
    // fine indices grouped by their owning coarse node, per axis
    let groups: [Vec<Vec<usize>>; 3] = [0, 1, 2].map(|d| {
        let mut g = vec![Vec::new(); nm[d]];
        for (i, &j) in owner[d].iter().enumerate() {
            g[j].push(i);
        }
        g
    });

    let eng = SpectralEngine::new(&tensors.cell_grid.geometry());
    let mut block_u = vec![IDENTITY_BLOCK; fine_geom.len()];
    let mut block_v = vec![IDENTITY_BLOCK; fine_geom.len()];
    for (side, out) in [
        (Side::Electric, &mut block_u),
        (Side::Magnetic, &mut block_v),
    ] {
        let law = side_law(model, side);
        let lambda = tensors.lambda(side);
        for coarse_idx in 0..coarse_geom.len() {
            let cc = coarse_geom.coords(coarse_idx);
            let fine0 = &groups[0][cc[0]];
            let fine1 = &groups[1][cc[1]];
            let fine2 = &groups[2][cc[2]];
            if fine0.is_empty() || fine1.is_empty() || fine2.is_empty() {
                continue;
            }
            // corrector values on the block's fast-coordinate tensor grid;
            // identity entries keep Z = I
            let corr = tensors.correctors_at(side, coarse_idx, &eng).map(|zs| {
                let ys0: Vec<f64> = fine0.iter().map(|&i| yfrac[0][i]).collect();
                let ys1: Vec<f64> = fine1.iter().map(|&i| yfrac[1][i]).collect();
                let ys2: Vec<f64> = fine2.iter().map(|&i| yfrac[2][i]).collect();
                zs.map(|mut z| {
                    eng.forward_vector(&mut z);
                    eng.evaluate_vector_on_grid(&z, [&ys0, &ys1, &ys2])
                })
            });
            let inv = lambda.inv_entry(coarse_idx);
            let (q0, q1) = (fine0.len(), fine1.len());
            for (b2, &i2) in fine2.iter().enumerate() {
                for (b1, &i1) in fine1.iter().enumerate() {
                    for (b0, &i0) in fine0.iter().enumerate() {
                        let x = fine_geom.node([i0, i1, i2]);
                        if law.is_identity_at(x, model.support_radius) {
                            continue;
                        }
                        let y = [yfrac[0][i0], yfrac[1][i1], yfrac[2][i2]];
                        let s = law.scalar_at(x, y, model.support_radius);
                        let p = (b2 * q1 + b1) * q0 + b0;
                        let mut z = [[0.0f64; 3]; 3];
                        match &corr {
                            Some(vals) => {
                                for k in 0..3 {
                                    for r in 0..3 {
                                        z[r][k] = vals[k][r][p].re;
                                    }
                                }
                            }
                            None => {
                                for k in 0..3 {
                                    z[k][k] = 1.0;
                                }
                            }
                        }
                        let mut blk = [0.0f64; 9];
                        for r in 0..3 {
                            for c in 0..3 {
                                let mut acc = 0.0;
                                for k in 0..3 {
                                    acc += z[r][k] * sym_get(inv, k, c);
                                }
                                blk[r * 3 + c] = s * acc;
                            }
                        }
                        out[fine_geom.index([i0, i1, i2])] = blk;
                    }
                }
            }
        }
    }
    Ok(CorrectorBlocks {
        grid: fine.clone(),
        epsilon,
        block_u,
        block_v,
    })
}

/// Cell solves sampled along the blend gate `g in [0, 1]` of a gated law,
/// with local cubic interpolation between samples. Lets fine-grid evaluators
/// read correctors and tensors at arbitrary macro points instead of
/// collocating to the nearest solved node.
#[derive(Debug, Clone)]
pub struct CorrectorFamily {
    pub gs: Vec<f64>,
    pub potentials: Vec<[ScalarField; 3]>,
    pub tensors: Vec<[f64; 6]>,
}

impl CorrectorFamily {
    /// Solves the cell problems of `law` at `samples` uniform gate values,
    /// warm-starting each from the previous one.
    pub fn solve(
        law: &MaterialLaw,
        cell: &CellGrid,
        samples: usize,
        tol: f64,
        max_iter: usize,
    ) -> Result<Self> {
        if samples < 4 {
            return Err(CurlhomError::Config(
                "corrector family needs at least 4 gate samples".into(),
            ));
        }
        let geom = cell.geometry();
        let eng = SpectralEngine::new(&geom);
        let mut gs = Vec::with_capacity(samples);
        let mut potentials = Vec::with_capacity(samples);
        let mut tensors = Vec::with_capacity(samples);
        let mut last: Option<CellSolution> = None;
        for t in 0..samples {
            let g = t as f64 / (samples - 1) as f64;
            let beta = law.gated_cell_field(g, &geom, cell.lattice())?;
            let sol = solve_cell(&eng, &beta, tol, max_iter, last.as_ref())?;
            gs.push(g);
            potentials.push(sol.potentials.clone());
            tensors.push(sol.tensor);
            last = Some(sol);
        }
        Ok(Self {
            gs,
            potentials,
            tensors,
        })
    }

    /// Four-point stencil base index and cubic Lagrange weights at gate `g`.
    pub fn weights(&self, g: f64) -> (usize, [f64; 4]) {
        let m = self.gs.len();
        let t = g.clamp(0.0, 1.0) * (m - 1) as f64;
        let i = (t.floor() as usize).clamp(1, m - 3);
        let s = t - i as f64;
        let w = [
            -s * (s - 1.0) * (s - 2.0) / 6.0,
            (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
            -(s + 1.0) * s * (s - 2.0) / 2.0,
            (s + 1.0) * s * (s - 1.0) / 6.0,
        ];
        (i - 1, w)
    }

    /// Interpolated effective tensor at gate `g`.
    pub fn tensor_at(&self, g: f64) -> [f64; 6] {
        let (base, w) = self.weights(g);
        let mut out = [0.0f64; 6];
        for j in 0..4 {
            for c in 0..6 {
                out[c] += w[j] * self.tensors[base + j][c];
            }
        }
        out
    }

    /// Forward spectra of the correctors `e_k + grad(phi_k)` of one sample.
    pub fn corrector_spectra(&self, t: usize, eng: &SpectralEngine) -> [VectorField; 3] {
        let mut z = correctors_from_potentials(eng, &self.potentials[t]);
        for f in &mut z {
            eng.forward_vector(f);
        }
        z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{bump, laminate_profile};
    use crate::grid::Lattice;

    #[test]
    fn identity_model_tensors_are_identity() {
        let model = CoefficientModel::identity(0.25);
        let mg = MacroGrid::new(1.0, 0.25, [4, 4, 4]).unwrap();
        let cg = CellGrid::cubic(8).unwrap();
        let t = effective_fields(&model, &mg, &cg, 1e-11, 200).unwrap();
        for idx in 0..mg.geometry().len() {
            let e = t.lambda_u.entry(idx);
            let f = t.lambda_v.entry(idx);
            for c in 0..3 {
                assert!((e[c] - 1.0).abs() < 1e-12 && (f[c] - 1.0).abs() < 1e-12);
            }
            for c in 3..6 {
                assert!(e[c].abs() < 1e-12 && f[c].abs() < 1e-12);
            }
            assert!(t.entry(Side::Electric, idx).is_none());
        }
        let p = t.provenance();
        assert_eq!(p.distinct_patterns_u + p.distinct_patterns_v, 0);
    }

    #[test]
    fn laminate_tensor_hits_the_means_at_high_resolution() {
        let model = CoefficientModel::laminate(0, 0.25);
        let cg = CellGrid::new(Lattice::unit_cube(), [128, 4, 4]).unwrap();
        let eng = SpectralEngine::new(&cg.geometry());
        let sol = effective_at(&model, Side::Electric, [0.0; 3], &cg, &eng, 1e-12, 800).unwrap();
        let h = 3.0f64.sqrt();
        assert!((sol.tensor[0] - h).abs() < 1e-8, "harmonic {}", sol.tensor[0]);
        assert!((sol.tensor[1] - 2.0).abs() < 1e-8);
        assert!((sol.tensor[2] - 2.0).abs() < 1e-8);
        for c in 3..6 {
            assert!(sol.tensor[c].abs() < 1e-9);
        }
    }

    #[test]
    fn separable_model_factorizes_per_node() {
        let model = CoefficientModel::separable(1.0, 0.25);
        let mg = MacroGrid::new(1.0, 0.25, [4, 4, 4]).unwrap();
        let cg = CellGrid::new(Lattice::unit_cube(), [64, 4, 4]).unwrap();
        let t = effective_fields(&model, &mg, &cg, 1e-12, 800).unwrap();
        let p = t.provenance();
        // one cell pattern serves every node
        assert_eq!(p.distinct_patterns_u, 1);
        assert_eq!(p.solved_nodes_u, mg.geometry().len());
        let lam = [3.0f64.sqrt(), 2.0, 2.0];
        let geom = mg.geometry();
        for idx in 0..geom.len() {
            let x = geom.node(geom.coords(idx));
            let a = model.alpha.separable_macro_factor(x).unwrap();
            let e = t.lambda_u.entry(idx);
            for c in 0..3 {
                assert!(
                    (e[c] - a * lam[c]).abs() < 1e-7 * a,
                    "node {idx} comp {c}: {} vs {}",
                    e[c],
                    a * lam[c]
                );
            }
        }
    }

    #[test]
    fn inclusion_field_is_pooled_bounded_and_identity_outside() {
        let model = CoefficientModel::inclusion(0.25);
        let mg = MacroGrid::new(1.0, 0.25, [8, 8, 8]).unwrap();
        let cg = CellGrid::cubic(16).unwrap();
        let t = effective_fields(&model, &mg, &cg, 1e-10, 400).unwrap();
        let p = t.provenance();
        assert!(p.solved_nodes_u > 0);
        // nodes on the same macro radius share a solve
        assert!(p.distinct_patterns_u < p.solved_nodes_u);
        assert!(p.min_lower_margin > -1e-8, "lower {}", p.min_lower_margin);
        assert!(p.min_upper_margin > -1e-8, "upper {}", p.min_upper_margin);
        let geom = mg.geometry();
        for idx in 0..geom.len() {
            let x = geom.node(geom.coords(idx));
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            if r >= 0.25 {
                let e = t.lambda_u.entry(idx);
                assert!((e[0] - 1.0).abs() < 1e-12 && e[3].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tensor_diagonal_matches_mean_flux() {
        // energy identity: Lambda e_k equals the cell average of the flux
        let model = CoefficientModel::inclusion(0.25);
        let cg = CellGrid::cubic(16).unwrap();
        let eng = SpectralEngine::new(&cg.geometry());
        let sol = effective_at(
            &model,
            Side::Electric,
            [0.05, 0.0, 0.0],
            &cg,
            &eng,
            1e-11,
            400,
        )
        .unwrap();
        for k in 0..3 {
            let mean = sol.flux[k].mean();
            assert!((mean[k].re - sol.tensor[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn theta_identity_media_gives_identity_blocks() {
        let model = CoefficientModel::identity(0.25);
        let mg = MacroGrid::new(1.0, 0.25, [4, 4, 4]).unwrap();
        let cg = CellGrid::cubic(8).unwrap();
        let t = effective_fields(&model, &mg, &cg, 1e-11, 200).unwrap();
        let fine = MacroGrid::new(1.0, 0.25, [16, 16, 16]).unwrap();
        let theta = theta_multiplier(&model, &t, 0.5, &fine).unwrap();
        assert!(theta.max_identity_departure() < 1e-12);
    }

    #[test]
    fn theta_laminate_matches_the_profile_formula() {
        let model = CoefficientModel::laminate(0, 0.25);
        let mg = MacroGrid::new(1.0, 0.25, [8, 8, 8]).unwrap();
        let cg = CellGrid::new(Lattice::unit_cube(), [64, 4, 4]).unwrap();
        let t = effective_fields(&model, &mg, &cg, 1e-12, 800).unwrap();
        let fine = MacroGrid::new(1.0, 0.25, [32, 32, 32]).unwrap();
        let eps = 0.25;
        let theta = theta_multiplier(&model, &t, eps, &fine).unwrap();
        let fg = fine.geometry();
        // probe a fine node near the center whose nearest coarse node is the
        // origin: coefficient is the laminate attenuated by the macro bump
        let idx = [17usize, 16, 16];
        let x = fg.node(idx);
        let g_fine = bump((x[0] * x[0]).sqrt() / 0.25);
        let y = (x[0] / eps).rem_euclid(1.0);
        let c_fine = 1.0 + g_fine * (laminate_profile(2.0, 1.0, y) - 1.0);
        // nearest coarse node is the origin where the bump is 1, so the
        // coarse solve sees the pure laminate: zeta_1 = sqrt(3)/a, others e_k
        let c_coarse = laminate_profile(2.0, 1.0, y);
        let b = &theta.block_u[fg.index(idx)];
        // block = c_fine * diag(sqrt(3)/c_coarse, 1, 1) * diag(sqrt(3), 2, 2)^-1
        assert!((b[0] - c_fine / c_coarse).abs() < 1e-9, "b00 {}", b[0]);
        assert!((b[4] - c_fine / 2.0).abs() < 1e-9, "b11 {}", b[4]);
        assert!((b[8] - c_fine / 2.0).abs() < 1e-9, "b22 {}", b[8]);
        for (r, c) in [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)] {
            assert!(b[r * 3 + c].abs() < 1e-8);
        }
        // outside the support ball every block is the identity
        let out_idx = [2usize, 2, 2];
        let bo = &theta.block_u[fg.index(out_idx)];
        for c in 0..9 {
            assert!((bo[c] - IDENTITY_BLOCK[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn theta_refuses_underresolved_grids() {
        let model = CoefficientModel::identity(0.25);
        let mg = MacroGrid::new(1.0, 0.25, [4, 4, 4]).unwrap();
        let cg = CellGrid::cubic(8).unwrap();
        let t = effective_fields(&model, &mg, &cg, 1e-11, 200).unwrap();
        let fine = MacroGrid::new(1.0, 0.25, [16, 16, 16]).unwrap();
        let err = theta_multiplier(&model, &t, 0.25, &fine).unwrap_err();
        assert!(matches!(err, CurlhomError::UnderResolved { .. }));
    }

    #[test]
    fn effective_fields_rejects_radius_mismatch() {
        let model = CoefficientModel::identity(0.25);
        let mg = MacroGrid::new(1.0, 0.3, [4, 4, 4]).unwrap();
        let cg = CellGrid::cubic(8).unwrap();
        assert!(effective_fields(&model, &mg, &cg, 1e-11, 200).is_err());
    }
}
