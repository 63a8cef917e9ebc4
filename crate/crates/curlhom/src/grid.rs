//! Periodic lattices and collocation grids.
//!
//! Two grid families appear throughout: the unit cell of a periodicity
//! lattice (fast variable) and a cubic macroscopic box centred at the origin
//! (slow variable). Both are uniform collocation grids; all spectral calculus
//! runs on the shared [`Geometry`] view.

use crate::error::{CurlhomError, Result};
use serde::{Deserialize, Serialize};

pub const TAU: f64 = std::f64::consts::TAU;

/// Periodicity lattice given by three basis columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    /// Basis vectors as columns: `basis[c]` is the c-th lattice vector.
    basis: [[f64; 3]; 3],
    inv_basis: [[f64; 3]; 3],
    volume: f64,
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    // columns m[0], m[1], m[2]
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[1][0] * (m[0][1] * m[2][2] - m[0][2] * m[2][1])
        + m[2][0] * (m[0][1] * m[1][2] - m[0][2] * m[1][1])
}

fn inv3(m: &[[f64; 3] ; 3]) -> Option<[[f64; 3]; 3]> {
    let d = det3(m);
    if d.abs() < 1e-14 {
        return None;
    }
    // cofactor expansion; columns of the inverse
    let a = m;
    let cof = |r: usize, c: usize| -> f64 {
        let rs: [usize; 2] = match r {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        };
        let cs: [usize; 2] = match c {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        };
        let minor = a[cs[0]][rs[0]] * a[cs[1]][rs[1]] - a[cs[1]][rs[0]] * a[cs[0]][rs[1]];
        if (r + c) % 2 == 0 {
            minor
        } else {
            -minor
        }
    };
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            // inverse = adj / det, adj = transposed cofactor matrix
            inv[c][r] = cof(c, r) / d;
        }
    }
    Some(inv)
}

pub(crate) fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for c in 0..3 {
        for r in 0..3 {
            out[r] += m[c][r] * v[c];
        }
    }
    out
}

impl Lattice {
    /// Unit cubic lattice, the default periodicity cell.
    pub fn unit_cube() -> Self {
        Self::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap()
    }

    /// Lattice from basis columns; rejects near-singular bases.
    pub fn new(basis: [[f64; 3]; 3]) -> Result<Self> {
        let volume = det3(&basis).abs();
        let inv_basis = inv3(&basis)
            .ok_or_else(|| CurlhomError::Grid("lattice basis is singular".into()))?;
        Ok(Self {
            basis,
            inv_basis,
            volume,
        })
    }

    pub fn basis(&self) -> &[[f64; 3]; 3] {
        &self.basis
    }

    /// Unit-cell volume |det basis|.
    pub fn cell_volume(&self) -> f64 {
        self.volume
    }

    /// Cartesian point of fractional coordinates.
    pub fn point(&self, frac: [f64; 3]) -> [f64; 3] {
        mat_vec(&self.basis, frac)
    }

    /// Fractional coordinates of a Cartesian point.
    pub fn fractional(&self, x: [f64; 3]) -> [f64; 3] {
        mat_vec(&self.inv_basis, x)
    }

    /// Dual basis columns scaled by 2π: wavevectors are integer combinations.
    pub fn dual_basis(&self) -> [[f64; 3]; 3] {
        // dual column d is 2π * (inv_basis row d)
        let mut dual = [[0.0; 3]; 3];
        for d in 0..3 {
            for r in 0..3 {
                dual[d][r] = TAU * self.inv_basis[r][d];
            }
        }
        dual
    }

    /// True when the basis is diagonal (axis-aligned periods).
    pub fn is_diagonal(&self) -> bool {
        let b = &self.basis;
        let mut off = 0.0f64;
        for c in 0..3 {
            for r in 0..3 {
                if r != c {
                    off = off.max(b[c][r].abs());
                }
            }
        }
        off < 1e-14
    }
}

fn check_resolution(n: [usize; 3]) -> Result<()> {
    for (axis, &nd) in n.iter().enumerate() {
        if nd < 4 || nd % 2 != 0 {
            return Err(CurlhomError::Grid(format!(
                "axis {axis} resolution {nd} must be even and at least 4"
            )));
        }
    }
    Ok(())
}

/// Uniform collocation grid over one unit cell of a lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    lattice: Lattice,
    n: [usize; 3],
}

impl CellGrid {
    pub fn new(lattice: Lattice, n: [usize; 3]) -> Result<Self> {
        check_resolution(n)?;
        Ok(Self { lattice, n })
    }

    /// Cubic unit cell with equal resolution on every axis.
    pub fn cubic(n: usize) -> Result<Self> {
        Self::new(Lattice::unit_cube(), [n, n, n])
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.n
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(*self.lattice.basis(), [0.0; 3], self.n)
    }
}

/// Cubic periodic box for the slow variable, centred at the origin.
///
/// Outside the ball of `support_radius` the media coincide with the identity,
/// so the box edge only needs to clear `2 * support_radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroGrid {
    side: f64,
    support_radius: f64,
    n: [usize; 3],
}

impl MacroGrid {
    pub fn new(side: f64, support_radius: f64, n: [usize; 3]) -> Result<Self> {
        check_resolution(n)?;
        if !(side > 2.0 * support_radius) {
            return Err(CurlhomError::Grid(format!(
                "box side {side} must exceed twice the support radius {support_radius}"
            )));
        }
        if support_radius <= 0.0 {
            return Err(CurlhomError::Grid("support radius must be positive".into()));
        }
        Ok(Self {
            side,
            support_radius,
            n,
        })
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.n
    }

    pub fn geometry(&self) -> Geometry {
        let l = self.side;
        Geometry::new(
            [[l, 0.0, 0.0], [0.0, l, 0.0], [0.0, 0.0, l]],
            [-l / 2.0, -l / 2.0, -l / 2.0],
            self.n,
        )
    }

    /// Same box resampled at a different resolution.
    pub fn with_resolution(&self, n: [usize; 3]) -> Result<Self> {
        Self::new(self.side, self.support_radius, n)
    }
}

/// Geometry shared by all periodic grids: basis columns, node origin, and
/// per-axis resolutions. Node `(i0,i1,i2)` sits at
/// `origin + basis * (i0/n0, i1/n1, i2/n2)`; the linear index runs axis 0
/// fastest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Geometry {
    pub basis: [[f64; 3]; 3],
    pub origin: [f64; 3],
    pub n: [usize; 3],
    pub volume: f64,
    /// Dual basis columns scaled by 2π; wavevectors are integer combinations.
    dual: [[f64; 3]; 3],
}

impl PartialEq for Geometry {
    fn eq(&self, other: &Self) -> bool {
        self.basis == other.basis && self.origin == other.origin && self.n == other.n
    }
}

impl Geometry {
    pub fn new(basis: [[f64; 3]; 3], origin: [f64; 3], n: [usize; 3]) -> Self {
        let inv = inv3(&basis).expect("grid basis invertible");
        let mut dual = [[0.0; 3]; 3];
        for d in 0..3 {
            for r in 0..3 {
                dual[d][r] = TAU * inv[r][d];
            }
        }
        Self {
            basis,
            origin,
            n,
            volume: det3(&basis).abs(),
            dual,
        }
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: [usize; 3]) -> usize {
        (i[2] * self.n[1] + i[1]) * self.n[0] + i[0]
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i0 = idx % self.n[0];
        let rest = idx / self.n[0];
        let i1 = rest % self.n[1];
        let i2 = rest / self.n[1];
        [i0, i1, i2]
    }

    /// Cartesian position of a node.
    pub fn node(&self, i: [usize; 3]) -> [f64; 3] {
        let frac = [
            i[0] as f64 / self.n[0] as f64,
            i[1] as f64 / self.n[1] as f64,
            i[2] as f64 / self.n[2] as f64,
        ];
        let p = mat_vec(&self.basis, frac);
        [
            p[0] + self.origin[0],
            p[1] + self.origin[1],
            p[2] + self.origin[2],
        ]
    }

    /// Signed mode index for FFT bin `j` on an axis of length `n`:
    /// `0,1,..,n/2-1,-n/2,..,-1`. The `n/2` bin is the Nyquist slot.
    #[inline]
    pub fn signed_mode(n: usize, j: usize) -> i64 {
        if j < n / 2 {
            j as i64
        } else {
            j as i64 - n as i64
        }
    }

    /// True when bin `j` is the Nyquist slot of its axis.
    #[inline]
    pub fn is_nyquist(n: usize, j: usize) -> bool {
        n % 2 == 0 && j == n / 2
    }

    /// Physical wavevector of FFT bins `(j0,j1,j2)` with Nyquist components
    /// suppressed, so first-derivative multipliers stay conjugate-symmetric.
    #[inline]
    pub fn wavevector(&self, j: [usize; 3]) -> [f64; 3] {
        let mut k = [0.0f64; 3];
        for d in 0..3 {
            if Self::is_nyquist(self.n[d], j[d]) {
                continue;
            }
            let m = Self::signed_mode(self.n[d], j[d]) as f64;
            k[0] += self.dual[d][0] * m;
            k[1] += self.dual[d][1] * m;
            k[2] += self.dual[d][2] * m;
        }
        k
    }

    /// Node spacing along an axis in Cartesian length.
    pub fn spacing(&self, axis: usize) -> f64 {
        let b = self.basis[axis];
        (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt() / self.n[axis] as f64
    }
}

/// Macro nodes strictly inside the support ball, with a dense lookup table.
#[derive(Debug, Clone)]
pub struct BallIndex {
    /// Linear macro indices of nodes with |x| < radius, in increasing order.
    pub nodes: Vec<usize>,
    /// Dense map from linear macro index to position in `nodes` (usize::MAX outside).
    pub slot: Vec<usize>,
    pub radius: f64,
}

impl BallIndex {
    pub fn new(grid: &MacroGrid) -> Self {
        Self::with_radius(grid, grid.support_radius())
    }

    pub fn with_radius(grid: &MacroGrid, radius: f64) -> Self {
        let geom = grid.geometry();
        let mut nodes = Vec::new();
        let mut slot = vec![usize::MAX; geom.len()];
        for idx in 0..geom.len() {
            let x = geom.node(geom.coords(idx));
            let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            if r2 < radius * radius {
                slot[idx] = nodes.len();
                nodes.push(idx);
            }
        }
        Self {
            nodes,
            slot,
            radius,
        }
    }

    pub fn contains(&self, linear: usize) -> bool {
        self.slot[linear] != usize::MAX
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_cube_volume_and_dual() {
        let lat = Lattice::unit_cube();
        assert_eq!(lat.cell_volume(), 1.0);
        let dual = lat.dual_basis();
        for d in 0..3 {
            for r in 0..3 {
                let expect = if r == d { TAU } else { 0.0 };
                assert!((dual[d][r] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn skew_lattice_roundtrip() {
        let lat = Lattice::new([[1.0, 0.2, 0.0], [0.0, 1.1, 0.1], [0.3, 0.0, 0.9]]).unwrap();
        let x = lat.point([0.3, 0.7, 0.2]);
        let f = lat.fractional(x);
        assert!((f[0] - 0.3).abs() < 1e-13);
        assert!((f[1] - 0.7).abs() < 1e-13);
        assert!((f[2] - 0.2).abs() < 1e-13);
        // dual basis biorthogonal to the primal one
        let dual = lat.dual_basis();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|r| dual[i][r] * lat.basis()[j][r]).sum();
                let expect = if i == j { TAU } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12, "dual pairing {i}{j}: {dot}");
            }
        }
    }

    #[test]
    fn resolution_rules() {
        assert!(CellGrid::cubic(4).is_ok());
        assert!(CellGrid::cubic(5).is_err());
        assert!(CellGrid::cubic(2).is_err());
        assert!(MacroGrid::new(1.0, 0.25, [8, 8, 8]).is_ok());
        assert!(MacroGrid::new(0.5, 0.25, [8, 8, 8]).is_err());
    }

    #[test]
    fn macro_grid_centred() {
        let g = MacroGrid::new(1.0, 0.25, [8, 8, 8]).unwrap().geometry();
        let first = g.node([0, 0, 0]);
        assert!((first[0] + 0.5).abs() < 1e-15);
        let mid = g.node([4, 4, 4]);
        assert!(mid[0].abs() < 1e-15 && mid[1].abs() < 1e-15 && mid[2].abs() < 1e-15);
    }

    #[test]
    fn wavevector_signs_and_nyquist() {
        let g = CellGrid::cubic(8).unwrap().geometry();
        let k = g.wavevector([1, 0, 0]);
        assert!((k[0] - TAU).abs() < 1e-12 && k[1].abs() < 1e-14);
        let k = g.wavevector([7, 0, 0]);
        assert!((k[0] + TAU).abs() < 1e-12);
        // Nyquist slot suppressed
        let k = g.wavevector([4, 0, 0]);
        assert_eq!(k[0], 0.0);
    }

    #[test]
    fn ball_index_counts_interior_nodes() {
        let grid = MacroGrid::new(1.0, 0.25, [16, 16, 16]).unwrap();
        let ball = BallIndex::new(&grid);
        // volume fraction of the ball is ~6.5%; the node count should be close
        let frac = ball.len() as f64 / 16.0f64.powi(3);
        assert!(
            (frac - 0.0654).abs() < 0.03,
            "ball node fraction {frac} out of range"
        );
        for &n in &ball.nodes {
            assert!(ball.contains(n));
        }
    }
}
