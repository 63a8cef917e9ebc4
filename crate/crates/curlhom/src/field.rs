//! Nodal fields on periodic grids and their binary interchange format.
//!
//! Fields store complex nodal values (axis 0 fastest). Matrix fields hold
//! real symmetric 3x3 values with a cached nodewise inverse. All reductions
//! run in a fixed sequential order so results do not depend on worker count.

use crate::error::{CurlhomError, Result};
use crate::grid::{CellGrid, Geometry, MacroGrid};
use num_complex::Complex64;
use std::io::{Read, Write};

pub type C64 = Complex64;

/// Scalar complex field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub geom: Geometry,
    pub data: Vec<C64>,
}

impl ScalarField {
    pub fn zeros(geom: &Geometry) -> Self {
        Self {
            geom: geom.clone(),
            data: vec![C64::new(0.0, 0.0); geom.len()],
        }
    }

    pub fn from_fn(geom: &Geometry, f: impl Fn([f64; 3]) -> C64) -> Self {
        let mut out = Self::zeros(geom);
        for idx in 0..geom.len() {
            out.data[idx] = f(geom.node(geom.coords(idx)));
        }
        out
    }

    /// Midpoint-quadrature L2 norm.
    pub fn l2_norm(&self) -> f64 {
        let w = self.geom.volume / self.geom.len() as f64;
        let mut s = 0.0;
        for z in &self.data {
            s += z.norm_sqr();
        }
        (w * s).sqrt()
    }

    pub fn mean(&self) -> C64 {
        let mut s = C64::new(0.0, 0.0);
        for z in &self.data {
            s += z;
        }
        s / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Midpoint-quadrature inner product, conjugate-linear in `self`.
    pub fn inner(&self, other: &ScalarField) -> C64 {
        debug_assert_eq!(self.geom, other.geom);
        let w = self.geom.volume / self.geom.len() as f64;
        let mut s = C64::new(0.0, 0.0);
        for (a, b) in self.data.iter().zip(&other.data) {
            s += a.conj() * b;
        }
        s * w
    }

    pub fn scale(&mut self, a: C64) {
        for z in &mut self.data {
            *z *= a;
        }
    }

    /// self += a * x
    pub fn add_scaled(&mut self, a: C64, x: &ScalarField) {
        debug_assert_eq!(self.geom, x.geom);
        for (z, w) in self.data.iter_mut().zip(&x.data) {
            *z += a * w;
        }
    }
}

/// Complex 3-vector field, one contiguous plane per component.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub geom: Geometry,
    pub comps: [Vec<C64>; 3],
}

impl VectorField {
    pub fn zeros(geom: &Geometry) -> Self {
        let plane = vec![C64::new(0.0, 0.0); geom.len()];
        Self {
            geom: geom.clone(),
            comps: [plane.clone(), plane.clone(), plane],
        }
    }

    pub fn from_fn(geom: &Geometry, f: impl Fn([f64; 3]) -> [C64; 3]) -> Self {
        let mut out = Self::zeros(geom);
        for idx in 0..geom.len() {
            let v = f(geom.node(geom.coords(idx)));
            for c in 0..3 {
                out.comps[c][idx] = v[c];
            }
        }
        out
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [C64; 3] {
        [self.comps[0][idx], self.comps[1][idx], self.comps[2][idx]]
    }

    #[inline]
    pub fn set(&mut self, idx: usize, v: [C64; 3]) {
        for c in 0..3 {
            self.comps[c][idx] = v[c];
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let w = self.geom.volume / self.geom.len() as f64;
        let mut s = 0.0;
        for c in 0..3 {
            for z in &self.comps[c] {
                s += z.norm_sqr();
            }
        }
        (w * s).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for idx in 0..self.geom.len() {
            let v = self.at(idx);
            let a = (v[0].norm_sqr() + v[1].norm_sqr() + v[2].norm_sqr()).sqrt();
            m = m.max(a);
        }
        m
    }

    /// Nodewise mean of each component.
    pub fn mean(&self) -> [C64; 3] {
        let n = self.geom.len() as f64;
        let mut out = [C64::new(0.0, 0.0); 3];
        for c in 0..3 {
            let mut s = C64::new(0.0, 0.0);
            for z in &self.comps[c] {
                s += z;
            }
            out[c] = s / n;
        }
        out
    }

    pub fn scale(&mut self, a: C64) {
        for c in 0..3 {
            for z in &mut self.comps[c] {
                *z *= a;
            }
        }
    }

    /// self += a * x
    pub fn add_scaled(&mut self, a: C64, x: &VectorField) {
        debug_assert_eq!(self.geom, x.geom);
        for c in 0..3 {
            for (z, w) in self.comps[c].iter_mut().zip(&x.comps[c]) {
                *z += a * w;
            }
        }
    }

    /// Midpoint-quadrature inner product, conjugate-linear in `self`.
    pub fn inner(&self, other: &VectorField) -> C64 {
        debug_assert_eq!(self.geom, other.geom);
        let w = self.geom.volume / self.geom.len() as f64;
        let mut s = C64::new(0.0, 0.0);
        for c in 0..3 {
            for (a, b) in self.comps[c].iter().zip(&other.comps[c]) {
                s += a.conj() * b;
            }
        }
        s * w
    }
}

/// Pair of vector fields (electric-like and magnetic-like slots).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPair {
    pub u: VectorField,
    pub v: VectorField,
}

impl FieldPair {
    pub fn zeros(geom: &Geometry) -> Self {
        Self {
            u: VectorField::zeros(geom),
            v: VectorField::zeros(geom),
        }
    }

    pub fn geom(&self) -> &Geometry {
        &self.u.geom
    }

    pub fn l2_norm(&self) -> f64 {
        let u = self.u.l2_norm();
        let v = self.v.l2_norm();
        (u * u + v * v).sqrt()
    }

    pub fn scale(&mut self, a: C64) {
        self.u.scale(a);
        self.v.scale(a);
    }

    pub fn add_scaled(&mut self, a: C64, x: &FieldPair) {
        self.u.add_scaled(a, &x.u);
        self.v.add_scaled(a, &x.v);
    }

    pub fn inner(&self, other: &FieldPair) -> C64 {
        self.u.inner(&other.u) + self.v.inner(&other.v)
    }
}

// --- small symmetric 3x3 helpers (storage order xx, yy, zz, xy, xz, yz) ---

pub(crate) fn sym3_mul_vec(m: &[f64; 6], v: [C64; 3]) -> [C64; 3] {
    [
        m[0] * v[0] + m[3] * v[1] + m[4] * v[2],
        m[3] * v[0] + m[1] * v[1] + m[5] * v[2],
        m[4] * v[0] + m[5] * v[1] + m[2] * v[2],
    ]
}

pub(crate) fn sym3_mul_vec_f(m: &[f64; 6], v: [f64; 3]) -> [f64; 3] {
    [
        m[0] * v[0] + m[3] * v[1] + m[4] * v[2],
        m[3] * v[0] + m[1] * v[1] + m[5] * v[2],
        m[4] * v[0] + m[5] * v[1] + m[2] * v[2],
    ]
}

pub(crate) fn sym3_det(m: &[f64; 6]) -> f64 {
    m[0] * (m[1] * m[2] - m[5] * m[5]) - m[3] * (m[3] * m[2] - m[5] * m[4])
        + m[4] * (m[3] * m[5] - m[1] * m[4])
}

pub(crate) fn sym3_inv(m: &[f64; 6]) -> Option<[f64; 6]> {
    let d = sym3_det(m);
    if d.abs() < 1e-300 {
        return None;
    }
    Some([
        (m[1] * m[2] - m[5] * m[5]) / d,
        (m[0] * m[2] - m[4] * m[4]) / d,
        (m[0] * m[1] - m[3] * m[3]) / d,
        (m[4] * m[5] - m[3] * m[2]) / d,
        (m[3] * m[5] - m[4] * m[1]) / d,
        (m[3] * m[4] - m[0] * m[5]) / d,
    ])
}

/// Eigenvalues of a symmetric 3x3 via cyclic Jacobi sweeps, ascending.
pub fn sym3_eigenvalues(m: &[f64; 6]) -> [f64; 3] {
    let mut a = [
        [m[0], m[3], m[4]],
        [m[3], m[1], m[5]],
        [m[4], m[5], m[2]],
    ];
    for _ in 0..30 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off < 1e-15 * (a[0][0].abs() + a[1][1].abs() + a[2][2].abs()).max(1e-300) {
            break;
        }
        for p in 0..2 {
            for q in (p + 1)..3 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..3 {
                    let arp = a[r][p];
                    let arq = a[r][q];
                    a[r][p] = c * arp - s * arq;
                    a[r][q] = s * arp + c * arq;
                }
                for r in 0..3 {
                    let apr = a[p][r];
                    let aqr = a[q][r];
                    a[p][r] = c * apr - s * aqr;
                    a[q][r] = s * apr + c * aqr;
                }
            }
        }
    }
    let mut ev = [a[0][0], a[1][1], a[2][2]];
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

/// Real symmetric 3x3 field with cached nodewise inverse.
#[derive(Debug, Clone)]
pub struct MatrixField {
    pub geom: Geometry,
    /// Symmetric entries per node: xx, yy, zz, xy, xz, yz.
    pub m: Vec<[f64; 6]>,
    inv: Vec<[f64; 6]>,
}

impl MatrixField {
    /// Samples a matrix-valued map on the grid; verifies symmetry and SPD
    /// nodewise and caches the inverse.
    pub fn from_fn(geom: &Geometry, f: impl Fn([f64; 3]) -> [[f64; 3]; 3]) -> Result<Self> {
        let mut m = Vec::with_capacity(geom.len());
        let mut inv = Vec::with_capacity(geom.len());
        for idx in 0..geom.len() {
            let x = geom.node(geom.coords(idx));
            let a = f(x);
            let sym = [
                a[0][0],
                a[1][1],
                a[2][2],
                0.5 * (a[0][1] + a[1][0]),
                0.5 * (a[0][2] + a[2][0]),
                0.5 * (a[1][2] + a[2][1]),
            ];
            let asym = (a[0][1] - a[1][0])
                .abs()
                .max((a[0][2] - a[2][0]).abs())
                .max((a[1][2] - a[2][1]).abs());
            let scale = sym.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1.0);
            if asym > 1e-10 * scale {
                return Err(CurlhomError::Grid(format!(
                    "matrix field asymmetric at node {:?}: defect {asym:.3e}",
                    geom.coords(idx)
                )));
            }
            let ev = sym3_eigenvalues(&sym);
            if ev[0] <= 0.0 {
                return Err(CurlhomError::NotSpd {
                    node: geom.coords(idx),
                    eigenvalue: ev[0],
                });
            }
            let iv = sym3_inv(&sym).ok_or(CurlhomError::NotSpd {
                node: geom.coords(idx),
                eigenvalue: ev[0],
            })?;
            m.push(sym);
            inv.push(iv);
        }
        Ok(Self {
            geom: geom.clone(),
            m,
            inv,
        })
    }

    /// Builds a field from precomputed Voigt entries, checking SPD nodewise
    /// and caching the inverse.
    pub fn from_entries(geom: &Geometry, m: Vec<[f64; 6]>) -> Result<Self> {
        if m.len() != geom.len() {
            return Err(CurlhomError::Grid(format!(
                "entry count {} does not match grid size {}",
                m.len(),
                geom.len()
            )));
        }
        let mut inv = Vec::with_capacity(m.len());
        for (idx, sym) in m.iter().enumerate() {
            let ev = sym3_eigenvalues(sym);
            if ev[0] <= 0.0 {
                return Err(CurlhomError::NotSpd {
                    node: geom.coords(idx),
                    eigenvalue: ev[0],
                });
            }
            let iv = sym3_inv(sym).ok_or(CurlhomError::NotSpd {
                node: geom.coords(idx),
                eigenvalue: ev[0],
            })?;
            inv.push(iv);
        }
        Ok(Self {
            geom: geom.clone(),
            m,
            inv,
        })
    }

    pub fn identity(geom: &Geometry) -> Self {
        Self::from_fn(geom, |_| [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap()
    }

    #[inline]
    pub fn apply(&self, idx: usize, v: [C64; 3]) -> [C64; 3] {
        sym3_mul_vec(&self.m[idx], v)
    }

    #[inline]
    pub fn apply_inv(&self, idx: usize, v: [C64; 3]) -> [C64; 3] {
        sym3_mul_vec(&self.inv[idx], v)
    }

    pub fn entry(&self, idx: usize) -> &[f64; 6] {
        &self.m[idx]
    }

    pub fn inv_entry(&self, idx: usize) -> &[f64; 6] {
        &self.inv[idx]
    }

    /// Largest nodewise relative defect of `m * inv - I`.
    pub fn inverse_consistency(&self) -> f64 {
        let mut worst = 0.0f64;
        for idx in 0..self.m.len() {
            let a = &self.m[idx];
            let b = &self.inv[idx];
            let cols = [
                sym3_mul_vec_f(a, [b[0], b[3], b[4]]),
                sym3_mul_vec_f(a, [b[3], b[1], b[5]]),
                sym3_mul_vec_f(a, [b[4], b[5], b[2]]),
            ];
            for (c, col) in cols.iter().enumerate() {
                for r in 0..3 {
                    let expect = if r == c { 1.0 } else { 0.0 };
                    worst = worst.max((col[r] - expect).abs());
                }
            }
        }
        worst
    }

    /// Range of eigenvalues over all nodes (min, max).
    pub fn eigenvalue_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for e in &self.m {
            let ev = sym3_eigenvalues(e);
            lo = lo.min(ev[0]);
            hi = hi.max(ev[2]);
        }
        (lo, hi)
    }

    /// Multiply a vector field nodewise: out = M * x.
    pub fn mul_field(&self, x: &VectorField) -> VectorField {
        let mut out = VectorField::zeros(&x.geom);
        for idx in 0..x.geom.len() {
            out.set(idx, self.apply(idx, x.at(idx)));
        }
        out
    }

    /// Multiply a vector field nodewise by the cached inverse.
    pub fn mul_inv_field(&self, x: &VectorField) -> VectorField {
        let mut out = VectorField::zeros(&x.geom);
        for idx in 0..x.geom.len() {
            out.set(idx, self.apply_inv(idx, x.at(idx)));
        }
        out
    }
}

/// Weighted pair inner product: quadrature of
/// `(alpha^{-1} u1, u2) + (mu^{-1} v1, v2)`, conjugate-linear in the first
/// pair. Takes the coefficient fields and uses their cached inverses.
pub fn weighted_inner(
    p1: &FieldPair,
    p2: &FieldPair,
    alpha: &MatrixField,
    mu: &MatrixField,
) -> C64 {
    debug_assert_eq!(p1.geom(), p2.geom());
    let geom = p1.geom();
    let w = geom.volume / geom.len() as f64;
    let mut s = C64::new(0.0, 0.0);
    for idx in 0..geom.len() {
        let au = sym3_mul_vec(&alpha.inv[idx], p1.u.at(idx));
        let mv = sym3_mul_vec(&mu.inv[idx], p1.v.at(idx));
        let u2 = p2.u.at(idx);
        let v2 = p2.v.at(idx);
        for c in 0..3 {
            s += au[c].conj() * u2[c] + mv[c].conj() * v2[c];
        }
    }
    s * w
}

/// Weighted pair norm derived from [`weighted_inner`].
pub fn weighted_norm(p: &FieldPair, alpha: &MatrixField, mu: &MatrixField) -> f64 {
    weighted_inner(p, p, alpha, mu).re.max(0.0).sqrt()
}

// --- binary interchange format ---
//
// 64-byte header: magic "CURLHOM1", u32 version, u32 grid kind (0 cell,
// 1 macro), 3 x u32 resolution, u32 component count, u64 node count,
// f64 box side, f64 support radius, 8 reserved bytes. A 72-byte block with
// the lattice basis (9 x f64, column-major) follows the header, then the
// payload: per node, per component, interleaved re/im f64. All little-endian.

pub const MAGIC: &[u8; 8] = b"CURLHOM1";
pub const FORMAT_VERSION: u32 = 1;

/// Grid tag stored in dumps.
#[derive(Debug, Clone, PartialEq)]
pub enum GridTag {
    Cell(CellGrid),
    Macro(MacroGrid),
}

impl GridTag {
    pub fn geometry(&self) -> Geometry {
        match self {
            GridTag::Cell(g) => g.geometry(),
            GridTag::Macro(g) => g.geometry(),
        }
    }
}

fn write_header(
    w: &mut impl Write,
    tag: &GridTag,
    components: u32,
) -> Result<()> {
    let geom = tag.geometry();
    let mut head = [0u8; 64];
    head[0..8].copy_from_slice(MAGIC);
    head[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    let kind: u32 = match tag {
        GridTag::Cell(_) => 0,
        GridTag::Macro(_) => 1,
    };
    head[12..16].copy_from_slice(&kind.to_le_bytes());
    for d in 0..3 {
        head[16 + 4 * d..20 + 4 * d].copy_from_slice(&(geom.n[d] as u32).to_le_bytes());
    }
    head[28..32].copy_from_slice(&components.to_le_bytes());
    head[32..40].copy_from_slice(&(geom.len() as u64).to_le_bytes());
    let (side, radius) = match tag {
        GridTag::Cell(_) => (0.0f64, 0.0f64),
        GridTag::Macro(g) => (g.side(), g.support_radius()),
    };
    head[40..48].copy_from_slice(&side.to_le_bytes());
    head[48..56].copy_from_slice(&radius.to_le_bytes());
    w.write_all(&head)?;
    let mut basis = [0u8; 72];
    for c in 0..3 {
        for r in 0..3 {
            let off = 8 * (3 * c + r);
            basis[off..off + 8].copy_from_slice(&geom.basis[c][r].to_le_bytes());
        }
    }
    w.write_all(&basis)?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<(GridTag, u32, u64)> {
    let mut head = [0u8; 64];
    r.read_exact(&mut head)?;
    if &head[0..8] != MAGIC {
        return Err(CurlhomError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CurlhomError::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let kind = u32::from_le_bytes(head[12..16].try_into().unwrap());
    let mut n = [0usize; 3];
    for d in 0..3 {
        n[d] = u32::from_le_bytes(head[16 + 4 * d..20 + 4 * d].try_into().unwrap()) as usize;
    }
    let components = u32::from_le_bytes(head[28..32].try_into().unwrap());
    let count = u64::from_le_bytes(head[32..40].try_into().unwrap());
    let side = f64::from_le_bytes(head[40..48].try_into().unwrap());
    let radius = f64::from_le_bytes(head[48..56].try_into().unwrap());
    let mut basis_bytes = [0u8; 72];
    r.read_exact(&mut basis_bytes)?;
    let mut basis = [[0.0f64; 3]; 3];
    for c in 0..3 {
        for r2 in 0..3 {
            let off = 8 * (3 * c + r2);
            basis[c][r2] = f64::from_le_bytes(basis_bytes[off..off + 8].try_into().unwrap());
        }
    }
    let tag = match kind {
        0 => GridTag::Cell(CellGrid::new(crate::grid::Lattice::new(basis)?, n)?),
        1 => GridTag::Macro(MacroGrid::new(side, radius, n)?),
        k => return Err(CurlhomError::Format(format!("unknown grid kind {k}"))),
    };
    if count as usize != tag.geometry().len() {
        return Err(CurlhomError::Format("node count mismatch".into()));
    }
    Ok((tag, components, count))
}

fn write_planes(w: &mut impl Write, planes: &[&[C64]], len: usize) -> Result<()> {
    let mut buf = Vec::with_capacity(planes.len() * 16);
    for idx in 0..len {
        buf.clear();
        for p in planes {
            buf.extend_from_slice(&p[idx].re.to_le_bytes());
            buf.extend_from_slice(&p[idx].im.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_planes(r: &mut impl Read, planes: &mut [&mut Vec<C64>], len: usize) -> Result<()> {
    let stride = planes.len() * 16;
    let mut buf = vec![0u8; stride];
    for idx in 0..len {
        r.read_exact(&mut buf)?;
        for (c, p) in planes.iter_mut().enumerate() {
            let re = f64::from_le_bytes(buf[16 * c..16 * c + 8].try_into().unwrap());
            let im = f64::from_le_bytes(buf[16 * c + 8..16 * c + 16].try_into().unwrap());
            p[idx] = C64::new(re, im);
        }
    }
    Ok(())
}

/// Writes a vector field dump.
pub fn dump_vector_field(w: &mut impl Write, tag: &GridTag, field: &VectorField) -> Result<()> {
    if tag.geometry() != field.geom {
        return Err(CurlhomError::Grid("dump grid does not match field".into()));
    }
    write_header(w, tag, 3)?;
    write_planes(
        w,
        &[&field.comps[0], &field.comps[1], &field.comps[2]],
        field.geom.len(),
    )
}

/// Reads a vector field dump.
pub fn load_vector_field(r: &mut impl Read) -> Result<(GridTag, VectorField)> {
    let (tag, components, count) = read_header(r)?;
    if components != 3 {
        return Err(CurlhomError::Format(format!(
            "expected 3 components, found {components}"
        )));
    }
    let mut field = VectorField::zeros(&tag.geometry());
    let [c0, c1, c2] = &mut field.comps;
    read_planes(r, &mut [c0, c1, c2], count as usize)?;
    Ok((tag, field))
}

/// Writes a scalar field dump.
pub fn dump_scalar_field(w: &mut impl Write, tag: &GridTag, field: &ScalarField) -> Result<()> {
    if tag.geometry() != field.geom {
        return Err(CurlhomError::Grid("dump grid does not match field".into()));
    }
    write_header(w, tag, 1)?;
    write_planes(w, &[&field.data], field.geom.len())
}

/// Reads a scalar field dump.
pub fn load_scalar_field(r: &mut impl Read) -> Result<(GridTag, ScalarField)> {
    let (tag, components, count) = read_header(r)?;
    if components != 1 {
        return Err(CurlhomError::Format(format!(
            "expected 1 component, found {components}"
        )));
    }
    let mut field = ScalarField::zeros(&tag.geometry());
    read_planes(r, &mut [&mut field.data], count as usize)?;
    Ok((tag, field))
}

/// Writes a symmetric matrix field dump (6 components, zero imaginary parts).
pub fn dump_matrix_field(w: &mut impl Write, tag: &GridTag, field: &MatrixField) -> Result<()> {
    if tag.geometry() != field.geom {
        return Err(CurlhomError::Grid("dump grid does not match field".into()));
    }
    write_header(w, tag, 6)?;
    let len = field.geom.len();
    let mut buf = Vec::with_capacity(6 * 16);
    for idx in 0..len {
        buf.clear();
        for c in 0..6 {
            buf.extend_from_slice(&field.m[idx][c].to_le_bytes());
            buf.extend_from_slice(&0.0f64.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a symmetric matrix field dump.
pub fn load_matrix_field(r: &mut impl Read) -> Result<(GridTag, MatrixField)> {
    let (tag, components, count) = read_header(r)?;
    if components != 6 {
        return Err(CurlhomError::Format(format!(
            "expected 6 components, found {components}"
        )));
    }
    let len = count as usize;
    let mut entries = Vec::with_capacity(len);
    let mut buf = vec![0u8; 6 * 16];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        let mut e = [0.0f64; 6];
        for c in 0..6 {
            e[c] = f64::from_le_bytes(buf[16 * c..16 * c + 8].try_into().unwrap());
        }
        entries.push(e);
    }
    let geom = tag.geometry();
    let mut inv = Vec::with_capacity(len);
    for e in &entries {
        let iv = sym3_inv(e).ok_or_else(|| CurlhomError::Format("singular matrix entry".into()))?;
        inv.push(iv);
    }
    Ok((
        tag,
        MatrixField {
            geom,
            m: entries,
            inv,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellGrid, MacroGrid};

    #[test]
    fn constant_field_l2_norm_scales_with_volume() {
        let geom = MacroGrid::new(2.0, 0.5, [8, 8, 8]).unwrap().geometry();
        let f = VectorField::from_fn(&geom, |_| {
            [C64::new(3.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)]
        });
        // |c| * sqrt(V), V = 8
        assert!((f.l2_norm() - 3.0 * 8.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn matrix_field_rejects_non_spd() {
        let geom = CellGrid::cubic(4).unwrap().geometry();
        let r = MatrixField::from_fn(&geom, |_| {
            [[1.0, 0.0, 0.0], [0.0, -2.0, 0.0], [0.0, 0.0, 1.0]]
        });
        assert!(matches!(r, Err(CurlhomError::NotSpd { .. })));
    }

    #[test]
    fn matrix_inverse_consistency() {
        let geom = CellGrid::cubic(4).unwrap().geometry();
        let m = MatrixField::from_fn(&geom, |y| {
            let a = 2.0 + (crate::grid::TAU * y[0]).sin();
            [[a, 0.1, 0.0], [0.1, a + 1.0, 0.2], [0.0, 0.2, a + 2.0]]
        })
        .unwrap();
        assert!(m.inverse_consistency() < 1e-12);
    }

    #[test]
    fn sym3_eigenvalues_diagonal() {
        let ev = sym3_eigenvalues(&[3.0, 1.0, 2.0, 0.0, 0.0, 0.0]);
        assert!((ev[0] - 1.0).abs() < 1e-12);
        assert!((ev[1] - 2.0).abs() < 1e-12);
        assert!((ev[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_inner_is_hermitian() {
        let geom = CellGrid::cubic(4).unwrap().geometry();
        let w = MatrixField::from_fn(&geom, |y| {
            let a = 2.0 + 0.5 * (crate::grid::TAU * y[1]).cos();
            [[a, 0.0, 0.0], [0.0, a, 0.1], [0.0, 0.1, a]]
        })
        .unwrap();
        let mk = |s: f64| {
            let mut p = FieldPair::zeros(&geom);
            for idx in 0..geom.len() {
                let x = geom.node(geom.coords(idx));
                p.u.set(
                    idx,
                    [
                        C64::new((crate::grid::TAU * x[0]).sin() * s, 0.3),
                        C64::new(0.0, s),
                        C64::new(1.0, -s),
                    ],
                );
                p.v.set(
                    idx,
                    [
                        C64::new(s, 0.1),
                        C64::new((crate::grid::TAU * x[2]).cos(), 0.0),
                        C64::new(-0.2, s),
                    ],
                );
            }
            p
        };
        let p = mk(1.0);
        let q = mk(-0.7);
        let a = weighted_inner(&p, &q, &w, &w);
        let b = weighted_inner(&q, &p, &w, &w);
        assert!((a - b.conj()).norm() < 1e-12 * a.norm().max(1.0));
    }

    #[test]
    fn dump_roundtrip_vector_cell() {
        let grid = CellGrid::cubic(4).unwrap();
        let geom = grid.geometry();
        let f = VectorField::from_fn(&geom, |y| {
            [
                C64::new(y[0], -y[1]),
                C64::new(y[2] * 2.0, 0.5),
                C64::new(-1.0, y[0] * y[2]),
            ]
        });
        let mut buf = Vec::new();
        dump_vector_field(&mut buf, &GridTag::Cell(grid.clone()), &f).unwrap();
        // header + basis block + payload
        assert_eq!(buf.len(), 64 + 72 + 64 * 3 * 16);
        let (tag, g) = load_vector_field(&mut buf.as_slice()).unwrap();
        assert_eq!(tag, GridTag::Cell(grid));
        assert_eq!(f, g);
    }

    #[test]
    fn dump_roundtrip_macro_scalar() {
        let grid = MacroGrid::new(1.0, 0.25, [4, 6, 4]).unwrap();
        let geom = grid.geometry();
        let f = ScalarField::from_fn(&geom, |x| C64::new(x[0] + 2.0 * x[1], x[2]));
        let mut buf = Vec::new();
        dump_scalar_field(&mut buf, &GridTag::Macro(grid.clone()), &f).unwrap();
        let (tag, g) = load_scalar_field(&mut buf.as_slice()).unwrap();
        assert_eq!(tag, GridTag::Macro(grid));
        assert_eq!(f, g);
    }
}
