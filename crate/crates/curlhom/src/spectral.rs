//! FFT-based spectral calculus on periodic grids.
//!
//! Transforms map nodal values to Fourier coefficients in the convention
//! `f(x) = sum_m fhat_m exp(i k_m . x)`, so the forward pass carries the
//! `1/N` normalization. Differential operators are diagonal per mode with
//! Nyquist bins annihilated, which keeps every operator skew-adjoint or
//! self-adjoint exactly in the nodal quadrature inner product. FFT lines
//! run under rayon; all mode loops and reductions are sequential so output
//! is independent of worker count.

use crate::error::{CurlhomError, Result};
use crate::field::{C64, ScalarField, VectorField};
use crate::grid::Geometry;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use std::sync::{Arc, Mutex};

/// Below this many nodes the transforms run single-threaded.
const PAR_MIN: usize = 1 << 15;
const LINES_PER_TASK: usize = 8;

#[derive(Clone, Copy, PartialEq)]
enum Dir {
    Fwd,
    Bwd,
}

/// Planned transforms and cached wavevector tables for one grid.
pub struct SpectralEngine {
    pub geom: Geometry,
    fwd: [Arc<dyn Fft<f64>>; 3],
    bwd: [Arc<dyn Fft<f64>>; 3],
    /// Per-axis wavevector contribution of each bin (zero on Nyquist bins).
    kaxis: [Vec<[f64; 3]>; 3],
    pool: Mutex<Vec<Vec<C64>>>,
}

impl SpectralEngine {
    pub fn new(geom: &Geometry) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        let fwd = [
            planner.plan_fft_forward(geom.n[0]),
            planner.plan_fft_forward(geom.n[1]),
            planner.plan_fft_forward(geom.n[2]),
        ];
        let bwd = [
            planner.plan_fft_inverse(geom.n[0]),
            planner.plan_fft_inverse(geom.n[1]),
            planner.plan_fft_inverse(geom.n[2]),
        ];
        let kaxis = [0, 1, 2].map(|d| {
            (0..geom.n[d])
                .map(|j| {
                    let mut coords = [0usize; 3];
                    coords[d] = j;
                    geom.wavevector(coords)
                })
                .collect()
        });
        Self {
            geom: geom.clone(),
            fwd,
            bwd,
            kaxis,
            pool: Mutex::new(Vec::new()),
        }
    }

    fn take_buf(&self, len: usize) -> Vec<C64> {
        let mut pool = self.pool.lock().unwrap();
        match pool.pop() {
            Some(mut b) => {
                b.resize(len, C64::new(0.0, 0.0));
                b
            }
            None => vec![C64::new(0.0, 0.0); len],
        }
    }

    fn put_buf(&self, buf: Vec<C64>) {
        self.pool.lock().unwrap().push(buf);
    }

    /// Batched FFTs over contiguous lines of length `fft.len()`.
    fn lines(&self, data: &mut [C64], axis: usize, dir: Dir) {
        let fft = match dir {
            Dir::Fwd => &self.fwd[axis],
            Dir::Bwd => &self.bwd[axis],
        };
        let line = fft.len();
        let batch = line * LINES_PER_TASK;
        if data.len() >= PAR_MIN {
            data.par_chunks_mut(batch).for_each_init(
                || vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()],
                |scratch, chunk| fft.process_with_scratch(chunk, scratch),
            );
        } else {
            let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            for chunk in data.chunks_mut(batch) {
                fft.process_with_scratch(chunk, scratch.as_mut_slice());
            }
        }
    }

    /// Transforms along axis 1 by transposing each axis-2 plane.
    fn axis1(&self, data: &mut [C64], dir: Dir) {
        let [n0, n1, _] = self.geom.n;
        let fft = match dir {
            Dir::Fwd => &self.fwd[1],
            Dir::Bwd => &self.bwd[1],
        };
        let plane = n0 * n1;
        let work = |buf: &mut Vec<C64>, scratch: &mut Vec<C64>, slab: &mut [C64]| {
            for i1 in 0..n1 {
                for i0 in 0..n0 {
                    buf[i0 * n1 + i1] = slab[i1 * n0 + i0];
                }
            }
            fft.process_with_scratch(buf, scratch);
            for i0 in 0..n0 {
                for i1 in 0..n1 {
                    slab[i1 * n0 + i0] = buf[i0 * n1 + i1];
                }
            }
        };
        if data.len() >= PAR_MIN {
            data.par_chunks_mut(plane).for_each_init(
                || {
                    (
                        vec![C64::new(0.0, 0.0); plane],
                        vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()],
                    )
                },
                |(buf, scratch), slab| work(buf, scratch, slab),
            );
        } else {
            let mut buf = vec![C64::new(0.0, 0.0); plane];
            let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            for slab in data.chunks_mut(plane) {
                work(&mut buf, &mut scratch, slab);
            }
        }
    }

    /// Transforms along axis 2 via a full 0<->2 transpose.
    fn axis2(&self, data: &mut [C64], dir: Dir) {
        let [n0, n1, n2] = self.geom.n;
        let len = data.len();
        let mut buf = self.take_buf(len);
        // buf[(i0*n1 + i1)*n2 + i2] = data[(i2*n1 + i1)*n0 + i0]
        if len >= PAR_MIN {
            buf.par_chunks_mut(n2).enumerate().for_each(|(line, out)| {
                let i0 = line / n1;
                let i1 = line % n1;
                let base = i1 * n0 + i0;
                for (i2, o) in out.iter_mut().enumerate() {
                    *o = data[i2 * n1 * n0 + base];
                }
            });
        } else {
            for line in 0..n0 * n1 {
                let i0 = line / n1;
                let i1 = line % n1;
                let base = i1 * n0 + i0;
                for i2 in 0..n2 {
                    buf[line * n2 + i2] = data[i2 * n1 * n0 + base];
                }
            }
        }
        self.lines(&mut buf, 2, dir);
        if len >= PAR_MIN {
            data.par_chunks_mut(n0).enumerate().for_each(|(row, out)| {
                let i2 = row / n1;
                let i1 = row % n1;
                for (i0, o) in out.iter_mut().enumerate() {
                    *o = buf[(i0 * n1 + i1) * n2 + i2];
                }
            });
        } else {
            for row in 0..n2 * n1 {
                let i2 = row / n1;
                let i1 = row % n1;
                for i0 in 0..n0 {
                    data[row * n0 + i0] = buf[(i0 * n1 + i1) * n2 + i2];
                }
            }
        }
        self.put_buf(buf);
    }

    fn transform(&self, data: &mut [C64], dir: Dir) {
        debug_assert_eq!(data.len(), self.geom.len());
        self.lines(data, 0, dir);
        self.axis1(data, dir);
        self.axis2(data, dir);
        if dir == Dir::Fwd {
            let scale = 1.0 / self.geom.len() as f64;
            if data.len() >= PAR_MIN {
                data.par_iter_mut().for_each(|z| *z *= scale);
            } else {
                for z in data.iter_mut() {
                    *z *= scale;
                }
            }
        }
    }

    /// Nodal values to Fourier coefficients, in place.
    pub fn forward(&self, data: &mut [C64]) {
        self.transform(data, Dir::Fwd);
    }

    /// Fourier coefficients to nodal values, in place.
    pub fn inverse(&self, data: &mut [C64]) {
        self.transform(data, Dir::Bwd);
    }

    pub fn forward_vector(&self, f: &mut VectorField) {
        for c in 0..3 {
            self.forward(&mut f.comps[c]);
        }
    }

    pub fn inverse_vector(&self, f: &mut VectorField) {
        for c in 0..3 {
            self.inverse(&mut f.comps[c]);
        }
    }

    /// Wavevector of the mode at linear spectrum position (i0, i1, i2).
    #[inline]
    pub fn k_at(&self, i0: usize, i1: usize, i2: usize) -> [f64; 3] {
        let a = &self.kaxis[0][i0];
        let b = &self.kaxis[1][i1];
        let c = &self.kaxis[2][i2];
        [a[0] + b[0] + c[0], a[1] + b[1] + c[1], a[2] + b[2] + c[2]]
    }

    /// Runs `body(idx, k)` over every mode in linear order.
    #[inline]
    pub fn for_each_mode(&self, mut body: impl FnMut(usize, [f64; 3])) {
        let [n0, n1, n2] = self.geom.n;
        let mut idx = 0;
        for i2 in 0..n2 {
            for i1 in 0..n1 {
                for i0 in 0..n0 {
                    body(idx, self.k_at(i0, i1, i2));
                    idx += 1;
                }
            }
        }
    }

    /// Gradient of a scalar field.
    pub fn grad(&self, f: &ScalarField) -> VectorField {
        debug_assert_eq!(f.geom, self.geom);
        let mut spec = f.data.clone();
        self.forward(&mut spec);
        let mut out = VectorField::zeros(&self.geom);
        self.for_each_mode(|idx, k| {
            let ik = C64::new(0.0, 1.0) * spec[idx];
            for c in 0..3 {
                out.comps[c][idx] = ik * k[c];
            }
        });
        self.inverse_vector(&mut out);
        out
    }

    /// Divergence of a vector field.
    pub fn div(&self, f: &VectorField) -> ScalarField {
        debug_assert_eq!(f.geom, self.geom);
        let mut spec = f.clone();
        self.forward_vector(&mut spec);
        let mut out = ScalarField::zeros(&self.geom);
        self.for_each_mode(|idx, k| {
            let s = k[0] * spec.comps[0][idx] + k[1] * spec.comps[1][idx]
                + k[2] * spec.comps[2][idx];
            out.data[idx] = C64::new(0.0, 1.0) * s;
        });
        self.inverse(&mut out.data);
        out
    }

    /// Curl of a vector field.
    pub fn curl(&self, f: &VectorField) -> VectorField {
        debug_assert_eq!(f.geom, self.geom);
        let mut spec = f.clone();
        self.forward_vector(&mut spec);
        self.curl_spectrum_in_place(&mut spec);
        self.inverse_vector(&mut spec);
        spec
    }

    /// Applies the curl multiplier `ik x` to a spectrum in place.
    pub fn curl_spectrum_in_place(&self, spec: &mut VectorField) {
        self.for_each_mode(|idx, k| {
            let v = spec.at(idx);
            let i = C64::new(0.0, 1.0);
            spec.set(
                idx,
                [
                    i * (k[1] * v[2] - k[2] * v[1]),
                    i * (k[2] * v[0] - k[0] * v[2]),
                    i * (k[0] * v[1] - k[1] * v[0]),
                ],
            );
        });
    }

    /// Projects onto the divergence-free subspace, in place on nodal values.
    pub fn leray(&self, f: &mut VectorField) {
        self.forward_vector(f);
        self.leray_spectrum_in_place(f);
        self.inverse_vector(f);
    }

    /// Leray projection applied to a spectrum in place.
    pub fn leray_spectrum_in_place(&self, spec: &mut VectorField) {
        self.for_each_mode(|idx, k| {
            let kk = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            if kk > 0.0 {
                let v = spec.at(idx);
                let d = (k[0] * v[0] + k[1] * v[1] + k[2] * v[2]) / kk;
                spec.set(idx, [v[0] - d * k[0], v[1] - d * k[1], v[2] - d * k[2]]);
            }
        });
    }

    /// Sobolev norm of index `s` for a scalar field.
    pub fn sobolev_norm_scalar(&self, f: &ScalarField, s: f64) -> f64 {
        let mut spec = f.data.clone();
        self.forward(&mut spec);
        let mut acc = 0.0;
        self.for_each_mode(|idx, k| {
            let kk = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            acc += (1.0 + kk).powf(s) * spec[idx].norm_sqr();
        });
        (self.geom.volume * acc).sqrt()
    }

    /// Sobolev norm of index `s` for a vector field.
    pub fn sobolev_norm(&self, f: &VectorField, s: f64) -> f64 {
        let mut spec = f.clone();
        self.forward_vector(&mut spec);
        let mut acc = 0.0;
        self.for_each_mode(|idx, k| {
            let kk = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            let mag = spec.comps[0][idx].norm_sqr()
                + spec.comps[1][idx].norm_sqr()
                + spec.comps[2][idx].norm_sqr();
            acc += (1.0 + kk).powf(s) * mag;
        });
        (self.geom.volume * acc).sqrt()
    }

    /// Solves `laplace u = f` on the mean-free, Nyquist-free part of `f`.
    pub fn poisson_inverse(&self, f: &ScalarField) -> ScalarField {
        let mut spec = f.data.clone();
        self.forward(&mut spec);
        self.for_each_mode(|idx, k| {
            let kk = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            spec[idx] = if kk > 0.0 {
                -spec[idx] / kk
            } else {
                C64::new(0.0, 0.0)
            };
        });
        self.inverse(&mut spec);
        ScalarField {
            geom: self.geom.clone(),
            data: spec,
        }
    }

    /// Per-axis bin remap weights for zero-pad refinement.
    fn refine_map(&self, target: &Geometry, d: usize) -> Vec<([usize; 2], [f64; 2], usize)> {
        let ns = self.geom.n[d];
        let nt = target.n[d];
        (0..ns)
            .map(|j| {
                if j == ns / 2 && nt > ns {
                    // split Nyquist content evenly between +-ns/2
                    ([ns / 2, nt - ns / 2], [0.5, 0.5], 2)
                } else {
                    let m = Geometry::signed_mode(ns, j);
                    let bin = if m >= 0 { m as usize } else { (nt as i64 + m) as usize };
                    ([bin, 0], [1.0, 0.0], 1)
                }
            })
            .collect()
    }

    /// Trigonometric interpolation onto a finer grid over the same box.
    pub fn refine_scalar(&self, f: &ScalarField, target: &SpectralEngine) -> Result<ScalarField> {
        self.check_refinable(&target.geom)?;
        let mut spec = f.data.clone();
        self.forward(&mut spec);
        let mut out = vec![C64::new(0.0, 0.0); target.geom.len()];
        self.scatter_refined(&spec, &mut out, &target.geom);
        target.inverse(&mut out);
        Ok(ScalarField {
            geom: target.geom.clone(),
            data: out,
        })
    }

    /// Trigonometric interpolation of a vector field onto a finer grid.
    pub fn refine_vector(&self, f: &VectorField, target: &SpectralEngine) -> Result<VectorField> {
        self.check_refinable(&target.geom)?;
        let mut spec = f.clone();
        self.forward_vector(&mut spec);
        let mut out = VectorField::zeros(&target.geom);
        for c in 0..3 {
            self.scatter_refined(&spec.comps[c], &mut out.comps[c], &target.geom);
        }
        target.inverse_vector(&mut out);
        Ok(out)
    }

    fn check_refinable(&self, target: &Geometry) -> Result<()> {
        for c in 0..3 {
            for r in 0..3 {
                if (self.geom.basis[c][r] - target.basis[c][r]).abs() > 1e-12 {
                    return Err(CurlhomError::Grid(
                        "refinement requires matching lattice bases".into(),
                    ));
                }
            }
            if (self.geom.origin[c] - target.origin[c]).abs() > 1e-12 {
                return Err(CurlhomError::Grid(
                    "refinement requires matching origins".into(),
                ));
            }
            if target.n[c] < self.geom.n[c] {
                return Err(CurlhomError::Grid(
                    "refinement target must not be coarser".into(),
                ));
            }
        }
        Ok(())
    }

    fn scatter_refined(&self, spec: &[C64], out: &mut [C64], target: &Geometry) {
        let maps = [
            self.refine_map(target, 0),
            self.refine_map(target, 1),
            self.refine_map(target, 2),
        ];
        let [n0, n1, _] = self.geom.n;
        let [t0, t1, _] = target.n;
        for (idx, &z) in spec.iter().enumerate() {
            if z == C64::new(0.0, 0.0) {
                continue;
            }
            let i0 = idx % n0;
            let i1 = (idx / n0) % n1;
            let i2 = idx / (n0 * n1);
            let (b0, b1, b2) = (&maps[0][i0], &maps[1][i1], &maps[2][i2]);
            for a in 0..b2.2 {
                for b in 0..b1.2 {
                    for c in 0..b0.2 {
                        let w = b2.1[a] * b1.1[b] * b0.1[c];
                        let pos = (b2.0[a] * t1 + b1.0[b]) * t0 + b0.0[c];
                        out[pos] += z * w;
                    }
                }
            }
        }
    }

    /// Evaluates a scalar spectrum on the tensor grid of fractional
    /// coordinates `ys[0] x ys[1] x ys[2]` by partial Fourier sums. Exact
    /// for band-limited data; Nyquist bins evaluate as cosines, matching
    /// the refinement split. Output is axis-0 fastest, like node storage.
    pub fn evaluate_spectrum_on_grid(&self, spec: &[C64], ys: [&[f64]; 3]) -> Vec<C64> {
        let [n0, n1, n2] = self.geom.n;
        let (q0, q1, q2) = (ys[0].len(), ys[1].len(), ys[2].len());
        let p0 = phase_matrix(n0, ys[0]);
        let p1 = phase_matrix(n1, ys[1]);
        let p2 = phase_matrix(n2, ys[2]);
        // contract axis 0 (contiguous), then 1, then 2
        let mut t0 = vec![C64::new(0.0, 0.0); q0 * n1 * n2];
        for line in 0..n1 * n2 {
            let src = &spec[line * n0..(line + 1) * n0];
            let dst = &mut t0[line * q0..(line + 1) * q0];
            for (j, d) in dst.iter_mut().enumerate() {
                let row = &p0[j * n0..(j + 1) * n0];
                let mut s = C64::new(0.0, 0.0);
                for i in 0..n0 {
                    s += src[i] * row[i];
                }
                *d = s;
            }
        }
        let mut t1 = vec![C64::new(0.0, 0.0); q0 * q1 * n2];
        for i2 in 0..n2 {
            for j1 in 0..q1 {
                let row = &p1[j1 * n1..(j1 + 1) * n1];
                let dst = &mut t1[(i2 * q1 + j1) * q0..(i2 * q1 + j1 + 1) * q0];
                for (i1, &w) in row.iter().enumerate() {
                    let src = &t0[(i2 * n1 + i1) * q0..(i2 * n1 + i1 + 1) * q0];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s * w;
                    }
                }
            }
        }
        let mut out = vec![C64::new(0.0, 0.0); q0 * q1 * q2];
        for j2 in 0..q2 {
            let row = &p2[j2 * n2..(j2 + 1) * n2];
            let dst = &mut out[j2 * q1 * q0..(j2 + 1) * q1 * q0];
            for (i2, &w) in row.iter().enumerate() {
                let src = &t1[i2 * q1 * q0..(i2 + 1) * q1 * q0];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * w;
                }
            }
        }
        out
    }

    /// Vector variant of [`evaluate_spectrum_on_grid`], one block per
    /// component.
    pub fn evaluate_vector_on_grid(&self, spec: &VectorField, ys: [&[f64]; 3]) -> [Vec<C64>; 3] {
        [0, 1, 2].map(|c| self.evaluate_spectrum_on_grid(&spec.comps[c], ys))
    }
}

/// Row-major `[len(ys)][n]` table of mode phases at fractional coordinates.
fn phase_matrix(n: usize, ys: &[f64]) -> Vec<C64> {
    use crate::grid::TAU;
    let mut p = vec![C64::new(0.0, 0.0); ys.len() * n];
    for (j, &y) in ys.iter().enumerate() {
        for i in 0..n {
            p[j * n + i] = if Geometry::is_nyquist(n, i) {
                C64::new((TAU * (n as f64 / 2.0) * y).cos(), 0.0)
            } else {
                C64::from_polar(1.0, TAU * Geometry::signed_mode(n, i) as f64 * y)
            };
        }
    }
    p
}
