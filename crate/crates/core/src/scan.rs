//! Associative scan over the diagonalized recurrence.
//!
//! On a periodic grid with uniform parameters the step operator is block
//! diagonal in Fourier space, one 3x3 block per mode. Each block is
//! diagonalized once, the drives are transformed once, and the linear
//! recurrence `z_n = l z_{n-1} + b_n` is evaluated as an inclusive prefix
//! under the combine `(x, y) -> (y.a x.a, y.a x.b + y.b)`.

use crate::error::{Error, Result};
use crate::fft2::Fft2;
use crate::grid::{BoundaryCondition, Field, GridShape, GridState, PhysicalParams};
use crate::linalg::{adjoint3, matvec3, Mat3, Vec3};
use crate::real::Real;
use crate::spectral::{periodic_modes, stencil_eigen, LocalParams, ModeOperator, SymbolModel};
use num_complex::Complex;
use rayon::prelude::*;
use std::sync::atomic::{AtomicUsize, Ordering};

#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement<T> {
    pub a: Vec<Complex<T>>,
    pub b: Vec<Complex<T>>,
}

impl<T: Real> ScanElement<T> {
    pub fn new(a: Vec<Complex<T>>, b: Vec<Complex<T>>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("a has {} entries, b has {}", a.len(), b.len())));
        }
        Ok(ScanElement { a, b })
    }

    /// `(ones, zeros)`.
    pub fn identity(d: usize) -> Self {
        ScanElement { a: vec![Complex::new(T::one(), T::zero()); d], b: vec![Complex::new(T::zero(), T::zero()); d] }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// `x` is the earlier element: `(y.a x.a, y.a x.b + y.b)`.
pub fn combine<T: Real>(x: &ScanElement<T>, y: &ScanElement<T>) -> Result<ScanElement<T>> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("combine of lengths {} and {}", x.len(), y.len())));
    }
    Ok(combine_unchecked(x, y))
}

fn combine_unchecked<T: Real>(x: &ScanElement<T>, y: &ScanElement<T>) -> ScanElement<T> {
    let a = x.a.iter().zip(&y.a).map(|(&xa, &ya)| ya * xa).collect();
    let b = x.b.iter().zip(&y.a).zip(&y.b).map(|((&xb, &ya), &yb)| ya * xb + yb).collect();
    ScanElement { a, b }
}

/// Left fold; the reference for [`parallel_scan`].
pub fn sequential_scan<T: Real>(elements: &[ScanElement<T>]) -> Result<Vec<ScanElement<T>>> {
    let mut out: Vec<ScanElement<T>> = Vec::with_capacity(elements.len());
    for e in elements {
        let next = match out.last() {
            Some(prev) => combine(prev, e)?,
            None => e.clone(),
        };
        out.push(next);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub combines: usize,
    pub levels: usize,
}

/// Inclusive prefix by the work-efficient up-sweep/down-sweep tree.
pub fn parallel_scan<T: Real>(elements: &[ScanElement<T>]) -> Result<Vec<ScanElement<T>>> {
    parallel_scan_with_stats(elements).map(|(v, _)| v)
}

/// Below this many complex entries per level the tree runs on one thread.
const PAR_THRESHOLD: usize = 1 << 14;

/// Canonical schedule: up-sweep strides `1, 2, 4, ...` combining
/// `a[i - s]` into `a[i]` at `i = 2s - 1, 4s - 1, ...`; down-sweep strides
/// descending, at `i = 3s - 1, 5s - 1, ...`. Every level writes disjoint
/// slots from values of the previous level, so running a level in parallel
/// gives bit-identical results.
pub fn parallel_scan_with_stats<T: Real>(elements: &[ScanElement<T>]) -> Result<(Vec<ScanElement<T>>, ScanStats)> {
    let n = elements.len();
    if n == 0 {
        return Err(Error::Precondition("scan needs at least one element".into()));
    }
    let d = elements[0].len();
    if let Some(e) = elements.iter().find(|e| e.a.len() != d || e.b.len() != d) {
        return Err(Error::Shape(format!("element of length {} in a scan of length {d}", e.a.len())));
    }
    let mut a = elements.to_vec();
    let counter = AtomicUsize::new(0);
    let mut levels = 0;
    let mut run_level = |a: &mut Vec<ScanElement<T>>, s: usize, start: usize| {
        let idx: Vec<usize> = (start..n).step_by(2 * s).collect();
        if idx.is_empty() {
            return;
        }
        levels += 1;
        counter.fetch_add(idx.len(), Ordering::Relaxed);
        let updates: Vec<ScanElement<T>> = if idx.len() * d >= PAR_THRESHOLD {
            idx.par_iter().map(|&i| combine_unchecked(&a[i - s], &a[i])).collect()
        } else {
            idx.iter().map(|&i| combine_unchecked(&a[i - s], &a[i])).collect()
        };
        for (i, u) in idx.into_iter().zip(updates) {
            a[i] = u;
        }
    };
    let mut s = 1;
    while 2 * s - 1 < n {
        run_level(&mut a, s, 2 * s - 1);
        s *= 2;
    }
    while s >= 1 {
        if 3 * s - 1 < n {
            run_level(&mut a, s, 3 * s - 1);
        }
        s /= 2;
    }
    let stats = ScanStats { combines: counter.load(Ordering::Relaxed), levels };
    Ok((a, stats))
}

/// Per-mode handling inside a [`DiagonalizedSystem`].
#[derive(Clone, Debug)]
pub enum ModeBlock<T> {
    /// Diagonalized; its three coefficients start at `offset`.
    Diagonal { offset: usize, p: Mat3<T>, p_inv: Mat3<T> },
    /// Stepped with the dense 3x3 matrix.
    Dense { matrix: Mat3<T>, radius: T },
}

/// The stepper's Fourier-space block structure on a periodic grid.
#[derive(Clone, Debug)]
pub struct DiagonalizedSystem<T: Real> {
    pub shape: GridShape<T>,
    /// Eigenvalues of all diagonalized modes, three per mode.
    pub lambda_diag: Vec<Complex<T>>,
    /// One block per mode in FFT bin order.
    pub blocks: Vec<ModeBlock<T>>,
    /// Modes stepped densely (DC and near-coincident eigenvalues).
    pub degenerate_modes: Vec<usize>,
    /// `alpha dt`, scaling of the drive into the `p` row.
    pub drive_gain: T,
    /// Parameters were spatially varying and replaced by their means.
    pub approximate: bool,
    pub local: LocalParams<T>,
}

/// Eigenvalue gaps below this are stepped densely.
pub const DEGENERACY_GAP: f64 = 1e-6;

impl<T: Real> DiagonalizedSystem<T> {
    /// Non-uniform parameters are replaced by their spatial means, which
    /// makes the system an approximation; `approximate` records that.
    pub fn from_params(params: &PhysicalParams<T>, shape: &GridShape<T>, bc: BoundaryCondition) -> Result<Self> {
        if bc != BoundaryCondition::Periodic {
            return Err(Error::Unsupported("the scan path requires periodic boundaries".into()));
        }
        shape.validate()?;
        params.validate(shape)?;
        let approximate = !params.is_uniform();
        let local = LocalParams::new(params.c.mean(), params.kp.mean(), params.ko.mean(), shape.dt);
        let modes = periodic_modes(shape);
        let gap = T::lit(DEGENERACY_GAP);
        let mut lambda_diag = Vec::new();
        let mut blocks = Vec::with_capacity(modes.len());
        let mut degenerate_modes = Vec::new();
        for (k, m) in modes.iter().enumerate() {
            let op = ModeOperator::new(&local, &m.mode, SymbolModel::Stencil, shape.dx);
            let l = op.eigenvalues();
            let min_gap = (l[1] - l[0]).norm().min((l[2] - l[0]).norm()).min((l[1] - l[2]).norm());
            let eig = if m.mode.is_dc() || min_gap < gap { None } else { stencil_eigen(&local, &m.mode, shape.dx).ok() };
            match eig {
                Some(t) => {
                    blocks.push(ModeBlock::Diagonal { offset: lambda_diag.len(), p: t.p, p_inv: t.p_inv });
                    lambda_diag.extend_from_slice(&t.lambda);
                }
                None => {
                    degenerate_modes.push(k);
                    blocks.push(ModeBlock::Dense { matrix: op.matrix(), radius: op.spectral_radius() });
                }
            }
        }
        Ok(DiagonalizedSystem {
            shape: *shape,
            lambda_diag,
            blocks,
            degenerate_modes,
            drive_gain: local.alpha() * shape.dt,
            approximate,
            local,
        })
    }

    pub fn dim(&self) -> usize {
        self.lambda_diag.len()
    }

    pub fn is_stable(&self) -> bool {
        let one = T::one() + T::lit(1e-12);
        self.lambda_diag.iter().all(|l| l.norm() <= one)
            && self.blocks.iter().all(|b| match b {
                ModeBlock::Dense { radius, .. } => *radius <= one,
                ModeBlock::Diagonal { .. } => true,
            })
    }

    fn fft(&self) -> Fft2<T> {
        Fft2::new(self.shape.height, self.shape.width)
    }

    /// Fourier transform of a state: one `[p, ox, oy]` triple per mode.
    pub fn to_modes(&self, x: &GridState<T>) -> Vec<Vec3<T>> {
        let f = self.fft();
        let p = f.forward_real(x.p.as_slice());
        let ox = f.forward_real(x.ox.as_slice());
        let oy = f.forward_real(x.oy.as_slice());
        (0..p.len()).map(|k| [p[k], ox[k], oy[k]]).collect()
    }

    pub fn from_modes(&self, m: &[Vec3<T>]) -> Result<GridState<T>> {
        let f = self.fft();
        let (h, w) = (self.shape.height, self.shape.width);
        let comp = |c: usize| f.inverse_real(m.iter().map(|v| v[c]).collect());
        Ok(GridState {
            p: Field::from_vec(h, w, comp(0))?,
            ox: Field::from_vec(h, w, comp(1))?,
            oy: Field::from_vec(h, w, comp(2))?,
        })
    }

    /// Eigen-coordinates of a state: `P^-1 x_hat` per diagonal mode.
    pub fn eigen_coordinates(&self, x: &GridState<T>) -> Vec<Complex<T>> {
        let xm = self.to_modes(x);
        let mut z = vec![Complex::new(T::zero(), T::zero()); self.dim()];
        for (k, b) in self.blocks.iter().enumerate() {
            if let ModeBlock::Diagonal { offset, p_inv, .. } = b {
                let v = matvec3(p_inv, &xm[k]);
                z[*offset..*offset + 3].copy_from_slice(&v);
            }
        }
        z
    }

    fn drive_modes(&self, drives: &[Field<T>]) -> Result<Vec<Vec<Complex<T>>>> {
        let f = self.fft();
        drives
            .iter()
            .map(|d| {
                if d.dims() != (self.shape.height, self.shape.width) {
                    return Err(Error::Shape(format!("drive is {:?}", d.dims())));
                }
                if !d.is_finite() {
                    return Err(Error::NonFinite { step: None, field: "drive".into() });
                }
                Ok(f.forward_real(d.as_slice()))
            })
            .collect()
    }

    /// Forcing on the eigen-coordinates of one diagonal mode.
    fn forcing(&self, p_inv: &Mat3<T>, dhat: Complex<T>) -> Vec3<T> {
        let g = dhat * self.drive_gain;
        [p_inv[0][0] * g, p_inv[1][0] * g, p_inv[2][0] * g]
    }
}

/// Output of [`run_recurrence_scan`].
#[derive(Clone, Debug)]
pub struct ScanRun<T: Real> {
    pub states: Vec<GridState<T>>,
    /// Eigen-coordinates per step for diagonal modes, when requested.
    pub coefficients: Option<Vec<Vec<Complex<T>>>>,
    pub stats: ScanStats,
}

/// Evaluate `T` steps from `x0` through the scan. Returns every state.
pub fn run_recurrence_scan<T: Real>(
    sys: &DiagonalizedSystem<T>,
    drives: &[Field<T>],
    x0: &GridState<T>,
    keep_coefficients: bool,
) -> Result<ScanRun<T>> {
    let n = drives.len();
    if n == 0 {
        return Ok(ScanRun { states: Vec::new(), coefficients: keep_coefficients.then(Vec::new), stats: ScanStats::default() });
    }
    let dhat = sys.drive_modes(drives)?;
    let x0m = sys.to_modes(x0);
    let d = sys.dim();
    let nm = sys.blocks.len();

    // Step 0 absorbs the initial condition: b_1 = l z_0 + f_1.
    let mut elements = Vec::with_capacity(n);
    for (t, dh) in dhat.iter().enumerate() {
        let mut b = vec![Complex::new(T::zero(), T::zero()); d];
        for (k, blk) in sys.blocks.iter().enumerate() {
            if let ModeBlock::Diagonal { offset, p_inv, .. } = blk {
                let f = sys.forcing(p_inv, dh[k]);
                b[*offset..*offset + 3].copy_from_slice(&f);
                if t == 0 {
                    let z0 = matvec3(p_inv, &x0m[k]);
                    for r in 0..3 {
                        b[offset + r] = b[offset + r] + sys.lambda_diag[offset + r] * z0[r];
                    }
                }
            }
        }
        elements.push(ScanElement { a: sys.lambda_diag.clone(), b });
    }
    let (prefix, stats) = parallel_scan_with_stats(&elements)?;

    // Dense modes, stepped directly.
    let mut dense: Vec<Vec<Vec3<T>>> = vec![Vec::new(); nm];
    for &k in &sys.degenerate_modes {
        if let ModeBlock::Dense { matrix, .. } = &sys.blocks[k] {
            let mut v = x0m[k];
            let mut out = Vec::with_capacity(n);
            for dh in &dhat {
                v = matvec3(matrix, &v);
                v[0] = v[0] + dh[k] * sys.drive_gain;
                out.push(v);
            }
            dense[k] = out;
        }
    }

    let states: Result<Vec<GridState<T>>> = (0..n)
        .into_par_iter()
        .map(|t| {
            let z = &prefix[t].b;
            let xm: Vec<Vec3<T>> = sys
                .blocks
                .iter()
                .enumerate()
                .map(|(k, blk)| match blk {
                    ModeBlock::Diagonal { offset, p, .. } => matvec3(p, &[z[*offset], z[offset + 1], z[offset + 2]]),
                    ModeBlock::Dense { .. } => dense[k][t],
                })
                .collect();
            sys.from_modes(&xm)
        })
        .collect();
    let states = states?;
    if let Some(t) = states.iter().position(|s| !(s.p.is_finite() && s.ox.is_finite() && s.oy.is_finite())) {
        return Err(Error::NonFinite { step: Some(t + 1), field: "state".into() });
    }
    let coefficients = keep_coefficients.then(|| prefix.into_iter().map(|e| e.b).collect());
    Ok(ScanRun { states, coefficients, stats })
}

/// Steps every Fourier mode with its dense 3x3 stencil matrix; no
/// eigen-decomposition. Requires uniform parameters.
pub fn spectral_simulate<T: Real>(
    params: &PhysicalParams<T>,
    shape: &GridShape<T>,
    drives: &[Field<T>],
    x0: &GridState<T>,
) -> Result<Vec<GridState<T>>> {
    if !params.is_uniform() {
        return Err(Error::Unsupported("the spectral stepper requires uniform parameters".into()));
    }
    let sys = DiagonalizedSystem::from_params(params, shape, BoundaryCondition::Periodic)?;
    let mats: Vec<Mat3<T>> = periodic_modes(shape)
        .iter()
        .map(|m| ModeOperator::new(&sys.local, &m.mode, SymbolModel::Stencil, shape.dx).matrix())
        .collect();
    let dhat = sys.drive_modes(drives)?;
    let mut x = sys.to_modes(x0);
    let mut out = Vec::with_capacity(drives.len());
    for dh in &dhat {
        for (k, m) in mats.iter().enumerate() {
            let mut v = matvec3(m, &x[k]);
            v[0] = v[0] + dh[k] * sys.drive_gain;
            x[k] = v;
        }
        out.push(sys.from_modes(&x)?);
    }
    Ok(out)
}

/// `sum_{k=0}^{n-1} A^k F_{n-k}` with zero initial state, evaluated per
/// mode as `P l^k P^-1`. Cost `O(n D)`; for testing.
pub fn unrolled_solution<T: Real>(sys: &DiagonalizedSystem<T>, drives: &[Field<T>], n: usize) -> Result<GridState<T>> {
    if n == 0 || n > drives.len() {
        return Err(Error::Precondition(format!("n must be in 1..={}, got {n}", drives.len())));
    }
    let dhat = sys.drive_modes(&drives[..n])?;
    let mut xm = Vec::with_capacity(sys.blocks.len());
    for (k, blk) in sys.blocks.iter().enumerate() {
        let v = match blk {
            ModeBlock::Diagonal { offset, p, p_inv } => {
                let mut z = [Complex::new(T::zero(), T::zero()); 3];
                for kk in 0..n {
                    let f = sys.forcing(p_inv, dhat[n - 1 - kk][k]);
                    for r in 0..3 {
                        z[r] = z[r] + sys.lambda_diag[offset + r].powu(kk as u32) * f[r];
                    }
                }
                matvec3(p, &z)
            }
            ModeBlock::Dense { matrix, .. } => {
                let mut acc = [Complex::new(T::zero(), T::zero()); 3];
                for kk in 0..n {
                    let mut v = [dhat[n - 1 - kk][k] * sys.drive_gain, Complex::new(T::zero(), T::zero()), Complex::new(T::zero(), T::zero())];
                    for _ in 0..kk {
                        v = matvec3(matrix, &v);
                    }
                    for r in 0..3 {
                        acc[r] = acc[r] + v[r];
                    }
                }
                acc
            }
        };
        xm.push(v);
    }
    sys.from_modes(&xm)
}

/// Gradient of `sum_n <cot_n, x_n>` with respect to each drive field, for a
/// zero initial state. The backward recurrence runs as a scan over the
/// reversed stream with conjugated eigenvalues.
pub fn drive_adjoint<T: Real>(sys: &DiagonalizedSystem<T>, cotangents: &[GridState<T>]) -> Result<Vec<Field<T>>> {
    let n = cotangents.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let f = sys.fft();
    let (h, w) = (sys.shape.height, sys.shape.width);
    let cells = T::from_usize(h * w).unwrap();
    let d = sys.dim();
    // dL/dx_hat = FFT(cot) / N; dL/dz = P^H dL/dx_hat.
    let cot_modes: Vec<Vec<Vec3<T>>> = cotangents
        .iter()
        .map(|c| sys.to_modes(c).into_iter().map(|v| [v[0] / cells, v[1] / cells, v[2] / cells]).collect())
        .collect();
    let conj_l: Vec<Complex<T>> = sys.lambda_diag.iter().map(|l| l.conj()).collect();
    let mut elements = Vec::with_capacity(n);
    for t in (0..n).rev() {
        let mut b = vec![Complex::new(T::zero(), T::zero()); d];
        for (k, blk) in sys.blocks.iter().enumerate() {
            if let ModeBlock::Diagonal { offset, p, .. } = blk {
                let g = matvec3(&adjoint3(p), &cot_modes[t][k]);
                b[*offset..*offset + 3].copy_from_slice(&g);
            }
        }
        elements.push(ScanElement { a: conj_l.clone(), b });
    }
    let back = parallel_scan(&elements)?;
    let mut dense_w: Vec<Vec<Vec3<T>>> = vec![Vec::new(); sys.blocks.len()];
    for &k in &sys.degenerate_modes {
        if let ModeBlock::Dense { matrix, .. } = &sys.blocks[k] {
            let mh = adjoint3(matrix);
            let mut wv = [Complex::new(T::zero(), T::zero()); 3];
            let mut out = vec![wv; n];
            for t in (0..n).rev() {
                let nx = matvec3(&mh, &wv);
                wv = [nx[0] + cot_modes[t][k][0], nx[1] + cot_modes[t][k][1], nx[2] + cot_modes[t][k][2]];
                out[t] = wv;
            }
            dense_w[k] = out;
        }
    }
    let gain = sys.drive_gain;
    (0..n)
        .map(|t| {
            let wz = &back[n - 1 - t].b;
            let dd: Vec<Complex<T>> = sys
                .blocks
                .iter()
                .enumerate()
                .map(|(k, blk)| match blk {
                    ModeBlock::Diagonal { offset, p_inv, .. } => {
                        (p_inv[0][0].conj() * wz[*offset] + p_inv[1][0].conj() * wz[offset + 1] + p_inv[2][0].conj() * wz[offset + 2])
                            * gain
                    }
                    ModeBlock::Dense { .. } => dense_w[k][t][0] * gain,
                })
                .collect();
            // dL/d(drive) = F^H dL/d(d_hat) = N * IFFT(.)
            let v = f.inverse_real(dd);
            Field::from_vec(h, w, v.into_iter().map(|x| x * cells).collect())
        })
        .collect()
}
