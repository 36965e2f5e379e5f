//! Per-mode eigenanalysis of the update operator.
//!
//! Two symbol models are available. [`SymbolModel::Continuous`] substitutes
//! `i xi` for both difference operators and leaves the `p` row fully
//! explicit. [`SymbolModel::Stencil`] uses the exact discrete symbols of the
//! implemented stencils, `(1 - e^{-i xi dx}) / dx` for the gradient and
//! `(e^{i xi dx} - 1) / dx` for the divergence, together with the
//! semi-staggered `p` update; for uniform parameters on a periodic grid it
//! reproduces the stepper exactly.

use crate::error::{Error, Result};
use crate::fft2::signed_index;
use crate::grid::{Field, GridShape, PhysicalParams};
use crate::linalg::{det3, inv3, mul3, norm3, Mat3};
use crate::real::Real;
use num_complex::Complex;
use std::collections::HashMap;
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalParams<T> {
    pub c: T,
    pub kp: T,
    pub ko: T,
    pub dt: T,
}

impl<T: Real> LocalParams<T> {
    pub fn new(c: T, kp: T, ko: T, dt: T) -> Self {
        LocalParams { c, kp, ko, dt }
    }

    pub fn at(params: &PhysicalParams<T>, dt: T, i: usize, j: usize) -> Self {
        LocalParams { c: params.c.get(i, j), kp: params.kp.get(i, j), ko: params.ko.get(i, j), dt }
    }

    pub fn alpha(&self) -> T {
        T::one() / (T::one() + self.dt * self.kp)
    }

    pub fn beta(&self) -> T {
        T::one() / (T::one() + self.dt * self.ko)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FourierMode<T> {
    pub xi_x: T,
    pub xi_y: T,
}

impl<T: Real> FourierMode<T> {
    pub fn new(xi_x: T, xi_y: T) -> Self {
        FourierMode { xi_x, xi_y }
    }

    pub fn norm_sq(&self) -> T {
        self.xi_x * self.xi_x + self.xi_y * self.xi_y
    }

    pub fn is_dc(&self) -> bool {
        self.xi_x == T::zero() && self.xi_y == T::zero()
    }
}

/// A periodic-grid mode with its FFT bin indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndexedMode<T> {
    pub kx: usize,
    pub ky: usize,
    pub mode: FourierMode<T>,
}

/// All modes of the periodic `H x W` grid in FFT bin order (row-major).
///
/// `xi_x` pairs with the row axis (length `H`), matching the gradient's
/// `x` direction; `xi_y` pairs with the column axis.
pub fn periodic_modes<T: Real>(shape: &GridShape<T>) -> Vec<IndexedMode<T>> {
    let two_pi = T::PI() + T::PI();
    let mut out = Vec::with_capacity(shape.cells());
    for kx in 0..shape.height {
        for ky in 0..shape.width {
            let mx = T::from_i64(signed_index(kx, shape.height)).unwrap();
            let my = T::from_i64(signed_index(ky, shape.width)).unwrap();
            let hx = T::from_usize(shape.height).unwrap() * shape.dx;
            let wy = T::from_usize(shape.width).unwrap() * shape.dx;
            out.push(IndexedMode { kx, ky, mode: FourierMode::new(two_pi * mx / hx, two_pi * my / wy) });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolModel {
    /// `i xi` symbols, fully explicit `p` row.
    Continuous,
    /// Exact symbols of the implemented stencils.
    #[default]
    Stencil,
}

/// The per-mode 3x3 operator in factored form.
#[derive(Clone, Copy, Debug)]
pub struct ModeOperator<T> {
    pub alpha: T,
    pub beta: T,
    pub dt: T,
    pub c2dt: T,
    /// Gradient symbols `(g_x, g_y)`.
    pub g: [Complex<T>; 2],
    /// Divergence symbols `(d_x, d_y)`.
    pub d: [Complex<T>; 2],
    /// `-c^2 dt^2 (d . g)`, real and non-negative for both models.
    pub s: T,
    /// Entry (0, 0).
    pub m00: T,
    pub mode: FourierMode<T>,
}

impl<T: Real> ModeOperator<T> {
    pub fn new(lp: &LocalParams<T>, mode: &FourierMode<T>, model: SymbolModel, dx: T) -> Self {
        let alpha = lp.alpha();
        let beta = lp.beta();
        let i = Complex::new(T::zero(), T::one());
        let (g, d) = match model {
            SymbolModel::Continuous => {
                let v = [i * mode.xi_x, i * mode.xi_y];
                (v, v)
            }
            SymbolModel::Stencil => {
                let one = Complex::new(T::one(), T::zero());
                let g = |xi: T| (one - Complex::from_polar(T::one(), -xi * dx)) / dx;
                let d = |xi: T| (Complex::from_polar(T::one(), xi * dx) - one) / dx;
                ([g(mode.xi_x), g(mode.xi_y)], [d(mode.xi_x), d(mode.xi_y)])
            }
        };
        let c2dt = lp.c * lp.c * lp.dt;
        let s = match model {
            SymbolModel::Continuous => c2dt * lp.dt * mode.norm_sq(),
            SymbolModel::Stencil => {
                let two = T::lit(2.0);
                let sx = (mode.xi_x * dx / two).sin();
                let sy = (mode.xi_y * dx / two).sin();
                c2dt * lp.dt * T::lit(4.0) * (sx * sx + sy * sy) / (dx * dx)
            }
        };
        let m00 = match model {
            SymbolModel::Continuous => alpha,
            SymbolModel::Stencil => alpha * (T::one() - s),
        };
        ModeOperator { alpha, beta, dt: lp.dt, c2dt, g, d, s, m00, mode: *mode }
    }

    pub fn matrix(&self) -> Mat3<T> {
        let z = Complex::new(T::zero(), T::zero());
        let r = |x: T| Complex::new(x, T::zero());
        let ac = self.alpha * self.c2dt;
        let bd = self.beta * self.dt;
        [
            [r(self.m00), -self.d[0] * ac, -self.d[1] * ac],
            [-self.g[0] * bd, r(self.beta), z],
            [-self.g[1] * bd, z, r(self.beta)],
        ]
    }

    /// Coefficients of the reduced quadratic `l^2 - t l + q`.
    pub fn quadratic(&self) -> (T, T) {
        (self.m00 + self.beta, self.m00 * self.beta + self.alpha * self.beta * self.s)
    }

    /// `t^2 - 4q`, evaluated as `(m00 - beta)^2 - 4 alpha beta s` to avoid
    /// cancellation near the DC mode.
    pub fn discriminant(&self) -> T {
        let d = self.m00 - self.beta;
        d * d - T::lit(4.0) * self.alpha * self.beta * self.s
    }

    /// `(beta, l2, l3)`. Complex pairs have `Im l2 > 0` and `l3 = conj(l2)`;
    /// for real roots `l2` is the root nearer to `m00`.
    pub fn eigenvalues(&self) -> [Complex<T>; 3] {
        let (t, q) = self.quadratic();
        let (l2, l3) = quadratic_roots(t, q, self.discriminant(), self.m00);
        [Complex::new(self.beta, T::zero()), l2, l3]
    }

    /// Largest eigenvalue magnitude.
    pub fn spectral_radius(&self) -> T {
        let l = self.eigenvalues();
        l[0].norm().max(l[1].norm()).max(l[2].norm())
    }

    /// Eigenvectors for the given eigenvalues and the inverse basis.
    pub fn eigen_basis(&self, lambda: [Complex<T>; 3]) -> Result<EigenTriple<T>> {
        let tol = T::lit(1e-12);
        let gap = (lambda[1] - lambda[0]).norm().min((lambda[2] - lambda[0]).norm());
        if gap < tol || (lambda[1] - lambda[2]).norm() < tol {
            return Err(self.degenerate());
        }
        let z = Complex::new(T::zero(), T::zero());
        let one = Complex::new(T::one(), T::zero());
        let w = [-self.d[1], self.d[0]];
        let wn = (w[0].norm_sqr() + w[1].norm_sqr()).sqrt();
        let v1 = if wn > T::zero() {
            let big = if w[0].norm() >= w[1].norm() { w[0] } else { w[1] };
            let phase = big / big.norm();
            [z, w[0] / (phase * wn), w[1] / (phase * wn)]
        } else {
            [z, one, z]
        };
        let bd = Complex::new(self.beta * self.dt, T::zero());
        let col = |l: Complex<T>| {
            let den = l - Complex::new(self.beta, T::zero());
            [one, -bd * self.g[0] / den, -bd * self.g[1] / den]
        };
        let (v2, v3) = (col(lambda[1]), col(lambda[2]));
        let mut p = [[z; 3]; 3];
        for (c, v) in [v1, v2, v3].iter().enumerate() {
            for r in 0..3 {
                p[r][c] = v[r];
            }
        }
        let scale = norm3(&v1) * norm3(&v2) * norm3(&v3);
        if det3(&p).norm() <= T::lit(1e-13) * scale {
            return Err(self.degenerate());
        }
        let p_inv = inv3(&p).ok_or_else(|| self.degenerate())?;
        Ok(EigenTriple { lambda, p, p_inv })
    }

    fn degenerate(&self) -> Error {
        Error::Degenerate { xi_x: self.mode.xi_x.to_f64_lossy(), xi_y: self.mode.xi_y.to_f64_lossy() }
    }
}

/// Roots of `l^2 - t l + q` by the cancellation-free form.
fn quadratic_roots<T: Real>(t: T, q: T, disc: T, near: T) -> (Complex<T>, Complex<T>) {
    let two = T::lit(2.0);
    if disc < T::zero() {
        let re = t / two;
        let im = (-disc).sqrt() / two;
        (Complex::new(re, im), Complex::new(re, -im))
    } else {
        let sd = disc.sqrt();
        let big = if t >= T::zero() { (t + sd) / two } else { (t - sd) / two };
        let small = if big != T::zero() { q / big } else { T::zero() };
        let (a, b) = if (big - near).abs() <= (small - near).abs() { (big, small) } else { (small, big) };
        (Complex::new(a, T::zero()), Complex::new(b, T::zero()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenTriple<T> {
    pub lambda: [Complex<T>; 3],
    /// Columns are the eigenvectors `v1, v2, v3`.
    pub p: Mat3<T>,
    pub p_inv: Mat3<T>,
}

impl<T: Real> EigenTriple<T> {
    /// `P diag(lambda) P^-1`.
    pub fn reconstruct(&self) -> Mat3<T> {
        let mut pl = self.p;
        for row in pl.iter_mut() {
            for c in 0..3 {
                row[c] = row[c] * self.lambda[c];
            }
        }
        mul3(&pl, &self.p_inv)
    }
}

/// The continuous-symbol mode matrix with fully explicit `p` row.
pub fn mode_matrix<T: Real>(lp: &LocalParams<T>, mode: &FourierMode<T>) -> Mat3<T> {
    ModeOperator::new(lp, mode, SymbolModel::Continuous, T::one()).matrix()
}

/// The mode matrix of the implemented stencil step.
pub fn stencil_mode_matrix<T: Real>(lp: &LocalParams<T>, mode: &FourierMode<T>, dx: T) -> Mat3<T> {
    ModeOperator::new(lp, mode, SymbolModel::Stencil, dx).matrix()
}

/// `(beta, l2, l3)` of [`mode_matrix`].
pub fn eigenvalues_exact<T: Real>(lp: &LocalParams<T>, mode: &FourierMode<T>) -> [Complex<T>; 3] {
    ModeOperator::new(lp, mode, SymbolModel::Continuous, T::one()).eigenvalues()
}

/// `(beta, l2, l3)` of [`stencil_mode_matrix`].
pub fn stencil_eigenvalues<T: Real>(lp: &LocalParams<T>, mode: &FourierMode<T>, dx: T) -> [Complex<T>; 3] {
    ModeOperator::new(lp, mode, SymbolModel::Stencil, dx).eigenvalues()
}

/// `(alpha + beta)/2 +- i c dt |xi| sqrt(alpha beta)`; only valid for a
/// complex-conjugate pair.
pub fn eigenvalues_paper_approx<T: Real>(lp: &LocalParams<T>, mode: &FourierMode<T>) -> Result<(Complex<T>, Complex<T>)> {
    let op = ModeOperator::new(lp, mode, SymbolModel::Continuous, T::one());
    let disc = op.discriminant();
    if disc >= T::zero() {
        return Err(Error::Domain { discriminant: disc.to_f64_lossy() });
    }
    let (a, b) = (lp.alpha(), lp.beta());
    let re = (a + b) / T::lit(2.0);
    let im = lp.c * lp.dt * mode.norm_sq().sqrt() * (a * b).sqrt();
    Ok((Complex::new(re, im), Complex::new(re, -im)))
}

/// Eigenvectors of [`mode_matrix`] for the given eigenvalues.
pub fn eigenvectors<T: Real>(lp: &LocalParams<T>, mode: &FourierMode<T>, eigs: [Complex<T>; 3]) -> Result<EigenTriple<T>> {
    ModeOperator::new(lp, mode, SymbolModel::Continuous, T::one()).eigen_basis(eigs)
}

/// Full eigen-decomposition of [`stencil_mode_matrix`].
pub fn stencil_eigen<T: Real>(lp: &LocalParams<T>, mode: &FourierMode<T>, dx: T) -> Result<EigenTriple<T>> {
    let op = ModeOperator::new(lp, mode, SymbolModel::Stencil, dx);
    op.eigen_basis(op.eigenvalues())
}

/// Closed-form wave-speed bound `(dx/dt) sqrt((1 + dt kp)(1 + dt ko) / 2)`.
pub fn stability_bound<T: Real>(params: &PhysicalParams<T>, shape: &GridShape<T>) -> Field<T> {
    let (dt, dx) = (shape.dt, shape.dx);
    let half = T::lit(0.5);
    Field::from_fn(shape.height, shape.width, |i, j| {
        let kp = params.kp.get(i, j);
        let ko = params.ko.get(i, j);
        dx / dt * ((T::one() + dt * kp) * (T::one() + dt * ko) * half).sqrt()
    })
}

/// Largest `c` for which every stencil mode has all eigenvalue magnitudes
/// at most one: `(dx/dt) sqrt((1 + alpha)(1 + beta) / (8 alpha))`.
///
/// Uses the supremum `K^2 = 8/dx^2` of the discrete Laplacian symbol, which
/// bounds both periodic and zero-padded grids.
pub fn discrete_stability_bound<T: Real>(params: &PhysicalParams<T>, shape: &GridShape<T>) -> Field<T> {
    let (dt, dx) = (shape.dt, shape.dx);
    Field::from_fn(shape.height, shape.width, |i, j| {
        discrete_bound_local(params.kp.get(i, j), params.ko.get(i, j), dt, dx)
    })
}

pub fn discrete_bound_local<T: Real>(kp: T, ko: T, dt: T, dx: T) -> T {
    let a = T::one() / (T::one() + dt * kp);
    let b = T::one() / (T::one() + dt * ko);
    dx / dt * ((T::one() + a) * (T::one() + b) / (T::lit(8.0) * a)).sqrt()
}

/// Elementwise minimum of [`stability_bound`] and [`discrete_stability_bound`].
pub fn certified_stability_bound<T: Real>(params: &PhysicalParams<T>, shape: &GridShape<T>) -> Field<T> {
    let a = stability_bound(params, shape);
    let b = discrete_stability_bound(params, shape);
    a.zip_map(&b, |x, y| x.min(y)).expect("same shape")
}

pub fn certified_bound_local<T: Real>(kp: T, ko: T, dt: T, dx: T) -> T {
    let eq = dx / dt * ((T::one() + dt * kp) * (T::one() + dt * ko) * T::lit(0.5)).sqrt();
    eq.min(discrete_bound_local(kp, ko, dt, dx))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation<T> {
    pub i: usize,
    pub j: usize,
    pub c: T,
    pub c_max: T,
    pub magnitude: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport<T> {
    /// Closed-form bound for the continuous model, exact discrete bound for
    /// the stencil model.
    pub max_c_allowed: Field<T>,
    pub violations: Vec<Violation<T>>,
    pub worst_eig_magnitude: T,
}

impl<T: Real> StabilityReport<T> {
    pub fn is_stable(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Tolerance on eigenvalue magnitudes above one.
pub const STABILITY_SLACK: f64 = 1e-12;

/// Evaluates eigenvalue magnitudes over every periodic mode of the grid, per
/// cell. Cells sharing a parameter triple are evaluated once.
pub fn check_stability<T: Real>(params: &PhysicalParams<T>, shape: &GridShape<T>, model: SymbolModel) -> StabilityReport<T> {
    let modes = periodic_modes(shape);
    let max_c_allowed = match model {
        SymbolModel::Continuous => stability_bound(params, shape),
        SymbolModel::Stencil => discrete_stability_bound(params, shape),
    };
    let mut cache: HashMap<(u64, u64, u64), T> = HashMap::new();
    let mut worst = T::zero();
    let mut violations = Vec::new();
    let limit = T::one() + T::lit(STABILITY_SLACK);
    for i in 0..shape.height {
        for j in 0..shape.width {
            let lp = LocalParams::at(params, shape.dt, i, j);
            let key = (lp.c.to_f64_lossy().to_bits(), lp.kp.to_f64_lossy().to_bits(), lp.ko.to_f64_lossy().to_bits());
            let m = *cache.entry(key).or_insert_with(|| {
                modes
                    .iter()
                    .map(|im| ModeOperator::new(&lp, &im.mode, model, shape.dx).spectral_radius())
                    .fold(T::zero(), |a, b| a.max(b))
            });
            worst = worst.max(m);
            if !(m <= limit) {
                violations.push(Violation { i, j, c: lp.c, c_max: max_c_allowed.get(i, j), magnitude: m });
            }
        }
    }
    StabilityReport { max_c_allowed, violations, worst_eig_magnitude: worst }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyModel {
    /// `theta / (pi dt)` with the exact continuous-model phase.
    Eq21Exact,
    /// The closed form built from the approximate conjugate pair.
    Eq21ClosedForm,
    /// `theta / (2 pi dt)` with the exact stencil phase: the frequency the
    /// stepper actually oscillates at, in cycles per time unit.
    #[default]
    Stepper,
}

/// Frequency of one cell at one mode.
pub fn mode_frequency<T: Real>(lp: &LocalParams<T>, mode: &FourierMode<T>, dx: T, fm: FrequencyModel) -> T {
    let pi = T::PI();
    match fm {
        FrequencyModel::Eq21Exact => {
            let l = eigenvalues_exact(lp, mode);
            l[1].im.atan2(l[1].re).abs() / (pi * lp.dt)
        }
        FrequencyModel::Eq21ClosedForm => {
            let (a, b) = (lp.alpha(), lp.beta());
            let num = T::lit(2.0) * lp.c * lp.dt * mode.norm_sq().sqrt();
            let den = ((T::one() / a) * (T::one() / b)).sqrt() * (a + b);
            (num / den).atan() / (pi * lp.dt)
        }
        FrequencyModel::Stepper => {
            let l = stencil_eigenvalues(lp, mode, dx);
            l[1].im.atan2(l[1].re).abs() / (T::lit(2.0) * pi * lp.dt)
        }
    }
}

/// Per-cell frequency at a single mode.
pub fn frequency_map<T: Real>(
    params: &PhysicalParams<T>,
    shape: &GridShape<T>,
    mode: &FourierMode<T>,
    fm: FrequencyModel,
) -> Field<T> {
    Field::from_fn(shape.height, shape.width, |i, j| {
        mode_frequency(&LocalParams::at(params, shape.dt, i, j), mode, shape.dx, fm)
    })
}

/// Which spatial mode anchors band initialization.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// `|m| = 1` on both axes.
    Fundamental,
    /// Root-mean-square of each axis over the periodic mode set.
    Rms,
    /// `(pi/dx, pi/dx)`: the checkerboard mode.
    #[default]
    NyquistDiagonal,
    Custom { xi_x: f64, xi_y: f64 },
}

impl ReferenceMode {
    pub fn resolve<T: Real>(&self, shape: &GridShape<T>) -> FourierMode<T> {
        let two_pi = T::PI() + T::PI();
        match *self {
            ReferenceMode::Fundamental => FourierMode::new(
                two_pi / (T::from_usize(shape.height).unwrap() * shape.dx),
                two_pi / (T::from_usize(shape.width).unwrap() * shape.dx),
            ),
            ReferenceMode::Rms => {
                let modes = periodic_modes(shape);
                let n = T::from_usize(modes.len()).unwrap();
                let (sx, sy) = modes
                    .iter()
                    .fold((T::zero(), T::zero()), |(a, b), m| (a + m.mode.xi_x * m.mode.xi_x, b + m.mode.xi_y * m.mode.xi_y));
                FourierMode::new((sx / n).sqrt(), (sy / n).sqrt())
            }
            ReferenceMode::NyquistDiagonal => FourierMode::new(T::PI() / shape.dx, T::PI() / shape.dx),
            ReferenceMode::Custom { xi_x, xi_y } => FourierMode::new(T::lit(xi_x), T::lit(xi_y)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandInit<T> {
    pub c: T,
    /// The target frequency was above what the stability cap allows.
    pub clamped: bool,
    /// Frequency reached at the reference mode.
    pub frequency: T,
}

/// Wave speed placing the reference-mode frequency at the band centre.
pub fn init_for_band<T: Real>(
    band: (T, T),
    damping: (T, T),
    shape: &GridShape<T>,
    reference: ReferenceMode,
    fm: FrequencyModel,
) -> Result<BandInit<T>> {
    let (f_lo, f_hi) = band;
    let (kp, ko) = damping;
    let (dt, dx) = (shape.dt, shape.dx);
    let nyquist = T::one() / (T::lit(2.0) * dt);
    if !(f_lo >= T::zero() && f_lo < f_hi && f_hi < nyquist) {
        return Err(Error::Precondition(format!(
            "band must satisfy 0 <= f_lo < f_hi < {nyquist}, got [{f_lo}, {f_hi}]"
        )));
    }
    if !(kp > T::zero() && ko > T::zero()) {
        return Err(Error::Precondition("damping must be positive".into()));
    }
    let mode = reference.resolve(shape);
    let f_of = |c: T| mode_frequency(&LocalParams::new(c, kp, ko, dt), &mode, dx, fm);
    let cap = certified_bound_local(kp, ko, dt, dx);
    let f_cap = f_of(cap);
    let f_mid = (f_lo + f_hi) / T::lit(2.0);
    if f_cap < f_lo {
        return Err(Error::Infeasible {
            f_lo: f_lo.to_f64_lossy(),
            f_hi: f_hi.to_f64_lossy(),
            max_frequency: f_cap.to_f64_lossy(),
        });
    }
    if f_cap < f_mid {
        return Ok(BandInit { c: cap, clamped: true, frequency: f_cap });
    }
    let c = match fm {
        FrequencyModel::Eq21ClosedForm => {
            let (a, b) = (T::one() / (T::one() + dt * kp), T::one() / (T::one() + dt * ko));
            (T::PI() * dt * f_mid).tan() * (a + b) / (T::lit(2.0) * dt * mode.norm_sq().sqrt() * (a * b).sqrt())
        }
        _ => {
            let (mut lo, mut hi) = (T::zero(), cap);
            for _ in 0..200 {
                let mid = (lo + hi) / T::lit(2.0);
                if f_of(mid) < f_mid {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= T::epsilon() * hi {
                    break;
                }
            }
            hi
        }
    };
    Ok(BandInit { c, clamped: false, frequency: f_of(c) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymbolRow<T> {
    pub mode: FourierMode<T>,
    pub relative_deviation: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymbolReport<T> {
    /// One row per non-DC periodic mode, sorted by `|xi|`.
    pub rows: Vec<SymbolRow<T>>,
    pub max_relative_deviation: T,
}

/// Relative distance between the stencil gradient symbol and `i xi`.
pub fn symbol_deviation<T: Real>(mode: &FourierMode<T>, dx: T) -> T {
    let one = Complex::new(T::one(), T::zero());
    let i = Complex::new(T::zero(), T::one());
    let g = |xi: T| (one - Complex::from_polar(T::one(), -xi * dx)) / dx;
    let dxv = g(mode.xi_x) - i * mode.xi_x;
    let dyv = g(mode.xi_y) - i * mode.xi_y;
    (dxv.norm_sqr() + dyv.norm_sqr()).sqrt() / mode.norm_sq().sqrt()
}

pub fn fourier_symbol_check<T: Real>(shape: &GridShape<T>) -> SymbolReport<T> {
    let mut rows: Vec<SymbolRow<T>> = periodic_modes(shape)
        .into_iter()
        .filter(|m| !m.mode.is_dc())
        .map(|m| SymbolRow { mode: m.mode, relative_deviation: symbol_deviation(&m.mode, shape.dx) })
        .collect();
    rows.sort_by(|a, b| a.mode.norm_sq().partial_cmp(&b.mode.norm_sq()).unwrap());
    let max = rows.iter().fold(T::zero(), |m, r| m.max(r.relative_deviation));
    SymbolReport { rows, max_relative_deviation: max }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenRow<T> {
    pub i: usize,
    pub j: usize,
    pub mode: FourierMode<T>,
    pub lambda2: Complex<T>,
    pub frequency: T,
}

/// One row per cell and requested mode, cell-major.
pub fn eigen_report<T: Real>(
    params: &PhysicalParams<T>,
    shape: &GridShape<T>,
    modes: &[FourierMode<T>],
    model: SymbolModel,
    fm: FrequencyModel,
) -> Vec<EigenRow<T>> {
    let mut rows = Vec::with_capacity(shape.cells() * modes.len());
    for i in 0..shape.height {
        for j in 0..shape.width {
            let lp = LocalParams::at(params, shape.dt, i, j);
            for mode in modes {
                let l = ModeOperator::new(&lp, mode, model, shape.dx).eigenvalues();
                rows.push(EigenRow { i, j, mode: *mode, lambda2: l[1], frequency: mode_frequency(&lp, mode, shape.dx, fm) });
            }
        }
    }
    rows
}

pub fn write_eigen_csv<T: Real, W: Write>(out: &mut W, rows: &[EigenRow<T>]) -> Result<()> {
    writeln!(out, "i,j,xi_x,xi_y,re_l2,im_l2,magnitude,frequency")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.i,
            r.j,
            r.mode.xi_x,
            r.mode.xi_y,
            r.lambda2.re,
            r.lambda2.im,
            r.lambda2.norm(),
            r.frequency
        )?;
    }
    Ok(())
}
