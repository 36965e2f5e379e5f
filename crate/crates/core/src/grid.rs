//! Grid fields, finite-difference operators and the time stepper.
//!
//! Axis convention: the first index `i` runs over rows (length `H`) and is
//! the `x` direction; the second index `j` runs over columns (length `W`) and
//! is the `y` direction.

use crate::error::{Error, Result};
use crate::real::Real;
use std::io::{BufRead, Write};

/// Largest `H * W` accepted by [`assemble_coupling_matrix`].
pub const DENSE_CELL_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridShape<T> {
    pub height: usize,
    pub width: usize,
    pub dx: T,
    pub dt: T,
}

impl<T: Real> GridShape<T> {
    pub fn new(height: usize, width: usize, dx: T, dt: T) -> Result<Self> {
        let s = GridShape { height, width, dx, dt };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Shape(format!(
                "grid must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.dx > T::zero()) || !self.dx.is_finite() {
            return Err(Error::InvalidParameter(format!("dx must be positive, got {}", self.dx)));
        }
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.width + j
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    /// Out-of-grid neighbours read as zero.
    #[default]
    ZeroPad,
    /// Neighbours wrap around on both axes.
    Periodic,
}

/// Dense row-major `H x W` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::zero())
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Field { height, width, data: vec![v; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} values for a {}x{} field, got {}",
                height * width,
                height,
                width,
                data.len()
            )));
        }
        Ok(Field { height, width, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(h, w, rows.concat())
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Field { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.width + j] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Field { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other)?;
        Ok(Field {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Sum of squares in fixed row-major order.
    pub fn norm_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn mean(&self) -> T {
        let n = T::from_usize(self.data.len()).unwrap();
        self.data.iter().fold(T::zero(), |a, &v| a + v) / n
    }

    pub fn is_uniform(&self) -> bool {
        self.data.iter().all(|&v| v == self.data[0])
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }

    fn check_shape(&self, shape: &GridShape<T>, name: &str) -> Result<()> {
        if self.dims() != (shape.height, shape.width) {
            return Err(Error::Shape(format!(
                "{name} is {}x{}, grid is {}x{}",
                self.height, self.width, shape.height, shape.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridState<T> {
    pub p: Field<T>,
    pub ox: Field<T>,
    pub oy: Field<T>,
}

impl<T: Real> GridState<T> {
    pub fn zeros(shape: &GridShape<T>) -> Self {
        GridState {
            p: Field::zeros(shape.height, shape.width),
            ox: Field::zeros(shape.height, shape.width),
            oy: Field::zeros(shape.height, shape.width),
        }
    }

    /// Euclidean norm of the concatenated `(p, ox, oy)` vector.
    pub fn norm(&self) -> T {
        (self.p.norm_sq() + self.ox.norm_sq() + self.oy.norm_sq()).sqrt()
    }

    /// Concatenation `[p, ox, oy]`, each row-major.
    pub fn to_vec(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(3 * self.p.data.len());
        v.extend_from_slice(&self.p.data);
        v.extend_from_slice(&self.ox.data);
        v.extend_from_slice(&self.oy.data);
        v
    }

    pub fn from_vec(shape: &GridShape<T>, v: &[T]) -> Result<Self> {
        let n = shape.cells();
        if v.len() != 3 * n {
            return Err(Error::Shape(format!("state vector must have {} entries, got {}", 3 * n, v.len())));
        }
        Ok(GridState {
            p: Field::from_vec(shape.height, shape.width, v[..n].to_vec())?,
            ox: Field::from_vec(shape.height, shape.width, v[n..2 * n].to_vec())?,
            oy: Field::from_vec(shape.height, shape.width, v[2 * n..].to_vec())?,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.p
            .max_abs_diff(&other.p)
            .max(self.ox.max_abs_diff(&other.ox))
            .max(self.oy.max_abs_diff(&other.oy))
    }

    pub fn check(&self, shape: &GridShape<T>) -> Result<()> {
        self.p.check_shape(shape, "p")?;
        self.ox.check_shape(shape, "ox")?;
        self.oy.check_shape(shape, "oy")
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        if !self.p.is_finite() {
            Some("p")
        } else if !self.ox.is_finite() {
            Some("ox")
        } else if !self.oy.is_finite() {
            Some("oy")
        } else {
            None
        }
    }
}

/// Per-cell wave speed and damping coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalParams<T> {
    pub c: Field<T>,
    pub kp: Field<T>,
    pub ko: Field<T>,
}

impl<T: Real> PhysicalParams<T> {
    pub fn uniform(shape: &GridShape<T>, c: T, kp: T, ko: T) -> Self {
        PhysicalParams {
            c: Field::filled(shape.height, shape.width, c),
            kp: Field::filled(shape.height, shape.width, kp),
            ko: Field::filled(shape.height, shape.width, ko),
        }
    }

    /// `c >= 0`, `kp > 0`, `ko > 0`, all finite, all shaped like the grid.
    pub fn validate(&self, shape: &GridShape<T>) -> Result<()> {
        self.c.check_shape(shape, "c")?;
        self.kp.check_shape(shape, "kp")?;
        self.ko.check_shape(shape, "ko")?;
        for (name, f, strict) in [("c", &self.c, false), ("kp", &self.kp, true), ("ko", &self.ko, true)] {
            for (n, &v) in f.data.iter().enumerate() {
                let ok = v.is_finite() && if strict { v > T::zero() } else { v >= T::zero() };
                if !ok {
                    return Err(Error::InvalidParameter(format!(
                        "{name}[{}, {}] = {v} is out of range",
                        n / shape.width,
                        n % shape.width
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_uniform(&self) -> bool {
        self.c.is_uniform() && self.kp.is_uniform() && self.ko.is_uniform()
    }

    /// `1 / (1 + dt kp)` per cell.
    pub fn alpha(&self, dt: T) -> Field<T> {
        self.kp.map(|k| T::one() / (T::one() + dt * k))
    }

    /// `1 / (1 + dt ko)` per cell.
    pub fn beta(&self, dt: T) -> Field<T> {
        self.ko.map(|k| T::one() / (T::one() + dt * k))
    }
}

/// Backward-difference gradient `(gx, gy)` of `p`.
pub fn gradient<T: Real>(p: &Field<T>, shape: &GridShape<T>, bc: BoundaryCondition) -> Result<(Field<T>, Field<T>)> {
    shape.validate()?;
    p.check_shape(shape, "p")?;
    let (h, w) = (shape.height, shape.width);
    let inv = T::one() / shape.dx;
    let mut gx = Field::zeros(h, w);
    let mut gy = Field::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let c = p.get(i, j);
            let up = back(p, i, j, h, bc, true);
            let left = back(p, i, j, w, bc, false);
            gx.set(i, j, (c - up) * inv);
            gy.set(i, j, (c - left) * inv);
        }
    }
    Ok((gx, gy))
}

/// Forward-difference divergence of `(ox, oy)`.
pub fn divergence<T: Real>(
    ox: &Field<T>,
    oy: &Field<T>,
    shape: &GridShape<T>,
    bc: BoundaryCondition,
) -> Result<Field<T>> {
    shape.validate()?;
    ox.check_shape(shape, "ox")?;
    oy.check_shape(shape, "oy")?;
    let (h, w) = (shape.height, shape.width);
    let inv = T::one() / shape.dx;
    let mut d = Field::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let down = fwd(ox, i, j, h, bc, true);
            let right = fwd(oy, i, j, w, bc, false);
            d.set(i, j, (down - ox.get(i, j) + right - oy.get(i, j)) * inv);
        }
    }
    Ok(d)
}

#[inline]
fn back<T: Real>(f: &Field<T>, i: usize, j: usize, n: usize, bc: BoundaryCondition, rows: bool) -> T {
    let k = if rows { i } else { j };
    if k > 0 {
        if rows { f.get(i - 1, j) } else { f.get(i, j - 1) }
    } else {
        match bc {
            BoundaryCondition::ZeroPad => T::zero(),
            BoundaryCondition::Periodic => {
                if rows { f.get(n - 1, j) } else { f.get(i, n - 1) }
            }
        }
    }
}

#[inline]
fn fwd<T: Real>(f: &Field<T>, i: usize, j: usize, n: usize, bc: BoundaryCondition, rows: bool) -> T {
    let k = if rows { i } else { j };
    if k + 1 < n {
        if rows { f.get(i + 1, j) } else { f.get(i, j + 1) }
    } else {
        match bc {
            BoundaryCondition::ZeroPad => T::zero(),
            BoundaryCondition::Periodic => {
                if rows { f.get(0, j) } else { f.get(i, 0) }
            }
        }
    }
}

/// One time step. Pure: the input state is not modified.
pub fn step<T: Real>(
    state: &GridState<T>,
    params: &PhysicalParams<T>,
    drive: &Field<T>,
    shape: &GridShape<T>,
    bc: BoundaryCondition,
) -> Result<GridState<T>> {
    let stepper = Stepper::new(*shape, params, bc)?;
    state.check(shape)?;
    let mut next = state.clone();
    stepper.advance(&mut next, Some(drive))?;
    if let Some(f) = next.first_non_finite() {
        return Err(Error::NonFinite { step: None, field: f.into() });
    }
    Ok(next)
}

/// Precomputed per-cell coefficients for repeated in-place stepping.
#[derive(Clone, Debug)]
pub struct Stepper<T> {
    pub shape: GridShape<T>,
    pub bc: BoundaryCondition,
    alpha: Vec<T>,
    beta: Vec<T>,
    c2dt: Vec<T>,
}

impl<T: Real> Stepper<T> {
    pub fn new(shape: GridShape<T>, params: &PhysicalParams<T>, bc: BoundaryCondition) -> Result<Self> {
        shape.validate()?;
        params.validate(&shape)?;
        let dt = shape.dt;
        Ok(Stepper {
            shape,
            bc,
            alpha: params.alpha(dt).into_vec(),
            beta: params.beta(dt).into_vec(),
            c2dt: params.c.as_slice().iter().map(|&c| c * c * dt).collect(),
        })
    }

    /// Advance `state` by one step in place. `None` means zero drive.
    pub fn advance(&self, state: &mut GridState<T>, drive: Option<&Field<T>>) -> Result<()> {
        let (h, w) = (self.shape.height, self.shape.width);
        if let Some(d) = drive {
            d.check_shape(&self.shape, "drive")?;
            if !d.is_finite() {
                return Err(Error::NonFinite { step: None, field: "drive".into() });
            }
        }
        let dt = self.shape.dt;
        let inv = T::one() / self.shape.dx;
        let periodic = self.bc == BoundaryCondition::Periodic;
        let p = &mut state.p.data;
        let ox = &mut state.ox.data;
        let oy = &mut state.oy.data;

        // o* = o - dt * grad(p)
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                let up = if i > 0 {
                    p[k - w]
                } else if periodic {
                    p[(h - 1) * w + j]
                } else {
                    T::zero()
                };
                let left = if j > 0 {
                    p[k - 1]
                } else if periodic {
                    p[i * w + w - 1]
                } else {
                    T::zero()
                };
                ox[k] = ox[k] - dt * (p[k] - up) * inv;
                oy[k] = oy[k] - dt * (p[k] - left) * inv;
            }
        }
        // p = alpha * (p - c^2 dt div(o*) + dt drive);  o = beta * o*
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                let down = if i + 1 < h {
                    ox[k + w]
                } else if periodic {
                    ox[j]
                } else {
                    T::zero()
                };
                let right = if j + 1 < w {
                    oy[k + 1]
                } else if periodic {
                    oy[i * w]
                } else {
                    T::zero()
                };
                let div = (down - ox[k] + right - oy[k]) * inv;
                let src = drive.map_or(T::zero(), |d| dt * d.data[k]);
                p[k] = self.alpha[k] * (p[k] - self.c2dt[k] * div + src);
            }
        }
        for k in 0..h * w {
            ox[k] = self.beta[k] * ox[k];
            oy[k] = self.beta[k] * oy[k];
        }
        Ok(())
    }
}

/// A recorded state together with the number of steps taken to reach it.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T> {
    pub step: usize,
    pub state: GridState<T>,
}

/// Run `drives.len()` steps from `x0`, recording every `record_every`-th
/// state and always the final one.
pub fn simulate<T: Real>(
    x0: &GridState<T>,
    params: &PhysicalParams<T>,
    drives: &[Field<T>],
    shape: &GridShape<T>,
    bc: BoundaryCondition,
    record_every: usize,
) -> Result<Vec<Frame<T>>> {
    if record_every == 0 {
        return Err(Error::InvalidParameter("record_every must be at least 1".into()));
    }
    let stepper = Stepper::new(*shape, params, bc)?;
    x0.check(shape)?;
    let mut state = x0.clone();
    let mut frames = Vec::new();
    let n = drives.len();
    for (t, d) in drives.iter().enumerate() {
        stepper.advance(&mut state, Some(d)).map_err(|e| match e {
            Error::NonFinite { field, .. } => Error::NonFinite { step: Some(t + 1), field },
            e => e,
        })?;
        if let Some(f) = state.first_non_finite() {
            return Err(Error::NonFinite { step: Some(t + 1), field: f.into() });
        }
        let k = t + 1;
        if k % record_every == 0 || k == n {
            frames.push(Frame { step: k, state: state.clone() });
        }
    }
    Ok(frames)
}

/// Row-major dense square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        DenseMatrix { n, data: vec![T::zero(); n * n] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.n + c]
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        (0..self.n)
            .map(|r| {
                let row = &self.data[r * self.n..(r + 1) * self.n];
                row.iter().zip(x).fold(T::zero(), |a, (&m, &v)| a + m * v)
            })
            .collect()
    }
}

/// Sparse row representation: `(column, value)` pairs per row.
type SparseRows<T> = Vec<Vec<(usize, T)>>;

fn sparse_grad<T: Real>(shape: &GridShape<T>, bc: BoundaryCondition, rows: bool) -> SparseRows<T> {
    let (h, w) = (shape.height, shape.width);
    let inv = T::one() / shape.dx;
    let mut out = vec![Vec::new(); h * w];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            out[k].push((k, inv));
            let nb = if rows {
                if i > 0 { Some((i - 1) * w + j) } else if bc == BoundaryCondition::Periodic { Some((h - 1) * w + j) } else { None }
            } else if j > 0 {
                Some(k - 1)
            } else if bc == BoundaryCondition::Periodic {
                Some(i * w + w - 1)
            } else {
                None
            };
            if let Some(m) = nb {
                out[k].push((m, -inv));
            }
        }
    }
    out
}

fn sparse_div<T: Real>(shape: &GridShape<T>, bc: BoundaryCondition, rows: bool) -> SparseRows<T> {
    let (h, w) = (shape.height, shape.width);
    let inv = T::one() / shape.dx;
    let mut out = vec![Vec::new(); h * w];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            out[k].push((k, -inv));
            let nb = if rows {
                if i + 1 < h { Some(k + w) } else if bc == BoundaryCondition::Periodic { Some(j) } else { None }
            } else if j + 1 < w {
                Some(k + 1)
            } else if bc == BoundaryCondition::Periodic {
                Some(i * w)
            } else {
                None
            };
            if let Some(m) = nb {
                out[k].push((m, inv));
            }
        }
    }
    out
}

/// Dense `3HW x 3HW` matrix `A` with `x_{n+1} = A x_n + alpha dt [drive; 0; 0]`.
///
/// Built from explicit sparse `G` and `D` matrices, independently of
/// [`Stepper`], so it can serve as a reference for it.
pub fn assemble_coupling_matrix<T: Real>(
    params: &PhysicalParams<T>,
    shape: &GridShape<T>,
    bc: BoundaryCondition,
) -> Result<DenseMatrix<T>> {
    shape.validate()?;
    params.validate(shape)?;
    let n = shape.cells();
    if n > DENSE_CELL_LIMIT {
        return Err(Error::TooLarge { cells: n, limit: DENSE_CELL_LIMIT });
    }
    let dt = shape.dt;
    let gx = sparse_grad(shape, bc, true);
    let gy = sparse_grad(shape, bc, false);
    let dxm = sparse_div(shape, bc, true);
    let dym = sparse_div(shape, bc, false);
    let alpha = params.alpha(dt);
    let beta = params.beta(dt);
    let c2 = params.c.map(|c| c * c);
    let mut a = DenseMatrix::zeros(3 * n);
    let nn = 3 * n;

    for r in 0..n {
        let al = alpha.as_slice()[r];
        let be = beta.as_slice()[r];
        let k2 = c2.as_slice()[r];
        // p row: alpha * [I + c^2 dt^2 (Dx Gx + Dy Gy), -c^2 dt Dx, -c^2 dt Dy]
        a.data[r * nn + r] = a.data[r * nn + r] + al;
        for (drow, grow) in [(&dxm, &gx), (&dym, &gy)] {
            for &(m, dv) in &drow[r] {
                for &(q, gv) in &grow[m] {
                    a.data[r * nn + q] = a.data[r * nn + q] + al * k2 * dt * dt * dv * gv;
                }
            }
        }
        for &(m, dv) in &dxm[r] {
            a.data[r * nn + n + m] = a.data[r * nn + n + m] - al * k2 * dt * dv;
        }
        for &(m, dv) in &dym[r] {
            a.data[r * nn + 2 * n + m] = a.data[r * nn + 2 * n + m] - al * k2 * dt * dv;
        }
        // o rows: beta * [-dt G, I]
        let rx = n + r;
        let ry = 2 * n + r;
        for &(q, gv) in &gx[r] {
            a.data[rx * nn + q] = a.data[rx * nn + q] - be * dt * gv;
        }
        for &(q, gv) in &gy[r] {
            a.data[ry * nn + q] = a.data[ry * nn + q] - be * dt * gv;
        }
        a.data[rx * nn + rx] = be;
        a.data[ry * nn + ry] = be;
    }
    Ok(a)
}

/// Which field a snapshot holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldName {
    P,
    Ox,
    Oy,
}

impl FieldName {
    pub fn as_str(&self) -> &'static str {
        match self {
            FieldName::P => "p",
            FieldName::Ox => "ox",
            FieldName::Oy => "oy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(FieldName::P),
            "ox" => Ok(FieldName::Ox),
            "oy" => Ok(FieldName::Oy),
            other => Err(Error::Format(format!("unknown field name {other:?}"))),
        }
    }
}

/// Snapshot CSV: one header line `# field=<name> H=<H> W=<W> t=<step>`,
/// then `H` comma-separated rows with full round-trip precision.
pub fn write_snapshot<T: Real, Wr: Write>(out: &mut Wr, name: FieldName, field: &Field<T>, step: usize) -> Result<()> {
    writeln!(out, "# field={} H={} W={} t={}", name.as_str(), field.height, field.width, step)?;
    for i in 0..field.height {
        let row: Vec<String> = (0..field.width).map(|j| format!("{:e}", field.get(i, j))).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_snapshot<T: Real, R: BufRead>(input: R) -> Result<(FieldName, usize, Field<T>)> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty snapshot".into()))??;
    let header = header
        .strip_prefix("# ")
        .ok_or_else(|| Error::Format(format!("bad snapshot header {header:?}")))?;
    let (mut name, mut h, mut w, mut t) = (None, None, None, None);
    for kv in header.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Format(format!("bad header token {kv:?}")))?;
        let num = || v.parse::<usize>().map_err(|_| Error::Format(format!("bad number {v:?}")));
        match k {
            "field" => name = Some(FieldName::parse(v)?),
            "H" => h = Some(num()?),
            "W" => w = Some(num()?),
            "t" => t = Some(num()?),
            _ => return Err(Error::Format(format!("unknown header key {k:?}"))),
        }
    }
    let (name, h, w, t) = match (name, h, w, t) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => return Err(Error::Format("snapshot header is incomplete".into())),
    };
    let mut data = Vec::with_capacity(h * w);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != w {
            return Err(Error::Format(format!("row has {} values, expected {w}", row.len())));
        }
        for v in row {
            let x: f64 = v.trim().parse().map_err(|_| Error::Format(format!("bad value {v:?}")))?;
            data.push(T::lit(x));
        }
    }
    Ok((name, t, Field::from_vec(h, w, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(h: usize, w: usize) -> GridShape<f64> {
        GridShape::new(h, w, 1.0, 0.1).unwrap()
    }

    #[test]
    fn gradient_two_by_two_by_hand() {
        let s = shape(2, 2);
        let p = Field::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let (gx, gy) = gradient(&p, &s, BoundaryCondition::ZeroPad).unwrap();
        assert_eq!(gx, Field::from_rows(&[vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap());
        // (0,1): 1 - 0, (1,0): 2 - pad, (1,1): 3 - 2
        assert_eq!(gy, Field::from_rows(&[vec![0.0, 1.0], vec![2.0, 1.0]]).unwrap());
    }

    #[test]
    fn zero_drive_from_rest_stays_at_rest() {
        let s = shape(3, 4);
        let params = PhysicalParams::uniform(&s, 0.7, 0.3, 0.2);
        let x0 = GridState::zeros(&s);
        let x1 = step(&x0, &params, &Field::zeros(3, 4), &s, BoundaryCondition::ZeroPad).unwrap();
        assert_eq!(x1, x0);
    }

    #[test]
    fn single_impulse_first_step() {
        let s = shape(3, 3);
        let params = PhysicalParams::uniform(&s, 1.0, 0.5, 0.5);
        let mut drive = Field::zeros(3, 3);
        drive.set(1, 1, 1.0);
        let x1 = step(&GridState::zeros(&s), &params, &drive, &s, BoundaryCondition::ZeroPad).unwrap();
        let alpha = 1.0 / (1.0 + 0.1 * 0.5);
        assert!((x1.p.get(1, 1) - alpha * 0.1).abs() < 1e-15);
        assert_eq!(x1.ox.max_abs(), 0.0);
        assert_eq!(x1.p.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn undersized_grid_rejected() {
        assert!(matches!(GridShape::new(1, 2, 1.0, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn negative_damping_rejected() {
        let s = shape(2, 2);
        let params = PhysicalParams::uniform(&s, 1.0, -0.1, 0.1);
        assert!(matches!(params.validate(&s), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn non_finite_drive_is_reported() {
        let s = shape(2, 2);
        let params = PhysicalParams::uniform(&s, 1.0, 0.1, 0.1);
        let drive = Field::filled(2, 2, f64::NAN);
        let e = step(&GridState::zeros(&s), &params, &drive, &s, BoundaryCondition::Periodic).unwrap_err();
        assert!(matches!(e, Error::NonFinite { .. }));
    }

    #[test]
    fn simulate_records_stride_and_final() {
        let s = shape(2, 3);
        let params = PhysicalParams::uniform(&s, 1.0, 0.1, 0.1);
        let drives = vec![Field::filled(2, 3, 0.5); 7];
        let frames = simulate(&GridState::zeros(&s), &params, &drives, &s, BoundaryCondition::ZeroPad, 3).unwrap();
        let steps: Vec<usize> = frames.iter().map(|f| f.step).collect();
        assert_eq!(steps, vec![3, 6, 7]);
    }

    #[test]
    fn simulate_one_step_equals_step() {
        let s = shape(3, 3);
        let params = PhysicalParams::uniform(&s, 0.9, 0.2, 0.3);
        let drive = Field::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let a = step(&GridState::zeros(&s), &params, &drive, &s, BoundaryCondition::Periodic).unwrap();
        let f = simulate(&GridState::zeros(&s), &params, &[drive], &s, BoundaryCondition::Periodic, 1).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].state, a);
    }

    #[test]
    fn tiny_damping_coupling_matrix_is_near_velocity_block() {
        let s = GridShape::<f64>::new(2, 2, 1.0, 0.1).unwrap();
        let params = PhysicalParams::uniform(&s, 1.0, 1e-9, 1e-9);
        let a = assemble_coupling_matrix(&params, &s, BoundaryCondition::ZeroPad).unwrap();
        // o rows of the undamped matrix are [-dt G, I]
        let n = 4;
        assert!((a.get(n, n) - 1.0).abs() < 1e-9);
        assert!((a.get(n, 0) + 0.1).abs() < 1e-9);
        // p-p diagonal: 1 + c^2 dt^2 (Dx Gx + Dy Gy)_{00}, each axis gives -2
        assert!((a.get(0, 0) - 0.96).abs() < 1e-9);
    }

    #[test]
    fn dense_limit_enforced() {
        let s = GridShape::<f64>::new(65, 64, 1.0, 0.1).unwrap();
        let params = PhysicalParams::uniform(&s, 1.0, 0.1, 0.1);
        assert!(matches!(
            assemble_coupling_matrix(&params, &s, BoundaryCondition::ZeroPad),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn snapshot_round_trip() {
        let f = Field::from_fn(3, 2, |i, j| (i as f64 + 0.1) * (j as f64 - 0.7) / 3.0);
        let mut buf = Vec::new();
        write_snapshot(&mut buf, FieldName::Oy, &f, 42).unwrap();
        let (name, t, g) = read_snapshot::<f64, _>(buf.as_slice()).unwrap();
        assert_eq!((name, t), (FieldName::Oy, 42));
        assert_eq!(g, f);
    }

    #[test]
    fn snapshot_rejects_bad_header() {
        let bad = "field=p H=2 W=2 t=0\n1,2\n3,4\n";
        assert!(read_snapshot::<f64, _>(bad.as_bytes()).is_err());
    }

    #[test]
    fn f32_stepper_runs() {
        let s = GridShape::<f32>::new(3, 3, 1.0, 0.1).unwrap();
        let params = PhysicalParams::uniform(&s, 1.0f32, 0.1, 0.1);
        let x = step(&GridState::zeros(&s), &params, &Field::filled(3, 3, 1.0), &s, BoundaryCondition::ZeroPad).unwrap();
        assert!(x.p.get(0, 0) > 0.0);
    }
}
