use crate::{Error, Result};

/// Dense row-major matrix.
///
/// Training code works on `Tensor2<f64>`; the streaming predictor converts
/// its weights once to `Tensor2<f32>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::default(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// A single-row tensor.
    pub fn row_vector(data: Vec<T>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn same_shape<U>(&self, other: &Tensor2<U>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Tensor2<U> {
        Tensor2 { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

impl Tensor2<f64> {
    pub fn to_f32(&self) -> Tensor2<f32> {
        self.map(|x| x as f32)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor2<f64>) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor2<f64>) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl Tensor2<f32> {
    pub fn to_f64(&self) -> Tensor2<f64> {
        self.map(|x| x as f64)
    }
}

fn check_matmul_shapes<T, U>(a: &Tensor2<T>, b: &Tensor2<U>) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Raw strided GEMM: `c = alpha * op(a) * op(b) + beta * c`, with transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // op(a) is m x k; storage is either m x k or k x m row-major
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized by the callers for the given m, k, n and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 64-bit matrix product.
pub fn matmul(a: &Tensor2<f64>, b: &Tensor2<f64>) -> Result<Tensor2<f64>> {
    check_matmul_shapes(a, b)?;
    let mut out = Tensor2::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, false, &b.data, false, &mut out.data, 0.0);
    Ok(out)
}

/// Matrix product with a strictly sequential reduction over the inner
/// dimension: `out[i][j] = ((a[i][0]*b[0][j] + a[i][1]*b[1][j]) + ...)`.
///
/// Every output element is accumulated in the same order on every run, so the
/// result is bit-reproducible.
pub fn matmul_seq<T>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<Tensor2<T>>
where
    T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign,
{
    check_matmul_shapes(a, b)?;
    let mut out = Tensor2::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        vec_mat_into(a.row(i), b, out.row_mut(i));
    }
    Ok(out)
}

/// `out = x · w` for a row vector `x`, reducing over `x` in index order.
pub fn vec_mat_into<T>(x: &[T], w: &Tensor2<T>, out: &mut [T])
where
    T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign,
{
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    out.iter_mut().for_each(|o| *o = T::default());
    for (i, &xi) in x.iter().enumerate() {
        let row = w.row(i);
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Like [`vec_mat_into`] but restricted to columns `start..start + out.len()`.
pub fn vec_mat_cols_into<T>(x: &[T], w: &Tensor2<T>, start: usize, out: &mut [T])
where
    T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign,
{
    debug_assert_eq!(x.len(), w.rows);
    out.iter_mut().for_each(|o| *o = T::default());
    let end = start + out.len();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w.row(i)[start..end];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}
