//! Dense row-major matrices and the handful of kernels the encoder needs.
//!
//! Everything is `f64`; training and gradient checks need the headroom, and
//! the shapes involved are small enough that single precision would buy
//! nothing.

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape/data mismatch");
        Matrix { rows, cols, data }
    }

    /// 1 x n matrix from a slice.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// C += A * B, where A is (n x k), B is (k x m), C is (n x m).
///
/// The k-outer / j-inner loop order keeps the inner loop a contiguous
/// axpy over rows of B, which the compiler vectorizes.
pub fn matmul_acc(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    assert_eq!(c.rows, a.rows, "matmul out rows");
    assert_eq!(c.cols, b.cols, "matmul out cols");
    let m = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = &mut c.data[i * m..(i + 1) * m];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * m..(k + 1) * m];
            for j in 0..m {
                c_row[j] += aik * b_row[j];
            }
        }
    }
}

/// A * B as a fresh matrix.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.cols);
    matmul_acc(a, b, &mut c);
    c
}

/// C += A * B^T, where A is (n x k), B is (m x k), C is (n x m).
pub fn matmul_nt_acc(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dims");
    assert_eq!(c.rows, a.rows, "matmul_nt out rows");
    assert_eq!(c.cols, b.rows, "matmul_nt out cols");
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a_row[k] * b_row[k];
            }
            c.data[i * c.cols + j] += acc;
        }
    }
}

/// A^T * B, where A is (k x n), B is (k x m), result (n x m).
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dims");
    let mut c = Matrix::zeros(a.cols, b.cols);
    let m = b.cols;
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let c_row = &mut c.data[i * m..(i + 1) * m];
            for j in 0..m {
                c_row[j] += aki * b_row[j];
            }
        }
    }
    c
}

/// x·W (+ bias), where x is (n × in_dim) and `w` is an (in_dim × out_dim)
/// row-major slice. Operating on the raw slice lets callers keep large
/// weight tensors in a flat parameter buffer without copying them into
/// matrices.
pub fn linear_forward(
    x: &Matrix,
    w: &[f64],
    in_dim: usize,
    out_dim: usize,
    bias: Option<&[f64]>,
) -> Matrix {
    assert_eq!(x.cols, in_dim, "linear input width");
    assert_eq!(w.len(), in_dim * out_dim, "linear weight size");
    let mut out = Matrix::zeros(x.rows, out_dim);
    for i in 0..x.rows {
        let x_row = x.row(i);
        let out_row = &mut out.data[i * out_dim..(i + 1) * out_dim];
        if let Some(b) = bias {
            out_row.copy_from_slice(b);
        }
        for (k, &xik) in x_row.iter().enumerate() {
            if xik == 0.0 {
                continue;
            }
            let w_row = &w[k * out_dim..(k + 1) * out_dim];
            for j in 0..out_dim {
                out_row[j] += xik * w_row[j];
            }
        }
    }
    out
}

/// Input gradient of [`linear_forward`]: go·Wᵀ.
pub fn linear_backward_dx(go: &Matrix, w: &[f64], in_dim: usize, out_dim: usize) -> Matrix {
    assert_eq!(go.cols, out_dim, "linear grad width");
    let mut dx = Matrix::zeros(go.rows, in_dim);
    for i in 0..go.rows {
        let go_row = go.row(i);
        let dx_row = &mut dx.data[i * in_dim..(i + 1) * in_dim];
        for k in 0..in_dim {
            let w_row = &w[k * out_dim..(k + 1) * out_dim];
            let mut acc = 0.0;
            for j in 0..out_dim {
                acc += go_row[j] * w_row[j];
            }
            dx_row[k] = acc;
        }
    }
    dx
}

/// Weight gradient of [`linear_forward`], accumulated: dW += xᵀ·go.
pub fn linear_backward_dw(x: &Matrix, go: &Matrix, dw: &mut [f64]) {
    let (in_dim, out_dim) = (x.cols, go.cols);
    assert_eq!(x.rows, go.rows, "linear grad rows");
    assert_eq!(dw.len(), in_dim * out_dim, "linear weight grad size");
    for i in 0..x.rows {
        let x_row = x.row(i);
        let go_row = go.row(i);
        for (k, &xik) in x_row.iter().enumerate() {
            if xik == 0.0 {
                continue;
            }
            let dw_row = &mut dw[k * out_dim..(k + 1) * out_dim];
            for j in 0..out_dim {
                dw_row[j] += xik * go_row[j];
            }
        }
    }
}

/// Column sums accumulated into `out` (bias gradient).
pub fn column_sums_acc(m: &Matrix, out: &mut [f64]) {
    assert_eq!(m.cols, out.len(), "column sum width");
    for i in 0..m.rows {
        for (j, &v) in m.row(i).iter().enumerate() {
            out[j] += v;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += a[k] * b[k];
    }
    acc
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh-form gaussian error linear unit. Smooth everywhere, so central
/// finite differences agree with the analytic derivative at any point.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.5, 0.5, 0.5]);
        let mut c = Matrix::zeros(2, 2);
        matmul_nt_acc(&a, &b, &mut c);
        assert_eq!(c.data, vec![4.0, 3.0, 10.0, 7.5]);
    }

    #[test]
    fn matmul_tn_small() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let c = matmul_tn(&a, &b);
        // a^T b
        assert_eq!(c.data, vec![26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn linear_slice_kernels_match_matmul() {
        let x = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let w = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]; // 3x2
        let bias = vec![10.0, 20.0];
        let out = linear_forward(&x, &w, 3, 2, Some(&bias));
        let w_mat = Matrix::from_vec(3, 2, w.clone());
        let mut expect = matmul(&x, &w_mat);
        for i in 0..2 {
            for j in 0..2 {
                expect.data[i * 2 + j] += bias[j];
            }
        }
        assert_eq!(out, expect);

        let go = Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.5, 2.0]);
        let dx = linear_backward_dx(&go, &w, 3, 2);
        let mut dx_expect = Matrix::zeros(2, 3);
        matmul_nt_acc(&go, &w_mat, &mut dx_expect);
        assert_eq!(dx, dx_expect);

        let mut dw = vec![0.0; 6];
        linear_backward_dw(&x, &go, &mut dw);
        let dw_expect = matmul_tn(&x, &go);
        assert_eq!(dw, dw_expect.data);

        let mut db = vec![0.0; 2];
        column_sums_acc(&go, &mut db);
        assert_eq!(db, vec![1.5, 1.0]);
    }

    #[test]
    fn softmax_normalizes() {
        let mut row = vec![std::f64::consts::LN_2, 0.0];
        softmax_in_place(&mut row);
        assert!((row[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((row[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
