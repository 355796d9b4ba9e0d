//! Dense row-major f64 arrays, rank 1 or 2 in practice.
//!
//! Every constructor and every engine op rejects non-finite values: NaN/Inf
//! anywhere is a hard error rather than something that propagates silently.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("NdArray::new", format!("zero dimension in {shape:?}")));
        }
        if data.len() != n {
            return Err(Error::shape(
                "NdArray::new",
                format!("data length {} != product of shape {:?}", data.len(), shape),
            ));
        }
        let arr = NdArray { shape, data };
        arr.check_finite("NdArray::new")?;
        Ok(arr)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        NdArray { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        NdArray { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        NdArray { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        NdArray { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        NdArray::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut a = NdArray::zeros(vec![n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows of a rank-2 array (a rank-1 array counts as a single row).
    pub fn rows(&self) -> usize {
        if self.rank() == 2 { self.shape[0] } else { 1 }
    }

    /// Columns of a rank-2 array (rank-1: its length).
    pub fn cols(&self) -> usize {
        if self.rank() == 2 { self.shape[1] } else { self.shape[0] }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NdArray {
        NdArray { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

// ── Raw matmul kernels ──────────────────────────────────────────────
//
// Three layouts cover forward and both backward products without
// materializing transposes. All loops keep the innermost axis contiguous.

/// C[m,n] = A[m,k] · B[k,n]
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ap * bv;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ  (dot products of contiguous rows)
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C[m,n] = A[k,m]ᵀ · B[k,n]  (rank-1 accumulation per shared row)
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shapes_and_nan() {
        assert!(NdArray::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(NdArray::new(vec![0], vec![]).is_err());
        assert!(NdArray::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(NdArray::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn kernel_layouts_agree() {
        // A: 2x3, B: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = mm_nn(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        // bt: 2x3 = B transposed
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(mm_nt(&a, &bt, 2, 3, 2), c);

        // at: 3x2 = A transposed
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(mm_tn(&at, &b, 2, 3, 2), c);
    }
}
