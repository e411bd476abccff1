use super::{AutodiffError, Result};

/// Dense row-major matrix of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
    requires_grad: bool,
}

impl Tensor2D {
    /// Builds a tensor, rejecting NaN/Inf entries and shape mismatches.
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(AutodiffError::Dimension(format!(
                "{rows}x{cols} shape does not match {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite(i));
        }
        Ok(Self { rows, cols, values, requires_grad: false })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols], requires_grad: false }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

/// out = a · b with f64 accumulation.
pub(crate) fn matmul(
    a: &[f32],
    b: &[f32],
    n: usize,
    k: usize,
    m: usize,
) -> Vec<f32> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let mut acc = vec![0.0f64; m];
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * m..(p + 1) * m];
            let av = av as f64;
            for (j, &bv) in br.iter().enumerate() {
                acc[j] += av * bv as f64;
            }
        }
        for j in 0..m {
            out[i * m + j] = acc[j] as f32;
        }
    }
    out
}

/// out = aᵀ · b where a is n×k, b is n×m, result k×m.
pub(crate) fn matmul_tn(
    a: &[f32],
    b: &[f32],
    n: usize,
    k: usize,
    m: usize,
) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * m..(i + 1) * m];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let row = &mut acc[p * m..(p + 1) * m];
            for (j, &bv) in br.iter().enumerate() {
                row[j] += av * bv as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// out = a · bᵀ where a is n×k, b is m×k, result n×m.
pub(crate) fn matmul_nt(
    a: &[f32],
    b: &[f32],
    n: usize,
    k: usize,
    m: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += ar[p] as f64 * br[p] as f64;
            }
            out[i * m + j] = acc as f32;
        }
    }
    out
}
