//! Plain (non-differentiated) rank-2 tensors and the raw kernels shared by
//! forward and backward passes.

use super::buffer::Buffer;
use rand::Rng;

/// Dense row-major matrix of f64. Scalars are 1x1, row vectors 1xN.
#[derive(Debug, Clone)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Buffer,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: Buffer::zeros(rows * cols),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, v: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            v.len(),
            "tensor data length {} does not match shape {}x{}",
            v.len(),
            rows,
            cols
        );
        Tensor {
            rows,
            cols,
            data: Buffer::from_vec(v),
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::from_vec(1, 1, vec![x])
    }

    pub fn full(rows: usize, cols: usize, x: f64) -> Self {
        Tensor::from_vec(rows, cols, vec![x; rows * cols])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform init in [-limit, limit].
    pub fn uniform<R: Rng>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Self {
        let v = (0..rows * cols)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Tensor::from_vec(rows, cols, v)
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
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice()
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.data.as_mut_slice()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, x: f64) {
        self.data[r * self.cols + c] = x;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.as_slice().iter().all(|x| x.is_finite())
    }

    pub fn reshaped(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(rows * cols, self.len(), "reshape changes element count");
        Tensor::from_vec(rows, cols, self.as_slice().to_vec())
    }

    pub fn transposed(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn frob_norm(&self) -> f64 {
        self.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// C = A * B, with the inner loop over columns of B so the hot loop is
/// contiguous in both B and C.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let (m, k, p) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, p);
    let av = a.as_slice();
    let bv = b.as_slice();
    let ov = out.as_mut_slice();
    for i in 0..m {
        for kk in 0..k {
            let aik = av[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &bv[kk * p..(kk + 1) * p];
            let orow = &mut ov[i * p..(i + 1) * p];
            for j in 0..p {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// C = A * B^T.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dims");
    let (m, k, p) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(m, p);
    let av = a.as_slice();
    let bv = b.as_slice();
    let ov = out.as_mut_slice();
    for i in 0..m {
        let arow = &av[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &bv[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            ov[i * p + j] = acc;
        }
    }
    out
}

/// C = A^T * B.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dims");
    let (m, k, p) = (a.cols, a.rows, b.cols);
    let mut out = Tensor::zeros(m, p);
    let av = a.as_slice();
    let bv = b.as_slice();
    let ov = out.as_mut_slice();
    for kk in 0..k {
        let arow = &av[kk * m..(kk + 1) * m];
        let brow = &bv[kk * p..(kk + 1) * p];
        for i in 0..m {
            let aki = arow[i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut ov[i * p..(i + 1) * p];
            for j in 0..p {
                orow[j] += aki * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
        let c_nt = matmul_nt(&a, &b.transposed());
        assert_eq!(c.as_slice(), c_nt.as_slice());
        let c_tn = matmul_tn(&a.transposed(), &b);
        assert_eq!(c.as_slice(), c_tn.as_slice());
    }
}
