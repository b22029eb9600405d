//! Square matrices truncated to `|i - j| <= b`.

use nalgebra::DMatrix;

/// Row-major band storage: row `i` holds columns `i-b ..= i+b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    b: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn from_dense(a: &DMatrix<f64>, half_bandwidth: usize) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "band matrices are square");
        let n = a.nrows();
        let b = half_bandwidth.min(n.saturating_sub(1));
        let w = 2 * b + 1;
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            let lo = i.saturating_sub(b);
            let hi = (i + b).min(n - 1);
            for j in lo..=hi {
                data[i * w + (j + b - i)] = a[(i, j)];
            }
        }
        Self { n, b, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.b
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.b {
            0.0
        } else {
            self.data[i * (2 * self.b + 1) + (j + self.b - i)]
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// `out = A x`.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let (n, b) = (self.n, self.b);
        let w = 2 * b + 1;
        for i in 0..n {
            let lo = i.saturating_sub(b);
            let hi = (i + b).min(n - 1);
            let row = &self.data[i * w..(i + 1) * w];
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += row[j + b - i] * x[j];
            }
            out[i] = acc;
        }
    }

    /// `out = Aᵀ x`.
    pub fn matvec_t(&self, x: &[f64], out: &mut [f64]) {
        let (n, b) = (self.n, self.b);
        let w = 2 * b + 1;
        out[..n].fill(0.0);
        for i in 0..n {
            let lo = i.saturating_sub(b);
            let hi = (i + b).min(n - 1);
            let row = &self.data[i * w..(i + 1) * w];
            let xi = x[i];
            for j in lo..=hi {
                out[j] += row[j + b - i] * xi;
            }
        }
    }

    /// `xᵀ A x`.
    pub fn quad_form(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        self.matvec(x, scratch);
        x.iter().zip(scratch.iter()).map(|(a, b)| a * b).sum()
    }

    /// Attempts an in-band Cholesky factorization of the symmetric part;
    /// `true` when every pivot is positive.
    pub fn is_positive_definite(&self) -> bool {
        let (n, b) = (self.n, self.b);
        // l[i][k] for k in i-b..=i, stored at l[i * (b+1) + (k + b - i)].
        let w = b + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            let lo = i.saturating_sub(b);
            for j in lo..=i {
                let mut s = 0.5 * (self.get(i, j) + self.get(j, i));
                let klo = lo.max(j.saturating_sub(b));
                for k in klo..j {
                    s -= l[i * w + (k + b - i)] * l[j * w + (k + b - j)];
                }
                if j == i {
                    if !(s > 0.0) {
                        return false;
                    }
                    l[i * w + b] = s.sqrt();
                } else {
                    l[i * w + (j + b - i)] = s / l[j * w + b];
                }
            }
        }
        true
    }
}
