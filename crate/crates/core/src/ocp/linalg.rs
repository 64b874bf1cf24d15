//! Symmetric banded storage and an in-place band Cholesky factorization.

#[derive(Debug, Clone)]
pub(crate) struct BandedSym {
    n: usize,
    bw: usize,
    /// Lower band, row-major: entry `(i, j)` with `i - bw <= j <= i` lives at
    /// `i * (bw + 1) + (i - j)`.
    data: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw, "({i}, {j}) outside band {}", self.bw);
        i * (self.bw + 1) + (i - j)
    }

    /// Adds `v` to entry `(i, j)` (and implicitly `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// Replaces row and column `i` by the identity row.
    pub fn pin(&mut self, i: usize) {
        let lo = i.saturating_sub(self.bw);
        for j in lo..i {
            let k = self.idx(i, j);
            self.data[k] = 0.0;
        }
        for r in i + 1..(i + self.bw + 1).min(self.n) {
            let k = self.idx(r, i);
            self.data[k] = 0.0;
        }
        let k = self.idx(i, i);
        self.data[k] = 1.0;
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.data[self.idx(i, i)]
    }

    /// Cholesky factor `L` (stored in the same layout), or `None` if the
    /// matrix is not numerically positive definite.
    pub fn cholesky(mut self) -> Option<BandCholesky> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut inv_diag = vec![0.0; n];
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let (prev, rest) = self.data.split_at_mut(i * w);
            let row = &mut rest[..w];
            // Row r holds L[r, r - t] at offset t, so each k-sum over lo..j
            // is a contiguous dot product.
            for j in lo..i {
                let (gap, len) = (i - j, j - lo);
                let rj = &prev[j * w + 1..j * w + 1 + len];
                let s = row[gap] - dot(&row[gap + 1..gap + 1 + len], rj);
                row[gap] = s * inv_diag[j];
            }
            let off = &row[1..1 + i - lo];
            let d = row[0] - dot(off, off);
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            row[0] = d.sqrt();
            inv_diag[i] = 1.0 / row[0];
        }
        Some(BandCholesky { factor: self })
    }
}

/// Dot product with four independent accumulators so it vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) struct BandCholesky {
    factor: BandedSym,
}

impl BandCholesky {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let l = &self.factor;
        let (n, bw, w) = (l.n, l.bw, l.bw + 1);
        let data = &l.data;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let len = i - lo;
            let row = &data[i * w + 1..i * w + 1 + len];
            // row[t - 1] = L[i, i - t]
            let s: f64 = row.iter().zip(y[lo..i].iter().rev()).map(|(a, b)| a * b).sum();
            y[i] = (y[i] - s) / data[i * w];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= data[k * w + (k - i)] * y[k];
            }
            y[i] = s / data[i * w];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn band_solve_matches_dense() {
        let (n, bw) = (30, 4);
        let mut band = BandedSym::zeros(n, bw);
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                let v = if i == j {
                    10.0 + i as f64
                } else {
                    ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6
                };
                band.add(i, j, v);
                dense[(i, j)] = v;
                dense[(j, i)] = v;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = band.cholesky().unwrap().solve(&rhs);
        let expected = dense.cholesky().unwrap().solve(&DVector::from_vec(rhs));
        for i in 0..n {
            assert!((x[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let mut band = BandedSym::zeros(3, 1);
        band.add(0, 0, 1.0);
        band.add(1, 0, 2.0);
        band.add(1, 1, 1.0);
        band.add(2, 2, 1.0);
        assert!(band.cholesky().is_none());
    }

    #[test]
    fn pinned_row_gives_zero_solution_component() {
        let mut band = BandedSym::zeros(4, 2);
        for i in 0..4 {
            band.add(i, i, 4.0);
            if i > 0 {
                band.add(i, i - 1, 1.0);
            }
        }
        band.pin(2);
        let x = band.cholesky().unwrap().solve(&[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(x[2], 0.0);
    }
}
