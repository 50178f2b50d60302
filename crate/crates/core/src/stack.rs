//! Row-major `n x d` stacks of per-agent vectors and a few slice helpers.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Stack {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { n, d, data: vec![0.0; n * d] }
    }

    /// Every row set to `v`.
    pub fn broadcast(n: usize, v: &[f64]) -> Self {
        Self { n, d: v.len(), data: v.repeat(n) }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == d), "ragged rows");
        Self { n: rows.len(), d, data: rows.concat() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn sum(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.d];
        for r in self.rows() {
            axpy(&mut s, 1.0, r);
        }
        s
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut s = self.sum();
        s.iter_mut().for_each(|v| *v /= self.n as f64);
        s
    }

    pub fn weighted_mean(&self, w: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.d];
        for (r, &wi) in self.rows().zip(w) {
            axpy(&mut s, wi, r);
        }
        s
    }

    /// Row `i` divided by `w[i]`.
    pub fn scaled_rows(&self, w: &[f64]) -> Stack {
        let mut out = self.clone();
        for (i, &wi) in w.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v /= wi);
        }
        out
    }

    /// Row index of the first non-finite entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite()).map(|p| p / self.d.max(1))
    }

    /// `out_i = sum_j m[i][j] row_j`, summed in index order from `-0.0`
    /// and skipping zero weights, so an identity matrix returns rows unchanged.
    pub fn mixed(&self, m: &DMatrix<f64>) -> Stack {
        let mut out = Stack { n: self.n, d: self.d, data: vec![-0.0; self.n * self.d] };
        for i in 0..self.n {
            for j in 0..self.n {
                let w = m[(i, j)];
                if w != 0.0 {
                    let src = self.row(j);
                    for (o, &s) in out.data[i * self.d..(i + 1) * self.d].iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `y += a * x`
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
