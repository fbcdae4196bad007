//! Adam with per-row state, so rows can be updated sparsely and appended.

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    dim: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Update count per row, for bias correction.
    steps: Vec<u32>,
}

impl Adam {
    pub fn new(dim: usize, rows: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            dim,
            m: vec![0.0; dim * rows],
            v: vec![0.0; dim * rows],
            steps: vec![0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.steps.len()
    }

    /// Appends zero-initialized rows up to `rows`.
    pub fn grow(&mut self, rows: usize) {
        if rows > self.rows() {
            self.m.resize(self.dim * rows, 0.0);
            self.v.resize(self.dim * rows, 0.0);
            self.steps.resize(rows, 0);
        }
    }

    /// Returns the descent step for one row; the caller subtracts it.
    /// `lr` holds one rate per coordinate.
    pub fn step(&mut self, row: usize, grad: &[f64], lr: &[f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.dim);
        debug_assert_eq!(lr.len(), self.dim);
        self.steps[row] += 1;
        let t = self.steps[row] as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let base = row * self.dim;
        let mut out = vec![0.0; self.dim];
        for j in 0..self.dim {
            let g = grad[j];
            let m = &mut self.m[base + j];
            let v = &mut self.v[base + j];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            out[j] = lr[j] * mh / (vh.sqrt() + self.eps);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_signed_learning_rate() {
        let mut a = Adam::new(2, 1);
        let s = a.step(0, &[3.0, -0.5], &[0.1, 0.2]);
        assert!((s[0] - 0.1).abs() < 1e-12 && (s[1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::new(1, 1);
        let mut x = 5.0;
        for _ in 0..2000 {
            let s = a.step(0, &[2.0 * (x - 1.0)], &[0.05]);
            x -= s[0];
        }
        assert!((x - 1.0).abs() < 1e-2);
    }

    #[test]
    fn grown_rows_start_fresh() {
        let mut a = Adam::new(3, 1);
        a.step(0, &[1.0, 1.0, 1.0], &[1.0; 3]);
        a.grow(3);
        assert_eq!(a.rows(), 3);
        let s = a.step(2, &[-1.0, 0.0, 2.0], &[1.0; 3]);
        assert!((s[0] + 1.0).abs() < 1e-12 && s[1] == 0.0 && (s[2] - 1.0).abs() < 1e-12);
    }
}
