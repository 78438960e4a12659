//! Adam over flat parameter slices.

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Bias-corrected Adam update written into `delta` (to be added to the parameters).
    pub fn step(&mut self, grad: &[f64], delta: &mut [f64]) {
        assert_eq!(grad.len(), self.m.len());
        assert_eq!(delta.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            delta[i] = -self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Keeps only the moment blocks (of `stride` values each) listed in `keep`, in that order.
    pub fn remap(&mut self, keep: &[usize], stride: usize) {
        let mut m = Vec::with_capacity(keep.len() * stride);
        let mut v = Vec::with_capacity(keep.len() * stride);
        for &k in keep {
            m.extend_from_slice(&self.m[k * stride..(k + 1) * stride]);
            v.extend_from_slice(&self.v[k * stride..(k + 1) * stride]);
        }
        self.m = m;
        self.v = v;
    }
}
