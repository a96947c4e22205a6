//! Building blocks with hand-written reverse passes: affine maps, layer
//! norm, GELU, multi-head attention, and the Adam optimizer.
//!
//! Everything works on row-major `Array2<f64>` where rows are positions (or
//! batch entries) and columns are features.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// A named, shaped view of one parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

/// A group of parameter tensors visited in a fixed order.
///
/// Gradients and optimizer moments use the same type as the parameters, so
/// the visiting order lines them up.
pub trait Parameters {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.data.fill(value);
        }
    }

    fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Flattened copy of every tensor, in visiting order.
    fn flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }
}

pub(crate) fn tref<'a, D: ndarray::Dimension>(
    out: &mut Vec<TensorRef<'a>>,
    name: impl Into<String>,
    a: &'a ndarray::Array<f64, D>,
) {
    out.push(TensorRef {
        name: name.into(),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters are contiguous"),
    });
}

pub(crate) fn tmut<'a, D: ndarray::Dimension>(
    out: &mut Vec<TensorMut<'a>>,
    name: impl Into<String>,
    a: &'a mut ndarray::Array<f64, D>,
) {
    out.push(TensorMut {
        name: name.into(),
        data: a.as_slice_mut().expect("parameters are contiguous"),
    });
}

/// Uniform in `[-a, a]`.
pub fn uniform2(rows: usize, cols: usize, a: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..=a))
}

/// Glorot-uniform initialization for an `fan_in x fan_out` weight.
pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform2(fan_in, fan_out, a, rng)
}

/// `x W + b`.
pub fn affine(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Reverse of [`affine`]: accumulates into `dw`/`db`, returns `dx`.
pub fn affine_back(
    x: &ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dw += &x.t().dot(dy);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

/// Row-wise layer normalization.
pub fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *r);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_back(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dh_xh = dh.dot(&xh) / d;
        let r = cache.rstd[i];
        dx.row_mut(i)
            .assign(&((&dh - mean_dh - &(&xh * mean_dh_xh)) * r));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Softmax of each row, shifted by the row max.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    p
}

/// Per-head attention weights from a forward pass, kept for the reverse pass.
pub struct AttnCache {
    probs: Vec<Array2<f64>>,
}

impl AttnCache {
    /// Attention weights of head `h` (queries x keys).
    pub fn weights(&self, h: usize) -> &Array2<f64> {
        &self.probs[h]
    }
}

/// Scaled dot-product attention split over `heads` column blocks.
///
/// `q` is `m x d`, `k` and `v` are `n x d`. With `causal`, query `i` sees
/// keys `0..=i` only (requires `m == n`).
pub fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
    causal: bool,
) -> (Array2<f64>, AttnCache) {
    let (m, d) = q.dim();
    let n = k.nrows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((m, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t()) * scale;
        for i in 0..m {
            let visible = if causal { i + 1 } else { n };
            let mut row = scores.row_mut(i);
            let mx = row
                .slice(s![..visible])
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..n {
                if j < visible {
                    row[j] = (row[j] - mx).exp();
                    z += row[j];
                } else {
                    row[j] = 0.0;
                }
            }
            row.mapv_inplace(|x| x / z);
        }
        out.slice_mut(cols).assign(&scores.dot(&vh));
        probs.push(scores);
    }
    (out, AttnCache { probs })
}

/// Reverse of [`attention`]; returns `(dq, dk, dv)`.
pub fn attention_back(
    dout: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    cache: &AttnCache,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let heads = cache.probs.len();
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let doh = dout.slice(cols);
        let dp = doh.dot(&v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        let mut ds = dp * p;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = row.sum();
            row.zip_mut_with(&prow, |x, &pv| *x -= pv * dot);
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.tensors();
        let params = params.tensors_mut();
        if params.len() != grads.len() {
            return Err(Error::shape("parameter/gradient tensor count differs"));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(&grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.data.len() != g.data.len() || m.len() != g.data.len() {
                return Err(Error::shape(format!("adam state mismatch on {}", p.name)));
            }
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand2(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform2(r, c, 1.0, &mut rng)
    }

    /// Scalar probe `sum(out * w)` so every output element matters.
    fn probe(out: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (out * w).sum()
    }

    fn fd_check(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>, analytic: &Array2<f64>) {
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let ana = analytic.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                "idx {idx}: numeric {num} analytic {ana}"
            );
        }
    }

    #[test]
    fn layer_norm_reverse_matches_differences() {
        let x = rand2(3, 5, 1);
        let g = array![1.0, 0.5, -0.3, 2.0, 1.1];
        let b = array![0.1, 0.0, 0.2, -0.1, 0.3];
        let w = rand2(3, 5, 2);
        let (_, cache) = layer_norm(&x, &g, &b);
        let mut dg = Array1::zeros(5);
        let mut db = Array1::zeros(5);
        let dx = layer_norm_back(&w, &cache, &g, &mut dg, &mut db);
        fd_check(&|x| probe(&layer_norm(x, &g, &b).0, &w), &x, &dx);
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn attention_reverse_matches_differences() {
        for &causal in &[true, false] {
            let (m, n) = if causal { (4, 4) } else { (3, 5) };
            let q = rand2(m, 6, 3);
            let k = rand2(n, 6, 4);
            let v = rand2(n, 6, 5);
            let w = rand2(m, 6, 6);
            let (_, cache) = attention(&q, &k, &v, 2, causal);
            let (dq, dk, dv) = attention_back(&w, &q, &k, &v, &cache);
            fd_check(&|q| probe(&attention(q, &k, &v, 2, causal).0, &w), &q, &dq);
            fd_check(&|k| probe(&attention(&q, k, &v, 2, causal).0, &w), &k, &dk);
            fd_check(&|v| probe(&attention(&q, &k, v, 2, causal).0, &w), &v, &dv);
        }
    }

    #[test]
    fn causal_rows_ignore_later_keys() {
        let q = rand2(4, 4, 7);
        let k = rand2(4, 4, 8);
        let v = rand2(4, 4, 9);
        let (out, cache) = attention(&q, &k, &v, 2, true);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        k2.row_mut(3).fill(9.0);
        v2.row_mut(3).fill(-9.0);
        let (out2, _) = attention(&q, &k2, &v2, 2, true);
        assert_eq!(out.slice(s![..3, ..]), out2.slice(s![..3, ..]));
        for h in 0..2 {
            for row in cache.weights(h).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        struct P(Array1<f64>);
        impl Parameters for P {
            fn tensors(&self) -> Vec<TensorRef<'_>> {
                let mut v = vec![];
                tref(&mut v, "p", &self.0);
                v
            }
            fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
                let mut v = vec![];
                tmut(&mut v, "p", &mut self.0);
                v
            }
        }
        let mut p = P(array![1.0, -2.0, 0.0]);
        let g = P(array![0.5, -3.0, 0.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &g).unwrap();
        // First bias-corrected step is lr * g / (|g| + eps).
        assert!((p.0[0] - 0.9).abs() < 1e-6);
        assert!((p.0[1] + 1.9).abs() < 1e-6);
        assert_eq!(p.0[2], 0.0);
        assert_eq!(adam.steps(), 1);

        let mut frozen = Adam::new(0.0);
        let before = p.0.clone();
        frozen.step(&mut p, &g).unwrap();
        assert_eq!(p.0, before);
    }
}
