//! Small dense/convolution building blocks with explicit forward and
//! backward passes.
//!
//! The model graphs in this crate are fixed and small, so each layer carries
//! its own hand-derived backward pass instead of a general autodiff tape.
//! Gradient correctness is pinned by finite-difference checks in the
//! training module.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Affine layer `y = W x + b`, with `W` of shape (out, in).
///
/// The same struct doubles as its own gradient accumulator: a gradient is a
/// `Dense` of identical shape holding `dL/dW` and `dL/db`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    /// Gaussian-initialized weights with standard deviation `std`, zero bias.
    pub fn seeded<R: Rng>(out_dim: usize, in_dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| normal.sample(rng));
        Dense {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    /// Accumulate parameter gradients for upstream gradient `dy` and return
    /// the input gradient `dx = Wᵀ dy`.
    pub fn backward(&self, x: &Array1<f64>, dy: &Array1<f64>, grad: &mut Dense) -> Array1<f64> {
        for (i, &dyi) in dy.iter().enumerate() {
            if dyi != 0.0 {
                let mut row = grad.w.row_mut(i);
                row.scaled_add(dyi, x);
            }
        }
        grad.b += dy;
        self.w.t().dot(dy)
    }

    pub fn sgd_step(&mut self, grad: &Dense, scale: f64) {
        self.w.scaled_add(-scale, &grad.w);
        self.b.scaled_add(-scale, &grad.b);
    }

    pub fn zero(&mut self) {
        self.w.fill(0.0);
        self.b.fill(0.0);
    }

    pub fn flat_len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend(self.w.iter());
        out.extend(self.b.iter());
    }

    pub fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        for v in self.w.iter_mut() {
            *v = src[*pos];
            *pos += 1;
        }
        for v in self.b.iter_mut() {
            *v = src[*pos];
            *pos += 1;
        }
    }
}

/// 1-D convolution over a (positions x channels) matrix producing one score
/// per position: kernel width 3, same padding, single output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvScorer {
    /// Kernel weights, shape (3, channels); row 1 is the center tap.
    pub w: Array2<f64>,
    pub b: f64,
}

impl ConvScorer {
    pub const KERNEL: usize = 3;

    pub fn zeros(channels: usize) -> Self {
        ConvScorer {
            w: Array2::zeros((Self::KERNEL, channels)),
            b: 0.0,
        }
    }

    pub fn seeded<R: Rng>(channels: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        ConvScorer {
            w: Array2::from_shape_fn((Self::KERNEL, channels), |_| normal.sample(rng)),
            b: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.w.ncols()
    }

    /// Scores for every position of `x` (positions x channels), zero-padded
    /// at both ends so the output length equals the input length.
    pub fn forward(&self, x: &Array2<f64>) -> Array1<f64> {
        let t = x.nrows();
        let mut s = Array1::from_elem(t, self.b);
        for pos in 0..t {
            let mut acc = 0.0;
            for j in 0..Self::KERNEL {
                let src = pos as isize + j as isize - 1;
                if src >= 0 && (src as usize) < t {
                    acc += self.w.row(j).dot(&x.row(src as usize));
                }
            }
            s[pos] += acc;
        }
        s
    }

    /// Accumulate kernel gradients for upstream `ds` and return `dx`.
    pub fn backward(&self, x: &Array2<f64>, ds: &Array1<f64>, grad: &mut ConvScorer) -> Array2<f64> {
        let t = x.nrows();
        let mut dx = Array2::zeros(x.raw_dim());
        for pos in 0..t {
            let d = ds[pos];
            if d == 0.0 {
                continue;
            }
            grad.b += d;
            for j in 0..Self::KERNEL {
                let src = pos as isize + j as isize - 1;
                if src >= 0 && (src as usize) < t {
                    let src = src as usize;
                    grad.w.row_mut(j).scaled_add(d, &x.row(src));
                    dx.row_mut(src).scaled_add(d, &self.w.row(j));
                }
            }
        }
        dx
    }

    pub fn sgd_step(&mut self, grad: &ConvScorer, scale: f64) {
        self.w.scaled_add(-scale, &grad.w);
        self.b -= scale * grad.b;
    }

    pub fn zero(&mut self) {
        self.w.fill(0.0);
        self.b = 0.0;
    }

    pub fn flat_len(&self) -> usize {
        self.w.len() + 1
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend(self.w.iter());
        out.push(self.b);
    }

    pub fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        for v in self.w.iter_mut() {
            *v = src[*pos];
            *pos += 1;
        }
        self.b = src[*pos];
        *pos += 1;
    }
}

/// Softmax over the first `live` entries of `logits`; the rest get zero mass.
pub fn masked_softmax(logits: &Array1<f64>, live: usize) -> Array1<f64> {
    debug_assert!(live > 0 && live <= logits.len());
    let max = logits
        .iter()
        .take(live)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = Array1::zeros(logits.len());
    let mut sum = 0.0;
    for i in 0..live {
        let e = (logits[i] - max).exp();
        probs[i] = e;
        sum += e;
    }
    for i in 0..live {
        probs[i] /= sum;
    }
    probs
}

/// Jacobian-vector product of the masked softmax: given the forward output
/// `probs` and upstream `dprobs`, returns the logit gradient.
pub fn masked_softmax_backward(probs: &Array1<f64>, dprobs: &Array1<f64>, live: usize) -> Array1<f64> {
    let mut inner = 0.0;
    for i in 0..live {
        inner += dprobs[i] * probs[i];
    }
    let mut dlogits = Array1::zeros(probs.len());
    for i in 0..live {
        dlogits[i] = probs[i] * (dprobs[i] - inner);
    }
    dlogits
}

/// Mean of rows where `mask` is nonzero. Returns the pooled vector and the
/// number of live rows.
pub fn masked_mean_pool(rows: &Array2<f64>, mask: &[u8]) -> (Array1<f64>, usize) {
    let mut pooled = Array1::zeros(rows.ncols());
    let mut n = 0usize;
    for (i, &m) in mask.iter().enumerate().take(rows.nrows()) {
        if m != 0 {
            pooled += &rows.row(i);
            n += 1;
        }
    }
    if n > 0 {
        pooled /= n as f64;
    }
    (pooled, n)
}

/// Distribute the pooled-mean gradient back onto the live rows.
pub fn masked_mean_pool_backward(
    dpooled: &Array1<f64>,
    mask: &[u8],
    n_rows: usize,
    n_live: usize,
) -> Array2<f64> {
    let mut drows = Array2::zeros((n_rows, dpooled.len()));
    if n_live == 0 {
        return drows;
    }
    let inv = 1.0 / n_live as f64;
    for (i, &m) in mask.iter().enumerate().take(n_rows) {
        if m != 0 {
            drows.row_mut(i).scaled_add(inv, dpooled);
        }
    }
    drows
}

pub fn tanh_forward(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(f64::tanh)
}

/// Backward through tanh given the forward *output* `a`.
pub fn tanh_backward(a: &Array1<f64>, da: &Array1<f64>) -> Array1<f64> {
    let mut dx = da.clone();
    for (d, &ai) in dx.iter_mut().zip(a.iter()) {
        *d *= 1.0 - ai * ai;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_scalar<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = crate::rng::substream(3, "nn-test");
        let layer = Dense::seeded(3, 4, 0.5, &mut rng);
        let x = array![0.3, -0.7, 1.1, 0.2];
        let dy = array![1.0, -2.0, 0.5];
        let mut grad = Dense::zeros(3, 4);
        let dx = layer.backward(&x, &dy, &mut grad);

        let h = 1e-6;
        let loss = |l: &Dense, xv: &Array1<f64>| l.forward(xv).dot(&dy);
        for i in 0..3 {
            for j in 0..4 {
                let mut lp = layer.clone();
                let num = fd_scalar(
                    |v| {
                        lp.w[[i, j]] = v;
                        loss(&lp, &x)
                    },
                    layer.w[[i, j]],
                    h,
                );
                assert!((num - grad.w[[i, j]]).abs() < 1e-6);
            }
        }
        for j in 0..4 {
            let mut xp = x.clone();
            let num = fd_scalar(
                |v| {
                    xp[j] = v;
                    loss(&layer, &xp)
                },
                x[j],
                h,
            );
            assert!((num - dx[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_same_padding_length_and_backward() {
        let mut rng = crate::rng::substream(4, "nn-test");
        let conv = ConvScorer::seeded(2, 0.5, &mut rng);
        let x = Array2::from_shape_fn((5, 2), |(i, j)| (i as f64) * 0.3 - (j as f64) * 0.8);
        let s = conv.forward(&x);
        assert_eq!(s.len(), 5);

        let ds = Array1::from_vec(vec![0.7, -1.0, 0.1, 0.4, -0.2]);
        let mut grad = ConvScorer::zeros(2);
        let dx = conv.backward(&x, &ds, &mut grad);

        let h = 1e-6;
        let loss = |c: &ConvScorer, xv: &Array2<f64>| c.forward(xv).dot(&ds);
        for j in 0..3 {
            for ch in 0..2 {
                let mut cp = conv.clone();
                let num = fd_scalar(
                    |v| {
                        cp.w[[j, ch]] = v;
                        loss(&cp, &x)
                    },
                    conv.w[[j, ch]],
                    h,
                );
                assert!((num - grad.w[[j, ch]]).abs() < 1e-6);
            }
        }
        for i in 0..5 {
            for ch in 0..2 {
                let mut xp = x.clone();
                let num = fd_scalar(
                    |v| {
                        xp[[i, ch]] = v;
                        loss(&conv, &xp)
                    },
                    x[[i, ch]],
                    h,
                );
                assert!((num - dx[[i, ch]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_softmax_sums_to_one_and_zero_on_pad() {
        let logits = array![1.0, 2.0, 3.0, 100.0, 100.0];
        let p = masked_softmax(&logits, 3);
        assert!((p.iter().take(3).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[3], 0.0);
        assert_eq!(p[4], 0.0);
    }

    #[test]
    fn masked_softmax_backward_matches_finite_differences() {
        let logits = array![0.3, -1.2, 0.8, 2.0];
        let live = 3;
        let dprobs = array![1.0, -0.5, 0.25, 0.0];
        let p = masked_softmax(&logits, live);
        let dl = masked_softmax_backward(&p, &dprobs, live);
        let h = 1e-6;
        for i in 0..live {
            let mut lp = logits.clone();
            let num = fd_scalar(
                |v| {
                    lp[i] = v;
                    masked_softmax(&lp, live).dot(&dprobs)
                },
                logits[i],
                h,
            );
            assert!((num - dl[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn mean_pool_respects_mask() {
        let rows = Array2::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap();
        let (pooled, n) = masked_mean_pool(&rows, &[1, 1, 0]);
        assert_eq!(n, 2);
        assert_eq!(pooled, array![2.0, 3.0]);
    }
}
