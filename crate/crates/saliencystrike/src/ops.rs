//! Differentiable building blocks: affine maps, ReLU, row max-pooling,
//! softmax/cross-entropy, k-nearest-neighbour queries, Adam, and a
//! finite-difference gradient checker.
//!
//! There is no computation graph. Each forward function has a matching
//! backward that takes whatever the forward stashed (inputs, routing
//! indices) plus the upstream gradient. Model code chains these by hand,
//! which keeps every gradient path explicit and testable in isolation.

use crate::error::{Error, Result};
use crate::tensor::{dist_sq, Tensor};

/// `input [B, D_in] * w [D_in, D_out] + b [D_out]`, applied row-wise.
pub fn affine_map(input: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bn, din) = (input.rows(), input.cols());
    let (wr, dout) = (w.rows(), w.cols());
    if din != wr {
        return Err(Error::shape(
            "affine_map",
            format!("input cols == weight rows ({wr})"),
            din,
        ));
    }
    if b.len() != dout {
        return Err(Error::shape("affine_map", format!("bias len {dout}"), b.len()));
    }
    let mut out = Tensor::zeros(&[bn, dout]);
    for r in 0..bn {
        let in_row = input.row(r);
        let out_row = out.row_mut(r);
        out_row.copy_from_slice(b.data());
        for (i, &x) in in_row.iter().enumerate() {
            let w_row = w.row(i);
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o += x * wv;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`affine_map`] with respect to input, weights, and bias.
pub fn affine_backward(
    input: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (bn, din) = (input.rows(), input.cols());
    let dout = w.cols();
    if grad_out.rows() != bn || grad_out.cols() != dout {
        return Err(Error::shape(
            "affine_backward",
            format!("[{bn}, {dout}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut grad_in = Tensor::zeros(&[bn, din]);
    let mut grad_w = Tensor::zeros(&[din, dout]);
    let mut grad_b = Tensor::zeros(&[dout]);
    for r in 0..bn {
        let g_row = grad_out.row(r);
        let in_row = input.row(r);
        for (gb, &g) in grad_b.data_mut().iter_mut().zip(g_row) {
            *gb += g;
        }
        let gi_row = grad_in.row_mut(r);
        for i in 0..din {
            let w_row = w.row(i);
            let mut acc = 0.0;
            for (wv, &g) in w_row.iter().zip(g_row) {
                acc += wv * g;
            }
            gi_row[i] = acc;
            let gw_row = grad_w.row_mut(i);
            let x = in_row[i];
            for (gw, &g) in gw_row.iter_mut().zip(g_row) {
                *gw += x * g;
            }
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

/// Element-wise `max(x, 0)`.
pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Backward pass of [`relu`]: passes gradient only where the
/// pre-activation was strictly positive (subgradient 0 at the kink).
pub fn relu_backward(pre_activation: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if pre_activation.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?}", pre_activation.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut grad_in = grad_out.clone();
    for (g, &z) in grad_in.data_mut().iter_mut().zip(pre_activation.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(grad_in)
}

/// Column-wise max over the rows of `input [N, D]`.
///
/// Returns the pooled vector `[D]` and, per column, the row index that
/// supplied the maximum (ties resolve to the lowest row).
pub fn maxpool_rows(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, d) = (input.rows(), input.cols());
    if n == 0 {
        return Err(Error::shape("maxpool_rows", "at least one row", 0));
    }
    let mut pooled = Tensor::vector(input.row(0).to_vec());
    let mut routing = vec![0usize; d];
    for r in 1..n {
        let row = input.row(r);
        let p = pooled.data_mut();
        for c in 0..d {
            if row[c] > p[c] {
                p[c] = row[c];
                routing[c] = r;
            }
        }
    }
    Ok((pooled, routing))
}

/// Backward pass of [`maxpool_rows`]: each column's gradient flows to the
/// single row recorded in `routing`.
pub fn maxpool_rows_backward(
    routing: &[usize],
    grad_pooled: &Tensor,
    n_rows: usize,
) -> Result<Tensor> {
    let d = routing.len();
    if grad_pooled.len() != d {
        return Err(Error::shape("maxpool_rows_backward", d, grad_pooled.len()));
    }
    let mut grad_in = Tensor::zeros(&[n_rows, d]);
    for (c, &r) in routing.iter().enumerate() {
        if r >= n_rows {
            return Err(Error::Index {
                context: "maxpool_rows_backward",
                index: r,
                len: n_rows,
            });
        }
        grad_in.set(r, c, grad_pooled.data()[c]);
    }
    Ok(grad_in)
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.clone();
    let mut sum = 0.0;
    for v in out.data_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in out.data_mut() {
        *v /= sum;
    }
    out
}

/// Softmax followed by cross-entropy against `true_class`.
///
/// Returns `(loss, probabilities, d loss / d logits)`; the logit gradient
/// is the standard `probs - onehot(true_class)`.
pub fn softmax_cross_entropy(logits: &Tensor, true_class: usize) -> Result<(f64, Tensor, Tensor)> {
    if true_class >= logits.len() {
        return Err(Error::Index {
            context: "softmax_cross_entropy",
            index: true_class,
            len: logits.len(),
        });
    }
    let probs = softmax(logits);
    let p_true = probs.data()[true_class].max(1e-300);
    let loss = -p_true.ln();
    let mut grad = probs.clone();
    grad.data_mut()[true_class] -= 1.0;
    Ok((loss, probs, grad))
}

/// Pulls a gradient on softmax outputs back to the logits.
///
/// With `p = softmax(z)`, `dL/dz_k = p_k * (dL/dp_k - sum_j dL/dp_j * p_j)`.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Result<Tensor> {
    if probs.shape() != grad_probs.shape() {
        return Err(Error::shape(
            "softmax_backward",
            format!("{:?}", probs.shape()),
            format!("{:?}", grad_probs.shape()),
        ));
    }
    let dot: f64 = probs
        .data()
        .iter()
        .zip(grad_probs.data())
        .map(|(p, g)| p * g)
        .sum();
    let mut grad = probs.clone();
    for (out, &g) in grad.data_mut().iter_mut().zip(grad_probs.data()) {
        *out *= g - dot;
    }
    Ok(grad)
}

/// Indices of the `k` points in `points [N, D]` nearest to the point at
/// `query`, sorted by Euclidean distance with ties resolved to the lower
/// index. The query point itself is a candidate (distance 0), so it leads
/// the result whenever no duplicate point with a lower index exists.
pub fn knn_indices(points: &Tensor, query: usize, k: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Config("knn_indices requires k >= 1".into()));
    }
    if k > n {
        return Err(Error::Capacity(format!(
            "knn_indices asked for {k} neighbours from {n} points"
        )));
    }
    if query >= n {
        return Err(Error::Index {
            context: "knn_indices",
            index: query,
            len: n,
        });
    }
    let q = points.row(query).to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    let d: Vec<f64> = (0..n).map(|i| dist_sq(points.row(i), &q)).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// First- and second-moment state for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state for a parameter of the given shape.
    pub fn new(shape: &[usize], beta1: f64, beta2: f64) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step_count: 0,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `param` along `-grad`, with bias correction.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::shape(
            "adam_step",
            format!("{:?}", param.shape()),
            format!("grad {:?} / state {:?}", grad.shape(), state.m.shape()),
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for ((p, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.data_mut().iter_mut().zip(state.v.data_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Compares an analytic gradient against central finite differences.
///
/// `f` must return the scalar value and its analytic gradient at a point.
/// The result is the worst per-component relative error
/// `|g_analytic[i] - g_fd[i]| / max(1e-12, |g_fd[i]|)`.
pub fn finite_diff_check<F>(mut f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if eps <= 0.0 {
        return Err(Error::Config("finite_diff_check requires eps > 0".into()));
    }
    let (_, grad) = f(point)?;
    if grad.shape() != point.shape() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("{:?}", point.shape()),
            format!("{:?}", grad.shape()),
        ));
    }
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fd = (f(&plus)?.0 - f(&minus)?.0) / (2.0 * eps);
        let err = (grad.data()[i] - fd).abs() / f64::max(1e-12, fd.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
