//! Victim classifiers: two small differentiable point-cloud models, their
//! training loop, checkpoint persistence, and input-space gradients.
//!
//! `pointnet_mini` runs a shared per-point affine+ReLU stack, max-pools
//! over points, and classifies the pooled feature. `dgcnn_mini` first runs
//! one edge-convolution stage (per-neighbour features `[x_i, x_j - x_i]`
//! through affine+ReLU, maxed over the k neighbours), then the same
//! per-point stack / pool / head. Backward passes are chained by hand from
//! the blocks in [`crate::ops`]; the k-nearest-neighbour graph is treated
//! as constant within a pass.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{
    attack_loss_j, d_chamfer_grad, d_hausdorff_grad, d_l2_grad, DistanceKind, JWeights,
};
use crate::ops::{
    adam_step, affine_backward, affine_map, knn_indices, maxpool_rows, maxpool_rows_backward,
    relu, relu_backward, softmax, softmax_backward, softmax_cross_entropy, AdamState,
};
use crate::seeds;
use crate::tensor::Tensor;

/// Checkpoint file header; bump the version when the format changes.
pub const CHECKPOINT_HEADER: &str = "saliencystrike-ckpt v1";

/// Which victim architecture a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    PointnetMini,
    DgcnnMini,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::PointnetMini => "pointnet_mini",
            Arch::DgcnnMini => "dgcnn_mini",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pointnet_mini" => Ok(Arch::PointnetMini),
            "dgcnn_mini" => Ok(Arch::DgcnnMini),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// A victim classifier. Parameters are stored as alternating
/// weight/bias tensors for each layer, head last.
#[derive(Debug, Clone)]
pub struct VictimModel {
    pub arch: Arch,
    pub num_classes: usize,
    pub layer_widths: Vec<usize>,
    /// Neighbourhood size of the edge-convolution stage (dgcnn_mini only).
    pub k_neighbors: Option<usize>,
    pub params: Vec<Tensor>,
}

impl VictimModel {
    /// `w1, b1, w2, b2, ...` naming used by the checkpoint format.
    fn param_names(&self) -> Vec<String> {
        (0..self.params.len())
            .map(|i| {
                let layer = i / 2 + 1;
                if i % 2 == 0 {
                    format!("w{layer}")
                } else {
                    format!("b{layer}")
                }
            })
            .collect()
    }

    /// Per-layer `(fan_in, fan_out)` pairs implied by the configuration.
    fn layer_dims(arch: Arch, num_classes: usize, widths: &[usize]) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(widths.len() + 1);
        let mut fan_in = match arch {
            Arch::PointnetMini => 3,
            // Edge features concatenate the point with its offset to a
            // neighbour.
            Arch::DgcnnMini => 6,
        };
        for &w in widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, num_classes));
        dims
    }
}

/// Builds a model with uniform Glorot initialization: weights drawn from
/// `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn build_model(
    arch: Arch,
    num_classes: usize,
    layer_widths: &[usize],
    k_neighbors: Option<usize>,
    seed: u64,
) -> Result<VictimModel> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "a classifier needs at least 2 classes, got {num_classes}"
        )));
    }
    if layer_widths.is_empty() {
        return Err(Error::Config("layer_widths must be non-empty".into()));
    }
    if layer_widths.iter().any(|&w| w == 0) {
        return Err(Error::Config("layer widths must all be >= 1".into()));
    }
    match arch {
        Arch::DgcnnMini => {
            let k = k_neighbors
                .ok_or_else(|| Error::Config("dgcnn_mini requires k_neighbors".into()))?;
            if k == 0 {
                return Err(Error::Config("k_neighbors must be >= 1".into()));
            }
        }
        Arch::PointnetMini => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (fan_in, fan_out) in VictimModel::layer_dims(arch, num_classes, layer_widths) {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-s..s))
            .collect();
        params.push(Tensor::matrix(fan_in, fan_out, data)?);
        params.push(Tensor::zeros(&[fan_out]));
    }
    Ok(VictimModel {
        arch,
        num_classes,
        layer_widths: layer_widths.to_vec(),
        k_neighbors: match arch {
            Arch::DgcnnMini => k_neighbors,
            Arch::PointnetMini => None,
        },
        params,
    })
}

/// Everything a backward pass needs from the corresponding forward pass.
pub struct Forward {
    pub logits: Tensor,
    pub probs: Tensor,
    detail: TraceDetail,
}

enum TraceDetail {
    Pointnet {
        input: Tensor,
        zs: Vec<Tensor>,
        acts: Vec<Tensor>,
        pooled: Tensor,
        routing: Vec<usize>,
    },
    Dgcnn {
        input: Tensor,
        graph: Vec<usize>,
        edge_feats: Tensor,
        z1: Tensor,
        nb_routing: Vec<usize>,
        m1: Tensor,
        zs: Vec<Tensor>,
        acts: Vec<Tensor>,
        pooled: Tensor,
        routing: Vec<usize>,
    },
}

/// Gradients produced by [`backward`].
pub struct Gradients {
    /// One tensor per model parameter, in parameter order.
    pub params: Vec<Tensor>,
    /// Gradient w.r.t. the input coordinates, shape `[n_points, 3]`.
    pub input: Tensor,
}

fn as_row_matrix(v: &Tensor) -> Tensor {
    Tensor::matrix(1, v.len(), v.data().to_vec()).expect("vector reshapes to a row")
}

/// Runs the model on a cloud of points `[n, 3]`.
pub fn forward(model: &VictimModel, points: &Tensor) -> Result<Forward> {
    if points.shape().len() != 2 || points.cols() != 3 {
        return Err(Error::shape("forward", "[n, 3]", format!("{:?}", points.shape())));
    }
    let n = points.rows();
    if n == 0 {
        return Err(Error::Data("cannot classify an empty cloud".into()));
    }
    match model.arch {
        Arch::PointnetMini => forward_pointnet(model, points),
        Arch::DgcnnMini => forward_dgcnn(model, points),
    }
}

fn head_output(model: &VictimModel, pooled: &Tensor) -> Result<(Tensor, Tensor)> {
    let np = model.params.len();
    let logits_m = affine_map(pooled, &model.params[np - 2], &model.params[np - 1])?;
    let logits = Tensor::vector(logits_m.row(0).to_vec());
    let probs = softmax(&logits);
    Ok((logits, probs))
}

fn forward_pointnet(model: &VictimModel, points: &Tensor) -> Result<Forward> {
    let layers = model.layer_widths.len();
    let mut zs = Vec::with_capacity(layers);
    let mut acts = Vec::with_capacity(layers);
    let mut cur = points.clone();
    for l in 0..layers {
        let z = affine_map(&cur, &model.params[2 * l], &model.params[2 * l + 1])?;
        let a = relu(&z);
        zs.push(z);
        cur = a.clone();
        acts.push(a);
    }
    let (pooled_v, routing) = maxpool_rows(&cur)?;
    let pooled = as_row_matrix(&pooled_v);
    let (logits, probs) = head_output(model, &pooled)?;
    Ok(Forward {
        logits,
        probs,
        detail: TraceDetail::Pointnet {
            input: points.clone(),
            zs,
            acts,
            pooled,
            routing,
        },
    })
}

fn forward_dgcnn(model: &VictimModel, points: &Tensor) -> Result<Forward> {
    let n = points.rows();
    let k = model
        .k_neighbors
        .ok_or_else(|| Error::Config("dgcnn_mini model has no k_neighbors".into()))?;
    let mut graph = Vec::with_capacity(n * k);
    for i in 0..n {
        graph.extend(knn_indices(points, i, k)?);
    }
    let mut edge_feats = Tensor::zeros(&[n * k, 6]);
    for i in 0..n {
        let xi = points.row(i);
        for jj in 0..k {
            let j = graph[i * k + jj];
            let xj = points.row(j);
            let row = edge_feats.row_mut(i * k + jj);
            for c in 0..3 {
                row[c] = xi[c];
                row[3 + c] = xj[c] - xi[c];
            }
        }
    }
    let z1 = affine_map(&edge_feats, &model.params[0], &model.params[1])?;
    let a1 = relu(&z1);
    let w1 = model.layer_widths[0];
    let mut m1 = Tensor::zeros(&[n, w1]);
    let mut nb_routing = vec![0usize; n * w1];
    for i in 0..n {
        for c in 0..w1 {
            let mut best = a1.at(i * k, c);
            let mut best_jj = 0usize;
            for jj in 1..k {
                let v = a1.at(i * k + jj, c);
                if v > best {
                    best = v;
                    best_jj = jj;
                }
            }
            m1.set(i, c, best);
            nb_routing[i * w1 + c] = best_jj;
        }
    }
    let layers = model.layer_widths.len();
    let mut zs = Vec::new();
    let mut acts = Vec::new();
    let mut cur = m1.clone();
    for l in 1..layers {
        let z = affine_map(&cur, &model.params[2 * l], &model.params[2 * l + 1])?;
        let a = relu(&z);
        zs.push(z);
        cur = a.clone();
        acts.push(a);
    }
    let (pooled_v, routing) = maxpool_rows(&cur)?;
    let pooled = as_row_matrix(&pooled_v);
    let (logits, probs) = head_output(model, &pooled)?;
    Ok(Forward {
        logits,
        probs,
        detail: TraceDetail::Dgcnn {
            input: points.clone(),
            graph,
            edge_feats,
            z1,
            nb_routing,
            m1,
            zs,
            acts,
            pooled,
            routing,
        },
    })
}

/// Chains gradients from the logits back to every parameter and to the
/// input coordinates.
pub fn backward(model: &VictimModel, fwd: &Forward, grad_logits: &Tensor) -> Result<Gradients> {
    let np = model.params.len();
    let mut param_grads: Vec<Tensor> = model
        .params
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    let glog = as_row_matrix(grad_logits);
    match &fwd.detail {
        TraceDetail::Pointnet {
            input,
            zs,
            acts,
            pooled,
            routing,
        } => {
            let (gpooled_m, gwh, gbh) = affine_backward(pooled, &model.params[np - 2], &glog)?;
            param_grads[np - 2] = gwh;
            param_grads[np - 1] = gbh;
            let gpooled = Tensor::vector(gpooled_m.row(0).to_vec());
            let mut ga = maxpool_rows_backward(routing, &gpooled, input.rows())?;
            for l in (0..model.layer_widths.len()).rev() {
                let gz = relu_backward(&zs[l], &ga)?;
                let prev = if l == 0 { input } else { &acts[l - 1] };
                let (gprev, gw, gb) = affine_backward(prev, &model.params[2 * l], &gz)?;
                param_grads[2 * l] = gw;
                param_grads[2 * l + 1] = gb;
                ga = gprev;
            }
            Ok(Gradients {
                params: param_grads,
                input: ga,
            })
        }
        TraceDetail::Dgcnn {
            input,
            graph,
            edge_feats,
            z1,
            nb_routing,
            m1,
            zs,
            acts,
            pooled,
            routing,
        } => {
            let n = input.rows();
            let k = model.k_neighbors.expect("dgcnn model carries k");
            let w1 = model.layer_widths[0];
            let (gpooled_m, gwh, gbh) = affine_backward(pooled, &model.params[np - 2], &glog)?;
            param_grads[np - 2] = gwh;
            param_grads[np - 1] = gbh;
            let gpooled = Tensor::vector(gpooled_m.row(0).to_vec());
            let last_rows = if model.layer_widths.len() > 1 {
                acts.last().expect("layers > 1 implies stored acts").rows()
            } else {
                m1.rows()
            };
            let mut gcur = maxpool_rows_backward(routing, &gpooled, last_rows)?;
            for l in (1..model.layer_widths.len()).rev() {
                let gz = relu_backward(&zs[l - 1], &gcur)?;
                let prev = if l == 1 { m1 } else { &acts[l - 2] };
                let (gprev, gw, gb) = affine_backward(prev, &model.params[2 * l], &gz)?;
                param_grads[2 * l] = gw;
                param_grads[2 * l + 1] = gb;
                gcur = gprev;
            }
            // Route the per-point gradient back to the winning neighbour
            // rows of the edge stage.
            let mut ga1 = Tensor::zeros(&[n * k, w1]);
            for i in 0..n {
                for c in 0..w1 {
                    let jj = nb_routing[i * w1 + c];
                    let v = gcur.at(i, c);
                    if v != 0.0 {
                        let row = ga1.row_mut(i * k + jj);
                        row[c] += v;
                    }
                }
            }
            let gz1 = relu_backward(z1, &ga1)?;
            let (gef, gw1, gb1) = affine_backward(edge_feats, &model.params[0], &gz1)?;
            param_grads[0] = gw1;
            param_grads[1] = gb1;
            // Edge feature rows are [x_i, x_j - x_i]: the first half's
            // gradient lands on i (minus the offset part), the second
            // half's on j (plus) and i (minus).
            let mut ginput = Tensor::zeros(&[n, 3]);
            for i in 0..n {
                for jj in 0..k {
                    let r = i * k + jj;
                    let j = graph[r];
                    let ge = gef.row(r);
                    for c in 0..3 {
                        let (g_point, g_offset) = (ge[c], ge[3 + c]);
                        let gi = ginput.row_mut(i);
                        gi[c] += g_point - g_offset;
                        let gj = ginput.row_mut(j);
                        gj[c] += g_offset;
                    }
                }
            }
            Ok(Gradients {
                params: param_grads,
                input: ginput,
            })
        }
    }
}

/// Class probabilities for a cloud.
pub fn predict_probs(model: &VictimModel, points: &Tensor) -> Result<Tensor> {
    Ok(forward(model, points)?.probs)
}

/// The scalar losses whose input gradients a model can expose.
#[derive(Debug, Clone)]
pub enum GradLoss<'a> {
    /// Cross-entropy against the true label (drives saliency selection).
    CrossEntropy { true_class: usize },
    /// The classification-side attack objective.
    AttackJ {
        true_class: usize,
        preferred_class: Option<usize>,
        weights: JWeights,
    },
    /// Attack objective plus weighted perceptibility distance to a clean
    /// cloud. For the pairwise distance, `sp_mask` selects which rows
    /// count (None = all rows).
    PenalizedTotal {
        true_class: usize,
        preferred_class: Option<usize>,
        weights: JWeights,
        kappa1: f64,
        distance: DistanceKind,
        clean: &'a Tensor,
        sp_mask: Option<&'a [bool]>,
    },
}

/// Pairwise-displacement distance restricted to masked rows, with its
/// gradient scattered back over the full cloud.
pub(crate) fn masked_l2_grad(
    points: &Tensor,
    clean: &Tensor,
    sp_mask: Option<&[bool]>,
) -> Result<(f64, Tensor)> {
    if points.shape() != clean.shape() {
        return Err(Error::shape(
            "masked_l2_grad",
            format!("{:?}", clean.shape()),
            format!("{:?}", points.shape()),
        ));
    }
    let n = points.rows();
    let rows: Vec<usize> = match sp_mask {
        None => (0..n).collect(),
        Some(mask) => {
            if mask.len() != n {
                return Err(Error::shape("masked_l2_grad mask", n, mask.len()));
            }
            (0..n).filter(|&i| mask[i]).collect()
        }
    };
    let take = |t: &Tensor| -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * 3);
        for &r in &rows {
            data.extend_from_slice(t.row(r));
        }
        Tensor::matrix(rows.len(), 3, data).expect("row subset is consistent")
    };
    let (value, sub_grad) = d_l2_grad(&take(points), &take(clean))?;
    let mut grad = Tensor::zeros(points.shape());
    for (si, &r) in rows.iter().enumerate() {
        grad.row_mut(r).copy_from_slice(sub_grad.row(si));
    }
    Ok((value, grad))
}

/// Evaluates the requested loss on a cloud and returns `(value, d loss /
/// d points)`. The gradient is exact for the stated scalar function; no
/// masking is applied to the classification part.
pub fn input_gradient(model: &VictimModel, points: &Tensor, loss: &GradLoss) -> Result<(f64, Tensor)> {
    let fwd = forward(model, points)?;
    match loss {
        GradLoss::CrossEntropy { true_class } => {
            let (value, _, grad_logits) = softmax_cross_entropy(&fwd.logits, *true_class)?;
            let grads = backward(model, &fwd, &grad_logits)?;
            Ok((value, grads.input))
        }
        GradLoss::AttackJ {
            true_class,
            preferred_class,
            weights,
        } => {
            let (bd, grad_probs) = attack_loss_j(&fwd.probs, *true_class, *preferred_class, weights)?;
            let grad_logits = softmax_backward(&fwd.probs, &grad_probs)?;
            let grads = backward(model, &fwd, &grad_logits)?;
            Ok((bd.j, grads.input))
        }
        GradLoss::PenalizedTotal {
            true_class,
            preferred_class,
            weights,
            kappa1,
            distance,
            clean,
            sp_mask,
        } => {
            let (bd, grad_probs) = attack_loss_j(&fwd.probs, *true_class, *preferred_class, weights)?;
            let grad_logits = softmax_backward(&fwd.probs, &grad_probs)?;
            let grads = backward(model, &fwd, &grad_logits)?;
            let (d_value, d_grad) = match distance {
                DistanceKind::L2 => masked_l2_grad(points, clean, *sp_mask)?,
                DistanceKind::Chamfer => {
                    let (v, g, _) = d_chamfer_grad(points, clean)?;
                    (v, g)
                }
                DistanceKind::Hausdorff => {
                    let (v, g, _) = d_hausdorff_grad(points, clean)?;
                    (v, g)
                }
            };
            let mut grad = grads.input;
            grad.add_scaled(&d_grad, *kappa1)?;
            Ok((bd.j + kappa1 * d_value, grad))
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 0.003,
            seed: 0,
        }
    }
}

/// Accuracy/loss record for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Fraction of clouds whose argmax prediction matches the label.
pub fn accuracy(model: &VictimModel, clouds: &[crate::data::PointCloud]) -> Result<f64> {
    if clouds.is_empty() {
        return Err(Error::Data("accuracy over an empty set is undefined".into()));
    }
    let mut hits = 0usize;
    for cloud in clouds {
        let probs = predict_probs(model, &cloud.points)?;
        if probs.argmax() == cloud.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / clouds.len() as f64)
}

/// Trains the model in place by mini-batch Adam on cross-entropy, with a
/// seeded shuffle each epoch. Returns per-epoch statistics.
pub fn train(model: &mut VictimModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    if cfg.epochs == 0 {
        return Err(Error::Config("training needs at least 1 epoch".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if dataset.train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for cloud in dataset.train.iter().chain(&dataset.test) {
        if cloud.label >= model.num_classes {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes (cloud {})",
                cloud.label, model.num_classes, cloud.id
            )));
        }
    }
    let mut adam: Vec<AdamState> = model
        .params
        .iter()
        .map(|p| AdamState::new(p.shape(), 0.9, 0.999))
        .collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Tensor> = model
                .params
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect();
            for &idx in batch {
                let cloud = &dataset.train[idx];
                let fwd = forward(model, &cloud.points)?;
                let (loss, _, grad_logits) = softmax_cross_entropy(&fwd.logits, cloud.label)?;
                loss_sum += loss;
                let g = backward(model, &fwd, &grad_logits)?;
                for (acc, fresh) in grads.iter_mut().zip(g.params) {
                    acc.add_scaled(&fresh, 1.0)?;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((param, grad), state) in model.params.iter_mut().zip(&mut grads).zip(&mut adam) {
                for v in grad.data_mut() {
                    *v *= scale;
                }
                adam_step(param, grad, state, cfg.lr)?;
            }
        }
        let train_accuracy = accuracy(model, &dataset.train)?;
        let test_accuracy = if dataset.test.is_empty() {
            f64::NAN
        } else {
            accuracy(model, &dataset.test)?
        };
        history.push(EpochStats {
            epoch,
            mean_train_loss: loss_sum / dataset.train.len() as f64,
            train_accuracy,
            test_accuracy,
        });
    }
    Ok(history)
}

/// Serializes the model to the versioned plain-text checkpoint format.
pub fn save_checkpoint(model: &VictimModel, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::new();
    let _ = writeln!(text, "{CHECKPOINT_HEADER}");
    let knn = model
        .k_neighbors
        .map(|k| k.to_string())
        .unwrap_or_else(|| "-".into());
    let widths: Vec<String> = model.layer_widths.iter().map(|w| w.to_string()).collect();
    let _ = writeln!(
        text,
        "arch {} classes {} knn {} widths {}",
        model.arch.name(),
        model.num_classes,
        knn,
        widths.join(" ")
    );
    for (name, param) in model.param_names().iter().zip(&model.params) {
        let dims: Vec<String> = param.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(text, "{name} shape {}", dims.join(" "));
        for chunk in param.data().chunks(8) {
            let line: Vec<String> = chunk.iter().map(|v| crate::data::format_f64(*v)).collect();
            let _ = writeln!(text, "{}", line.join(" "));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Token stream over checkpoint text that remembers byte offsets for
/// error reporting.
struct Tokens<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        let bytes = self.text.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos >= bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < bytes.len() && !bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some((start, &self.text[start..self.pos]))
    }
}

fn parse_err(what: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::ParseByte {
        what: what.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

/// Reads a checkpoint back into a model. Any structural problem is
/// reported with the byte offset where parsing stopped.
pub fn load_checkpoint(path: &Path) -> Result<VictimModel> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let first_line = text.lines().next().unwrap_or("");
    if first_line != CHECKPOINT_HEADER {
        if first_line.starts_with("saliencystrike-ckpt") {
            return Err(Error::Version {
                found: first_line.to_string(),
                expected: CHECKPOINT_HEADER.to_string(),
            });
        }
        return Err(parse_err(path, 0, "missing checkpoint header"));
    }
    let mut tok = Tokens {
        text: &text,
        pos: first_line.len(),
    };
    fn expect_tok(tok: &mut Tokens, path: &Path, expected: &str) -> Result<()> {
        match tok.next() {
            Some((_, t)) if t == expected => Ok(()),
            Some((o, t)) => Err(parse_err(path, o, format!("expected {expected:?}, found {t:?}"))),
            None => Err(parse_err(
                path,
                tok.text.len(),
                format!("expected {expected:?}, found end of file"),
            )),
        }
    }
    expect_tok(&mut tok, path, "arch")?;
    let arch = match tok.next() {
        Some((o, t)) => Arch::from_name(t).map_err(|_| parse_err(path, o, format!("unknown architecture {t:?}")))?,
        None => return Err(parse_err(path, text.len(), "missing architecture name")),
    };
    expect_tok(&mut tok, path, "classes")?;
    let num_classes: usize = match tok.next() {
        Some((o, t)) => t
            .parse()
            .map_err(|_| parse_err(path, o, format!("invalid class count {t:?}")))?,
        None => return Err(parse_err(path, text.len(), "missing class count")),
    };
    expect_tok(&mut tok, path, "knn")?;
    let k_neighbors: Option<usize> = match tok.next() {
        Some((_, "-")) => None,
        Some((o, t)) => Some(
            t.parse()
                .map_err(|_| parse_err(path, o, format!("invalid neighbour count {t:?}")))?,
        ),
        None => return Err(parse_err(path, text.len(), "missing neighbour count")),
    };
    expect_tok(&mut tok, path, "widths")?;
    // Widths run to the end of the line; find the line end once.
    let widths_end = text[tok.pos..]
        .find('\n')
        .map(|i| tok.pos + i)
        .unwrap_or(text.len());
    let mut layer_widths = Vec::new();
    while tok.pos < widths_end {
        let save = tok.pos;
        match tok.next() {
            Some((o, t)) if o < widths_end => {
                let w: usize = t
                    .parse()
                    .map_err(|_| parse_err(path, o, format!("invalid width {t:?}")))?;
                layer_widths.push(w);
            }
            _ => {
                tok.pos = save;
                break;
            }
        }
    }
    if layer_widths.is_empty() {
        return Err(parse_err(path, widths_end, "widths list is empty"));
    }

    // Reconstruct the skeleton, then overwrite parameters from the blocks.
    let mut model = build_model(arch, num_classes, &layer_widths, k_neighbors, 0)
        .map_err(|e| parse_err(path, widths_end, format!("inconsistent header: {e}")))?;
    let names = model.param_names();
    for (name, param) in names.iter().zip(model.params.iter_mut()) {
        match tok.next() {
            Some((_, t)) if t == name => {}
            Some((o, t)) => {
                return Err(parse_err(path, o, format!("expected parameter {name:?}, found {t:?}")))
            }
            None => return Err(parse_err(path, text.len(), format!("missing parameter {name:?}"))),
        }
        match tok.next() {
            Some((_, "shape")) => {}
            Some((o, t)) => return Err(parse_err(path, o, format!("expected \"shape\", found {t:?}"))),
            None => return Err(parse_err(path, text.len(), "truncated parameter block")),
        }
        for &dim in param.shape() {
            match tok.next() {
                Some((o, t)) => {
                    let got: usize = t
                        .parse()
                        .map_err(|_| parse_err(path, o, format!("invalid dimension {t:?}")))?;
                    if got != dim {
                        return Err(parse_err(
                            path,
                            o,
                            format!("parameter {name}: expected dimension {dim}, found {got}"),
                        ));
                    }
                }
                None => return Err(parse_err(path, text.len(), "truncated shape")),
            }
        }
        for slot in param.data_mut() {
            match tok.next() {
                Some((o, t)) => {
                    let v: f64 = t
                        .parse()
                        .map_err(|_| parse_err(path, o, format!("invalid value {t:?}")))?;
                    if !v.is_finite() {
                        return Err(parse_err(path, o, format!("non-finite parameter value {t:?}")));
                    }
                    *slot = v;
                }
                None => {
                    return Err(parse_err(
                        path,
                        text.len(),
                        format!("file ends inside parameter {name}"),
                    ))
                }
            }
        }
    }
    if let Some((o, t)) = tok.next() {
        return Err(parse_err(path, o, format!("trailing content {t:?}")));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shape, PointCloud, ShapeKind};
    use crate::ops::finite_diff_check;

    fn sphere_cloud(n: usize, seed: u64) -> Tensor {
        gen_shape(ShapeKind::Sphere, n, 0.02, seed)
            .expect("sphere generation")
            .points
    }

    #[test]
    fn pointnet_parameter_count_matches_hand_arithmetic() {
        let model = build_model(Arch::PointnetMini, 8, &[32, 64], None, 1).unwrap();
        let total: usize = model.params.iter().map(|p| p.len()).sum();
        // 3*32+32 per-point layer 1, 32*64+64 layer 2, 64*8+8 head.
        assert_eq!(total, 3 * 32 + 32 + 32 * 64 + 64 + 64 * 8 + 8);
        assert_eq!(model.params[0].shape(), &[3, 32]);
        assert_eq!(model.params[5].shape(), &[8]);
    }

    #[test]
    fn dgcnn_first_layer_consumes_edge_features() {
        let model = build_model(Arch::DgcnnMini, 8, &[32, 64], Some(8), 1).unwrap();
        assert_eq!(model.params[0].shape(), &[6, 32]);
        assert_eq!(model.k_neighbors, Some(8));
    }

    #[test]
    fn initialization_is_seeded_glorot_with_zero_biases() {
        let a = build_model(Arch::PointnetMini, 4, &[16], None, 9).unwrap();
        let b = build_model(Arch::PointnetMini, 4, &[16], None, 9).unwrap();
        let c = build_model(Arch::PointnetMini, 4, &[16], None, 10).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.data(), pb.data(), "same seed must rebuild identical weights");
        }
        assert_ne!(a.params[0].data(), c.params[0].data());
        let s = (6.0f64 / (3 + 16) as f64).sqrt();
        assert!(a.params[0].data().iter().all(|v| v.abs() <= s));
        assert!(a.params[1].data().iter().all(|&v| v == 0.0), "biases start at zero");
        // Not all weights tiny: the draw actually spans the interval.
        assert!(a.params[0].data().iter().any(|v| v.abs() > 0.5 * s));
    }

    #[test]
    fn build_model_rejects_bad_configurations() {
        assert!(matches!(
            build_model(Arch::PointnetMini, 1, &[8], None, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_model(Arch::PointnetMini, 4, &[], None, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_model(Arch::DgcnnMini, 4, &[8], None, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_model(Arch::PointnetMini, 4, &[8, 0], None, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn untrained_predictions_are_near_uniform_and_deterministic() {
        let cloud = sphere_cloud(256, 41);
        for (arch, k) in [(Arch::PointnetMini, None), (Arch::DgcnnMini, Some(8))] {
            let model = build_model(arch, 8, &[32, 64], k, 3).unwrap();
            let p1 = predict_probs(&model, &cloud).unwrap();
            let p2 = predict_probs(&model, &cloud).unwrap();
            assert_eq!(p1.data(), p2.data());
            let sum: f64 = p1.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for &p in p1.data() {
                assert!(
                    (p - 1.0 / 8.0).abs() < 0.2,
                    "{}: untrained probability {p} strays far from uniform",
                    arch.name()
                );
            }
        }
    }

    #[test]
    fn forward_rejects_empty_and_misshapen_input() {
        let model = build_model(Arch::PointnetMini, 4, &[8], None, 0).unwrap();
        assert!(matches!(
            forward(&model, &Tensor::zeros(&[0, 3])),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            forward(&model, &Tensor::zeros(&[4, 2])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn cross_entropy_input_gradient_matches_finite_differences_pointnet() {
        let model = build_model(Arch::PointnetMini, 5, &[16, 16], None, 7).unwrap();
        let cloud = sphere_cloud(16, 11);
        let loss = GradLoss::CrossEntropy { true_class: 2 };
        let worst = finite_diff_check(
            |pts| input_gradient(&model, pts, &loss),
            &cloud,
            1e-6,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn cross_entropy_input_gradient_matches_finite_differences_dgcnn() {
        let model = build_model(Arch::DgcnnMini, 5, &[16, 16], Some(4), 7).unwrap();
        let cloud = sphere_cloud(16, 12);
        let loss = GradLoss::CrossEntropy { true_class: 1 };
        let worst = finite_diff_check(
            |pts| input_gradient(&model, pts, &loss),
            &cloud,
            1e-6,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn attack_objective_gradient_matches_finite_differences_both_phases() {
        let model = build_model(Arch::PointnetMini, 5, &[16, 16], None, 8).unwrap();
        let cloud = sphere_cloud(16, 13);
        for preferred in [None, Some(3)] {
            let loss = GradLoss::AttackJ {
                true_class: 0,
                preferred_class: preferred,
                weights: JWeights::default(),
            };
            let worst = finite_diff_check(
                |pts| input_gradient(&model, pts, &loss),
                &cloud,
                1e-6,
            )
            .unwrap();
            assert!(worst < 1e-4, "preferred={preferred:?}: worst relative error {worst}");
        }
    }

    #[test]
    fn penalized_total_gradient_matches_finite_differences_all_distances() {
        let model = build_model(Arch::PointnetMini, 5, &[16, 16], None, 9).unwrap();
        let clean = sphere_cloud(16, 14);
        // Evaluate a little off the clean cloud so nearest-neighbour
        // assignments are stable under the probe step.
        let mut moved = clean.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for v in moved.data_mut() {
            *v += rng.random_range(0.01..0.02);
        }
        let mut mask = vec![false; 16];
        for i in [0usize, 3, 5, 11] {
            mask[i] = true;
        }
        for distance in [DistanceKind::L2, DistanceKind::Chamfer, DistanceKind::Hausdorff] {
            let loss = GradLoss::PenalizedTotal {
                true_class: 0,
                preferred_class: Some(2),
                weights: JWeights::default(),
                kappa1: 10.0,
                distance,
                clean: &clean,
                sp_mask: if distance == DistanceKind::L2 {
                    Some(&mask)
                } else {
                    None
                },
            };
            let worst = finite_diff_check(
                |pts| input_gradient(&model, pts, &loss),
                &moved,
                1e-6,
            )
            .unwrap();
            assert!(worst < 1e-4, "{}: worst relative error {worst}", distance.name());
        }
    }

    #[test]
    fn penalized_total_gradient_matches_finite_differences_dgcnn() {
        let model = build_model(Arch::DgcnnMini, 4, &[12, 12], Some(4), 10).unwrap();
        let clean = sphere_cloud(16, 15);
        let mut moved = clean.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for v in moved.data_mut() {
            *v += rng.random_range(0.01..0.02);
        }
        let loss = GradLoss::PenalizedTotal {
            true_class: 1,
            preferred_class: Some(0),
            weights: JWeights::default(),
            kappa1: 10.0,
            distance: DistanceKind::Chamfer,
            clean: &clean,
            sp_mask: None,
        };
        let worst = finite_diff_check(
            |pts| input_gradient(&model, pts, &loss),
            &moved,
            1e-6,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn points_outside_pooling_routes_get_exactly_zero_gradient() {
        let model = build_model(Arch::PointnetMini, 4, &[8], None, 21).unwrap();
        let cloud = sphere_cloud(32, 22);
        let fwd = forward(&model, &cloud).unwrap();
        let routed: Vec<usize> = match &fwd.detail {
            TraceDetail::Pointnet { routing, .. } => routing.clone(),
            _ => unreachable!(),
        };
        let unrouted = (0..32)
            .find(|i| !routed.contains(i))
            .expect("8 pooled features cannot route all 32 points");
        let (_, grad) = input_gradient(&model, &cloud, &GradLoss::CrossEntropy { true_class: 0 }).unwrap();
        assert_eq!(grad.row(unrouted), &[0.0, 0.0, 0.0], "non-winning point must receive zero gradient");
        let winner = routed[0];
        assert!(grad.row(winner).iter().any(|&v| v != 0.0));
    }

    /// Two clusters of axis-separated boxes; max-pooled coordinates split
    /// them linearly, so a small model must fit the training set exactly.
    fn separable_toy() -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut make = |label: usize, idx: usize, lo: f64, hi: f64| {
            let data: Vec<f64> = (0..32 * 3).map(|_| rng.random_range(lo..hi)).collect();
            PointCloud {
                points: Tensor::matrix(32, 3, data).unwrap(),
                label,
                id: format!("toy_{label}_{idx}"),
            }
        };
        let mut train = Vec::new();
        for i in 0..10 {
            train.push(make(0, i, -1.0, -0.4));
            train.push(make(1, i, 0.4, 1.0));
        }
        let test = vec![make(0, 90, -1.0, -0.4), make(1, 90, 0.4, 1.0)];
        Dataset {
            train,
            test,
            class_names: vec!["low".into(), "high".into()],
        }
    }

    #[test]
    fn training_fits_a_separable_toy_problem() {
        let dataset = separable_toy();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 4,
            lr: 0.01,
            seed: 3,
        };
        let mut model = build_model(Arch::PointnetMini, 2, &[8], None, 3).unwrap();
        let history = train(&mut model, &dataset, &cfg).unwrap();
        assert_eq!(history.len(), 20);
        let last = history.last().unwrap();
        assert_eq!(last.train_accuracy, 1.0, "separable toy should be fit exactly");
        assert_eq!(last.test_accuracy, 1.0);
        let first = history.first().unwrap();
        assert!(last.mean_train_loss < first.mean_train_loss);
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let dataset = separable_toy();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr: 0.01,
            seed: 12,
        };
        let mut a = build_model(Arch::PointnetMini, 2, &[8], None, 4).unwrap();
        let ha = train(&mut a, &dataset, &cfg).unwrap();
        let mut b = build_model(Arch::PointnetMini, 2, &[8], None, 4).unwrap();
        let hb = train(&mut b, &dataset, &cfg).unwrap();
        assert_eq!(ha, hb);
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let dataset = separable_toy();
        let mut model = build_model(Arch::PointnetMini, 2, &[8], None, 0).unwrap();
        let zero_epochs = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut model, &dataset, &zero_epochs),
            Err(Error::Config(_))
        ));
        let empty = Dataset {
            train: vec![],
            test: vec![],
            class_names: vec![],
        };
        assert!(matches!(
            train(&mut model, &empty, &TrainConfig::default()),
            Err(Error::Data(_))
        ));
        let mut bad_label = separable_toy();
        bad_label.train[0].label = 7;
        assert!(matches!(
            train(&mut model, &bad_label, &TrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = sphere_cloud(64, 30);
        for (arch, k) in [(Arch::PointnetMini, None), (Arch::DgcnnMini, Some(6))] {
            let model = build_model(arch, 8, &[32, 64], k, 17).unwrap();
            let path = dir.path().join(format!("{}.ckpt", arch.name()));
            save_checkpoint(&model, &path).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded.arch, model.arch);
            assert_eq!(loaded.num_classes, model.num_classes);
            assert_eq!(loaded.layer_widths, model.layer_widths);
            assert_eq!(loaded.k_neighbors, model.k_neighbors);
            for (pa, pb) in model.params.iter().zip(&loaded.params) {
                assert_eq!(pa.data(), pb.data(), "reloaded parameters must match bit-for-bit");
            }
            let before = predict_probs(&model, &cloud).unwrap();
            let after = predict_probs(&loaded, &cloud).unwrap();
            assert_eq!(before.data(), after.data());
        }
    }

    #[test]
    fn truncated_checkpoint_reports_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(Arch::PointnetMini, 4, &[8], None, 2).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let cut = path.with_extension("cut");
        fs::write(&cut, &text[..text.len() / 2]).unwrap();
        match load_checkpoint(&cut) {
            Err(Error::ParseByte { offset, .. }) => {
                assert!(offset <= text.len() / 2, "offset {offset} should sit inside the file");
            }
            other => panic!("expected a byte-addressed parse error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_checkpoint_value_reports_its_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(Arch::PointnetMini, 4, &[8], None, 2).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        // Byte offset of the first value line (header, arch, shape, then values).
        let token_start: usize = text.split_inclusive('\n').take(3).map(str::len).sum();
        // Clobber the leading digits of that value with something unparsable.
        text.replace_range(token_start..token_start + 2, "xx");
        fs::write(&path, &text).unwrap();
        match load_checkpoint(&path) {
            Err(Error::ParseByte { offset, msg, .. }) => {
                assert_eq!(offset, token_start, "error should point at the corrupted token");
                assert!(msg.contains("invalid value"), "{msg}");
            }
            other => panic!("expected a byte-addressed parse error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_version_mismatch_is_its_own_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(Arch::PointnetMini, 4, &[8], None, 2).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let bumped = text.replace("saliencystrike-ckpt v1", "saliencystrike-ckpt v2");
        fs::write(&path, bumped).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Version { found, expected }) => {
                assert_eq!(found, "saliencystrike-ckpt v2");
                assert_eq!(expected, CHECKPOINT_HEADER);
            }
            other => panic!("expected a version error, got {other:?}"),
        }
        fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::ParseByte { offset: 0, .. })));
    }

    #[test]
    fn checkpoint_rejects_non_finite_and_trailing_content() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(Arch::PointnetMini, 4, &[8], None, 2).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let first_value = text.lines().nth(3).unwrap().split_whitespace().next().unwrap();
        let poisoned = text.replacen(first_value, "NaN", 1);
        fs::write(&path, &poisoned).unwrap();
        match load_checkpoint(&path) {
            Err(Error::ParseByte { msg, .. }) => assert!(msg.contains("non-finite"), "{msg}"),
            other => panic!("expected a parse error, got {other:?}"),
        }
        let trailing = format!("{text}extra 1 2 3\n");
        fs::write(&path, trailing).unwrap();
        match load_checkpoint(&path) {
            Err(Error::ParseByte { msg, .. }) => assert!(msg.contains("trailing"), "{msg}"),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }
}
