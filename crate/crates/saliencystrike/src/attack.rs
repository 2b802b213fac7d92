//! The salient-subset attack loop: picks the perturbation subset from
//! cross-entropy saliency, warms the optimization up on the true-class
//! score alone, freezes a preferred wrong class, and then drives the full
//! objective with Adam — withdrawing perturbation budget from low-impact
//! points whenever the distance penalty approaches its budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::loss::{
    attack_loss_j, d_chamfer, d_chamfer_grad, d_hausdorff, d_hausdorff_grad, d_l2, d_l2_grad,
    total_loss, DistanceKind, JWeights, LossBreakdown,
};
use crate::ops::{adam_step, knn_indices, softmax_backward, AdamState};
use crate::tensor::{norm, Tensor};
use crate::victim::{backward, forward, input_gradient, predict_probs, GradLoss, VictimModel};

/// How the withdrawal filter threshold is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WMode {
    /// `w` is an absolute gradient-norm threshold.
    Absolute,
    /// `w` is a percentile (0–100) of the current subset's gradient norms.
    Percentile,
}

impl WMode {
    pub fn name(self) -> &'static str {
        match self {
            WMode::Absolute => "absolute",
            WMode::Percentile => "percentile",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "absolute" => Ok(WMode::Absolute),
            "percentile" => Ok(WMode::Percentile),
            other => Err(Error::Config(format!("unknown w_mode {other:?}"))),
        }
    }
}

/// Full parameterization of one attack run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Which perceptibility distance the penalty and budget use.
    pub distance: DistanceKind,
    /// Perturbation budget λ: the withdrawal trigger compares the current
    /// distance against it (there is no hard projection).
    pub lambda: f64,
    /// Weight of the distance penalty in the optimized total.
    pub kappa1: f64,
    /// Weight of the wrong-class score term.
    pub kappa2: f64,
    /// Weight of the consistency term.
    pub kappa3: f64,
    /// Margin used by the consistency hinge.
    pub mu: f64,
    /// Number of saliency vertexes.
    pub m: usize,
    /// Neighbourhood size grouped around each vertex.
    pub n: usize,
    /// Total iteration budget.
    pub iterations: usize,
    /// Fraction of iterations spent warming up before the preferred class
    /// is frozen.
    pub warmup_fraction: f64,
    /// Withdrawal activates when the distance exceeds `lambda - h`.
    pub h: f64,
    /// Interpretation of `w`.
    pub w_mode: WMode,
    /// Withdrawal filter threshold (see `w_mode`).
    pub w: f64,
    /// Scale on the withdrawal step.
    pub gamma: f64,
    /// Adam learning rate and moment decays.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// When false the perturbation subset is the whole cloud.
    pub local: bool,
    /// Enable the wrong-class score term.
    pub use_score: bool,
    /// Enable the consistency term.
    pub use_cons: bool,
    /// Enable budget withdrawal.
    pub use_pwa: bool,
    /// Stop after five consecutive adversarial iterations past warm-up.
    pub early_stop: bool,
    /// Let the score term keep chasing the floating wrong-class argmax
    /// after the freeze (comparison mode; the consistency term always uses
    /// the frozen class).
    pub float_score: bool,
    /// Base seed; per-example seeds are derived from it.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let lambda = 0.005;
        AttackConfig {
            distance: DistanceKind::L2,
            lambda,
            kappa1: 10.0,
            kappa2: 1.0,
            kappa3: 0.5,
            mu: 0.1,
            m: 16,
            n: 8,
            iterations: 200,
            warmup_fraction: 0.2,
            h: 0.1 * lambda,
            w_mode: WMode::Percentile,
            w: 30.0,
            gamma: 1.0,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            local: true,
            use_score: true,
            use_cons: true,
            use_pwa: true,
            early_stop: true,
            float_score: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie strictly between 0 and 1, got {}",
                self.warmup_fraction
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.h >= 0.0) {
            return Err(Error::Config(format!("h must be >= 0, got {}", self.h)));
        }
        if self.iterations < 2 {
            return Err(Error::Config(format!(
                "need at least 2 iterations, got {}",
                self.iterations
            )));
        }
        if self.local && self.m * self.n == 0 {
            return Err(Error::Config(format!(
                "local selection needs m*n >= 1, got m={} n={}",
                self.m, self.n
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        Ok(())
    }

    /// First iteration index optimized with a frozen preferred class.
    fn warmup_end(&self) -> usize {
        (self.warmup_fraction * self.iterations as f64).ceil() as usize
    }
}

/// Mutable optimization state for one example under attack.
pub struct PerturbationState {
    /// Membership mask over the cloud; points outside never move.
    pub sp_mask: Vec<bool>,
    /// Indices of the movable points, ascending.
    pub sp_indices: Vec<usize>,
    /// Current coordinates of the movable points, row-aligned with
    /// `sp_indices`.
    pub x: Tensor,
    /// Last-recorded anchor coordinates per movable point.
    pub anchors: Tensor,
    /// Nearest clean positions from the most recent distance evaluation;
    /// promoted to anchors whenever withdrawal activates.
    pub latest_targets: Tensor,
    pub preferred_class: Option<usize>,
    pub adam: AdamState,
    pub iteration: usize,
}

/// Outcome of one attacked example.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Final point coordinates.
    pub adversarial: Tensor,
    /// True exactly when the final prediction differs from the label.
    pub success: bool,
    pub clean_pred: usize,
    pub adv_pred: usize,
    pub preferred_class: Option<usize>,
    pub iterations_used: usize,
    /// Perceptibility distance at the final coordinates.
    pub final_d: f64,
    /// Per-point displacement from the clean cloud; exactly zero outside
    /// the perturbation subset.
    pub per_point_displacement: Vec<f64>,
    /// One loss record per evaluated iteration.
    pub loss_trace: Vec<LossBreakdown>,
}

/// Picks the perturbation subset: the `m` points with the largest
/// cross-entropy input-gradient norms become vertexes, and the subset is
/// the union of each vertex's `n` nearest neighbours (self-inclusive).
pub fn select_salient(
    model: &VictimModel,
    cloud: &PointCloud,
    m: usize,
    n: usize,
) -> Result<Vec<bool>> {
    let points = &cloud.points;
    let total = points.rows();
    if m == 0 || n == 0 {
        return Err(Error::Config(format!("salient selection needs m >= 1 and n >= 1, got m={m} n={n}")));
    }
    if m > total {
        return Err(Error::Capacity(format!(
            "cannot pick {m} vertexes from a {total}-point cloud"
        )));
    }
    let (_, grad) = input_gradient(
        model,
        points,
        &GradLoss::CrossEntropy {
            true_class: cloud.label,
        },
    )?;
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        norm(grad.row(b))
            .total_cmp(&norm(grad.row(a)))
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; total];
    for &vertex in &order[..m] {
        for idx in knn_indices(points, vertex, n)? {
            mask[idx] = true;
        }
    }
    Ok(mask)
}

/// The distance value, its gradient restricted to the movable rows, and
/// (for the cloud-to-cloud kinds) each movable point's nearest clean
/// index.
fn distance_eval(
    cfg: &AttackConfig,
    full: &Tensor,
    clean: &Tensor,
    x_sp: &Tensor,
    clean_sp: &Tensor,
    sp_indices: &[usize],
) -> Result<(f64, Tensor, Option<Vec<usize>>)> {
    match cfg.distance {
        DistanceKind::L2 => {
            let (value, grad) = d_l2_grad(x_sp, clean_sp)?;
            Ok((value, grad, None))
        }
        DistanceKind::Chamfer => {
            let (value, grad_full, nearest_full) = d_chamfer_grad(full, clean)?;
            let (grad, nearest) = gather_rows(&grad_full, &nearest_full, sp_indices);
            Ok((value, grad, Some(nearest)))
        }
        DistanceKind::Hausdorff => {
            let (value, grad_full, nearest_full) = d_hausdorff_grad(full, clean)?;
            let (grad, nearest) = gather_rows(&grad_full, &nearest_full, sp_indices);
            Ok((value, grad, Some(nearest)))
        }
    }
}

fn gather_rows(grad_full: &Tensor, nearest_full: &[usize], sp_indices: &[usize]) -> (Tensor, Vec<usize>) {
    let mut data = Vec::with_capacity(sp_indices.len() * 3);
    let mut nearest = Vec::with_capacity(sp_indices.len());
    for &i in sp_indices {
        data.extend_from_slice(grad_full.row(i));
        nearest.push(nearest_full[i]);
    }
    (
        Tensor::matrix(sp_indices.len(), 3, data).expect("gathered rows are consistent"),
        nearest,
    )
}

fn assemble_full(clean: &Tensor, x_sp: &Tensor, sp_indices: &[usize]) -> Tensor {
    let mut full = clean.clone();
    for (r, &i) in sp_indices.iter().enumerate() {
        full.row_mut(i).copy_from_slice(x_sp.row(r));
    }
    full
}

/// Withdrawal threshold for the current gradient norms.
fn effective_w(cfg: &AttackConfig, j_grad_norms: &[f64]) -> f64 {
    match cfg.w_mode {
        WMode::Absolute => cfg.w,
        WMode::Percentile => {
            if j_grad_norms.is_empty() {
                return 0.0;
            }
            let mut sorted = j_grad_norms.to_vec();
            sorted.sort_by(f64::total_cmp);
            // Nearest-rank percentile, clamped to the smallest observation.
            let rank = ((cfg.w / 100.0) * sorted.len() as f64).ceil() as usize;
            sorted[rank.clamp(1, sorted.len()) - 1]
        }
    }
}

/// Budget withdrawal: when the distance has crossed `lambda - h`, points
/// whose classification gradient is weaker than the filter threshold are
/// pulled a small step toward their anchors and excluded from this
/// iteration's update. Returns the withdrawal mask over movable points.
///
/// `grads` is the update gradient (rows are zeroed for withdrawn points);
/// `j_grad_norms` holds each movable point's classification-gradient norm,
/// which drives both the filter and the step size.
pub fn pwa_adjust(
    state: &mut PerturbationState,
    grads: &mut Tensor,
    j_grad_norms: &[f64],
    d_value: f64,
    cfg: &AttackConfig,
) -> Result<Vec<bool>> {
    let count = state.sp_indices.len();
    if grads.rows() != count || j_grad_norms.len() != count {
        return Err(Error::shape(
            "pwa_adjust",
            format!("{count} movable points"),
            format!("{} grad rows / {} norms", grads.rows(), j_grad_norms.len()),
        ));
    }
    let mut withdrawn = vec![false; count];
    if !(d_value > cfg.lambda - cfg.h) {
        return Ok(withdrawn);
    }
    state.anchors = state.latest_targets.clone();
    let threshold = effective_w(cfg, j_grad_norms);
    for r in 0..count {
        if j_grad_norms[r] < threshold {
            withdrawn[r] = true;
            let step = cfg.lr * cfg.gamma * j_grad_norms[r];
            let anchor = state.anchors.row(r).to_vec();
            let row = state.x.row_mut(r);
            for c in 0..3 {
                row[c] -= (row[c] - anchor[c]) * step;
            }
            grads.row_mut(r).fill(0.0);
        }
    }
    Ok(withdrawn)
}

/// Runs the full attack on one example.
pub fn run_attack(model: &VictimModel, cloud: &PointCloud, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let clean = &cloud.points;
    let total_points = clean.rows();
    let clean_pred = predict_probs(model, clean)?.argmax();

    let sp_mask = if cfg.local {
        select_salient(model, cloud, cfg.m, cfg.n)?
    } else {
        vec![true; total_points]
    };
    let sp_indices: Vec<usize> = (0..total_points).filter(|&i| sp_mask[i]).collect();
    let count = sp_indices.len();
    let mut clean_sp_data = Vec::with_capacity(count * 3);
    for &i in &sp_indices {
        clean_sp_data.extend_from_slice(clean.row(i));
    }
    let clean_sp = Tensor::matrix(count, 3, clean_sp_data)?;

    let weights = JWeights {
        kappa2: if cfg.use_score { cfg.kappa2 } else { 0.0 },
        kappa3: if cfg.use_cons { cfg.kappa3 } else { 0.0 },
        mu: cfg.mu,
        float_score: cfg.float_score,
    };
    let warmup_end = cfg.warmup_end();
    let mut state = PerturbationState {
        sp_mask,
        sp_indices,
        x: clean_sp.clone(),
        anchors: clean_sp.clone(),
        latest_targets: clean_sp.clone(),
        preferred_class: None,
        adam: AdamState::new(&[count, 3], cfg.beta1, cfg.beta2),
        iteration: 0,
    };
    let mut trace: Vec<LossBreakdown> = Vec::with_capacity(cfg.iterations);
    let mut adversarial_streak = 0usize;
    let mut stopped_early = false;
    let mut iterations_used = cfg.iterations;
    let mut last_probs = None;
    let mut last_d = 0.0;

    for i in 0..cfg.iterations {
        state.iteration = i;
        let full = assemble_full(clean, &state.x, &state.sp_indices);
        let fwd = forward(model, &full)?;
        if i == warmup_end {
            // Freeze the preferred class at the strongest wrong class.
            let mut best = None;
            for (k, &p) in fwd.probs.data().iter().enumerate() {
                if k == cloud.label {
                    continue;
                }
                if best.map_or(true, |(_, bp)| p > bp) {
                    best = Some((k, p));
                }
            }
            state.preferred_class = best.map(|(k, _)| k);
        }
        let (bd, grad_probs) = attack_loss_j(&fwd.probs, cloud.label, state.preferred_class, &weights)?;
        let (d_value, d_grad, nearest) =
            distance_eval(cfg, &full, clean, &state.x, &clean_sp, &state.sp_indices)?;
        if let Some(nearest) = &nearest {
            for (r, &ci) in nearest.iter().enumerate() {
                state.latest_targets.row_mut(r).copy_from_slice(clean.row(ci));
            }
        }
        let total = total_loss(bd.j, d_value, cfg.kappa1);
        let record = bd.with_distance(d_value, cfg.kappa1);
        if !total.is_finite() {
            let tail: Vec<String> = trace
                .iter()
                .rev()
                .take(3)
                .map(|b| format!("(J={:.6e}, D={:.6e})", b.j, b.d))
                .collect();
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {i} on {}: J={}, D={}, preceding trace {}",
                cloud.id,
                record.j,
                record.d,
                tail.join(" ")
            )));
        }
        trace.push(record);
        last_probs = Some(fwd.probs.clone());
        last_d = d_value;

        let adv_now = fwd.probs.argmax() != cloud.label;
        if i >= warmup_end {
            adversarial_streak = if adv_now { adversarial_streak + 1 } else { 0 };
            if cfg.early_stop && adversarial_streak >= 5 {
                iterations_used = i + 1;
                stopped_early = true;
                break;
            }
        }

        // Classification gradient, restricted to the movable rows.
        let grad_logits = softmax_backward(&fwd.probs, &grad_probs)?;
        let full_grad = backward(model, &fwd, &grad_logits)?.input;
        let mut j_grads = Tensor::zeros(&[count, 3]);
        let mut j_norms = Vec::with_capacity(count);
        for (r, &idx) in state.sp_indices.iter().enumerate() {
            let row = full_grad.row(idx);
            j_grads.row_mut(r).copy_from_slice(row);
            j_norms.push(norm(row));
        }
        let mut update = j_grads;
        update.add_scaled(&d_grad, cfg.kappa1)?;

        let withdrawn = if cfg.use_pwa && (i as f64) > cfg.warmup_fraction * cfg.iterations as f64 {
            pwa_adjust(&mut state, &mut update, &j_norms, d_value, cfg)?
        } else {
            vec![false; count]
        };

        // Withdrawn points contribute nothing to this iteration's Adam
        // update: their moments see the zeroed gradient and their
        // positions keep only the withdrawal pull.
        let held: Vec<(usize, [f64; 3])> = withdrawn
            .iter()
            .enumerate()
            .filter(|&(_, &w)| w)
            .map(|(r, _)| {
                let row = state.x.row(r);
                (r, [row[0], row[1], row[2]])
            })
            .collect();
        adam_step(&mut state.x, &update, &mut state.adam, cfg.lr)?;
        for (r, pos) in held {
            state.x.row_mut(r).copy_from_slice(&pos);
        }
    }

    let adversarial = assemble_full(clean, &state.x, &state.sp_indices);
    let (adv_probs, final_d) = if stopped_early {
        // Positions are untouched since the last evaluation; reuse it.
        (last_probs.expect("early stop implies at least one evaluation"), last_d)
    } else {
        let probs = predict_probs(model, &adversarial)?;
        let d = match cfg.distance {
            DistanceKind::L2 => d_l2(&state.x, &clean_sp)?,
            DistanceKind::Chamfer => d_chamfer(&adversarial, clean)?,
            DistanceKind::Hausdorff => d_hausdorff(&adversarial, clean)?,
        };
        (probs, d)
    };
    let adv_pred = adv_probs.argmax();
    let per_point_displacement: Vec<f64> = (0..total_points)
        .map(|i| crate::tensor::dist(adversarial.row(i), clean.row(i)))
        .collect();
    Ok(AttackResult {
        adversarial,
        success: adv_pred != cloud.label,
        clean_pred,
        adv_pred,
        preferred_class: state.preferred_class,
        iterations_used,
        final_d,
        per_point_displacement,
        loss_trace: trace,
    })
}

/// Noise baseline: offsets every coordinate by uniform noise scaled so
/// the chosen distance lands within 5% of `lambda` (exactly for the
/// pairwise distance, by bisection for the cloud-to-cloud kinds).
/// `lambda = 0` returns the cloud unchanged.
pub fn random_perturbation_baseline(
    points: &Tensor,
    distance: DistanceKind,
    lambda: f64,
    seed: u64,
) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(points.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..points.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noise = Tensor::new(points.shape().to_vec(), noise)?;
    let apply = |delta: f64| -> Result<Tensor> {
        let mut out = points.clone();
        out.add_scaled(&noise, delta)?;
        Ok(out)
    };
    let measure = |delta: f64| -> Result<f64> {
        let moved = apply(delta)?;
        match distance {
            DistanceKind::L2 => d_l2(&moved, points),
            DistanceKind::Chamfer => d_chamfer(&moved, points),
            DistanceKind::Hausdorff => d_hausdorff(&moved, points),
        }
    };
    let delta = match distance {
        DistanceKind::L2 => {
            // The pairwise distance is exactly linear in the noise scale.
            let mut unit_sum = 0.0;
            for i in 0..noise.rows() {
                unit_sum += norm(noise.row(i));
            }
            lambda / unit_sum
        }
        DistanceKind::Chamfer | DistanceKind::Hausdorff => {
            let mut hi = 1.0;
            let mut grow = 0;
            while measure(hi)? < lambda {
                hi *= 2.0;
                grow += 1;
                if grow > 60 {
                    return Err(Error::Numeric(
                        "noise scale search failed to bracket the budget".into(),
                    ));
                }
            }
            let mut lo = 0.0;
            let mut mid = hi / 2.0;
            for _ in 0..200 {
                mid = 0.5 * (lo + hi);
                let d = measure(mid)?;
                if (d - lambda).abs() <= 0.05 * lambda {
                    break;
                }
                if d < lambda {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let landed = measure(mid)?;
            if (landed - lambda).abs() > 0.05 * lambda {
                return Err(Error::Numeric(format!(
                    "noise scale search stalled at distance {landed} for budget {lambda}"
                )));
            }
            mid
        }
    };
    apply(delta)
}
