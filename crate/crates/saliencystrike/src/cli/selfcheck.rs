//! Built-in self-checks behind `saliencystrike check`: gradient
//! verification against finite differences for every loss and both victim
//! architectures, point-set distance axioms with brute-force references,
//! and the budget-withdrawal unit scenarios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{pwa_adjust, AttackConfig, PerturbationState, WMode};
use crate::data::{gen_shape, ShapeKind};
use crate::loss::{d_chamfer, d_hausdorff, d_l2, DistanceKind, JWeights};
use crate::ops::{finite_diff_check, knn_indices, softmax_cross_entropy, AdamState};
use crate::tensor::{dist, Tensor};
use crate::victim::{backward, build_model, forward, input_gradient, Arch, GradLoss, VictimModel};

pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

const GRAD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-6;
const EXACT_TOL: f64 = 1e-9;

fn result(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn failure(name: &str, err: impl std::fmt::Display) -> CheckResult {
    result(name, false, format!("errored: {err}"))
}

fn sphere_cloud(n: usize, seed: u64) -> Tensor {
    gen_shape(ShapeKind::Sphere, n, 0.02, seed)
        .expect("sphere generation is infallible for valid sizes")
        .points
}

/// Compares an input gradient against finite differences; `flip_sign`
/// negates the analytic gradient first (the negative control, expected to
/// make the check fail).
fn grad_check(
    name: &str,
    model: &VictimModel,
    point: &Tensor,
    loss: &GradLoss,
    flip_sign: bool,
) -> CheckResult {
    let probe = |pts: &Tensor| {
        let (value, mut grad) = input_gradient(model, pts, loss)?;
        if flip_sign {
            for g in grad.data_mut() {
                *g = -*g;
            }
        }
        Ok((value, grad))
    };
    match finite_diff_check(probe, point, FD_EPS) {
        Ok(worst) => result(
            name,
            worst < GRAD_TOL,
            format!("worst relative error {worst:.3e} (tolerance {GRAD_TOL:.0e})"),
        ),
        Err(err) => failure(name, err),
    }
}

fn gradient_checks(results: &mut Vec<CheckResult>, negative_control: bool) {
    let archs = [
        (
            "pointnet_mini",
            build_model(Arch::PointnetMini, 5, &[16, 16], None, 7),
        ),
        (
            "dgcnn_mini",
            build_model(Arch::DgcnnMini, 5, &[16, 16], Some(4), 7),
        ),
    ];
    for (arch_name, model) in archs {
        let model = match model {
            Ok(m) => m,
            Err(err) => {
                results.push(failure(&format!("gradients/{arch_name}"), err));
                continue;
            }
        };
        let clean = sphere_cloud(16, 11);
        // Perturbed evaluation point so nearest-neighbour assignments in
        // the distance terms stay stable under the probe step.
        let mut moved = clean.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for v in moved.data_mut() {
            *v += rng.random_range(0.01..0.02);
        }
        let mut mask = vec![false; 16];
        for i in [0usize, 3, 5, 11] {
            mask[i] = true;
        }

        let first_of_arch = arch_name == "pointnet_mini";
        results.push(grad_check(
            &format!("gradients/{arch_name}/cross_entropy"),
            &model,
            &clean,
            &GradLoss::CrossEntropy { true_class: 2 },
            negative_control && first_of_arch,
        ));
        for (phase, preferred) in [("warmup", None), ("frozen", Some(3))] {
            results.push(grad_check(
                &format!("gradients/{arch_name}/attack_objective_{phase}"),
                &model,
                &clean,
                &GradLoss::AttackJ {
                    true_class: 0,
                    preferred_class: preferred,
                    weights: JWeights::default(),
                },
                false,
            ));
        }
        for distance in [
            DistanceKind::L2,
            DistanceKind::Chamfer,
            DistanceKind::Hausdorff,
        ] {
            results.push(grad_check(
                &format!("gradients/{arch_name}/penalized_total_{}", distance.name()),
                &model,
                &moved,
                &GradLoss::PenalizedTotal {
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
                },
                false,
            ));
        }
        results.push(parameter_grad_check(arch_name, &model, &clean));
    }
}

/// Finite-differences the first-layer weights (a handful of entries) so
/// the training path's parameter gradients are covered too.
fn parameter_grad_check(arch_name: &str, model: &VictimModel, cloud: &Tensor) -> CheckResult {
    let name = format!("gradients/{arch_name}/first_layer_weights");
    let run = || -> crate::error::Result<f64> {
        let fwd = forward(model, cloud)?;
        let (_, _, grad_logits) = softmax_cross_entropy(&fwd.logits, 1)?;
        let grads = backward(model, &fwd, &grad_logits)?;
        let analytic = &grads.params[0];
        let mut worst = 0.0f64;
        for idx in 0..analytic.len().min(6) {
            let probe = |delta: f64| -> crate::error::Result<f64> {
                let mut perturbed = model.clone();
                perturbed.params[0].data_mut()[idx] += delta;
                let fwd = forward(&perturbed, cloud)?;
                Ok(softmax_cross_entropy(&fwd.logits, 1)?.0)
            };
            let fd = (probe(FD_EPS)? - probe(-FD_EPS)?) / (2.0 * FD_EPS);
            let err = (analytic.data()[idx] - fd).abs() / f64::max(1e-12, fd.abs());
            worst = worst.max(err);
        }
        Ok(worst)
    };
    match run() {
        Ok(worst) => result(
            &name,
            worst < GRAD_TOL,
            format!("worst relative error {worst:.3e} over 6 probed entries"),
        ),
        Err(err) => failure(&name, err),
    }
}

fn random_cloud(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(n, 3, data).expect("sized construction")
}

fn distance_checks(results: &mut Vec<CheckResult>) {
    let a = random_cloud(64, 301);
    let b = random_cloud(96, 302);

    // Identity and non-negativity.
    {
        let name = "distances/identity_and_nonnegativity";
        let run = || -> crate::error::Result<(f64, f64, f64, f64)> {
            let zero_l2 = d_l2(&a, &a)?;
            let zero_ch = d_chamfer(&a, &a)?;
            let zero_h = d_hausdorff(&a, &a)?;
            let cross = d_chamfer(&a, &b)?.min(d_hausdorff(&a, &b)?).min(d_l2(
                &a,
                &random_cloud(64, 303),
            )?);
            Ok((zero_l2, zero_ch, zero_h, cross))
        };
        match run() {
            Ok((l2, ch, h, cross)) => results.push(result(
                name,
                l2 == 0.0 && ch == 0.0 && h == 0.0 && cross >= 0.0,
                format!("self-distances {l2}/{ch}/{h}, smallest cross-distance {cross:.3e}"),
            )),
            Err(err) => results.push(failure(name, err)),
        }
    }

    // Chamfer symmetry.
    {
        let name = "distances/chamfer_symmetry";
        match (d_chamfer(&a, &b), d_chamfer(&b, &a)) {
            (Ok(ab), Ok(ba)) => results.push(result(
                name,
                (ab - ba).abs() <= EXACT_TOL,
                format!("d(a,b)={ab}, d(b,a)={ba}"),
            )),
            (Err(err), _) | (_, Err(err)) => results.push(failure(name, err)),
        }
    }

    // Hausdorff one-sidedness: a subset has zero distance to its
    // superset, while the superset keeps a positive distance back.
    {
        let name = "distances/hausdorff_one_sidedness";
        let run = || -> crate::error::Result<(f64, f64)> {
            let subset_rows: Vec<f64> = (0..10).flat_map(|i| b.row(i).to_vec()).collect();
            let subset = Tensor::matrix(10, 3, subset_rows)?;
            Ok((d_hausdorff(&subset, &b)?, d_hausdorff(&b, &subset)?))
        };
        match run() {
            Ok((forward_d, backward_d)) => results.push(result(
                name,
                forward_d == 0.0 && backward_d > 0.0,
                format!("subset->superset {forward_d}, superset->subset {backward_d:.3e}"),
            )),
            Err(err) => results.push(failure(name, err)),
        }
    }

    // Brute-force equivalence on up-to-128-point sets.
    {
        let name = "distances/brute_force_equivalence";
        let big_a = random_cloud(128, 304);
        let big_b = random_cloud(128, 305);
        let nearest = |from: &Tensor, to: &Tensor, i: usize| -> f64 {
            (0..to.rows())
                .map(|j| dist(from.row(i), to.row(j)))
                .fold(f64::INFINITY, f64::min)
        };
        let run = || -> crate::error::Result<(f64, f64)> {
            let mean_ab: f64 = (0..big_a.rows())
                .map(|i| nearest(&big_a, &big_b, i))
                .sum::<f64>()
                / big_a.rows() as f64;
            let mean_ba: f64 = (0..big_b.rows())
                .map(|i| nearest(&big_b, &big_a, i))
                .sum::<f64>()
                / big_b.rows() as f64;
            let brute_chamfer = mean_ab + mean_ba;
            let brute_hausdorff = (0..big_a.rows())
                .map(|i| nearest(&big_a, &big_b, i))
                .fold(0.0, f64::max);
            let chamfer_err = (d_chamfer(&big_a, &big_b)? - brute_chamfer).abs();
            let hausdorff_err = (d_hausdorff(&big_a, &big_b)? - brute_hausdorff).abs();
            Ok((chamfer_err, hausdorff_err))
        };
        match run() {
            Ok((chamfer_err, hausdorff_err)) => results.push(result(
                name,
                chamfer_err <= EXACT_TOL && hausdorff_err <= EXACT_TOL,
                format!("chamfer |delta| {chamfer_err:.3e}, hausdorff |delta| {hausdorff_err:.3e}"),
            )),
            Err(err) => results.push(failure(name, err)),
        }
    }

    // knn against a quadratic scan.
    {
        let name = "distances/knn_brute_force";
        let cloud = random_cloud(128, 306);
        let run = || -> crate::error::Result<bool> {
            for query in [0usize, 17, 63, 127] {
                let fast = knn_indices(&cloud, query, 5)?;
                let mut order: Vec<usize> = (0..cloud.rows()).collect();
                order.sort_by(|&i, &j| {
                    dist(cloud.row(query), cloud.row(i))
                        .partial_cmp(&dist(cloud.row(query), cloud.row(j)))
                        .unwrap()
                        .then(i.cmp(&j))
                });
                if fast != order[..5] {
                    return Ok(false);
                }
            }
            Ok(true)
        };
        match run() {
            Ok(matched) => results.push(result(
                name,
                matched,
                "4 queries, k=5, exact index agreement".to_string(),
            )),
            Err(err) => results.push(failure(name, err)),
        }
    }
}

fn pwa_state(x: &[f64; 3], anchor: &[f64; 3]) -> PerturbationState {
    PerturbationState {
        sp_mask: vec![true],
        sp_indices: vec![0],
        x: Tensor::matrix(1, 3, x.to_vec()).expect("sized construction"),
        anchors: Tensor::matrix(1, 3, anchor.to_vec()).expect("sized construction"),
        latest_targets: Tensor::matrix(1, 3, anchor.to_vec()).expect("sized construction"),
        preferred_class: Some(1),
        adam: AdamState::new(&[1, 3], 0.9, 0.999),
        iteration: 5,
    }
}

fn pwa_cfg() -> AttackConfig {
    AttackConfig {
        lambda: 0.3,
        h: 0.05,
        w_mode: WMode::Absolute,
        w: 0.01,
        gamma: 1.0,
        lr: 0.001,
        ..AttackConfig::default()
    }
}

fn pwa_checks(results: &mut Vec<CheckResult>) {
    // Active withdrawal: the documented worked example.
    {
        let name = "pwa/withdrawal_step";
        let mut state = pwa_state(&[1.0, 0.0, 0.0], &[0.9, 0.0, 0.0]);
        let mut grads = Tensor::matrix(1, 3, vec![0.001, 0.0, 0.0]).expect("sized");
        match pwa_adjust(&mut state, &mut grads, &[0.001], 0.28, &pwa_cfg()) {
            Ok(withdrawn) => {
                let expected_x = 1.0 - 0.1 * 0.001 * 1.0 * 0.001;
                let pos_ok = (state.x.at(0, 0) - expected_x).abs() < 1e-15
                    && state.x.at(0, 1) == 0.0
                    && state.x.at(0, 2) == 0.0;
                let grad_ok = grads.data().iter().all(|&g| g == 0.0);
                results.push(result(
                    name,
                    withdrawn == vec![true] && pos_ok && grad_ok,
                    format!(
                        "x[0] {} (expected {expected_x}), gradient zeroed: {grad_ok}",
                        state.x.at(0, 0)
                    ),
                ));
            }
            Err(err) => results.push(failure(name, err)),
        }
    }

    // Boundary: distance exactly lambda - h must be a bit-exact no-op.
    {
        let name = "pwa/boundary_noop";
        let mut state = pwa_state(&[1.0, 0.0, 0.0], &[0.9, 0.0, 0.0]);
        let mut grads = Tensor::matrix(1, 3, vec![0.001, 0.0, 0.0]).expect("sized");
        match pwa_adjust(&mut state, &mut grads, &[0.001], 0.25, &pwa_cfg()) {
            Ok(withdrawn) => results.push(result(
                name,
                withdrawn == vec![false]
                    && state.x.at(0, 0) == 1.0
                    && grads.at(0, 0) == 0.001,
                format!("withdrawn {withdrawn:?}, x[0] {}", state.x.at(0, 0)),
            )),
            Err(err) => results.push(failure(name, err)),
        }
    }

    // A zero-gradient point withdraws without moving.
    {
        let name = "pwa/zero_gradient_point";
        let mut state = pwa_state(&[1.0, 0.0, 0.0], &[0.9, 0.0, 0.0]);
        let mut grads = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).expect("sized");
        match pwa_adjust(&mut state, &mut grads, &[0.0], 0.28, &pwa_cfg()) {
            Ok(withdrawn) => results.push(result(
                name,
                withdrawn == vec![true]
                    && state.x.at(0, 0) == 1.0
                    && grads.data().iter().all(|&g| g == 0.0),
                format!("withdrawn {withdrawn:?}, x[0] {}", state.x.at(0, 0)),
            )),
            Err(err) => results.push(failure(name, err)),
        }
    }
}

/// Runs every self-check; `negative_control` flips the sign of the first
/// analytic gradient so a healthy harness reports exactly one failure.
pub fn run_all(negative_control: bool) -> Vec<CheckResult> {
    let mut results = Vec::new();
    gradient_checks(&mut results, negative_control);
    distance_checks(&mut results);
    pwa_checks(&mut results);
    results
}
