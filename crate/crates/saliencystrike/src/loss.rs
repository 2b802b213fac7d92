//! The adversarial objective: classification-side losses J, the three
//! perceptibility distances, and the combined penalty-form total, each
//! with analytic gradients.
//!
//! Conventions used throughout:
//! - `probs` is the victim's softmax output (a simplex vector), `true_class`
//!   the ground-truth label, and `preferred_class` the wrong class the
//!   attack drives probability mass toward once it has been frozen.
//! - All distances are sums/means/maxima of plain Euclidean norms, never
//!   squared norms.
//! - Gradients of `min`/`max` constructions flow through the current
//!   argmin/argmax assignment (the usual subgradient choice); coincident
//!   point pairs contribute a zero gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dist, dist_sq, Tensor};

/// Guard added to the denominator of the contraction ratio term.
pub const RATIO_EPS: f64 = 1e-12;

/// Which perceptibility distance constrains the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    L2,
    Chamfer,
    Hausdorff,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 3] =
        [DistanceKind::L2, DistanceKind::Chamfer, DistanceKind::Hausdorff];

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::L2 => "l2",
            DistanceKind::Chamfer => "chamfer",
            DistanceKind::Hausdorff => "hausdorff",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        DistanceKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown distance {name:?}")))
    }
}

/// One iteration's objective values, split into components.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_base: f64,
    pub l_score: f64,
    pub l_cons: f64,
    /// Classification-side objective actually optimized this iteration.
    pub j: f64,
    /// Perceptibility distance value.
    pub d: f64,
    /// `j + kappa1 * d`.
    pub total: f64,
    pub preferred_class: Option<usize>,
}

impl LossBreakdown {
    /// Fills in the distance-dependent fields.
    pub fn with_distance(mut self, d: f64, kappa1: f64) -> Self {
        self.d = d;
        self.total = total_loss(self.j, d, kappa1);
        self
    }
}

/// Weights and options for composing the classification-side objective.
#[derive(Debug, Clone, Copy)]
pub struct JWeights {
    pub kappa2: f64,
    pub kappa3: f64,
    pub mu: f64,
    /// When true, the score term keeps chasing the current best wrong
    /// class even after a preferred class has been frozen.
    pub float_score: bool,
}

impl Default for JWeights {
    fn default() -> Self {
        JWeights {
            kappa2: 1.0,
            kappa3: 0.5,
            mu: 0.1,
            float_score: false,
        }
    }
}

/// Probability currently assigned to the true class.
pub fn l_base(probs: &Tensor, true_class: usize) -> Result<f64> {
    if true_class >= probs.len() {
        return Err(Error::Index {
            context: "l_base",
            index: true_class,
            len: probs.len(),
        });
    }
    Ok(probs.data()[true_class])
}

/// One minus the best wrong-class probability, and which class that is
/// (ties resolve to the lower index).
pub fn l_score(probs: &Tensor, true_class: usize) -> Result<(f64, usize)> {
    let c = probs.len();
    if true_class >= c {
        return Err(Error::Index {
            context: "l_score",
            index: true_class,
            len: c,
        });
    }
    if c < 2 {
        return Err(Error::Config(
            "l_score needs at least 2 classes (no wrong class exists)".into(),
        ));
    }
    let mut best: Option<usize> = None;
    for (k, &p) in probs.data().iter().enumerate() {
        if k == true_class {
            continue;
        }
        if best.map_or(true, |b| p > probs.data()[b]) {
            best = Some(k);
        }
    }
    let wrong = best.expect("c >= 2 guarantees a wrong class");
    Ok((1.0 - probs.data()[wrong], wrong))
}

/// Contraction loss: a margin hinge pushing the preferred class above the
/// true class, plus a ratio term starving every other wrong class.
///
/// `max(mu - p_pre + p_true, 0) + 1 - p_pre / (sum of other-class probs + eps)`,
/// where "other" excludes both the true and preferred classes. With only
/// two classes that set is empty and the ratio term is dropped.
pub fn l_cons(probs: &Tensor, true_class: usize, preferred_class: usize, mu: f64) -> Result<f64> {
    let (value, _) = l_cons_with_grad(probs, true_class, preferred_class, mu)?;
    Ok(value)
}

/// [`l_cons`] along with its gradient w.r.t. `probs`.
pub fn l_cons_with_grad(
    probs: &Tensor,
    true_class: usize,
    preferred_class: usize,
    mu: f64,
) -> Result<(f64, Tensor)> {
    let c = probs.len();
    for (what, idx) in [("true", true_class), ("preferred", preferred_class)] {
        if idx >= c {
            return Err(Error::Index {
                context: if what == "true" {
                    "l_cons true_class"
                } else {
                    "l_cons preferred_class"
                },
                index: idx,
                len: c,
            });
        }
    }
    if preferred_class == true_class {
        return Err(Error::Config(
            "l_cons preferred_class must differ from true_class".into(),
        ));
    }
    if mu < 0.0 {
        return Err(Error::Config(format!("l_cons margin must be >= 0, got {mu}")));
    }
    let p = probs.data();
    let mut grad = Tensor::zeros(&[c]);
    let hinge_arg = mu - p[preferred_class] + p[true_class];
    let mut value = 0.0;
    if hinge_arg > 0.0 {
        value += hinge_arg;
        grad.data_mut()[true_class] += 1.0;
        grad.data_mut()[preferred_class] -= 1.0;
    }
    if c > 2 {
        let rest: f64 = p
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != true_class && k != preferred_class)
            .map(|(_, &v)| v)
            .sum();
        let denom = rest + RATIO_EPS;
        value += 1.0 - p[preferred_class] / denom;
        grad.data_mut()[preferred_class] += -1.0 / denom;
        let spread = p[preferred_class] / (denom * denom);
        for k in 0..c {
            if k != true_class && k != preferred_class {
                grad.data_mut()[k] += spread;
            }
        }
    }
    Ok((value, grad))
}

/// Composes the classification-side objective and its probability-space
/// gradient.
///
/// Before a preferred class exists (`preferred_class == None`, the warm-up
/// phase) the optimized objective is the base term alone; the score and
/// contraction values are still computed against the current best wrong
/// class so traces show what they would be. After freezing, both weighted
/// terms join it.
pub fn attack_loss_j(
    probs: &Tensor,
    true_class: usize,
    preferred_class: Option<usize>,
    weights: &JWeights,
) -> Result<(LossBreakdown, Tensor)> {
    let base = l_base(probs, true_class)?;
    let (_, floating_wrong) = l_score(probs, true_class)?;
    let c = probs.len();

    let score_class = match preferred_class {
        None => floating_wrong,
        Some(_) if weights.float_score => floating_wrong,
        Some(p) => p,
    };
    let cons_class = preferred_class.unwrap_or(floating_wrong);
    let score = 1.0 - probs.data()[score_class];
    let (cons, cons_grad) = l_cons_with_grad(probs, true_class, cons_class, weights.mu)?;

    let mut grad = Tensor::zeros(&[c]);
    grad.data_mut()[true_class] += 1.0;
    let j = if preferred_class.is_some() {
        grad.data_mut()[score_class] -= weights.kappa2;
        grad.add_scaled(&cons_grad, weights.kappa3)?;
        base + weights.kappa2 * score + weights.kappa3 * cons
    } else {
        base
    };

    Ok((
        LossBreakdown {
            l_base: base,
            l_score: score,
            l_cons: cons,
            j,
            d: 0.0,
            total: j,
            preferred_class,
        },
        grad,
    ))
}

/// Penalty-form combination of the classification objective and the
/// perceptibility distance. The distance term is added, so growing
/// perceptibility always raises the cost being minimized.
pub fn total_loss(j: f64, d: f64, kappa1: f64) -> f64 {
    j + kappa1 * d
}

/// Sum of per-pair Euclidean displacements between index-aligned sets.
pub fn d_l2(adv: &Tensor, anchor: &Tensor) -> Result<f64> {
    Ok(d_l2_grad(adv, anchor)?.0)
}

/// [`d_l2`] with its gradient w.r.t. `adv`.
pub fn d_l2_grad(adv: &Tensor, anchor: &Tensor) -> Result<(f64, Tensor)> {
    if adv.shape() != anchor.shape() {
        return Err(Error::shape(
            "d_l2",
            format!("{:?}", anchor.shape()),
            format!("{:?}", adv.shape()),
        ));
    }
    let mut value = 0.0;
    let mut grad = Tensor::zeros(adv.shape());
    for r in 0..adv.rows() {
        let a = adv.row(r);
        let b = anchor.row(r);
        let d = dist(a, b);
        value += d;
        if d > 0.0 {
            let g = grad.row_mut(r);
            for i in 0..3 {
                g[i] = (a[i] - b[i]) / d;
            }
        }
    }
    Ok((value, grad))
}

/// For each row of `from`, the index of the nearest row of `to` (ties to
/// the lower index) and that distance.
fn nearest_rows(from: &Tensor, to: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::with_capacity(from.rows());
    let mut d = Vec::with_capacity(from.rows());
    for r in 0..from.rows() {
        let row = from.row(r);
        let mut best = 0usize;
        let mut best_d = dist_sq(to.row(0), row);
        for j in 1..to.rows() {
            let dj = dist_sq(to.row(j), row);
            if dj < best_d {
                best_d = dj;
                best = j;
            }
        }
        idx.push(best);
        d.push(best_d.sqrt());
    }
    (idx, d)
}

fn require_nonempty(context: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Data(format!("{context} needs non-empty point sets")));
    }
    Ok(())
}

/// Symmetric mean nearest-neighbour distance between two point sets.
pub fn d_chamfer(a: &Tensor, b: &Tensor) -> Result<f64> {
    require_nonempty("d_chamfer", a, b)?;
    let (_, da) = nearest_rows(a, b);
    let (_, db) = nearest_rows(b, a);
    let mean_a: f64 = da.iter().sum::<f64>() / a.rows() as f64;
    let mean_b: f64 = db.iter().sum::<f64>() / b.rows() as f64;
    Ok(mean_a + mean_b)
}

/// [`d_chamfer`] with gradient w.r.t. `a` and, per row of `a`, the index
/// of its nearest point in `b` (used as withdrawal anchors).
pub fn d_chamfer_grad(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor, Vec<usize>)> {
    require_nonempty("d_chamfer", a, b)?;
    let (na, da) = nearest_rows(a, b);
    let (nb, db) = nearest_rows(b, a);
    let inv_a = 1.0 / a.rows() as f64;
    let inv_b = 1.0 / b.rows() as f64;
    let value = da.iter().sum::<f64>() * inv_a + db.iter().sum::<f64>() * inv_b;
    let mut grad = Tensor::zeros(a.shape());
    for (i, (&j, &d)) in na.iter().zip(&da).enumerate() {
        if d > 0.0 {
            let (ai, bj) = (a.row(i), b.row(j));
            let g = grad.row_mut(i);
            for c in 0..3 {
                g[c] += inv_a * (ai[c] - bj[c]) / d;
            }
        }
    }
    for (j, (&i, &d)) in nb.iter().zip(&db).enumerate() {
        if d > 0.0 {
            let (ai, bj) = (a.row(i), b.row(j));
            let g = grad.row_mut(i);
            for c in 0..3 {
                g[c] += inv_b * (ai[c] - bj[c]) / d;
            }
        }
    }
    Ok((value, grad, na))
}

/// One-sided Hausdorff distance: the worst nearest-neighbour distance
/// from a point of `a` to the set `b`. Not symmetric; the attack calls it
/// as `d_hausdorff(adversarial, clean)`.
pub fn d_hausdorff(a: &Tensor, b: &Tensor) -> Result<f64> {
    require_nonempty("d_hausdorff", a, b)?;
    let (_, da) = nearest_rows(a, b);
    Ok(da.iter().cloned().fold(0.0, f64::max))
}

/// [`d_hausdorff`] with gradient w.r.t. `a` (nonzero only at the argmax
/// row) and, per row of `a`, its nearest index in `b`.
pub fn d_hausdorff_grad(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor, Vec<usize>)> {
    require_nonempty("d_hausdorff", a, b)?;
    let (na, da) = nearest_rows(a, b);
    let mut worst = 0usize;
    for (i, &d) in da.iter().enumerate() {
        if d > da[worst] {
            worst = i;
        }
    }
    let value = da[worst];
    let mut grad = Tensor::zeros(a.shape());
    if value > 0.0 {
        let (ai, bj) = (a.row(worst), b.row(na[worst]));
        let g = grad.row_mut(worst);
        for c in 0..3 {
            g[c] = (ai[c] - bj[c]) / value;
        }
    }
    Ok((value, grad, na))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(n, 3, data).unwrap()
    }

    #[test]
    fn l_base_reads_the_true_class_probability() {
        let p = Tensor::vector(vec![0.7, 0.2, 0.1]);
        assert_eq!(l_base(&p, 0).unwrap(), 0.7);
        let uniform = Tensor::vector(vec![0.25; 4]);
        assert_eq!(l_base(&uniform, 2).unwrap(), 0.25);
        let onehot = Tensor::vector(vec![0.0, 1.0, 0.0]);
        assert_eq!(l_base(&onehot, 1).unwrap(), 1.0);
        assert!(matches!(l_base(&p, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn l_score_tracks_the_best_wrong_class() {
        let p = Tensor::vector(vec![0.7, 0.2, 0.1]);
        assert_eq!(l_score(&p, 0).unwrap(), (0.8, 1));
        let even = Tensor::vector(vec![0.5, 0.5]);
        assert_eq!(l_score(&even, 0).unwrap(), (0.5, 1));
        let onehot_wrong = Tensor::vector(vec![0.0, 0.0, 1.0]);
        assert_eq!(l_score(&onehot_wrong, 0).unwrap().0, 0.0);
        // Tie between wrong classes 1 and 2 resolves to 1.
        let tie = Tensor::vector(vec![0.2, 0.4, 0.4]);
        assert_eq!(l_score(&tie, 0).unwrap().1, 1);
        let single = Tensor::vector(vec![1.0]);
        assert!(matches!(l_score(&single, 0), Err(Error::Config(_))));
    }

    #[test]
    fn l_cons_matches_hand_computed_values() {
        let p = Tensor::vector(vec![0.3, 0.6, 0.1]);
        let v = l_cons(&p, 0, 1, 0.1).unwrap();
        assert!((v - (-5.0)).abs() < 1e-9, "got {v}");

        let p = Tensor::vector(vec![0.5, 0.3, 0.2]);
        let v = l_cons(&p, 0, 1, 0.1).unwrap();
        assert!((v - (-0.2)).abs() < 1e-9, "got {v}");

        // Two classes: the ratio term is dropped entirely.
        let p = Tensor::vector(vec![0.4, 0.6]);
        let v = l_cons(&p, 0, 1, 0.0).unwrap();
        assert_eq!(v, 0.0);

        assert!(matches!(
            l_cons(&Tensor::vector(vec![0.5, 0.5]), 0, 0, 0.1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            l_cons(&Tensor::vector(vec![0.5, 0.5]), 0, 1, -0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn warm_up_objective_is_the_base_term_alone() {
        let p = Tensor::vector(vec![0.3, 0.6, 0.1]);
        let (bd, grad) = attack_loss_j(&p, 0, None, &JWeights::default()).unwrap();
        assert_eq!(bd.j, bd.l_base);
        assert_eq!(bd.j, 0.3);
        // Score and contraction are still reported against the would-be
        // preferred class.
        assert!((bd.l_score - 0.4).abs() < 1e-12);
        assert!((bd.l_cons - (-5.0)).abs() < 1e-9);
        assert_eq!(bd.preferred_class, None);
        assert_eq!(grad.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn frozen_objective_matches_the_component_sum() {
        let p = Tensor::vector(vec![0.3, 0.6, 0.1]);
        let w = JWeights::default();
        let (bd, _) = attack_loss_j(&p, 0, Some(1), &w).unwrap();
        assert!((bd.j - (-1.8)).abs() < 1e-9, "got {}", bd.j);
        let recomposed = bd.l_base + w.kappa2 * bd.l_score + w.kappa3 * bd.l_cons;
        assert!((bd.j - recomposed).abs() < 1e-12);
        assert_eq!(bd.preferred_class, Some(1));
    }

    #[test]
    fn frozen_score_ignores_a_new_floating_argmax_unless_asked() {
        // Class 2 now outranks the frozen class 1.
        let p = Tensor::vector(vec![0.2, 0.3, 0.5]);
        let frozen = JWeights::default();
        let (bd, _) = attack_loss_j(&p, 0, Some(1), &frozen).unwrap();
        assert!((bd.l_score - 0.7).abs() < 1e-12, "frozen tracks class 1");

        let floating = JWeights {
            float_score: true,
            ..JWeights::default()
        };
        let (bd, _) = attack_loss_j(&p, 0, Some(1), &floating).unwrap();
        assert!((bd.l_score - 0.5).abs() < 1e-12, "floating tracks class 2");
    }

    #[test]
    fn attack_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = JWeights::default();
        for trial in 0..5 {
            let mut raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            for v in raw.iter_mut() {
                *v /= sum;
            }
            let point = Tensor::vector(raw);
            let err = finite_diff_check(
                |p| {
                    let (bd, grad) = attack_loss_j(p, 0, Some(2), &w)?;
                    Ok((bd.j, grad))
                },
                &point,
                1e-7,
            )
            .unwrap();
            assert!(err < 1e-5, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn total_loss_is_a_weighted_sum() {
        assert_eq!(total_loss(-1.8, 0.5, 0.0), -1.8);
        let t = total_loss(-1.8, 0.002, 10.0);
        assert!((t - (-1.78)).abs() < 1e-12);
    }

    #[test]
    fn l2_distance_sums_per_pair_displacements() {
        let a = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.0]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d_l2(&a, &a).unwrap(), 0.0);
        assert!((d_l2(&a, &b).unwrap() - 1.5).abs() < 1e-15);

        let single = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let origin = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert_eq!(d_l2(&single, &origin).unwrap(), 1.0);

        assert!(d_l2(&a, &single).is_err());
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let anchor = random_points(5, &mut rng);
        let adv = random_points(5, &mut rng);
        let err = finite_diff_check(|x| d_l2_grad(x, &anchor), &adv, 1e-6).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    /// Brute-force chamfer via an explicit distance matrix.
    fn chamfer_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let mat: Vec<Vec<f64>> = (0..a.rows())
            .map(|i| (0..b.rows()).map(|j| dist(a.row(i), b.row(j))).collect())
            .collect();
        let term_a: f64 = mat
            .iter()
            .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.rows() as f64;
        let term_b: f64 = (0..b.rows())
            .map(|j| (0..a.rows()).map(|i| mat[i][j]).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / b.rows() as f64;
        term_a + term_b
    }

    #[test]
    fn chamfer_matches_hand_example_and_oracle() {
        let a = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        let b = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        assert!((d_chamfer(&a, &b).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(d_chamfer(&a, &a).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_points(32, &mut rng);
        let y = random_points(48, &mut rng);
        let got = d_chamfer(&x, &y).unwrap();
        assert!((got - chamfer_oracle(&x, &y)).abs() < 1e-12);
        // Symmetric by construction.
        assert!((got - d_chamfer(&y, &x).unwrap()).abs() < 1e-12);
        assert!(got >= 0.0);

        assert!(d_chamfer(&Tensor::zeros(&[0, 3]), &y).is_err());
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let clean = random_points(12, &mut rng);
        let mut adv = clean.clone();
        // Push points slightly off their anchors so no pair coincides.
        for v in adv.data_mut() {
            *v += rng.random_range(0.01..0.02);
        }
        let err = finite_diff_check(
            |x| {
                let (v, g, _) = d_chamfer_grad(x, &clean)?;
                Ok((v, g))
            },
            &adv,
            1e-7,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn hausdorff_is_one_sided() {
        let a = Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 3.0, 0.0, 0.0]).unwrap();
        let b = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert_eq!(d_hausdorff(&a, &b).unwrap(), 3.0);
        // Reversed order: the single point of b is covered by a.
        assert_eq!(d_hausdorff(&b, &a).unwrap(), 0.0);
        assert_eq!(d_hausdorff(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hausdorff_gradient_matches_finite_differences_at_the_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let clean = random_points(10, &mut rng);
        let mut adv = clean.clone();
        for v in adv.data_mut() {
            *v += rng.random_range(0.005..0.03);
        }
        let (value, grad, _) = d_hausdorff_grad(&adv, &clean).unwrap();
        assert!(value > 0.0);
        // Exactly one row carries gradient.
        let nonzero_rows = (0..grad.rows())
            .filter(|&r| grad.row(r).iter().any(|&v| v != 0.0))
            .count();
        assert_eq!(nonzero_rows, 1);
        let err = finite_diff_check(
            |x| {
                let (v, g, _) = d_hausdorff_grad(x, &clean)?;
                Ok((v, g))
            },
            &adv,
            1e-7,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }
}
