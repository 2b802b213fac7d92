//! Input-sanitization defenses applied to clouds before re-classification.
//! Both return row subsets of their input — coordinates are never edited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dist_sq, Tensor};

/// Which sanitization step to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefenseKind {
    None,
    Srs,
    Sor,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 3] = [DefenseKind::None, DefenseKind::Srs, DefenseKind::Sor];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Srs => "srs",
            DefenseKind::Sor => "sor",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(DefenseKind::None),
            "srs" => Ok(DefenseKind::Srs),
            "sor" => Ok(DefenseKind::Sor),
            other => Err(Error::Config(format!("unknown defense {other:?}"))),
        }
    }
}

/// Defense selection plus the parameters of both methods.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// Fraction of points random sampling drops.
    pub srs_drop_ratio: f64,
    /// Neighbourhood size for outlier statistics.
    pub sor_k: usize,
    /// Standard-deviation multiplier in the outlier threshold.
    pub sor_alpha: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            kind: DefenseKind::None,
            srs_drop_ratio: 0.125,
            sor_k: 2,
            sor_alpha: 1.1,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.srs_drop_ratio) {
            return Err(Error::Config(format!(
                "srs_drop_ratio must lie in [0, 1), got {}",
                self.srs_drop_ratio
            )));
        }
        if self.sor_k == 0 {
            return Err(Error::Config("sor_k must be >= 1".into()));
        }
        if !(self.sor_alpha >= 0.0) {
            return Err(Error::Config(format!(
                "sor_alpha must be >= 0, got {}",
                self.sor_alpha
            )));
        }
        Ok(())
    }

    /// Runs the configured defense on a cloud.
    pub fn apply(&self, points: &Tensor, seed: u64) -> Result<Tensor> {
        self.validate()?;
        match self.kind {
            DefenseKind::None => Ok(points.clone()),
            DefenseKind::Srs => srs(points, self.srs_drop_ratio, seed),
            DefenseKind::Sor => sor(points, self.sor_k, self.sor_alpha),
        }
    }
}

fn keep_rows(points: &Tensor, keep: &[bool]) -> Tensor {
    let survivors = keep.iter().filter(|&&b| b).count();
    let mut data = Vec::with_capacity(survivors * 3);
    for (i, &b) in keep.iter().enumerate() {
        if b {
            data.extend_from_slice(points.row(i));
        }
    }
    Tensor::matrix(survivors, 3, data).expect("kept rows are consistent")
}

/// Simple random sampling: uniformly removes `floor(drop_ratio * N)`
/// points without replacement, preserving the order of the survivors.
pub fn srs(points: &Tensor, drop_ratio: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&drop_ratio) {
        return Err(Error::Config(format!(
            "drop_ratio must lie in [0, 1), got {drop_ratio}"
        )));
    }
    let total = points.rows();
    let drop = (drop_ratio * total as f64).floor() as usize;
    if total - drop == 0 {
        return Err(Error::Data("random sampling would leave an empty cloud".into()));
    }
    if drop == 0 {
        return Ok(points.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let removed = rand::seq::index::sample(&mut rng, total, drop);
    let mut keep = vec![true; total];
    for idx in removed {
        keep[idx] = false;
    }
    Ok(keep_rows(points, &keep))
}

/// Statistical outlier removal: drops every point whose mean distance to
/// its `k` nearest neighbours (itself excluded) exceeds
/// `mean + alpha * std` of those per-point means, preserving order.
pub fn sor(points: &Tensor, k: usize, alpha: f64) -> Result<Tensor> {
    let total = points.rows();
    if k == 0 {
        return Err(Error::Config("sor needs k >= 1".into()));
    }
    if k >= total {
        return Err(Error::Capacity(format!(
            "sor needs k < N, got k={k} for a {total}-point cloud"
        )));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let mut mean_dists = Vec::with_capacity(total);
    let mut others: Vec<f64> = Vec::with_capacity(total - 1);
    for i in 0..total {
        others.clear();
        for j in 0..total {
            if j != i {
                others.push(dist_sq(points.row(i), points.row(j)));
            }
        }
        others.sort_by(f64::total_cmp);
        let sum: f64 = others[..k].iter().map(|d| d.sqrt()).sum();
        mean_dists.push(sum / k as f64);
    }
    let mean = mean_dists.iter().sum::<f64>() / total as f64;
    // Sample standard deviation over the per-point means.
    let var = mean_dists
        .iter()
        .map(|d| (d - mean) * (d - mean))
        .sum::<f64>()
        / (total - 1) as f64;
    let threshold = mean + alpha * var.sqrt();
    let keep: Vec<bool> = mean_dists.iter().map(|&d| !(d > threshold)).collect();
    Ok(keep_rows(points, &keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shape, ShapeKind};
    use rand::Rng;

    fn indexed_cloud(n: usize) -> Tensor {
        // Distinct first coordinates so rows can be traced back.
        let data: Vec<f64> = (0..n).flat_map(|i| [i as f64, 0.5, -0.5]).collect();
        Tensor::matrix(n, 3, data).unwrap()
    }

    #[test]
    fn random_sampling_drops_the_floor_count() {
        let cloud = indexed_cloud(1024);
        let kept = srs(&cloud, 0.125, 5).unwrap();
        assert_eq!(kept.rows(), 896);
        let small = srs(&indexed_cloud(10), 0.19, 5).unwrap();
        assert_eq!(small.rows(), 9, "floor(0.19 * 10) = 1 point removed");
    }

    #[test]
    fn random_sampling_identity_determinism_and_order() {
        let cloud = indexed_cloud(64);
        let same = srs(&cloud, 0.0, 7).unwrap();
        assert_eq!(same.data(), cloud.data());
        let a = srs(&cloud, 0.25, 7).unwrap();
        let b = srs(&cloud, 0.25, 7).unwrap();
        assert_eq!(a.data(), b.data(), "same seed must keep the same survivors");
        let c = srs(&cloud, 0.25, 8).unwrap();
        assert_ne!(a.data(), c.data());
        // Survivors keep their relative order: traced indices ascend.
        let ids: Vec<f64> = (0..a.rows()).map(|r| a.at(r, 0)).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn random_sampling_rejects_full_drops() {
        let cloud = indexed_cloud(8);
        assert!(matches!(srs(&cloud, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(srs(&cloud, -0.1, 0), Err(Error::Config(_))));
        assert!(matches!(
            srs(&Tensor::zeros(&[0, 3]), 0.5, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn outlier_removal_catches_a_planted_far_point() {
        let sphere = gen_shape(ShapeKind::Sphere, 100, 0.0, 33).unwrap().points;
        let mut data = sphere.data().to_vec();
        data.extend_from_slice(&[10.0, 10.0, 10.0]);
        let cloud = Tensor::matrix(101, 3, data).unwrap();
        let kept = sor(&cloud, 2, 1.1).unwrap();
        assert_eq!(kept.rows(), 100, "exactly the planted point is removed");
        assert_eq!(&kept.data()[..300], &cloud.data()[..300], "survivors keep order and bits");
    }

    #[test]
    fn outlier_removal_matches_a_brute_force_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for trial in 0..6 {
            let n = 40 + trial * 7;
            let data: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cloud = Tensor::matrix(n, 3, data).unwrap();
            let k = 3;
            let alpha = 0.8;
            // Oracle: full pairwise matrix, independent threshold arithmetic.
            let mut means = Vec::new();
            for i in 0..n {
                let mut ds: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| crate::tensor::dist(cloud.row(i), cloud.row(j)))
                    .collect();
                ds.sort_by(f64::total_cmp);
                means.push(ds[..k].iter().sum::<f64>() / k as f64);
            }
            let mean = means.iter().sum::<f64>() / n as f64;
            let std = (means.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let expected: Vec<usize> = (0..n).filter(|&i| means[i] <= mean + alpha * std).collect();
            let kept = sor(&cloud, k, alpha).unwrap();
            assert_eq!(kept.rows(), expected.len(), "trial {trial}");
            for (r, &i) in expected.iter().enumerate() {
                assert_eq!(kept.row(r), cloud.row(i), "trial {trial} row {r}");
            }
        }
    }

    #[test]
    fn outlier_removal_threshold_edge_cases() {
        let sphere = gen_shape(ShapeKind::Sphere, 50, 0.05, 4).unwrap().points;
        let huge = sor(&sphere, 2, 1e9).unwrap();
        assert_eq!(huge.data(), sphere.data(), "an unreachable threshold removes nothing");
        // A regular grid: every point's two nearest neighbours sit at the
        // grid spacing, so the distance statistics have zero variance.
        let mut grid = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    grid.extend_from_slice(&[x as f64, y as f64, z as f64]);
                }
            }
        }
        let grid = Tensor::matrix(27, 3, grid).unwrap();
        let kept = sor(&grid, 2, 0.1).unwrap();
        assert_eq!(kept.rows(), 27, "zero-variance statistics keep everything");
    }

    #[test]
    fn outlier_removal_validates_neighbourhood_size() {
        let cloud = indexed_cloud(5);
        assert!(matches!(sor(&cloud, 5, 1.0), Err(Error::Capacity(_))));
        assert!(matches!(sor(&cloud, 0, 1.0), Err(Error::Config(_))));
        assert!(sor(&cloud, 4, 1.0).is_ok());
    }

    #[test]
    fn defended_clouds_still_classify() {
        use crate::victim::{build_model, predict_probs, Arch};
        let model = build_model(Arch::PointnetMini, 4, &[8], None, 2).unwrap();
        let cloud = gen_shape(ShapeKind::Torus, 64, 0.01, 9).unwrap().points;
        for kind in DefenseKind::ALL {
            let cfg = DefenseConfig {
                kind,
                ..DefenseConfig::default()
            };
            let defended = cfg.apply(&cloud, 11).unwrap();
            assert!(defended.rows() >= 1 && defended.rows() <= 64);
            let probs = predict_probs(&model, &defended).unwrap();
            assert!((probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn defense_config_invariants() {
        let mut cfg = DefenseConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.srs_drop_ratio = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.srs_drop_ratio = 0.2;
        cfg.sor_k = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.sor_k = 2;
        cfg.sor_alpha = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
