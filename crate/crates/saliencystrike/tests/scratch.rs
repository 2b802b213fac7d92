use saliencystrike::attack::{
    random_perturbation_baseline, run_attack, AttackConfig,
};
use saliencystrike::data::load_dataset;
use saliencystrike::victim::{accuracy, build_model, predict_probs, train, Arch, TrainConfig};

#[test]
#[ignore]
fn exp_mn_grid() {
    let dataset = load_dataset("/tmp/bench/data".as_ref()).unwrap();
    for seed in [1u64, 2, 3] {
        let mut model = build_model(Arch::PointnetMini, 8, &[32, 64], None, seed).unwrap();
        let tc = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        train(&mut model, &dataset, &tc).unwrap();
        let acc = accuracy(&model, &dataset.test).unwrap();

        // Random-perturbation baseline at the same budget.
        let base = AttackConfig::default();
        let (mut rp_wins, mut total) = (0usize, 0usize);
        for cloud in &dataset.test {
            if predict_probs(&model, &cloud.points).unwrap().argmax() != cloud.label {
                continue;
            }
            total += 1;
            let moved = random_perturbation_baseline(
                &cloud.points,
                base.distance,
                base.lambda,
                seed ^ 0x5eed,
            )
            .unwrap();
            if predict_probs(&model, &moved).unwrap().argmax() != cloud.label {
                rp_wins += 1;
            }
        }
        println!(
            "seed {seed}: acc {acc:.4}  RP {:.4} ({rp_wins}/{total})",
            rp_wins as f64 / total as f64
        );

        for (m, n) in [(16usize, 8usize), (16, 16), (16, 24), (24, 16), (32, 8)] {
            let cfg = AttackConfig {
                m,
                n,
                ..AttackConfig::default()
            };
            let mut wins = 0usize;
            let mut per_class = [0usize; 8];
            let mut per_class_n = [0usize; 8];
            for cloud in &dataset.test {
                if predict_probs(&model, &cloud.points).unwrap().argmax() != cloud.label {
                    continue;
                }
                per_class_n[cloud.label] += 1;
                let r = run_attack(&model, cloud, &cfg).unwrap();
                if r.success {
                    wins += 1;
                    per_class[cloud.label] += 1;
                }
            }
            let per: Vec<String> = (0..8)
                .map(|c| format!("{}/{}", per_class[c], per_class_n[c]))
                .collect();
            println!(
                "  m{m:2} n{n:2}: ASR {:.4} ({wins}/{total})  {}",
                wins as f64 / total as f64,
                per.join(" ")
            );
        }
    }
}
