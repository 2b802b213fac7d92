//! Evaluation: success rates, cost/contribution displacement histograms,
//! ablation and sweep grids, and CSV/JSON report emission.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{random_perturbation_baseline, run_attack, select_salient, AttackConfig};
use crate::data::PointCloud;
use crate::defense::{DefenseConfig, DefenseKind};
use crate::error::{Error, Result};
use crate::loss::{d_chamfer, d_hausdorff, d_l2, DistanceKind};
use crate::seeds;
use crate::tensor::{dist, Tensor};
use crate::victim::{predict_probs, VictimModel};

/// Distinguishes measured rows from literature-context rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Computed,
    /// A published full-scale result carried along for comparison — never
    /// produced by this toolkit's own runs.
    PaperReference,
}

impl RowKind {
    fn name(self) -> &'static str {
        match self {
            RowKind::Computed => "computed",
            RowKind::PaperReference => "paper_reference",
        }
    }
}

/// One grid cell (or one reference entry) of a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: RowKind,
    pub victim: String,
    pub distance: String,
    pub lambda: Option<f64>,
    pub defense: String,
    pub attack_variant: String,
    /// Success rate over clean-correct examples; `None` means the
    /// denominator was zero (written as "undefined" in CSV).
    pub asr: Option<f64>,
    pub mean_final_d: Option<f64>,
    pub mean_iterations: Option<f64>,
    /// Realized |S_p| / N averaged over examples (local attacks only).
    pub sp_proportion: Option<f64>,
    pub note: String,
}

/// One displacement interval of the cost/contribution histogram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count_share: f64,
    pub cost_share: f64,
    pub contribution_share: f64,
}

/// Ten-bin summary of where displacement, budget, and attack effect live.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
    /// True when no point moved, in which case every share is zero.
    pub all_unmoved: bool,
}

/// What a grid variant actually runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VariantSpec {
    Attack { config: AttackConfig },
    /// The uniform-noise baseline at a fixed budget.
    Noise { distance: DistanceKind, lambda: f64 },
}

/// A named column of the evaluation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridVariant {
    pub name: String,
    pub spec: VariantSpec,
}

/// Everything needed to reproduce a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub toolkit_version: String,
    pub seed: u64,
    pub dataset: String,
    pub variants: Vec<GridVariant>,
    pub defenses: Vec<DefenseConfig>,
}

/// The full evaluation artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Pooled over every adversarial cloud the grid's attack variants
    /// produced (equal weight per moved cloud).
    pub histogram: Histogram,
    pub provenance: Provenance,
}

/// Flipped fraction among clean-correct examples. Returns `None` when no
/// example was clean-correct (an undefined rate, deliberately distinct
/// from zero).
pub fn attack_success_rate(
    adv_preds: &[usize],
    clean_preds: &[usize],
    labels: &[usize],
) -> Result<Option<f64>> {
    if adv_preds.len() != clean_preds.len() || clean_preds.len() != labels.len() {
        return Err(Error::shape(
            "attack_success_rate",
            "three aligned lists of equal length",
            format!(
                "{} adv / {} clean / {} labels",
                adv_preds.len(),
                clean_preds.len(),
                labels.len()
            ),
        ));
    }
    let mut correct = 0usize;
    let mut flipped = 0usize;
    for i in 0..labels.len() {
        if clean_preds[i] == labels[i] {
            correct += 1;
            if adv_preds[i] != labels[i] {
                flipped += 1;
            }
        }
    }
    if correct == 0 {
        return Ok(None);
    }
    Ok(Some(flipped as f64 / correct as f64))
}

fn empty_bins(bins: usize) -> Vec<HistogramBin> {
    (0..bins)
        .map(|b| HistogramBin {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            count_share: 0.0,
            cost_share: 0.0,
            contribution_share: 0.0,
        })
        .collect()
}

/// Builds the displacement histogram for one attacked cloud.
///
/// Displacements are normalized by the cloud's own maximum; each point's
/// cost is its raw displacement and its contribution is the true-class
/// probability gain from restoring that single point to its clean
/// position (all other points untouched), clamped below at zero.
pub fn cost_contribution_histogram(
    model: &VictimModel,
    clean: &Tensor,
    adv: &Tensor,
    label: usize,
    bins: usize,
) -> Result<Histogram> {
    if clean.shape() != adv.shape() {
        return Err(Error::shape(
            "cost_contribution_histogram",
            format!("{:?}", clean.shape()),
            format!("{:?}", adv.shape()),
        ));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let n = clean.rows();
    let displacement: Vec<f64> = (0..n).map(|i| dist(adv.row(i), clean.row(i))).collect();
    let max_d = displacement.iter().cloned().fold(0.0, f64::max);
    let mut histogram = Histogram {
        bins: empty_bins(bins),
        all_unmoved: max_d == 0.0,
    };
    if histogram.all_unmoved {
        return Ok(histogram);
    }
    let adv_probs = predict_probs(model, adv)?;
    if label >= adv_probs.len() {
        return Err(Error::Index {
            context: "cost_contribution_histogram",
            index: label,
            len: adv_probs.len(),
        });
    }
    let y_adv = adv_probs.data()[label];
    let mut contributions = Vec::with_capacity(n);
    let mut probe = adv.clone();
    for i in 0..n {
        if displacement[i] == 0.0 {
            // Restoring an unmoved point is a no-op.
            contributions.push(0.0);
            continue;
        }
        let saved: Vec<f64> = probe.row(i).to_vec();
        probe.row_mut(i).copy_from_slice(clean.row(i));
        let y_restored = predict_probs(model, &probe)?.data()[label];
        probe.row_mut(i).copy_from_slice(&saved);
        contributions.push(f64::max(0.0, y_restored - y_adv));
    }
    let cost_total: f64 = displacement.iter().sum();
    let contribution_total: f64 = contributions.iter().sum();
    for i in 0..n {
        let normalized = displacement[i] / max_d;
        let idx = ((normalized * bins as f64) as usize).min(bins - 1);
        let bin = &mut histogram.bins[idx];
        bin.count_share += 1.0 / n as f64;
        bin.cost_share += displacement[i] / cost_total;
        if contribution_total > 0.0 {
            bin.contribution_share += contributions[i] / contribution_total;
        }
    }
    Ok(histogram)
}

/// Pools per-cloud histograms with equal weight per moved cloud; clouds
/// that never moved are skipped (and dominate only the `all_unmoved`
/// flag when nothing moved anywhere).
pub fn merge_histograms(histograms: &[Histogram]) -> Result<Histogram> {
    let bins = histograms.first().map_or(10, |h| h.bins.len());
    let mut merged = Histogram {
        bins: empty_bins(bins),
        all_unmoved: true,
    };
    let mut moved = 0usize;
    for h in histograms {
        if h.bins.len() != bins {
            return Err(Error::shape("merge_histograms", bins, h.bins.len()));
        }
        if h.all_unmoved {
            continue;
        }
        moved += 1;
        for (acc, bin) in merged.bins.iter_mut().zip(&h.bins) {
            acc.count_share += bin.count_share;
            acc.cost_share += bin.cost_share;
            acc.contribution_share += bin.contribution_share;
        }
    }
    if moved > 0 {
        merged.all_unmoved = false;
        for bin in &mut merged.bins {
            bin.count_share /= moved as f64;
            bin.cost_share /= moved as f64;
            bin.contribution_share /= moved as f64;
        }
    }
    Ok(merged)
}

/// The nine component-toggle patterns of the ablation: every combination
/// the original study reports, from the bare global baseline (group 1) to
/// the fully armed local attack (group 9).
pub fn ablation_variants(base: &AttackConfig) -> Vec<GridVariant> {
    // (use_score, use_cons, use_pwa, local)
    let groups = [
        (false, false, false, false),
        (true, false, false, false),
        (false, true, false, false),
        (false, false, true, false),
        (false, false, false, true),
        (true, true, false, false),
        (false, true, true, false),
        (false, false, true, true),
        (true, true, true, true),
    ];
    groups
        .iter()
        .enumerate()
        .map(|(i, &(use_score, use_cons, use_pwa, local))| GridVariant {
            name: format!("group{}", i + 1),
            spec: VariantSpec::Attack {
                config: AttackConfig {
                    use_score,
                    use_cons,
                    use_pwa,
                    local,
                    ..base.clone()
                },
            },
        })
        .collect()
}

/// The selection-size sweep: every (m, n) pair from the given lists.
pub fn sweep_variants(base: &AttackConfig, ms: &[usize], ns: &[usize]) -> Vec<GridVariant> {
    let mut variants = Vec::with_capacity(ms.len() * ns.len());
    for &m in ms {
        for &n in ns {
            variants.push(GridVariant {
                name: format!("sweep_m{m}_n{n}"),
                spec: VariantSpec::Attack {
                    config: AttackConfig {
                        m,
                        n,
                        local: true,
                        ..base.clone()
                    },
                },
            });
        }
    }
    variants
}

/// Literature-context rows: published full-scale results (1024-point
/// ModelNet40, the original victims), embedded verbatim for comparison
/// and clearly labeled so they are never mistaken for computed cells.
pub fn paper_reference_rows() -> Vec<ReportRow> {
    let blank = ReportRow {
        kind: RowKind::PaperReference,
        victim: String::new(),
        distance: String::new(),
        lambda: None,
        defense: String::new(),
        attack_variant: String::new(),
        asr: None,
        mean_final_d: None,
        mean_iterations: None,
        sp_proportion: None,
        note: String::new(),
    };
    vec![
        ReportRow {
            victim: "PointNet".into(),
            distance: "l2".into(),
            lambda: Some(0.001),
            defense: "none".into(),
            attack_variant: "l3a".into(),
            asr: Some(0.997),
            note: "published success rate at this budget".into(),
            ..blank.clone()
        },
        ReportRow {
            victim: "PointNet".into(),
            defense: "none".into(),
            attack_variant: "rp".into(),
            asr: Some(0.124),
            note: "published noise-baseline success rate".into(),
            ..blank.clone()
        },
        ReportRow {
            victim: "PointNet++".into(),
            defense: "none".into(),
            attack_variant: "rp".into(),
            asr: Some(0.094),
            note: "published noise-baseline success rate".into(),
            ..blank.clone()
        },
        ReportRow {
            victim: "DGCNN".into(),
            defense: "none".into(),
            attack_variant: "rp".into(),
            asr: Some(0.116),
            note: "published noise-baseline success rate".into(),
            ..blank.clone()
        },
        ReportRow {
            victim: "PointNet".into(),
            defense: "sor".into(),
            attack_variant: "l3a".into(),
            note: "published average success-rate drop under this defense: 7.2 percentage points".into(),
            ..blank.clone()
        },
        ReportRow {
            victim: "PointNet".into(),
            defense: "srs".into(),
            attack_variant: "l3a".into(),
            note: "published average success-rate drop under this defense: 0.1 percentage points".into(),
            ..blank.clone()
        },
        ReportRow {
            victim: "PointNet".into(),
            defense: "none".into(),
            attack_variant: "sweep_m50_n50".into(),
            asr: Some(0.968),
            sp_proportion: Some(0.3953),
            note: "published selection-sweep cell at m=50, n=50".into(),
            ..blank.clone()
        },
        ReportRow {
            attack_variant: "global-base".into(),
            note: "published displacement histogram: over 46% of points land in the 0.1-0.3 band".into(),
            ..blank.clone()
        },
        ReportRow {
            attack_variant: "l3a".into(),
            note: "published displacement histogram: over 78% of points land below 0.3".into(),
            ..blank
        },
    ]
}

struct VariantOutcome {
    adv_clouds: Vec<Tensor>,
    adv_preds: Vec<usize>,
    mean_final_d: Option<f64>,
    mean_iterations: Option<f64>,
    sp_proportion: Option<f64>,
    histograms: Vec<Histogram>,
}

fn variant_distance(spec: &VariantSpec) -> (DistanceKind, f64) {
    match spec {
        VariantSpec::Attack { config } => (config.distance, config.lambda),
        VariantSpec::Noise { distance, lambda } => (*distance, *lambda),
    }
}

fn run_variant(
    model: &VictimModel,
    clouds: &[PointCloud],
    clean_preds: &[usize],
    variant: &GridVariant,
    variant_idx: usize,
    seed: u64,
) -> Result<VariantOutcome> {
    let mut adv_clouds = Vec::with_capacity(clouds.len());
    let mut histograms = Vec::with_capacity(clouds.len());
    let mut d_sum = 0.0;
    let mut iter_sum = 0.0;
    let mut counted = 0usize;
    let mut sp_sum = 0.0;
    let mut sp_counted = false;
    match &variant.spec {
        VariantSpec::Attack { config } => {
            for cloud in clouds {
                let result = run_attack(model, cloud, config)?;
                if config.local {
                    let mask = select_salient(model, cloud, config.m, config.n)?;
                    let size = mask.iter().filter(|&&b| b).count();
                    sp_sum += size as f64 / cloud.points.rows() as f64;
                    sp_counted = true;
                }
                histograms.push(cost_contribution_histogram(
                    model,
                    &cloud.points,
                    &result.adversarial,
                    cloud.label,
                    10,
                )?);
                adv_clouds.push(result.adversarial);
                if result.clean_pred == cloud.label {
                    d_sum += result.final_d;
                    iter_sum += result.iterations_used as f64;
                    counted += 1;
                }
            }
        }
        VariantSpec::Noise { distance, lambda } => {
            for (cloud, &clean_pred) in clouds.iter().zip(clean_preds) {
                let example_seed = seeds::derive(
                    seed,
                    &[seeds::hash_str("noise"), variant_idx as u64, seeds::hash_str(&cloud.id)],
                );
                let moved =
                    random_perturbation_baseline(&cloud.points, *distance, *lambda, example_seed)?;
                histograms.push(cost_contribution_histogram(
                    model,
                    &cloud.points,
                    &moved,
                    cloud.label,
                    10,
                )?);
                if clean_pred == cloud.label {
                    d_sum += match distance {
                        DistanceKind::L2 => d_l2(&moved, &cloud.points)?,
                        DistanceKind::Chamfer => d_chamfer(&moved, &cloud.points)?,
                        DistanceKind::Hausdorff => d_hausdorff(&moved, &cloud.points)?,
                    };
                    counted += 1;
                }
                adv_clouds.push(moved);
            }
        }
    }
    let mut adv_preds = Vec::with_capacity(adv_clouds.len());
    for adv in &adv_clouds {
        adv_preds.push(predict_probs(model, adv)?.argmax());
    }
    Ok(VariantOutcome {
        adv_clouds,
        adv_preds,
        mean_final_d: (counted > 0).then(|| d_sum / counted as f64),
        mean_iterations: match &variant.spec {
            VariantSpec::Attack { .. } if counted > 0 => Some(iter_sum / counted as f64),
            _ => None,
        },
        sp_proportion: sp_counted.then(|| sp_sum / clouds.len() as f64),
        histograms,
    })
}

/// Runs every victim × variant × defense combination over the given
/// clouds. Attacks run once per victim × variant; defense rows re-classify
/// the same adversarial clouds. A variant that aborts on some example
/// marks all of its rows failed and the grid moves on.
pub fn run_grid(
    victims: &[(String, &VictimModel)],
    clouds: &[PointCloud],
    variants: &[GridVariant],
    defenses: &[DefenseConfig],
    seed: u64,
) -> Result<EvalReport> {
    for defense in defenses {
        defense.validate()?;
    }
    let labels: Vec<usize> = clouds.iter().map(|c| c.label).collect();
    let mut rows = Vec::new();
    let mut all_histograms = Vec::new();
    for (victim_idx, (victim_name, model)) in victims.iter().enumerate() {
        let mut clean_preds = Vec::with_capacity(clouds.len());
        for cloud in clouds {
            clean_preds.push(predict_probs(model, &cloud.points)?.argmax());
        }
        for (variant_idx, variant) in variants.iter().enumerate() {
            let (distance, lambda) = variant_distance(&variant.spec);
            let template = ReportRow {
                kind: RowKind::Computed,
                victim: victim_name.clone(),
                distance: distance.name().to_string(),
                lambda: Some(lambda),
                defense: String::new(),
                attack_variant: variant.name.clone(),
                asr: None,
                mean_final_d: None,
                mean_iterations: None,
                sp_proportion: None,
                note: String::new(),
            };
            match run_variant(model, clouds, &clean_preds, variant, variant_idx, seed) {
                Ok(outcome) => {
                    if matches!(variant.spec, VariantSpec::Attack { .. }) {
                        all_histograms.extend(outcome.histograms.iter().cloned());
                    }
                    for (defense_idx, defense) in defenses.iter().enumerate() {
                        let defended_preds = if defense.kind == DefenseKind::None {
                            outcome.adv_preds.clone()
                        } else {
                            let mut preds = Vec::with_capacity(outcome.adv_clouds.len());
                            for (cloud, adv) in clouds.iter().zip(&outcome.adv_clouds) {
                                let defense_seed = seeds::derive(
                                    seed,
                                    &[
                                        seeds::hash_str("defense"),
                                        victim_idx as u64,
                                        variant_idx as u64,
                                        defense_idx as u64,
                                        seeds::hash_str(&cloud.id),
                                    ],
                                );
                                let defended = defense.apply(adv, defense_seed)?;
                                preds.push(predict_probs(model, &defended)?.argmax());
                            }
                            preds
                        };
                        rows.push(ReportRow {
                            defense: defense.kind.name().to_string(),
                            asr: attack_success_rate(&defended_preds, &clean_preds, &labels)?,
                            mean_final_d: outcome.mean_final_d,
                            mean_iterations: outcome.mean_iterations,
                            sp_proportion: outcome.sp_proportion,
                            ..template.clone()
                        });
                    }
                }
                Err(err) => {
                    for defense in defenses {
                        rows.push(ReportRow {
                            defense: defense.kind.name().to_string(),
                            note: format!("failed: {err}"),
                            ..template.clone()
                        });
                    }
                }
            }
        }
    }
    Ok(EvalReport {
        rows,
        histogram: merge_histograms(&all_histograms)?,
        provenance: Provenance {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            dataset: format!("{} clouds", clouds.len()),
            variants: variants.to_vec(),
            defenses: defenses.to_vec(),
        },
    })
}

/// Output encodings for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders the full report as JSON (pretty, trailing newline), suitable
/// for byte-identical re-emission.
pub fn report_to_json(report: &EvalReport) -> Result<String> {
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("report serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Writes the report to disk. CSV holds the row table (with seed and
/// version columns for provenance); JSON mirrors the whole report
/// including the histogram and full config echo.
pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Json => {
            fs::write(path, report_to_json(report)?)
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))
        }
        ReportFormat::Csv => {
            let mut writer = csv::WriterBuilder::new()
                .from_path(path)
                .map_err(|e| Error::Data(format!("opening {}: {e}", path.display())))?;
            writer
                .write_record([
                    "kind",
                    "victim",
                    "distance",
                    "lambda",
                    "defense",
                    "attack_variant",
                    "asr",
                    "mean_final_d",
                    "mean_iterations",
                    "sp_proportion",
                    "seed",
                    "toolkit_version",
                    "note",
                ])
                .and_then(|_| {
                    for row in &report.rows {
                        writer.write_record([
                            row.kind.name().to_string(),
                            row.victim.clone(),
                            row.distance.clone(),
                            opt_cell(row.lambda),
                            row.defense.clone(),
                            row.attack_variant.clone(),
                            row.asr
                                .map(|x| x.to_string())
                                .unwrap_or_else(|| "undefined".into()),
                            opt_cell(row.mean_final_d),
                            opt_cell(row.mean_iterations),
                            opt_cell(row.sp_proportion),
                            report.provenance.seed.to_string(),
                            report.provenance.toolkit_version.clone(),
                            row.note.clone(),
                        ])?;
                    }
                    writer.flush()?;
                    Ok(())
                })
                .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
        }
    }
}
