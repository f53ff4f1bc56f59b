//! Aggregate cross-validation and remove-and-retrain artifacts into
//! `report.json`, `gi_table.csv`, `cwri_heatmap.csv` and SVG plots.

use std::fs;
use std::path::{Path, PathBuf};

use cafo_core::data::GroundTruthMask;
use cafo_core::error::{CafoError, Result};
use cafo_core::harness::{read_roar_csv, read_run_attentions};
use cafo_core::metrics::{
    abc, calinski_harabasz, cwri, da_at_20, da_removal_count, global_importance, gt_agreement,
    rank_correlations, rank_descending, weighted_drop, GtVariant, RoarCurve,
};
use cafo_core::qr::class_prototypes;
use cafo_core::Tensor;

use crate::svg::{LinePlot, Series};

/// One fold's artifacts loaded back from a run directory.
pub struct FoldArtifacts {
    pub dir: PathBuf,
    pub attentions: Tensor,
    pub labels: Vec<usize>,
    pub feature_names: Vec<String>,
    pub test_accuracy: f64,
}

/// Load every `fold_*` run directory under `runs`, requiring at least one.
pub fn load_runs(runs: &Path) -> Result<Vec<FoldArtifacts>> {
    if !runs.is_dir() {
        return Err(CafoError::MissingInput(runs.display().to_string()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map_or(false, |n| n.starts_with("fold_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CafoError::MissingInput(format!(
            "{} contains no fold_* run directories",
            runs.display()
        )));
    }
    let mut out = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let (attentions, labels, feature_names, test_accuracy) = read_run_attentions(&dir)?;
        out.push(FoldArtifacts { dir, attentions, labels, feature_names, test_accuracy });
    }
    Ok(out)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Build the full report into `out`. The ROAR curve feeds the ABC/DA/WDA
/// entries; the fold runs feed GI, CWRI, consistency and separability.
pub fn build_report(
    runs: &Path,
    roar_dir: &Path,
    gt: &GroundTruthMask,
    out: &Path,
) -> Result<()> {
    let folds = load_runs(runs)?;
    let roar_csv = roar_dir.join("roar_curve.csv");
    let curve = read_roar_csv(&roar_csv)?;

    fs::create_dir_all(out)?;

    // GI per fold, averaged before ranking
    let d = folds[0].attentions.shape()[1];
    let mut gi_mean = vec![0.0; d];
    let mut gi_ranks = Vec::new();
    for f in &folds {
        let report = global_importance(&f.attentions)?;
        for (m, v) in gi_mean.iter_mut().zip(&report.gi) {
            *m += v;
        }
        gi_ranks.push(report.rank_desc);
    }
    for m in gi_mean.iter_mut() {
        *m /= folds.len() as f64;
    }
    let gi_rank = rank_descending(&gi_mean);
    let (spearman, kendall) = rank_correlations(&gi_ranks)?;

    // CWRI per fold, scores averaged, then binarized and scored
    let c = folds[0].labels.iter().max().map_or(0, |&m| m + 1);
    let mut cwri_mean = vec![0.0; c * d];
    let mut fold_f1 = Vec::new();
    let mut fold_jaccard = Vec::new();
    let mut fold_iacc = Vec::new();
    let mut fold_variants = Vec::new();
    let mut fold_ch = Vec::new();
    for f in &folds {
        let proto = class_prototypes(&f.attentions, &f.labels)?;
        if proto.class_ids.len() != c {
            return Err(CafoError::DataFormat(format!(
                "{}: test attentions cover {} of {} classes",
                f.dir.display(),
                proto.class_ids.len(),
                c
            )));
        }
        let m = cwri(&proto.matrix)?;
        for (acc, v) in cwri_mean.iter_mut().zip(m.scores.data()) {
            *acc += v;
        }
        let agreement = gt_agreement(&m.binarized, gt)?;
        fold_f1.push(agreement.f1);
        fold_jaccard.push(agreement.jaccard);
        fold_iacc.push(agreement.iacc);
        fold_variants.push(match agreement.variant {
            GtVariant::A => "A",
            GtVariant::B => "B",
        });
        fold_ch.push(calinski_harabasz(&f.attentions, &f.labels)?);
    }
    for v in cwri_mean.iter_mut() {
        *v /= folds.len() as f64;
    }

    let abc_value = abc(&curve)?;
    let da_value = da_at_20(&curve)?;
    let wda_value = weighted_drop(curve.truth_acc[0], &curve.truth_acc)?;
    let accs: Vec<f64> = folds.iter().map(|f| f.test_accuracy).collect();

    let report = serde_json::json!({
        "abc": abc_value,
        "abc_x_axis": "fraction of features removed (normalized to [0, 1])",
        "da": da_value,
        "da_removal_count": da_removal_count(curve.removed.len()),
        "wda": wda_value,
        "spearman": spearman,
        "kendall": kendall,
        "f1": mean(&fold_f1),
        "jaccard": mean(&fold_jaccard),
        "iacc": mean(&fold_iacc),
        "gt_variant_per_fold": fold_variants,
        "calinski_harabasz": mean(&fold_ch),
        "mean_test_accuracy": mean(&accs),
        "per_fold_test_accuracy": accs,
        "per_fold_f1": fold_f1,
        "num_folds": folds.len(),
    });
    fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;

    // gi_table.csv: one row per feature with its mean GI and rank position
    let names = &folds[0].feature_names;
    let mut gi_table = String::from("feature,gi_mean,rank\n");
    let mut position = vec![0usize; d];
    for (pos, &f) in gi_rank.iter().enumerate() {
        position[f] = pos;
    }
    for j in 0..d {
        gi_table.push_str(&format!("{},{},{}\n", names[j], gi_mean[j], position[j]));
    }
    fs::write(out.join("gi_table.csv"), gi_table)?;

    // cwri_heatmap.csv: C rows by D feature columns of mean scores
    let mut heatmap = String::from("class");
    for name in names {
        heatmap.push_str(&format!(",{}", name));
    }
    heatmap.push('\n');
    for ci in 0..c {
        heatmap.push_str(&format!("{}", ci));
        for j in 0..d {
            heatmap.push_str(&format!(",{}", cwri_mean[ci * d + j]));
        }
        heatmap.push('\n');
    }
    fs::write(out.join("cwri_heatmap.csv"), heatmap)?;

    fs::write(out.join("roar_curve.svg"), roar_svg(&curve, abc_value))?;

    // GI trajectory plot from the first fold's csv, if present
    let traj_csv = folds[0].dir.join("gi_trajectory.csv");
    if traj_csv.exists() {
        let svg = trajectory_svg(&fs::read_to_string(traj_csv)?, names);
        fs::write(out.join("gi_trajectory.svg"), svg)?;
    }
    Ok(())
}

pub fn roar_svg(curve: &RoarCurve, abc_value: f64) -> String {
    let truth: Vec<(f64, f64)> = curve
        .removed
        .iter()
        .zip(&curve.truth_acc)
        .map(|(&r, &a)| (r as f64, a))
        .collect();
    let inverse: Vec<(f64, f64)> = curve
        .removed
        .iter()
        .zip(&curve.inverse_acc)
        .map(|(&r, &a)| (r as f64, a))
        .collect();
    LinePlot {
        title: "Remove-and-retrain accuracy",
        x_label: "features removed",
        y_label: "test accuracy",
        series: vec![
            Series { label: "Inverse", color: "#1f77b4", points: inverse },
            Series { label: "Truth", color: "#d62728", points: truth },
        ],
        shade_between: true,
        annotation: Some(format!("ABC = {:.4}", abc_value)),
    }
    .render()
}

fn trajectory_svg(csv: &str, names: &[String]) -> String {
    let mut per_feature: Vec<Vec<(f64, f64)>> = vec![Vec::new(); names.len()];
    for (i, line) in csv.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let epoch: f64 = fields[0].parse().unwrap_or(0.0);
        for (j, raw) in fields.iter().skip(1).enumerate() {
            if j < per_feature.len() {
                if let Ok(v) = raw.parse::<f64>() {
                    per_feature[j].push((epoch, v));
                }
            }
        }
    }
    let series: Vec<Series> = per_feature
        .iter()
        .enumerate()
        .map(|(j, points)| {
            let pseudo = names[j].starts_with("pseudo_");
            Series {
                label: if pseudo { names[j].as_str() } else { "" },
                color: if pseudo { "#d62728" } else { "#999999" },
                points: points.clone(),
            }
        })
        .collect();
    LinePlot {
        title: "Global importance per epoch",
        x_label: "epoch",
        y_label: "GI",
        series,
        shade_between: false,
        annotation: None,
    }
    .render()
}
