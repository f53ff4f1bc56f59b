//! Command-line surface for the pipeline: dataset generation, pseudo-signal
//! injection, encoding, training, cross-validation, remove-and-retrain,
//! lambda sweeps, and report rendering.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.

mod report;
mod svg;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use cafo_core::data::Benchmark;
use cafo_core::encode::{EncoderConfig, EncoderKind, RpConfig};
use cafo_core::error::{CafoError, Result};
use cafo_core::harness::{
    aggregate_agreement, cross_validate, encode_with_cache, gi_consistency, lambda_sweep,
    pseudo_experiment, roar, train_fold, write_roar_csv, write_run_dir, TrainConfig,
};
use cafo_core::metrics::{abc, calinski_harabasz, da_at_20, weighted_drop};
use cafo_core::model::ConvBlock;
use cafo_core::synth::{gen_squidgame, inject_pseudo, PseudoKind, SquidGameConfig};

#[derive(Parser)]
#[command(
    name = "cafo",
    version,
    about = "Feature-centric explanation pipeline for multivariate time series"
)]
struct Cli {
    /// Worker threads: 0 = all cores, 1 = fully sequential.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    Generate {
        #[command(subcommand)]
        target: GenerateTarget,
    },
    /// Append label-independent pseudo feature columns to a dataset.
    InjectPseudo {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated kinds: wn, sin, gp.
        #[arg(long)]
        kinds: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Encode a dataset and report (and cache) the image stacks.
    Encode {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        enc: EncoderArgs,
    },
    /// Train a single fold.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Cross-validate: one run per fold, writing fold_<id> run directories.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Remove-and-retrain over a ranking taken from a cross-validation run.
    Roar {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding fold_* runs whose GI supplies the ordering.
        #[arg(long, value_name = "RUNS")]
        gi_from: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Inject pseudo features, train, and track their importance per epoch.
    Pseudo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "wn,sin,gp")]
        kinds: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Cross-validate once per lambda and tabulate the outcomes.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "0,0.1,0.2,0.5,1.0")]
        lambdas: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Aggregate run artifacts into report.json, CSV tables and SVG plots.
    Report {
        /// Directory with fold_* run directories.
        #[arg(long)]
        runs: PathBuf,
        /// Directory with roar_curve.csv.
        #[arg(long)]
        roar: PathBuf,
        /// Dataset directory (supplies ground_truth.json).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum GenerateTarget {
    Squidgame {
        #[arg(long, default_value_t = 2000)]
        n_per_class: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 4.0)]
        signal_amplitude: f64,
        #[arg(long, default_value_t = 0.1)]
        freq_lo: f64,
        #[arg(long, default_value_t = 0.45)]
        freq_hi: f64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
}

#[derive(Args, Clone)]
struct EncoderArgs {
    /// Image encoder.
    #[arg(long, value_parser = ["rp", "gaf"], default_value = "rp")]
    encoder: String,
    #[arg(long, default_value_t = 1)]
    rp_tau: usize,
    #[arg(long, default_value_t = 1)]
    rp_m: usize,
    #[arg(long, default_value_t = 0.10)]
    rp_eps_frac: f64,
}

impl EncoderArgs {
    fn to_config(&self) -> EncoderConfig {
        EncoderConfig {
            kind: if self.encoder == "gaf" { EncoderKind::Gaf } else { EncoderKind::Rp },
            rp: RpConfig { tau: self.rp_tau, m: self.rp_m, epsilon_fraction: self.rp_eps_frac },
        }
    }
}

/// Training hyperparameters; explicit flags override the config file, which
/// overrides the built-in defaults.
#[derive(Args, Clone)]
struct HyperArgs {
    /// JSON config file with the same keys as these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["rp", "gaf"])]
    encoder: Option<String>,
    #[arg(long)]
    rp_tau: Option<usize>,
    #[arg(long)]
    rp_m: Option<usize>,
    #[arg(long)]
    rp_eps_frac: Option<f64>,
    /// Depthwise filters per input channel in the attention head.
    #[arg(long)]
    gamma: Option<usize>,
}

/// File-level settings; unknown keys are rejected.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    lambda: Option<f64>,
    seed: Option<u64>,
    encoder: Option<String>,
    rp_tau: Option<usize>,
    rp_m: Option<usize>,
    rp_eps_frac: Option<f64>,
    gamma: Option<usize>,
    kernel_size: Option<usize>,
    backbone_channels: Option<Vec<usize>>,
    backbone_stride: Option<usize>,
    hidden_width: Option<usize>,
}

impl HyperArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|_| CafoError::MissingInput(path.display().to_string()))?;
            let file: FileConfig = serde_json::from_str(&text)
                .map_err(|e| CafoError::InvalidConfig(format!("config file: {}", e)))?;
            apply_file(&mut cfg, &file)?;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(kind) = &self.encoder {
            cfg.encoder.kind = if kind == "gaf" { EncoderKind::Gaf } else { EncoderKind::Rp };
        }
        if let Some(v) = self.rp_tau {
            cfg.encoder.rp.tau = v;
        }
        if let Some(v) = self.rp_m {
            cfg.encoder.rp.m = v;
        }
        if let Some(v) = self.rp_eps_frac {
            cfg.encoder.rp.epsilon_fraction = v;
        }
        if let Some(v) = self.gamma {
            cfg.model.depca.gamma = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_file(cfg: &mut TrainConfig, file: &FileConfig) -> Result<()> {
    if let Some(v) = file.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = file.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = file.lr {
        cfg.lr = v;
    }
    if let Some(v) = file.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = file.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = file.seed {
        cfg.seed = v;
    }
    if let Some(kind) = &file.encoder {
        cfg.encoder.kind = match kind.as_str() {
            "rp" => EncoderKind::Rp,
            "gaf" => EncoderKind::Gaf,
            other => {
                return Err(CafoError::InvalidConfig(format!("unknown encoder {:?}", other)))
            }
        };
    }
    if let Some(v) = file.rp_tau {
        cfg.encoder.rp.tau = v;
    }
    if let Some(v) = file.rp_m {
        cfg.encoder.rp.m = v;
    }
    if let Some(v) = file.rp_eps_frac {
        cfg.encoder.rp.epsilon_fraction = v;
    }
    if let Some(v) = file.gamma {
        cfg.model.depca.gamma = v;
    }
    if let Some(v) = file.kernel_size {
        cfg.model.depca.kernel_size = v;
        cfg.model.depca.padding = (v - 1) / 2;
    }
    if let Some(channels) = &file.backbone_channels {
        let stride = file.backbone_stride.unwrap_or(2);
        cfg.model.backbone.conv_blocks = channels
            .iter()
            .map(|&c| ConvBlock { out_channels: c, kernel_size: 3, stride })
            .collect();
    }
    if let Some(h) = file.hidden_width {
        cfg.model.backbone.hidden_width = Some(h);
    }
    Ok(())
}

fn parse_kinds(raw: &str) -> Result<Vec<PseudoKind>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(PseudoKind::parse)
        .collect()
}

fn parse_lambdas(raw: &str) -> Result<Vec<f64>> {
    let values: std::result::Result<Vec<f64>, _> =
        raw.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse()).collect();
    let values =
        values.map_err(|_| CafoError::InvalidConfig(format!("bad lambda list {:?}", raw)))?;
    if values.is_empty() || values.iter().any(|&l| l < 0.0) {
        return Err(CafoError::InvalidConfig("lambdas must be non-negative".into()));
    }
    Ok(values)
}

fn cv_aggregate(
    records: &[cafo_core::harness::RunRecord],
    bench: &Benchmark,
) -> Result<serde_json::Value> {
    let accs: Vec<f64> = records.iter().map(|r| r.test_accuracy).collect();
    let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
    let (spearman, kendall) = if records.len() >= 2 {
        gi_consistency(records)?
    } else {
        (f64::NAN, f64::NAN)
    };
    let offdiag: Vec<f64> = records.iter().map(|r| r.final_val_offdiag()).collect();
    let ch: Vec<f64> = records
        .iter()
        .map(|r| calinski_harabasz(&r.test_attentions, &r.test_labels))
        .collect::<Result<_>>()?;
    let agreement = match &bench.ground_truth {
        Some(gt) => Some(aggregate_agreement(records, gt)?),
        None => None,
    };
    Ok(serde_json::json!({
        "mean_test_accuracy": mean_acc,
        "per_fold_test_accuracy": accs,
        "spearman": spearman,
        "kendall": kendall,
        "final_val_qr_offdiag": offdiag,
        "calinski_harabasz": ch,
        "agreement": agreement,
    }))
}

fn run(cli: Cli) -> Result<()> {
    cafo_core::parallel::configure_threads(cli.threads);
    match cli.command {
        Command::Generate { target } => match target {
            GenerateTarget::Squidgame {
                n_per_class,
                seed,
                out,
                noise_sigma,
                signal_amplitude,
                freq_lo,
                freq_hi,
                test_fraction,
                folds,
            } => {
                let cfg = SquidGameConfig {
                    n_per_class,
                    seed,
                    noise_sigma,
                    signal_amplitude,
                    signal_freq_range: (freq_lo, freq_hi),
                    test_fraction,
                    num_folds: folds,
                    ..SquidGameConfig::default()
                };
                let bench = gen_squidgame(&cfg)?;
                bench.save(&out)?;
                println!(
                    "generated squidgame: {} train + {} test instances, T={}, D={}, C={} -> {}",
                    bench.train.len(),
                    bench.test.len(),
                    bench.train.time_steps(),
                    bench.train.num_features(),
                    bench.train.num_classes,
                    out.display()
                );
            }
        },
        Command::InjectPseudo { data, kinds, out, seed } => {
            let kinds = parse_kinds(&kinds)?;
            let bench = Benchmark::load(&data)?;
            let injected = Benchmark {
                train: inject_pseudo(&bench.train, &kinds, cafo_core::rng::splitmix64(seed ^ 1))?,
                test: inject_pseudo(&bench.test, &kinds, cafo_core::rng::splitmix64(seed ^ 2))?,
                ground_truth: None,
            };
            injected.save(&out)?;
            println!(
                "injected {} pseudo feature(s): D {} -> {} ({})",
                kinds.len(),
                bench.train.num_features(),
                injected.train.num_features(),
                out.display()
            );
        }
        Command::Encode { data, enc } => {
            let bench = Benchmark::load(&data)?;
            let cfg = enc.to_config();
            let train_stacks = encode_with_cache(&bench.train, &cfg)?;
            let test_stacks = encode_with_cache(&bench.test, &cfg)?;
            println!(
                "encoded {} train + {} test stacks with {}: D={}, L={}{}",
                train_stacks.len(),
                test_stacks.len(),
                cfg.kind,
                train_stacks.first().map_or(0, |s| s.num_channels()),
                train_stacks.first().map_or(0, |s| s.side()),
                match std::env::var_os("CAFO_CACHE_DIR") {
                    Some(dir) => format!(" (cached under {})", PathBuf::from(dir).display()),
                    None => String::new(),
                }
            );
        }
        Command::Train { data, fold, out, hyper } => {
            let cfg = hyper.resolve()?;
            let bench = Benchmark::load(&data)?;
            if !bench.train.fold_ids().contains(&fold) {
                return Err(CafoError::InvalidConfig(format!(
                    "fold {} not present in the dataset (available: {:?})",
                    fold,
                    bench.train.fold_ids()
                )));
            }
            let train_stacks = encode_with_cache(&bench.train, &cfg.encoder)?;
            let test_stacks = encode_with_cache(&bench.test, &cfg.encoder)?;
            let record =
                train_fold(&bench.train, &bench.test, &train_stacks, &test_stacks, fold, &cfg)?;
            write_run_dir(&out, &record)?;
            println!(
                "fold {}: test accuracy {:.4} -> {}",
                fold,
                record.test_accuracy,
                out.display()
            );
        }
        Command::Cv { data, out, hyper } => {
            let cfg = hyper.resolve()?;
            let bench = Benchmark::load(&data)?;
            let records = cross_validate(&bench.train, &bench.test, &cfg)?;
            for record in &records {
                write_run_dir(&out.join(format!("fold_{}", record.fold_id)), record)?;
            }
            let aggregate = cv_aggregate(&records, &bench)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("aggregate.json"), serde_json::to_vec_pretty(&aggregate)?)?;
            println!(
                "cross-validation over {} folds: mean test accuracy {:.4} -> {}",
                records.len(),
                aggregate["mean_test_accuracy"].as_f64().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Roar { data, gi_from, out, hyper } => {
            let cfg = hyper.resolve()?;
            let bench = Benchmark::load(&data)?;
            let folds = report::load_runs(&gi_from)?;
            let d = bench.train.num_features();
            if folds[0].attentions.shape()[1] != d {
                return Err(CafoError::DataFormat(format!(
                    "runs in {} cover {} features, dataset has {}",
                    gi_from.display(),
                    folds[0].attentions.shape()[1],
                    d
                )));
            }
            let mut gi_mean = vec![0.0; d];
            for f in &folds {
                let gi = cafo_core::metrics::global_importance(&f.attentions)?.gi;
                for (m, v) in gi_mean.iter_mut().zip(gi) {
                    *m += v;
                }
            }
            for m in gi_mean.iter_mut() {
                *m /= folds.len() as f64;
            }
            let rank = cafo_core::metrics::rank_descending(&gi_mean);
            let curve = roar(&bench.train, &bench.test, &cfg, &rank)?;
            fs::create_dir_all(&out)?;
            write_roar_csv(&out.join("roar_curve.csv"), &curve)?;
            let abc_value = abc(&curve)?;
            let da_value = da_at_20(&curve)?;
            let wda_value = weighted_drop(curve.truth_acc[0], &curve.truth_acc)?;
            let report = serde_json::json!({
                "abc": abc_value,
                "abc_x_axis": "fraction of features removed (normalized to [0, 1])",
                "da": da_value,
                "wda": wda_value,
                "base_accuracy": curve.truth_acc[0],
                "retrains": 2 * d,
                "gi_rank": rank,
            });
            fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
            println!(
                "roar over {} retrains: ABC {:.4}, DA {:.3}, WDA {:.4} -> {}",
                2 * d,
                abc_value,
                da_value,
                wda_value,
                out.display()
            );
        }
        Command::Pseudo { data, kinds, out, hyper } => {
            let cfg = hyper.resolve()?;
            let kinds = parse_kinds(&kinds)?;
            let bench = Benchmark::load(&data)?;
            let outcome = pseudo_experiment(&bench.train, &bench.test, &cfg, &kinds)?;
            let mut per_fold = Vec::new();
            for record in &outcome.records {
                write_run_dir(&out.join(format!("fold_{}", record.fold_id)), record)?;
                let rank = record.test_gi_rank();
                let d_total = rank.len();
                let cutoff = d_total - (d_total as f64 * 0.2).ceil() as usize;
                let mut position = vec![0usize; d_total];
                for (pos, &f) in rank.iter().enumerate() {
                    position[f] = pos;
                }
                let ranks: Vec<serde_json::Value> = outcome
                    .pseudo_indices
                    .iter()
                    .map(|&j| {
                        serde_json::json!({
                            "feature": record.feature_names[j],
                            "rank": position[j],
                            "in_bottom_20pct": position[j] >= cutoff,
                        })
                    })
                    .collect();
                per_fold.push(serde_json::json!({
                    "fold": record.fold_id,
                    "pseudo_ranks": ranks,
                }));
            }
            fs::create_dir_all(&out)?;
            fs::write(
                out.join("pseudo_summary.json"),
                serde_json::to_vec_pretty(&serde_json::json!({
                    "pseudo_indices": outcome.pseudo_indices,
                    "per_fold": per_fold,
                }))?,
            )?;
            println!(
                "pseudo experiment over {} folds with {} injected feature(s) -> {}",
                outcome.records.len(),
                outcome.pseudo_indices.len(),
                out.display()
            );
        }
        Command::Sweep { data, lambdas, out, hyper } => {
            let cfg = hyper.resolve()?;
            let lambdas = parse_lambdas(&lambdas)?;
            let bench = Benchmark::load(&data)?;
            let rows = lambda_sweep(
                &bench.train,
                &bench.test,
                bench.ground_truth.as_ref(),
                &cfg,
                &lambdas,
            )?;
            fs::create_dir_all(&out)?;
            let mut csv = String::from("lambda,mean_test_acc,f1,jaccard,iacc,spearman,kendall\n");
            for row in &rows {
                let (f1, j, iacc) = match &row.agreement {
                    Some(a) => (a.f1, a.jaccard, a.iacc),
                    None => (f64::NAN, f64::NAN, f64::NAN),
                };
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    row.lambda, row.mean_test_acc, f1, j, iacc, row.spearman, row.kendall
                ));
            }
            fs::write(out.join("sweep.csv"), csv)?;
            fs::write(out.join("sweep.json"), serde_json::to_vec_pretty(&rows)?)?;
            println!("lambda sweep over {:?} -> {}", lambdas, out.display());
        }
        Command::Report { runs, roar, data, out } => {
            let bench = Benchmark::load(&data)?;
            let gt = bench.ground_truth.as_ref().ok_or_else(|| {
                CafoError::MissingInput(data.join("ground_truth.json").display().to_string())
            })?;
            report::build_report(&runs, &roar, gt, &out)?;
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn exit_code_for(err: &CafoError) -> u8 {
    match err {
        CafoError::InvalidConfig(_) => 1,
        CafoError::MissingInput(_) | CafoError::DataFormat(_) | CafoError::Json(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code_for(&e))
        }
    }
}
