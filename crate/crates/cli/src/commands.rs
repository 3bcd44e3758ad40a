//! Command implementations. Every command reads its inputs from the output
//! directory laid out by earlier commands, writes fixed-name artifacts, and
//! is byte-deterministic given the same config and seed.

use crate::config::ExperimentConfig;
use crate::reports::{self, ProtocolRow, ProtocolSummary};
use crate::{CliError, CliResult};
use gtal_core::adapter::{adapt, AdaptConfig, AdaptResult};
use gtal_core::data::{generate_synthetic_dataset, load_dataset, save_dataset, Dataset, Split};
use gtal_core::evaluator::{
    error_breakdown, evaluate_map, snippet_diagnostics, EvalReport, PredictionRecord,
};
use gtal_core::localizer::localize;
use gtal_core::model::{load_checkpoint, save_checkpoint, train_base, ModelParams};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Fixed artifact layout under the output directory.
pub struct OutputLayout {
    root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("resolved_config.json")
    }

    /// `data/<distribution_id>-<split>`, e.g. `data/short-train`.
    pub fn dataset_dir(&self, distribution_id: &str, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{distribution_id}-{split}"))
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("base.ckpt")
    }

    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("teacher.ckpt")
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

fn write_resolved_config(cfg: &ExperimentConfig, layout: &OutputLayout) -> CliResult<()> {
    reports::write_json(&layout.resolved_config(), cfg)
}

fn load_dataset_checked(dir: &Path) -> CliResult<Dataset> {
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Config(format!(
            "dataset {} not found; run `gtal gen-data` first",
            dir.display()
        )));
    }
    load_dataset(dir).map_err(|e| CliError::Runtime(e.to_string()))
}

fn load_checkpoint_checked(path: &Path) -> CliResult<ModelParams> {
    if !path.exists() {
        return Err(CliError::Config(format!(
            "checkpoint {} not found; run the producing command first",
            path.display()
        )));
    }
    load_checkpoint(path).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Generates and saves all four dataset directories and prints duration
/// statistics per distribution and split.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let layout = OutputLayout::new(out);
    write_resolved_config(cfg, &layout)?;

    let mut stats = String::from("dataset          instances      q1  median      q3    mean\n");
    for preset in [&cfg.source, &cfg.target] {
        for split in [Split::Train, Split::Test] {
            let ds = generate_synthetic_dataset(&preset.synth, &preset.distribution_id, split)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let dir = layout.dataset_dir(&preset.distribution_id, split);
            save_dataset(&ds, &dir).map_err(|e| CliError::Runtime(e.to_string()))?;
            let mut durations: Vec<f64> = ds
                .videos
                .iter()
                .flat_map(|v| v.instances.iter().map(|i| i.duration()))
                .collect();
            let (n, q1, median, q3, mean) = reports::duration_stats_row(&mut durations);
            let _ = writeln!(
                stats,
                "{:<16} {n:>9} {q1:>7.2} {median:>7.2} {q3:>7.2} {mean:>7.2}",
                format!("{}-{}", preset.distribution_id, split),
            );
        }
    }
    print!("{stats}");
    reports::write_text(&layout.report("duration_stats.txt"), &stats)?;
    Ok(())
}

/// Trains the base model on the source training split.
pub fn cmd_train_base(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let layout = OutputLayout::new(out);
    write_resolved_config(cfg, &layout)?;
    let ds = load_dataset_checked(&layout.dataset_dir(&cfg.source.distribution_id, Split::Train))?;
    let trained = train_base(&ds, &cfg.train).map_err(|e| CliError::Runtime(e.to_string()))?;
    save_checkpoint(&trained.params, &layout.base_checkpoint())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    reports::write_text(
        &layout.log("train_base_loss.csv"),
        &reports::training_loss_csv(&trained.epoch_losses),
    )?;
    println!(
        "trained base model: {} epochs, final loss {:.4} -> {}",
        trained.epoch_losses.len(),
        trained.epoch_losses.last().copied().unwrap_or(f64::NAN),
        layout.base_checkpoint().display()
    );
    Ok(())
}

/// Adapts the base model to the unlabeled target training split and saves the
/// teacher.
pub fn cmd_adapt(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let layout = OutputLayout::new(out);
    write_resolved_config(cfg, &layout)?;
    let base = load_checkpoint_checked(&layout.base_checkpoint())?;
    let target =
        load_dataset_checked(&layout.dataset_dir(&cfg.target.distribution_id, Split::Train))?;
    let result = adapt(&base, &target, &cfg.refine, &cfg.adapt)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    save_checkpoint(&result.teacher, &layout.teacher_checkpoint())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    reports::write_text(
        &layout.log("adapt_loss.csv"),
        &reports::adapt_loss_csv(&result.epoch_losses),
    )?;
    println!(
        "adapted teacher: {} epochs, final loss {:.4} -> {}",
        result.epoch_losses.len(),
        result.epoch_losses.last().map(|l| l.total).unwrap_or(f64::NAN),
        layout.teacher_checkpoint().display()
    );
    Ok(())
}

/// Runs inference over a dataset and returns the sorted prediction records.
pub fn predict_dataset(
    params: &ModelParams,
    ds: &Dataset,
    cfg: &ExperimentConfig,
) -> CliResult<Vec<PredictionRecord>> {
    let mut preds = Vec::new();
    for video in &ds.videos {
        let proposals =
            localize(params, video, &cfg.inference).map_err(|e| CliError::Runtime(e.to_string()))?;
        preds.extend(proposals.into_iter().map(|p| PredictionRecord {
            video_id: video.id.clone(),
            class_id: p.class_id,
            start: p.start,
            end: p.end,
            confidence: p.confidence,
        }));
    }
    reports::sort_predictions(&mut preds);
    Ok(preds)
}

fn evaluate_against(
    params: &ModelParams,
    ds: &Dataset,
    cfg: &ExperimentConfig,
) -> CliResult<(Vec<PredictionRecord>, EvalReport)> {
    let preds = predict_dataset(params, ds, cfg)?;
    let gts = ds.ground_truth_records();
    let report = evaluate_map(&preds, &gts, &cfg.eval_thresholds())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok((preds, report))
}

fn artifact_tag(checkpoint: &Path, dataset_dir: &Path) -> String {
    let stem = |p: &Path| {
        p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "x".to_string())
    };
    let dir = dataset_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    format!("{}_{dir}", stem(checkpoint))
}

/// Localizes every video of a dataset with a checkpoint and writes the
/// prediction file plus the mAP report.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    dataset_dir: &Path,
) -> CliResult<()> {
    let layout = OutputLayout::new(out);
    write_resolved_config(cfg, &layout)?;
    let params = load_checkpoint_checked(checkpoint)?;
    let ds = load_dataset_checked(dataset_dir)?;
    let (preds, report) = evaluate_against(&params, &ds, cfg)?;

    let tag = artifact_tag(checkpoint, dataset_dir);
    reports::write_json(&layout.report(&format!("predictions_{tag}.json")), &preds)?;
    reports::write_json(&layout.report(&format!("eval_{tag}.json")), &report)?;
    let text = reports::eval_report_text(&format!("evaluation: {tag}"), &report);
    reports::write_text(&layout.report(&format!("eval_{tag}.txt")), &text)?;
    reports::write_text(
        &layout.report(&format!("eval_{tag}.csv")),
        &reports::eval_report_csv(&report),
    )?;
    print!("{text}");
    Ok(())
}

/// Classification-accuracy diagnostics plus the error breakdown at the
/// configured tIoU.
pub fn cmd_diagnose(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    dataset_dir: &Path,
) -> CliResult<()> {
    let layout = OutputLayout::new(out);
    write_resolved_config(cfg, &layout)?;
    let params = load_checkpoint_checked(checkpoint)?;
    let ds = load_dataset_checked(dataset_dir)?;

    let mut report =
        snippet_diagnostics(&params, &ds).map_err(|e| CliError::Runtime(e.to_string()))?;
    let preds = predict_dataset(&params, &ds, cfg)?;
    report.error_counts = Some(error_breakdown(&preds, &ds.ground_truth_records(), cfg.diagnose_tiou));

    let tag = artifact_tag(checkpoint, dataset_dir);
    reports::write_json(&layout.report(&format!("diagnostics_{tag}.json")), &report)?;
    let text = reports::diagnostics_text(
        &format!("diagnostics: {tag} (error breakdown at tIoU {:.2})", cfg.diagnose_tiou),
        &report,
    );
    reports::write_text(&layout.report(&format!("diagnostics_{tag}.txt")), &text)?;
    reports::write_text(
        &layout.report(&format!("attention_bins_{tag}.csv")),
        &reports::attention_bins_csv(&report),
    )?;
    print!("{text}");
    Ok(())
}

/// Everything the full protocol produces, for programmatic use.
pub struct ProtocolOutcome {
    pub summary: ProtocolSummary,
    pub base: ModelParams,
    pub teacher: ModelParams,
    pub source_test: Dataset,
    pub target_test: Dataset,
}

/// The full pipeline: generate data, train the base model on the source,
/// evaluate it on both distributions, adapt to the target, evaluate the
/// teacher. Emits one table with rows base-SmD / base-CrD / STAT-CrD.
pub fn cmd_protocol(cfg: &ExperimentConfig, out: &Path) -> CliResult<ProtocolOutcome> {
    let layout = OutputLayout::new(out);
    cmd_gen_data(cfg, out)?;
    cmd_train_base(cfg, out)?;
    cmd_adapt(cfg, out)?;

    let base = load_checkpoint_checked(&layout.base_checkpoint())?;
    let teacher = load_checkpoint_checked(&layout.teacher_checkpoint())?;
    let source_test =
        load_dataset_checked(&layout.dataset_dir(&cfg.source.distribution_id, Split::Test))?;
    let target_test =
        load_dataset_checked(&layout.dataset_dir(&cfg.target.distribution_id, Split::Test))?;

    let mut rows = Vec::new();
    for (name, params, ds) in [
        ("base-SmD", &base, &source_test),
        ("base-CrD", &base, &target_test),
        ("STAT-CrD", &teacher, &target_test),
    ] {
        let (preds, report) = evaluate_against(params, ds, cfg)?;
        let tag = format!("{}_{}", name.to_lowercase(), ds.distribution_id);
        reports::write_json(&layout.report(&format!("predictions_{tag}.json")), &preds)?;
        reports::write_json(&layout.report(&format!("eval_{tag}.json")), &report)?;
        rows.push(ProtocolRow {
            name: name.to_string(),
            map_per_threshold: report.map_per_threshold.clone(),
            average_map: report.average_map,
        });
    }

    let summary = ProtocolSummary { thresholds: cfg.eval_thresholds(), rows };
    let text = reports::protocol_table_text(&summary);
    reports::write_json(&layout.report("protocol_summary.json"), &summary)?;
    reports::write_text(&layout.report("protocol_summary.txt"), &text)?;
    reports::write_text(&layout.report("protocol_summary.csv"), &reports::protocol_table_csv(&summary))?;
    print!("{text}");

    Ok(ProtocolOutcome { summary, base, teacher, source_test, target_test })
}

/// Re-runs adaptation for each refinement factor at a fixed seed and records
/// the resulting average mAP on the target test split.
pub fn cmd_ablate_alpha(cfg: &ExperimentConfig, out: &Path, alphas: &[f64]) -> CliResult<()> {
    if alphas.is_empty() {
        return Err(CliError::Config("alpha list must not be empty".to_string()));
    }
    let layout = OutputLayout::new(out);
    write_resolved_config(cfg, &layout)?;
    let base = load_checkpoint_checked(&layout.base_checkpoint())?;
    let target_train =
        load_dataset_checked(&layout.dataset_dir(&cfg.target.distribution_id, Split::Train))?;
    let target_test =
        load_dataset_checked(&layout.dataset_dir(&cfg.target.distribution_id, Split::Test))?;

    let mut csv = String::from("alpha,avg_map\n");
    let mut table = String::from("alpha   avg mAP\n");
    for &alpha in alphas {
        let mut refine = cfg.refine.clone();
        refine.alpha = alpha;
        let result = adapt(&base, &target_train, &refine, &cfg.adapt)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let (_, report) = evaluate_against(&result.teacher, &target_test, cfg)?;
        let _ = writeln!(csv, "{alpha:.3},{:.6}", report.average_map);
        let _ = writeln!(table, "{alpha:<7.3} {:.4}", report.average_map);
    }
    reports::write_text(&layout.report("ablation_alpha.csv"), &csv)?;
    print!("{table}");
    Ok(())
}

/// Runs the 2^3 loss-flag grid with and without teacher EMA updates. With
/// EMA off the teacher stays frozen at the base model, so the adapted student
/// is evaluated for those rows (the teacher would be a no-op).
pub fn cmd_ablate_losses(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let layout = OutputLayout::new(out);
    write_resolved_config(cfg, &layout)?;
    let base = load_checkpoint_checked(&layout.base_checkpoint())?;
    let target_train =
        load_dataset_checked(&layout.dataset_dir(&cfg.target.distribution_id, Split::Train))?;
    let target_test =
        load_dataset_checked(&layout.dataset_dir(&cfg.target.distribution_id, Split::Test))?;

    let mut csv = String::from("ema,l_att,l_cas,l_cal,evaluated,avg_map\n");
    let mut table = String::from("ema  att  cas  cal  evaluated  avg mAP\n");
    for ema_on in [true, false] {
        for flags in 0..8u8 {
            let att_on = flags & 0b100 != 0;
            let cas_on = flags & 0b010 != 0;
            let cal_on = flags & 0b001 != 0;
            let adapt_cfg = AdaptConfig {
                lambda_att: if att_on { cfg.adapt.lambda_att } else { 0.0 },
                lambda_cas: if cas_on { cfg.adapt.lambda_cas } else { 0.0 },
                lambda_cal: if cal_on { cfg.adapt.lambda_cal } else { 0.0 },
                ema_momentum: if ema_on { cfg.adapt.ema_momentum } else { 1.0 },
                ..cfg.adapt.clone()
            };
            let result: AdaptResult = adapt(&base, &target_train, &cfg.refine, &adapt_cfg)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let (evaluated, params) = if ema_on {
                ("teacher", &result.teacher)
            } else {
                ("student", &result.student)
            };
            let (_, report) = evaluate_against(params, &target_test, cfg)?;
            let onoff = |b: bool| if b { "on" } else { "off" };
            let _ = writeln!(
                csv,
                "{},{},{},{},{evaluated},{:.6}",
                onoff(ema_on),
                onoff(att_on),
                onoff(cas_on),
                onoff(cal_on),
                report.average_map
            );
            let _ = writeln!(
                table,
                "{:<4} {:<4} {:<4} {:<4} {evaluated:<10} {:.4}",
                onoff(ema_on),
                onoff(att_on),
                onoff(cas_on),
                onoff(cal_on),
                report.average_map
            );
        }
    }
    reports::write_text(&layout.report("ablation_losses.csv"), &csv)?;
    reports::write_text(&layout.report("ablation_losses.txt"), &table)?;
    print!("{table}");
    Ok(())
}
