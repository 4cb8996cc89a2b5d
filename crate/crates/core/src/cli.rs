//! The `vqa` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure (including a failing gradient check).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{apply_synthetic, parse_kv, parse_overrides, synthetic_to_kv_text, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{read_feature_file, write_feature_file};
use crate::grad_suite::{format_table, run_suite, SUITE_SEEDS};
use crate::manifest::{entries_in, load_manifest, split_by_counts, split_dataset, write_manifest, ManifestEntry, Split};
use crate::model::multi_sample;
use crate::quality::QualityPrediction;
use crate::rng::SplitMix64;
use crate::synthetic::{generate_corpus, SyntheticSpec};
use crate::trainer::{evaluate, load_clips, stream, train, tsf_stability_report};

/// Temporal video-quality assessment on precomputed frame features.
#[derive(Debug, Parser)]
#[command(name = "vqa", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus: feature files, manifest.csv and truth.csv.
    Gen {
        /// Generator settings as key = value lines; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training clips; with --val, replaces the default 60/20/20 split.
        #[arg(long, requires = "val")]
        train: Option<usize>,
        #[arg(long, requires = "train")]
        val: Option<usize>,
        /// Generator overrides, `key=value`, applied after --spec.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a model and write its best-validation checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Training settings as key = value lines; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines epoch log; defaults to the checkpoint path with `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Config overrides, `key=value`, applied after --config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 8)]
        sm: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-video predictions CSV; defaults to `predictions_<split>.csv` beside the checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Also report prediction spread for these comma-separated sample counts.
        #[arg(long, value_delimiter = ',')]
        stability: Vec<usize>,
    },
    /// Predict the quality of one feature file.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 8)]
        sm: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV of per-sample selections, frame scores, weights and attention.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = SUITE_SEEDS)]
        seeds: usize,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Gen {
            spec,
            count,
            out: dir,
            seed,
            train,
            val,
            set,
        } => cmd_gen(spec.as_deref(), count, &dir, seed, train.zip(val), &set, out),
        Command::Train {
            manifest,
            config,
            out: ckpt,
            log,
            set,
        } => {
            let log = log.unwrap_or_else(|| default_log_path(&ckpt));
            cmd_train(&manifest, config.as_deref(), &ckpt, &log, &set, out)
        }
        Command::Eval {
            ckpt,
            manifest,
            split,
            sm,
            seed,
            predictions,
            stability,
        } => {
            let predictions = predictions.unwrap_or_else(|| {
                ckpt.parent()
                    .unwrap_or(Path::new("."))
                    .join(format!("predictions_{split}.csv"))
            });
            cmd_eval(&ckpt, &manifest, split, sm, seed, &predictions, &stability, out)
        }
        Command::Predict {
            ckpt,
            features,
            sm,
            seed,
            dump_attention,
        } => cmd_predict(&ckpt, &features, sm, seed, dump_attention.as_deref(), out),
        Command::Gradcheck { seeds } => cmd_gradcheck(seeds, out),
    }
}

fn default_log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(OsString::from).unwrap_or_else(|| "train".into());
    name.push(".log.jsonl");
    ckpt.with_file_name(name)
}

fn write_stdout(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

pub fn cmd_gen(
    spec_path: Option<&Path>,
    count: usize,
    dir: &Path,
    seed: u64,
    counts: Option<(usize, usize)>,
    overrides: &[String],
    out: &mut dyn Write,
) -> Result<i32> {
    let mut spec = SyntheticSpec::default();
    if let Some(p) = spec_path {
        apply_synthetic(&mut spec, &parse_kv(&read_text(p)?)?)?;
    }
    apply_synthetic(&mut spec, &parse_overrides(overrides)?)?;
    if let Some((t, v)) = counts {
        if t + v > count {
            return Err(Error::InvalidParameter(format!("{t} train + {v} val exceeds count {count}")));
        }
    }

    let features_dir = dir.join("features");
    fs::create_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;
    let corpus = generate_corpus(&spec, count, seed)?;
    let mut entries = Vec::with_capacity(count);
    for item in &corpus {
        let rel = format!("features/{}.dcvf", item.video_id);
        write_feature_file(&item.clip, dir.join(&rel))?;
        entries.push(ManifestEntry {
            video_id: item.video_id.clone(),
            feature_path: rel,
            mos: item.mos,
            split: Split::Unassigned,
        });
    }
    let entries = match counts {
        Some((t, v)) => split_by_counts(&entries, t, v, seed)?,
        None if count >= 3 => split_dataset(&entries, (0.6, 0.2, 0.2), seed)?,
        None => entries,
    };
    write_manifest(&entries, dir.join("manifest.csv"))?;

    let truth_path = dir.join("truth.csv");
    let mut truth = csv::Writer::from_path(&truth_path).map_err(|e| csv_err(&truth_path, e))?;
    truth
        .write_record(["video_id", "frame", "burst", "theme", "importance"])
        .map_err(|e| csv_err(&truth_path, e))?;
    for item in &corpus {
        let t = &item.truth;
        for f in 0..t.burst.len() {
            truth
                .write_record([
                    item.video_id.as_str(),
                    &f.to_string(),
                    &u8::from(t.burst[f]).to_string(),
                    &u8::from(t.theme[f]).to_string(),
                    &t.importance[f].to_string(),
                ])
                .map_err(|e| csv_err(&truth_path, e))?;
        }
    }
    truth.flush().map_err(|e| Error::io(&truth_path, e))?;
    let spec_out = dir.join("spec.txt");
    fs::write(&spec_out, synthetic_to_kv_text(&spec)).map_err(|e| Error::io(&spec_out, e))?;

    write_stdout(out, &format!("generated {count} clips in {}\n", dir.display()))?;
    Ok(0)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Serialize)]
struct TrainSummary {
    epochs_run: usize,
    best_epoch: usize,
    best_val_srocc: f64,
    init_val_srocc: f64,
    seconds: f64,
}

pub fn cmd_train(
    manifest: &Path,
    config_path: Option<&Path>,
    ckpt: &Path,
    log_path: &Path,
    overrides: &[String],
    out: &mut dyn Write,
) -> Result<i32> {
    // everything that can be validated is, before any clip is read
    let mut config = match config_path {
        Some(p) => TrainConfig::from_kv_text(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    config.apply(&parse_overrides(overrides)?)?;
    config.validate()?;
    let entries = load_manifest(manifest)?;
    let dir = manifest_dir(manifest);
    let train_entries = entries_in(&entries, Split::Train);
    let val_entries = entries_in(&entries, Split::Val);
    for (name, split) in [("train", &train_entries), ("val", &val_entries)] {
        if split.len() < 2 {
            return Err(Error::Degenerate(format!(
                "{}: the {name} split has {} clips, need at least 2",
                manifest.display(),
                split.len()
            )));
        }
    }
    let train_clips = load_clips(&train_entries, &dir)?;
    let val_clips = load_clips(&val_entries, &dir)?;

    let file = File::create(log_path).map_err(|e| Error::io(log_path, e))?;
    let mut log = BufWriter::new(file);
    let start = Instant::now();
    let outcome = train(&config, &train_clips, &val_clips, |record| {
        writeln!(log, "{}", json(record))
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(log_path, e))
    })?;
    outcome.checkpoint.save(ckpt)?;
    let summary = TrainSummary {
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.checkpoint.epoch,
        best_val_srocc: outcome.checkpoint.best_val_srocc,
        init_val_srocc: outcome.init_val_srocc,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_stdout(out, &format!("{}\n", json(&summary)))?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    ckpt: &Path,
    manifest: &Path,
    split: Split,
    s_m: usize,
    seed: u64,
    predictions: &Path,
    stability: &[usize],
    out: &mut dyn Write,
) -> Result<i32> {
    if s_m == 0 || stability.contains(&0) {
        return Err(Error::InvalidParameter("sample counts must be at least 1".into()));
    }
    let checkpoint = Checkpoint::load(ckpt)?;
    let entries = entries_in(&load_manifest(manifest)?, split);
    if entries.is_empty() {
        return Err(Error::Degenerate(format!("{}: split {split} is empty", manifest.display())));
    }
    let clips = load_clips(&entries, &manifest_dir(manifest))?;
    let result = evaluate(&checkpoint, &clips, s_m, seed)?;

    let mut w = csv::Writer::from_path(predictions).map_err(|e| csv_err(predictions, e))?;
    w.write_record(["video_id", "mos", "q_raw", "q_mapped"])
        .map_err(|e| csv_err(predictions, e))?;
    for p in &result.predictions {
        w.write_record([
            p.video_id.as_str(),
            &p.mos.to_string(),
            &p.prediction.q_raw.to_string(),
            &p.prediction.q_mapped.to_string(),
        ])
        .map_err(|e| csv_err(predictions, e))?;
    }
    w.flush().map_err(|e| Error::io(predictions, e))?;

    write_stdout(out, &format!("{}\n", json(&result.report)))?;
    if !stability.is_empty() {
        let model = checkpoint.to_model()?;
        let rows = tsf_stability_report(
            &model,
            checkpoint.label_range(),
            checkpoint.config.decreasing_remap,
            &clips,
            stability,
            s_m,
            seed,
        )?;
        for row in rows {
            write_stdout(out, &format!("{}\n", json(&row)))?;
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct PredictSummary<'a> {
    video_id: &'a str,
    q_raw: f64,
    q_mapped: f64,
    per_sample_raw: &'a [f64],
}

pub fn cmd_predict(
    ckpt: &Path,
    features: &Path,
    s_m: usize,
    seed: u64,
    dump: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let model = checkpoint.to_model()?;
    let clip = read_feature_file(features)?;
    let tokens = model.prepare(&clip)?;
    let mut rng = SplitMix64::new(seed).split(stream::EVALUATION).split(0);
    let samples = multi_sample(&model, &tokens, s_m, &mut rng)?;
    let per: Vec<f64> = samples.iter().map(|s| s.q).collect();
    let prediction = QualityPrediction::new(per, &checkpoint.remap, checkpoint.config.decreasing_remap);

    if let Some(path) = dump {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["sample", "slot", "frame", "d", "w", "m_qk"])
            .map_err(|e| csv_err(path, e))?;
        for (s, sample) in samples.iter().enumerate() {
            for (slot, &frame) in sample.selection.indices.iter().enumerate() {
                let m = sample
                    .m_qk
                    .as_ref()
                    .map_or(String::new(), |m| m.data()[slot].to_string());
                w.write_record([
                    s.to_string(),
                    slot.to_string(),
                    frame.to_string(),
                    sample.d[slot].to_string(),
                    sample.w[slot].to_string(),
                    m,
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }

    let summary = PredictSummary {
        video_id: clip.source_id(),
        q_raw: prediction.q_raw,
        q_mapped: prediction.q_mapped,
        per_sample_raw: &prediction.per_sample_raw,
    };
    write_stdout(out, &format!("{}\n", json(&summary)))?;
    Ok(0)
}

pub fn cmd_gradcheck(seeds: usize, out: &mut dyn Write) -> Result<i32> {
    let start = Instant::now();
    let rows = run_suite(seeds)?;
    write_stdout(out, &format_table(&rows))?;
    let failed = rows.iter().filter(|r| !r.passed()).count();
    write_stdout(
        out,
        &format!(
            "{} cases, {} failed, {:.1}s\n",
            rows.len(),
            failed,
            start.elapsed().as_secs_f64()
        ),
    )?;
    Ok(if failed == 0 { 0 } else { 3 })
}
