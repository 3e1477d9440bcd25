//! Command-line interface: gen-data, train, pseudo, eval, plot, pipeline.
//!
//! Exit codes: 0 success, 2 user/config error, 3 runtime/model error.
//! Config precedence: CLI flag > TSVOS_SEED env var > config file > default.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{
    generate_synthetic, load_dataset, load_labelsets, load_manifest, save_labelset,
    save_manifest, two_shot_subsample, write_mask_png, DatasetManifest, MANIFEST_FULL_NAME,
    MANIFEST_NAME,
};
use crate::pipeline::{run_pipeline, split_videos};
use crate::plot::qualitative_strip;
use crate::report::{
    comparison_csv, comparison_table, load_metric_report, save_metric_report, save_stage_report,
};
use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use tsvos_core::metrics::{dice, evaluate_corpus, CorpusEntry, EvalParams};
use tsvos_core::model::ModelState;
use tsvos_core::pseudo::{pseudo_label_dataset, ModelSegmenter, OracleSegmenter, Segmenter};
use tsvos_core::synth::{SubsampleStrategy, SyntheticSpec};
use tsvos_core::trainer::{
    evaluate_first_frame, train_fully_supervised, train_stage1, train_stage3, TrainVideo,
};
use tsvos_core::types::{binarize, Config, Mask, Stream, VideoSample};

/// Error tagged with its process exit code.
pub struct CliError {
    pub code: i32,
    pub source: anyhow::Error,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: anyhow::Error) -> CliError {
    CliError { code: 2, source: e }
}

fn runtime_err(e: anyhow::Error) -> CliError {
    CliError { code: 3, source: e }
}

#[derive(Parser)]
#[command(
    name = "tsvos",
    version,
    about = "Two-shot self-training video object segmentation at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    FirstLast,
    RandomPair,
    Stratified,
}

impl From<StrategyArg> for SubsampleStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::FirstLast => SubsampleStrategy::FirstLast,
            StrategyArg::RandomPair => SubsampleStrategy::RandomPair,
            StrategyArg::Stratified => SubsampleStrategy::Stratified,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    /// Stage 1 with the consistency loss (per config)
    Teacher,
    /// Stage 1 without the consistency loss and without stages 2-3
    Vanilla,
    /// Stage 3 on a merged label manifest (--labels)
    Retrain,
    /// Fully supervised on an all-ground-truth manifest
    Full,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate the synthetic dataset and apply the two-shot label budget
    GenData {
        /// Synthetic spec JSON; built-in defaults when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "stratified")]
        strategy: StrategyArg,
        /// Overrides the spec's rng seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage
    Train {
        #[arg(long, value_enum)]
        mode: TrainMode,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root containing manifest.json / manifest_full.json
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Merged label manifest (required for --mode retrain)
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Teacher checkpoint for a warm start (stage 3)
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Quadro-inference pseudo-labeling with a trained teacher
    Pseudo {
        /// Teacher checkpoint path, or "oracle" for the ground-truth stub
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: PathBuf,
        /// Output manifest path
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// First-frame-referenced inference and metrics on a split
    Eval {
        /// Checkpoint path, or "oracle" to score ground truth against itself
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: PathBuf,
        /// Metric report JSON path (CSV written alongside)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Directory for predicted masks (for qualitative plots)
        #[arg(long)]
        save_masks: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Comparison tables and qualitative contour strips
    Plot {
        /// Metric report JSON files
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        /// Comma-separated display names (defaults to file stems)
        #[arg(long)]
        labels: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset root for qualitative strips
        #[arg(long)]
        data: Option<PathBuf>,
        /// Predicted-mask directory (as written by eval --save-masks)
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Comma-separated video ids for strips (default: first two test videos)
        #[arg(long)]
        videos: Option<String>,
        /// Render every N-th frame in a strip
        #[arg(long, default_value_t = 3)]
        every: usize,
    },
    /// Full pipeline: teacher -> pseudo-labels -> student -> eval, resumable
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    workers: Option<usize>,
) -> CliResult<Config> {
    let mut cfg = match path {
        Some(p) => {
            let json = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(config_err)?;
            serde_json::from_str(&json)
                .with_context(|| format!("parsing config {}", p.display()))
                .map_err(config_err)?
        }
        None => Config::default(),
    };
    if let Ok(v) = std::env::var("TSVOS_SEED") {
        cfg.rng_seed = v
            .parse()
            .map_err(|e| config_err(anyhow!("TSVOS_SEED: {e}")))?;
    }
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.validate()
        .map_err(|e| config_err(anyhow!("config: {e}")))?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::GenData {
            spec,
            out,
            strategy,
            seed,
        } => cmd_gen_data(spec.as_deref(), &out, strategy.into(), seed),
        Cmd::Train {
            mode,
            config,
            data,
            out,
            labels,
            init,
            seed,
            workers,
        } => {
            let cfg = load_config(config.as_deref(), seed, workers)?;
            cmd_train(mode, &cfg, &data, &out, labels.as_deref(), init.as_deref())
        }
        Cmd::Pseudo {
            checkpoint,
            data,
            out,
            config,
            seed,
            workers,
        } => {
            let cfg = load_config(config.as_deref(), seed, workers)?;
            cmd_pseudo(&checkpoint, &cfg, &data, &out)
        }
        Cmd::Eval {
            checkpoint,
            data,
            out,
            split,
            save_masks,
            config,
            seed,
            workers,
        } => {
            let cfg = load_config(config.as_deref(), seed, workers)?;
            cmd_eval(&checkpoint, &cfg, &data, &out, split, save_masks.as_deref())
        }
        Cmd::Plot {
            reports,
            labels,
            out,
            data,
            pred,
            videos,
            every,
        } => cmd_plot(
            &reports,
            labels.as_deref(),
            &out,
            data.as_deref(),
            pred.as_deref(),
            videos.as_deref(),
            every,
        ),
        Cmd::Pipeline {
            config,
            data,
            out,
            seed,
            workers,
        } => {
            let cfg = load_config(config.as_deref(), seed, workers)?;
            cmd_pipeline(&cfg, &data, &out)
        }
    }
}

fn cmd_gen_data(
    spec_path: Option<&Path>,
    out: &Path,
    strategy: SubsampleStrategy,
    seed: Option<u64>,
) -> CliResult<()> {
    let mut spec = match spec_path {
        Some(p) => {
            let json = std::fs::read_to_string(p)
                .with_context(|| format!("reading spec {}", p.display()))
                .map_err(config_err)?;
            serde_json::from_str::<SyntheticSpec>(&json)
                .with_context(|| format!("parsing spec {}", p.display()))
                .map_err(config_err)?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.rng_seed = s;
    }
    spec.validate()
        .map_err(|e| config_err(anyhow!("spec: {e}")))?;

    std::fs::create_dir_all(out).map_err(|e| runtime_err(e.into()))?;
    let full = generate_synthetic(&spec, out).map_err(runtime_err)?;
    save_manifest(&full, &out.join(MANIFEST_FULL_NAME)).map_err(runtime_err)?;
    let sub = two_shot_subsample(&full, strategy, spec.rng_seed);
    save_manifest(&sub, &out.join(MANIFEST_NAME)).map_err(runtime_err)?;

    let n_train = sub.train_videos().count();
    let n_test = sub.test_videos().count();
    println!(
        "generated {} videos ({n_train} train / {n_test} test), {} frames each, {}x{} px",
        spec.n_videos, spec.frames_per_video, spec.image_size, spec.image_size
    );
    println!(
        "two-shot budget: 2/{} labeled frames per training video = {:.1}% label fraction",
        spec.frames_per_video,
        100.0 * sub.label_fraction()
    );
    println!("manifests: {} and {}", MANIFEST_NAME, MANIFEST_FULL_NAME);
    Ok(())
}

fn train_mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Teacher => "teacher",
        TrainMode::Vanilla => "vanilla",
        TrainMode::Retrain => "student",
        TrainMode::Full => "fullsup",
    }
}

fn cmd_train(
    mode: TrainMode,
    cfg: &Config,
    data: &Path,
    out: &Path,
    labels: Option<&Path>,
    init: Option<&Path>,
) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| runtime_err(e.into()))?;
    let hash = cfg.hash();
    let name = train_mode_name(mode);

    let (state, mut report) = match mode {
        TrainMode::Teacher | TrainMode::Vanilla => {
            let mut cfg = cfg.clone();
            if matches!(mode, TrainMode::Vanilla) {
                cfg.stcs_stage1 = false;
            }
            let (_, videos) = load_dataset(&data.join(MANIFEST_NAME)).map_err(runtime_err)?;
            let train: Vec<TrainVideo> = {
                let manifest = load_manifest(&data.join(MANIFEST_NAME)).map_err(runtime_err)?;
                split_videos(videos, &manifest).0
            };
            let out1 = train_stage1(&train, &cfg)
                .map_err(|e| runtime_err(anyhow!("stage 1: {e}")))?;
            (out1.model, out1.report)
        }
        TrainMode::Retrain => {
            let labels_path = labels.ok_or_else(|| {
                config_err(anyhow!("--mode retrain requires --labels <pseudo manifest>"))
            })?;
            let (manifest, videos) = load_dataset(labels_path).map_err(runtime_err)?;
            let train = split_videos(videos, &manifest).0;
            let labelsets_by_id: std::collections::HashMap<_, _> = load_labelsets(labels_path)
                .map_err(runtime_err)?
                .into_iter()
                .collect();
            let labelsets = train
                .iter()
                .map(|v| {
                    labelsets_by_id
                        .get(&v.id)
                        .cloned()
                        .ok_or_else(|| runtime_err(anyhow!("labels missing video {}", v.id)))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let teacher = match init {
                Some(p) => Some(load_checkpoint(p).map_err(runtime_err)?.0),
                None => None,
            };
            if cfg.student_warm_start && teacher.is_none() {
                return Err(config_err(anyhow!(
                    "student_warm_start requires --init <teacher checkpoint>"
                )));
            }
            train_stage3(&train, &labelsets, teacher.as_ref(), cfg)
                .map_err(|e| runtime_err(anyhow!("stage 3: {e}")))?
        }
        TrainMode::Full => {
            let full_path = data.join(MANIFEST_FULL_NAME);
            if !full_path.exists() {
                return Err(config_err(anyhow!(
                    "--mode full requires an all-ground-truth manifest at {}",
                    full_path.display()
                )));
            }
            let (manifest, videos) = load_dataset(&full_path).map_err(runtime_err)?;
            let hidden = manifest
                .train_videos()
                .flat_map(|v| v.masks.iter())
                .any(|m| !m.available);
            if hidden {
                return Err(config_err(anyhow!(
                    "--mode full requires every training label to be available"
                )));
            }
            let train = split_videos(videos, &manifest).0;
            train_fully_supervised(&train, cfg)
                .map_err(|e| runtime_err(anyhow!("full supervision: {e}")))?
        }
    };

    let ckpt = out.join(format!("{name}.ckpt"));
    save_checkpoint(&ckpt, &state, &hash).map_err(runtime_err)?;
    report.checkpoint_path = Some(ckpt.display().to_string());
    let report_path = out.join(format!("{name}_report.json"));
    save_stage_report(&report, &report_path).map_err(runtime_err)?;
    println!(
        "{name}: {} iterations, final seg loss {:.4}, pcl {:.4}, {:.1}s",
        report.iterations, report.final_loss_seg, report.final_loss_pcl, report.wall_time_secs
    );
    println!("checkpoint: {}", ckpt.display());
    println!("report: {}", report_path.display());
    Ok(())
}

/// Load two-shot train videos; in oracle mode, graft full ground truth onto
/// the two-shot labeled indices.
fn load_pseudo_inputs(
    data: &Path,
    oracle: bool,
) -> Result<(DatasetManifest, Vec<TrainVideo>)> {
    let manifest_path = data.join(MANIFEST_NAME);
    let (manifest, videos) = load_dataset(&manifest_path)?;
    let (mut train, _) = split_videos(videos, &manifest);
    if oracle {
        let full_path = data.join(MANIFEST_FULL_NAME);
        let (_, full_videos) = load_dataset(&full_path)
            .with_context(|| "oracle mode needs manifest_full.json for ground truth")?;
        let by_id: std::collections::HashMap<String, VideoSample> = full_videos
            .into_iter()
            .map(|v| (v.id, v.sample))
            .collect();
        for v in &mut train {
            let full = by_id
                .get(&v.id)
                .with_context(|| format!("video {} missing from full manifest", v.id))?;
            let labeled = v.sample.labeled_indices;
            v.sample = VideoSample::new(
                full.frames.clone(),
                full.gt_masks.clone(),
                labeled,
            )?;
        }
    }
    Ok((manifest, train))
}

fn cmd_pseudo(checkpoint: &str, cfg: &Config, data: &Path, out: &Path) -> CliResult<()> {
    let oracle = checkpoint == "oracle";
    let (mut manifest, train) = load_pseudo_inputs(data, oracle).map_err(runtime_err)?;
    let named: Vec<(String, VideoSample)> = train
        .iter()
        .map(|v| (v.id.clone(), v.sample.clone()))
        .collect();
    let label = |segmenter: &dyn Segmenter| {
        pseudo_label_dataset(
            &named,
            segmenter,
            cfg.binarize_threshold,
            cfg.merge_rule,
            cfg.workers,
        )
    };
    let (labelsets, stats) = if oracle {
        label(&OracleSegmenter)
    } else {
        let path = Path::new(checkpoint);
        if !path.exists() {
            return Err(runtime_err(anyhow!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        let (state, _) = load_checkpoint(path).map_err(runtime_err)?;
        label(&ModelSegmenter {
            state: &state,
            memory_every: cfg.memory_every,
            memory_capacity: cfg.memory_capacity,
        })
    }
    .map_err(|e| runtime_err(anyhow!("{e}")))?;

    for (id, labels) in &labelsets {
        save_labelset(id, labels, &mut manifest, data).map_err(runtime_err)?;
    }
    manifest.config_hash = Some(cfg.hash());
    manifest.root = Some(
        data.canonicalize()
            .unwrap_or_else(|_| data.to_path_buf())
            .display()
            .to_string(),
    );
    save_manifest(&manifest, out).map_err(runtime_err)?;

    println!(
        "pseudo-labeled {} videos: {} ground-truth frames ({:.1}%), {} pseudo frames",
        labelsets.len(),
        stats.total_ground_truth,
        100.0 * stats.gt_fraction(),
        stats.total_unlabeled
    );
    println!("per-stream selection histogram:");
    for (s, n) in Stream::ALL.iter().zip(stats.selected_per_stream.iter()) {
        println!("  {:>7}: {n}", s.name());
    }
    if oracle {
        // the oracle stub must reproduce ground truth exactly
        let full = load_pseudo_inputs(data, true).map_err(runtime_err)?.1;
        let by_id: std::collections::HashMap<_, _> =
            full.into_iter().map(|v| (v.id, v.sample)).collect();
        let mut total = 0.0;
        let mut n = 0usize;
        for (id, labels) in &labelsets {
            let sample = &by_id[id];
            for (m, g) in labels.masks.iter().zip(sample.gt_masks.iter()) {
                total += dice(m, g.as_ref().unwrap()).map_err(|e| runtime_err(anyhow!("{e}")))?;
                n += 1;
            }
        }
        println!("oracle merged DSC vs ground truth: {:.4}", total / n as f64);
    }
    println!("label manifest: {}", out.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &str,
    cfg: &Config,
    data: &Path,
    out: &Path,
    split: SplitArg,
    save_masks: Option<&Path>,
) -> CliResult<()> {
    let manifest_path = data.join(MANIFEST_NAME);
    let (manifest, videos) = load_dataset(&manifest_path).map_err(runtime_err)?;
    let (train, test) = split_videos(videos, &manifest);
    let subjects = match split {
        SplitArg::Test => test,
        SplitArg::Train => train,
    };
    if subjects.is_empty() {
        return Err(config_err(anyhow!("no videos in the requested split")));
    }

    let report = if checkpoint == "oracle" {
        // ground truth scored against itself
        let entries = subjects
            .iter()
            .map(|v| {
                let gts: Vec<Mask> = v.sample.gt_masks[1..]
                    .iter()
                    .map(|m| m.clone().context("oracle eval needs full ground truth"))
                    .collect::<Result<_>>()?;
                Ok(CorpusEntry {
                    id: v.id.clone(),
                    preds: gts.clone(),
                    gts,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(runtime_err)?;
        evaluate_corpus(&entries, &EvalParams::from_config(cfg), cfg.rng_seed, &cfg.hash())
            .map_err(|e| runtime_err(anyhow!("{e}")))?
    } else {
        let path = Path::new(checkpoint);
        if !path.exists() {
            return Err(runtime_err(anyhow!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        let (state, _) = load_checkpoint(path).map_err(runtime_err)?;
        if let Some(dir) = save_masks {
            save_predictions(&subjects, &state, cfg, dir).map_err(runtime_err)?;
        }
        evaluate_first_frame(&subjects, &state, cfg)
            .map_err(|e| runtime_err(anyhow!("{e}")))?
    };

    save_metric_report(&report, out).map_err(runtime_err)?;
    println!("{}", report.to_table());
    println!("report: {} (+ .csv)", out.display());
    Ok(())
}

fn save_predictions(
    videos: &[TrainVideo],
    state: &ModelState,
    cfg: &Config,
    dir: &Path,
) -> Result<()> {
    for v in videos {
        let reference = v.sample.gt_masks[0]
            .as_ref()
            .ok_or_else(|| anyhow!("video {}: frame 0 needs ground truth", v.id))?;
        let maps = tsvos_core::model::rollout(
            &v.sample,
            (0, reference),
            tsvos_core::model::Direction::Forward,
            state,
            cfg.memory_every,
            cfg.memory_capacity,
        )
        .map_err(|e| anyhow!("{e}"))?;
        let vdir = dir.join(&v.id);
        std::fs::create_dir_all(&vdir)?;
        for (i, map) in maps.iter().enumerate() {
            let mask = binarize(map, cfg.binarize_threshold);
            write_mask_png(&vdir.join(format!("{:04}.png", i + 1)), &mask)?;
        }
    }
    Ok(())
}

fn cmd_plot(
    reports: &[PathBuf],
    labels: Option<&str>,
    out: &Path,
    data: Option<&Path>,
    pred: Option<&Path>,
    videos: Option<&str>,
    every: usize,
) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| runtime_err(e.into()))?;
    let names: Vec<String> = match labels {
        Some(s) => s.split(',').map(|x| x.trim().to_string()).collect(),
        None => reports
            .iter()
            .map(|p| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "report".into())
            })
            .collect(),
    };
    if names.len() != reports.len() {
        return Err(config_err(anyhow!(
            "{} labels for {} reports",
            names.len(),
            reports.len()
        )));
    }
    let rows: Vec<(String, tsvos_core::metrics::MetricReport)> = names
        .into_iter()
        .zip(reports.iter())
        .map(|(n, p)| Ok((n, load_metric_report(p).map_err(runtime_err)?)))
        .collect::<CliResult<_>>()?;
    let table = comparison_table(&rows);
    std::fs::write(out.join("comparison.md"), &table).map_err(|e| runtime_err(e.into()))?;
    std::fs::write(out.join("comparison.csv"), comparison_csv(&rows))
        .map_err(|e| runtime_err(e.into()))?;
    println!("{table}");
    println!("comparison table: {}", out.join("comparison.md").display());

    if let (Some(data), Some(pred)) = (data, pred) {
        let manifest_path = data.join(MANIFEST_NAME);
        let (manifest, loaded) = load_dataset(&manifest_path).map_err(runtime_err)?;
        let (_, test) = split_videos(loaded, &manifest);
        let wanted: Vec<String> = match videos {
            Some(s) => s.split(',').map(|x| x.trim().to_string()).collect(),
            None => test.iter().take(2).map(|v| v.id.clone()).collect(),
        };
        for id in wanted {
            let v = test
                .iter()
                .find(|v| v.id == id)
                .ok_or_else(|| config_err(anyhow!("video {id} not in test split")))?;
            let t_len = v.sample.len();
            let mut preds: Vec<Option<Mask>> = vec![None; t_len];
            for (t, slot) in preds.iter_mut().enumerate().skip(1) {
                let p = pred.join(&id).join(format!("{t:04}.png"));
                if p.exists() {
                    *slot = Some(crate::dataset::read_mask_png(&p).map_err(runtime_err)?);
                }
            }
            let strip_path = out.join(format!("strip_{id}.png"));
            qualitative_strip(
                &v.sample.frames,
                &v.sample.gt_masks,
                &preds,
                every,
                &strip_path,
            )
            .map_err(runtime_err)?;
            println!("strip: {}", strip_path.display());
        }
    }
    Ok(())
}

fn cmd_pipeline(cfg: &Config, data: &Path, out: &Path) -> CliResult<()> {
    let summary = run_pipeline(cfg, data, out).map_err(runtime_err)?;
    if !summary.stages_resumed.is_empty() {
        println!("resumed from artifacts: {}", summary.stages_resumed.join(", "));
    }
    println!("stages run: {}", summary.stages_run.join(", "));
    if let Some(stats) = &summary.pseudo_stats {
        println!(
            "pseudo labels: {:.1}% ground truth, histogram {:?}",
            100.0 * stats.gt_fraction(),
            stats.selected_per_stream
        );
    }
    println!("test J&F: {:.2}", summary.eval_jf);
    Ok(())
}
