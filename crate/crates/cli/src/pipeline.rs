//! End-to-end orchestration: teacher training, quadro-inference
//! pseudo-labeling, student re-training, evaluation. Every stage persists
//! its artifact and is skipped on rerun when the artifact already matches
//! the configuration, so a deleted stage output reruns only that stage.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{
    load_dataset, load_labelsets, load_manifest, save_labelset, save_manifest, DatasetManifest,
    MANIFEST_NAME,
};
use crate::report::{save_metric_report, save_stage_report};
use anyhow::{bail, Context, Result};
use std::path::{Path, PathBuf};
use tsvos_core::model::ModelState;
use tsvos_core::pseudo::{pseudo_label_dataset, ModelSegmenter, PseudoStats};
use tsvos_core::trainer::{
    evaluate_first_frame, train_stage1, train_stage3, StageReport, TrainVideo,
};
use tsvos_core::types::{Config, Split, VideoSample};

pub struct PipelinePaths {
    pub teacher_ckpt: PathBuf,
    pub teacher_report: PathBuf,
    pub pseudo_manifest: PathBuf,
    pub student_ckpt: PathBuf,
    pub student_report: PathBuf,
    pub eval_report: PathBuf,
}

impl PipelinePaths {
    pub fn new(out: &Path) -> Self {
        Self {
            teacher_ckpt: out.join("teacher.ckpt"),
            teacher_report: out.join("teacher_report.json"),
            pseudo_manifest: out.join("pseudo_manifest.json"),
            student_ckpt: out.join("student.ckpt"),
            student_report: out.join("student_report.json"),
            eval_report: out.join("eval_report.json"),
        }
    }
}

#[derive(Debug, Default)]
pub struct PipelineSummary {
    pub stages_run: Vec<String>,
    pub stages_resumed: Vec<String>,
    pub teacher_report: Option<StageReport>,
    pub student_report: Option<StageReport>,
    pub pseudo_stats: Option<PseudoStats>,
    pub eval_jf: f64,
}

fn checkpoint_matches(path: &Path, hash: &str) -> Option<ModelState> {
    if !path.exists() {
        return None;
    }
    match load_checkpoint(path) {
        Ok((state, recorded)) if recorded == hash => Some(state),
        _ => None,
    }
}

/// Split loaded videos into (train, test).
pub fn split_videos(videos: Vec<TrainVideo>, manifest: &DatasetManifest) -> (Vec<TrainVideo>, Vec<TrainVideo>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for v in videos {
        let split = manifest
            .videos
            .iter()
            .find(|e| e.id == v.id)
            .map(|e| e.split)
            .unwrap_or(Split::Train);
        match split {
            Split::Train => train.push(v),
            Split::Test => test.push(v),
        }
    }
    (train, test)
}

pub fn run_pipeline(cfg: &Config, data_root: &Path, out: &Path) -> Result<PipelineSummary> {
    std::fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let paths = PipelinePaths::new(out);
    let mut summary = PipelineSummary::default();

    let manifest_path = data_root.join(MANIFEST_NAME);
    let (manifest, videos) = load_dataset(&manifest_path)?;
    let (train, test) = split_videos(videos, &manifest);
    if train.is_empty() || test.is_empty() {
        bail!("pipeline needs both train and test splits in {}", manifest_path.display());
    }

    // stage 1: teacher
    let teacher = match checkpoint_matches(&paths.teacher_ckpt, &hash) {
        Some(state) => {
            summary.stages_resumed.push("teacher".into());
            state
        }
        None => {
            let out1 = train_stage1(&train, cfg).map_err(|e| anyhow::anyhow!("stage 1: {e}"))?;
            save_checkpoint(&paths.teacher_ckpt, &out1.model, &hash)?;
            let mut report = out1.report;
            report.checkpoint_path = Some(paths.teacher_ckpt.display().to_string());
            save_stage_report(&report, &paths.teacher_report)?;
            summary.stages_run.push("teacher".into());
            summary.teacher_report = Some(report);
            out1.model
        }
    };

    // stage 2: pseudo-labeling
    let pseudo_ok = load_manifest(&paths.pseudo_manifest)
        .map(|m| m.config_hash.as_deref() == Some(hash.as_str()))
        .unwrap_or(false);
    if pseudo_ok {
        summary.stages_resumed.push("pseudo".into());
    } else {
        let named: Vec<(String, VideoSample)> = train
            .iter()
            .map(|v| (v.id.clone(), v.sample.clone()))
            .collect();
        let segmenter = ModelSegmenter {
            state: &teacher,
            memory_every: cfg.memory_every,
            memory_capacity: cfg.memory_capacity,
        };
        let (labelsets, stats) = pseudo_label_dataset(
            &named,
            &segmenter,
            cfg.binarize_threshold,
            cfg.merge_rule,
            cfg.workers,
        )
        .map_err(|e| anyhow::anyhow!("stage 2: {e}"))?;
        let mut pseudo_manifest = manifest.clone();
        for (id, labels) in &labelsets {
            save_labelset(id, labels, &mut pseudo_manifest, data_root)?;
        }
        pseudo_manifest.config_hash = Some(hash.clone());
        pseudo_manifest.root = Some(
            data_root
                .canonicalize()
                .unwrap_or_else(|_| data_root.to_path_buf())
                .display()
                .to_string(),
        );
        save_manifest(&pseudo_manifest, &paths.pseudo_manifest)?;
        summary.pseudo_stats = Some(stats);
        summary.stages_run.push("pseudo".into());
    }

    // stage 3: student re-training on the merged label set
    let student = match checkpoint_matches(&paths.student_ckpt, &hash) {
        Some(state) => {
            summary.stages_resumed.push("retrain".into());
            state
        }
        None => {
            let labelsets = load_labelsets_for(&paths.pseudo_manifest, &train)?;
            let (student, mut report) =
                train_stage3(&train, &labelsets, Some(&teacher), cfg)
                    .map_err(|e| anyhow::anyhow!("stage 3: {e}"))?;
            save_checkpoint(&paths.student_ckpt, &student, &hash)?;
            report.checkpoint_path = Some(paths.student_ckpt.display().to_string());
            save_stage_report(&report, &paths.student_report)?;
            summary.stages_run.push("retrain".into());
            summary.student_report = Some(report);
            student
        }
    };

    // evaluation on the test split
    let report = evaluate_first_frame(&test, &student, cfg)
        .map_err(|e| anyhow::anyhow!("evaluation: {e}"))?;
    save_metric_report(&report, &paths.eval_report)?;
    summary.stages_run.push("eval".into());
    summary.eval_jf = report.mean.jf;
    Ok(summary)
}

/// Load label sets from the pseudo manifest, aligned with the train videos.
fn load_labelsets_for(
    pseudo_manifest: &Path,
    train: &[TrainVideo],
) -> Result<Vec<tsvos_core::types::LabelSet>> {
    let by_id: std::collections::HashMap<String, tsvos_core::types::LabelSet> =
        load_labelsets(pseudo_manifest)?.into_iter().collect();
    train
        .iter()
        .map(|v| {
            by_id
                .get(&v.id)
                .cloned()
                .with_context(|| format!("pseudo manifest missing video {}", v.id))
        })
        .collect()
}
