//! Quadro-inference pseudo-labeling.
//!
//! Four rollouts — forward and reverse from each of the two labeled frames —
//! cover every unlabeled frame from at least one side. Per frame, the
//! prediction whose reference frame is temporally closest wins (ties toward
//! t1); labeled frames keep their ground truth. An overlap-consensus merge
//! rule is available behind a config switch.

use crate::model::{self, Direction, ModelState};
use crate::types::{
    binarize, Error, LabelSet, Mask, MergeRule, Provenance, Result, Stream, VideoSample,
};
use ndarray::Array2;
use rayon::prelude::*;

/// Anything that can run a reference-conditioned rollout. Implemented by the
/// trained model and by the ground-truth oracle stub used to verify the
/// pseudo-labeling plumbing independently of learning.
pub trait Segmenter: Sync {
    fn rollout(
        &self,
        video: &VideoSample,
        reference: (usize, &Mask),
        direction: Direction,
    ) -> Result<Vec<Array2<f64>>>;
}

/// The trained model with its inference memory schedule.
pub struct ModelSegmenter<'a> {
    pub state: &'a ModelState,
    pub memory_every: usize,
    pub memory_capacity: usize,
}

impl Segmenter for ModelSegmenter<'_> {
    fn rollout(
        &self,
        video: &VideoSample,
        reference: (usize, &Mask),
        direction: Direction,
    ) -> Result<Vec<Array2<f64>>> {
        model::rollout(
            video,
            reference,
            direction,
            self.state,
            self.memory_every,
            self.memory_capacity,
        )
    }
}

/// Returns each frame's ground truth as the prediction. Requires full GT on
/// the videos it sees.
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn rollout(
        &self,
        video: &VideoSample,
        reference: (usize, &Mask),
        direction: Direction,
    ) -> Result<Vec<Array2<f64>>> {
        model::rollout_indices(video.len(), reference.0, direction)
            .into_iter()
            .map(|idx| {
                video.gt_masks[idx]
                    .as_ref()
                    .map(|m| m.to_float())
                    .ok_or_else(|| {
                        Error::Index(format!("oracle segmenter needs ground truth at frame {idx}"))
                    })
            })
            .collect()
    }
}

/// One rollout's predictions: frame indices and probability maps aligned in
/// traversal order.
#[derive(Debug, Clone)]
pub struct StreamPrediction {
    pub stream: Stream,
    pub reference_index: usize,
    pub frame_indices: Vec<usize>,
    pub maps: Vec<Array2<f64>>,
}

impl StreamPrediction {
    pub fn covers(&self, frame: usize) -> bool {
        self.frame_indices.contains(&frame)
    }

    fn map_for(&self, frame: usize) -> Option<&Array2<f64>> {
        self.frame_indices
            .iter()
            .position(|&i| i == frame)
            .map(|p| &self.maps[p])
    }
}

/// Run the four (reference, direction) rollouts. Streams with a reference at
/// the video boundary legitimately cover nothing.
pub fn quadro_inference(
    video: &VideoSample,
    segmenter: &dyn Segmenter,
) -> Result<[StreamPrediction; 4]> {
    let (t1, t2) = video.labeled_indices;
    let m1 = video.gt_masks[t1]
        .as_ref()
        .ok_or_else(|| Error::Index(format!("labeled frame {t1} has no mask")))?;
    let m2 = video.gt_masks[t2]
        .as_ref()
        .ok_or_else(|| Error::Index(format!("labeled frame {t2} has no mask")))?;
    let spec = [
        (Stream::FwdT1, t1, m1, Direction::Forward),
        (Stream::RevT1, t1, m1, Direction::Reverse),
        (Stream::FwdT2, t2, m2, Direction::Forward),
        (Stream::RevT2, t2, m2, Direction::Reverse),
    ];
    let mut out = Vec::with_capacity(4);
    for (stream, r, mask, dir) in spec {
        let maps = segmenter.rollout(video, (r, mask), dir)?;
        out.push(StreamPrediction {
            stream,
            reference_index: r,
            frame_indices: model::rollout_indices(video.len(), r, dir),
            maps,
        });
    }
    Ok(out.try_into().map_err(|_| Error::Value("stream count".into())).unwrap())
}

/// Temporal selection rule: among streams covering `frame`, the one whose
/// reference index is closest. Depends only on indices, never on mask
/// content. Stream order [FwdT1, RevT1, FwdT2, RevT2] breaks ties toward t1.
fn select_temporal(frame: usize, streams: &[StreamPrediction; 4]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None; // (stream slot, distance)
    for (slot, s) in streams.iter().enumerate() {
        if !s.covers(frame) {
            continue;
        }
        let d = frame.abs_diff(s.reference_index);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((slot, d));
        }
    }
    best.map(|(slot, _)| slot)
}

/// Overlap-consensus rule: the covering stream whose binarized prediction
/// agrees most (mean IoU) with the other covering streams; falls back to the
/// temporal rule on ties or single coverage.
fn select_overlap(
    frame: usize,
    streams: &[StreamPrediction; 4],
    threshold: f64,
) -> Option<usize> {
    let covering: Vec<usize> = (0..4).filter(|&i| streams[i].covers(frame)).collect();
    match covering.len() {
        0 => None,
        1 => Some(covering[0]),
        _ => {
            let masks: Vec<Mask> = covering
                .iter()
                .map(|&i| binarize(streams[i].map_for(frame).unwrap(), threshold))
                .collect();
            let mut best_slot = covering[0];
            let mut best_score = f64::NEG_INFINITY;
            for (ci, &slot) in covering.iter().enumerate() {
                let mut score = 0.0;
                for (cj, _) in covering.iter().enumerate() {
                    if ci != cj {
                        score += crate::metrics::jaccard(&masks[ci], &masks[cj]).unwrap_or(0.0);
                    }
                }
                if score > best_score {
                    best_score = score;
                    best_slot = slot;
                }
            }
            Some(best_slot)
        }
    }
}

/// Assemble the full-video label set from the four streams. Labeled frames
/// keep ground truth; every unlabeled frame takes the selected stream's
/// prediction, binarized once here.
pub fn merge_streams(
    video: &VideoSample,
    streams: &[StreamPrediction; 4],
    threshold: f64,
    rule: MergeRule,
) -> Result<LabelSet> {
    let t_len = video.len();
    let (t1, t2) = video.labeled_indices;
    let mut masks = Vec::with_capacity(t_len);
    let mut provenance = Vec::with_capacity(t_len);
    let mut source = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if t == t1 || t == t2 {
            masks.push(video.gt_masks[t].clone().unwrap());
            provenance.push(Provenance::GroundTruth);
            source.push(None);
            continue;
        }
        let slot = match rule {
            MergeRule::Temporal => select_temporal(t, streams),
            MergeRule::Overlap => select_overlap(t, streams, threshold),
        }
        .ok_or_else(|| Error::Coverage(format!("frame {t} covered by no stream")))?;
        let s = &streams[slot];
        masks.push(binarize(s.map_for(t).unwrap(), threshold));
        provenance.push(Provenance::Pseudo);
        source.push(Some(s.stream));
    }
    LabelSet::new(masks, provenance, source, (t1, t2))
}

/// Per-corpus pseudo-labeling statistics.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct PseudoStats {
    /// Selected-frame counts in [FwdT1, RevT1, FwdT2, RevT2] order.
    pub selected_per_stream: [usize; 4],
    pub total_unlabeled: usize,
    pub total_ground_truth: usize,
}

impl PseudoStats {
    pub fn gt_fraction(&self) -> f64 {
        let total = self.total_unlabeled + self.total_ground_truth;
        if total == 0 {
            0.0
        } else {
            self.total_ground_truth as f64 / total as f64
        }
    }

    fn absorb(&mut self, labels: &LabelSet) {
        for (p, s) in labels.provenance.iter().zip(labels.source_stream.iter()) {
            match p {
                Provenance::GroundTruth => self.total_ground_truth += 1,
                Provenance::Pseudo => {
                    self.total_unlabeled += 1;
                    let slot = Stream::ALL
                        .iter()
                        .position(|x| Some(*x) == *s)
                        .expect("pseudo frame has a stream");
                    self.selected_per_stream[slot] += 1;
                }
            }
        }
    }
}

/// Pseudo-label a corpus: quadro-inference plus merge per video, parallel
/// across videos when `workers > 0`. Errors carry the offending video id.
pub fn pseudo_label_dataset(
    videos: &[(String, VideoSample)],
    segmenter: &dyn Segmenter,
    threshold: f64,
    rule: MergeRule,
    workers: usize,
) -> Result<(Vec<(String, LabelSet)>, PseudoStats)> {
    let label_one = |(id, video): &(String, VideoSample)| -> Result<(String, LabelSet)> {
        let streams = quadro_inference(video, segmenter)
            .map_err(|e| Error::Value(format!("video {id}: {e}")))?;
        let labels = merge_streams(video, &streams, threshold, rule)
            .map_err(|e| Error::Value(format!("video {id}: {e}")))?;
        Ok((id.clone(), labels))
    };
    let results: Vec<(String, LabelSet)> = if workers == 0 {
        videos.iter().map(label_one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Value(format!("worker pool: {e}")))?;
        pool.install(|| videos.par_iter().map(label_one).collect::<Result<_>>())?
    };
    let mut stats = PseudoStats::default();
    for (_, labels) in &results {
        stats.absorb(labels);
    }
    Ok((results, stats))
}
