//! Pseudo-label lifecycle: frame predictions, keep-ratio thresholds,
//! temporal aggregation, dissemination to frames and video-model labels.
//!
//! Keep-ratio threshold: sort per-video scores descending as
//! `s_1 >= ... >= s_N`, let `k = floor(p N)` and set
//! `delta = (s_k + s_{k+1}) / 2`. A video survives when its score is
//! `>= delta`, so exactly `k` survive when scores are distinct. Boundary
//! cases: `k == N` puts delta just below `s_N`, `k == 0` just above `s_1`.
//! Equal scores straddling the cut all survive.
//!
//! Majority-vote ties go to the class with the largest summed confidence,
//! then to the lowest class id.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{ImageModel, VideoModel};
use crate::synthdata::{FrameSampler, Video};

#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub video_id: usize,
    pub frame_index: usize,
    pub class_id: usize,
    /// Max softmax probability.
    pub confidence: f64,
    pub probs: Vec<f64>,
}

impl FramePrediction {
    /// Builds a prediction from a probability row (argmax, lowest index on ties).
    pub fn from_probs(video_id: usize, frame_index: usize, probs: Vec<f64>) -> Self {
        let (class_id, confidence) = argmax(&probs);
        Self {
            video_id,
            frame_index,
            class_id,
            confidence,
            probs,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoPseudoLabel {
    pub video_id: usize,
    pub class_id: usize,
    pub confidence: f64,
}

/// A frame inheriting its video's pseudo label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameLabel {
    pub video_id: usize,
    pub frame_index: usize,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    /// Drop frames below delta, majority-vote the rest.
    #[default]
    ThreshThenAvg,
    /// Average frame probabilities per video, then threshold the video confidence.
    AvgThenThresh,
    /// As `AvgThenThresh`, with a keep-ratio applied within each predicted class.
    AvgThenClassBalancedThresh,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 3] = [
        AggregationStrategy::ThreshThenAvg,
        AggregationStrategy::AvgThenThresh,
        AggregationStrategy::AvgThenClassBalancedThresh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregationStrategy::ThreshThenAvg => "thresh_then_avg",
            AggregationStrategy::AvgThenThresh => "avg_then_thresh",
            AggregationStrategy::AvgThenClassBalancedThresh => "avg_then_class_balanced_thresh",
        }
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid("aggregation strategy", format!("unknown strategy `{s}`")))
    }
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

fn check_keep_ratio(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid("keep ratio", format!("must be in (0, 1], got {p}")));
    }
    Ok(())
}

/// `floor(p n)`, tolerant of the representation error in products like `0.7 * 10`.
pub fn keep_count(p: f64, n: usize) -> usize {
    ((p * n as f64) + 1e-9).floor().min(n as f64) as usize
}

/// Threshold keeping the top `floor(p N)` of `scores` (see module docs).
pub fn threshold_from_scores(scores: &[f64], p: f64) -> Result<f64> {
    check_keep_ratio(p)?;
    if scores.is_empty() {
        return Err(Error::Empty("score set"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "threshold" });
    }
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let n = s.len();
    let k = keep_count(p, n);
    let delta = if k == n {
        s[n - 1].next_down()
    } else if k == 0 {
        s[0].next_up()
    } else {
        let (hi, lo) = (s[k - 1], s[k]);
        let mid = (hi + lo) / 2.0;
        // a midpoint can round onto `lo` when the two are adjacent floats
        if hi > lo && mid <= lo {
            lo.next_up()
        } else {
            mid
        }
    };
    Ok(delta)
}

fn group_by_video(preds: &[FramePrediction]) -> BTreeMap<usize, Vec<&FramePrediction>> {
    let mut groups: BTreeMap<usize, Vec<&FramePrediction>> = BTreeMap::new();
    for p in preds {
        groups.entry(p.video_id).or_default().push(p);
    }
    groups
}

/// Per-video maximum frame confidence, by video id.
pub fn video_max_confidence(preds: &[FramePrediction]) -> BTreeMap<usize, f64> {
    group_by_video(preds)
        .into_iter()
        .map(|(id, fs)| (id, fs.iter().map(|f| f.confidence).fold(f64::NEG_INFINITY, f64::max)))
        .collect()
}

/// Keep-ratio threshold on per-video maximum frame confidence.
pub fn compute_threshold(preds: &[FramePrediction], p: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("frame predictions"));
    }
    let maxima: Vec<f64> = video_max_confidence(preds).into_values().collect();
    threshold_from_scores(&maxima, p)
}

/// Drops frames with confidence below `delta` and majority-votes the
/// survivors of each video. Videos without surviving frames are omitted.
/// The reported confidence is the mean confidence of the winning votes.
pub fn threshold_and_vote(preds: &[FramePrediction], delta: f64) -> Vec<VideoPseudoLabel> {
    let mut out = Vec::new();
    for (video_id, frames) in group_by_video(preds) {
        // class -> (votes, summed confidence)
        let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for f in frames.iter().filter(|f| f.confidence >= delta) {
            let e = tally.entry(f.class_id).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += f.confidence;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for (&class, &(votes, conf)) in &tally {
            let better = match best {
                None => true,
                Some((_, bv, bc)) => votes > bv || (votes == bv && conf > bc),
            };
            if better {
                best = Some((class, votes, conf));
            }
        }
        if let Some((class_id, votes, conf)) = best {
            out.push(VideoPseudoLabel {
                video_id,
                class_id,
                confidence: conf / votes as f64,
            });
        }
    }
    out
}

/// Per-video average of frame probabilities, labeled with its argmax.
pub fn average_frames(preds: &[FramePrediction]) -> Result<Vec<VideoPseudoLabel>> {
    let mut out = Vec::new();
    for (video_id, frames) in group_by_video(preds) {
        let k = frames[0].probs.len();
        if k == 0 || frames.iter().any(|f| f.probs.len() != k) {
            return Err(Error::shape("average_frames", format!("video {video_id} has ragged probability rows")));
        }
        let mut avg = vec![0.0; k];
        for f in &frames {
            for (a, p) in avg.iter_mut().zip(&f.probs) {
                *a += p;
            }
        }
        let n = frames.len() as f64;
        avg.iter_mut().for_each(|a| *a /= n);
        let (class_id, confidence) = argmax(&avg);
        out.push(VideoPseudoLabel {
            video_id,
            class_id,
            confidence,
        });
    }
    Ok(out)
}

/// Keeps labels whose confidence reaches the keep-ratio threshold of the set.
pub fn keep_top(labels: Vec<VideoPseudoLabel>, p: f64) -> Result<Vec<VideoPseudoLabel>> {
    if labels.is_empty() {
        check_keep_ratio(p)?;
        return Ok(labels);
    }
    let scores: Vec<f64> = labels.iter().map(|l| l.confidence).collect();
    let delta = threshold_from_scores(&scores, p)?;
    Ok(labels.into_iter().filter(|l| l.confidence >= delta).collect())
}

/// Applies `keep_top` within each predicted class.
pub fn keep_top_per_class(labels: Vec<VideoPseudoLabel>, p: f64) -> Result<Vec<VideoPseudoLabel>> {
    check_keep_ratio(p)?;
    let mut by_class: BTreeMap<usize, Vec<VideoPseudoLabel>> = BTreeMap::new();
    for l in labels {
        by_class.entry(l.class_id).or_default().push(l);
    }
    let mut out = Vec::new();
    for (_, group) in by_class {
        out.extend(keep_top(group, p)?);
    }
    out.sort_by_key(|l| l.video_id);
    Ok(out)
}

/// Video-level pseudo labels from frame predictions with keep-ratio `p`.
pub fn aggregate(preds: &[FramePrediction], p: f64, strategy: AggregationStrategy) -> Result<Vec<VideoPseudoLabel>> {
    if preds.is_empty() {
        return Err(Error::Empty("frame predictions"));
    }
    match strategy {
        AggregationStrategy::ThreshThenAvg => {
            let delta = compute_threshold(preds, p)?;
            Ok(threshold_and_vote(preds, delta))
        }
        AggregationStrategy::AvgThenThresh => keep_top(average_frames(preds)?, p),
        AggregationStrategy::AvgThenClassBalancedThresh => keep_top_per_class(average_frames(preds)?, p),
    }
}

/// Image-model predictions for the sampled frames of every video.
pub fn predict_frames(
    model: &ImageModel,
    videos: &[Video],
    sampler: &FrameSampler,
    epoch: u64,
) -> Result<Vec<FramePrediction>> {
    let mut picks = Vec::new();
    let mut rows: Vec<&[f64]> = Vec::new();
    for v in videos {
        if v.num_frames() == 0 {
            return Err(Error::Empty("video"));
        }
        for t in sampler.sample(epoch, v.id, v.num_frames())? {
            picks.push((v.id, t));
            rows.push(v.frame(t));
        }
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let probs = model.class_probs(&Tensor::from_rows(&rows)?)?;
    Ok(picks
        .into_iter()
        .enumerate()
        .map(|(r, (vid, t))| FramePrediction::from_probs(vid, t, probs.row(r).to_vec()))
        .collect())
}

/// Image-model predictions for every frame of every video.
pub fn predict_all_frames(model: &ImageModel, videos: &[Video]) -> Result<Vec<FramePrediction>> {
    let mut out = Vec::new();
    for v in videos {
        if v.num_frames() == 0 {
            return Err(Error::Empty("video"));
        }
        let probs = model.class_probs(&v.frames)?;
        out.extend((0..probs.rows()).map(|t| FramePrediction::from_probs(v.id, t, probs.row(t).to_vec())));
    }
    Ok(out)
}

/// Copies each video label onto that video's sampled frames.
pub fn disseminate(
    labels: &[VideoPseudoLabel],
    videos: &[Video],
    sampler: &FrameSampler,
    epoch: u64,
) -> Result<Vec<FrameLabel>> {
    let by_id: BTreeMap<usize, &Video> = videos.iter().map(|v| (v.id, v)).collect();
    let mut out = Vec::new();
    for l in labels {
        let v = by_id
            .get(&l.video_id)
            .ok_or_else(|| Error::invalid("pseudo label", format!("unknown video id {}", l.video_id)))?;
        for t in sampler.sample(epoch, v.id, v.num_frames())? {
            out.push(FrameLabel {
                video_id: v.id,
                frame_index: t,
                class_id: l.class_id,
            });
        }
    }
    Ok(out)
}

/// Class probabilities of the video model, in batches.
pub fn video_probs(model: &VideoModel, videos: &[Video]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(videos.len());
    for chunk in videos.chunks(64) {
        let clips: Vec<&Tensor> = chunk.iter().map(|v| &v.frames).collect();
        let probs = model.forward(&clips)?.class_probs;
        out.extend((0..chunk.len()).map(|r| probs.row(r).to_vec()));
    }
    Ok(out)
}

/// Video-model argmax labels, thresholded with keep-ratio `p`.
pub fn predict_videos(model: &VideoModel, videos: &[Video], p: f64) -> Result<Vec<VideoPseudoLabel>> {
    check_keep_ratio(p)?;
    if videos.is_empty() {
        return Ok(Vec::new());
    }
    let labels = video_probs(model, videos)?
        .into_iter()
        .zip(videos)
        .map(|(probs, v)| {
            let (class_id, confidence) = argmax(&probs);
            VideoPseudoLabel {
                video_id: v.id,
                class_id,
                confidence,
            }
        })
        .collect();
    keep_top(labels, p)
}

/// Writes `video_id class_id confidence` lines; floats use the shortest
/// representation that parses back to the same value.
pub fn write_labels<W: Write>(mut w: W, labels: &[VideoPseudoLabel]) -> Result<()> {
    writeln!(w, "# video_id\tclass_id\tconfidence")?;
    for l in labels {
        writeln!(w, "{}\t{}\t{}", l.video_id, l.class_id, l.confidence)?;
    }
    Ok(())
}

pub fn read_labels<R: BufRead>(r: R) -> Result<Vec<VideoPseudoLabel>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Format(format!("pseudo-label line {}: `{line}`", n + 1));
        let mut it = line.split('\t');
        let (Some(a), Some(b), Some(c), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        out.push(VideoPseudoLabel {
            video_id: a.parse().map_err(|_| bad())?,
            class_id: b.parse().map_err(|_| bad())?,
            confidence: c.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
