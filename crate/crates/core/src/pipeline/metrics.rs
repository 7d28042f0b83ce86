//! Per-stage metrics and test-set evaluation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{ImageModel, VideoModel};
use crate::pseudolabel::{threshold_and_vote, video_probs, FramePrediction};
use crate::synthdata::LabeledVideo;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Class-agnostic adversarial alignment of the image model.
    Stage1,
    /// Video model trained on image-model pseudo labels.
    Stage2,
    /// Class-aware alignment of the image model with video-model labels.
    Stage3,
    /// Video model retrained on the refreshed pseudo labels.
    Stage4,
    /// Video model retrained on its own predictions (ablation cases D and E).
    SelfTrain,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
            Stage::Stage4 => "stage4",
            Stage::SelfTrain => "self_train",
        };
        f.write_str(s)
    }
}

/// Mean loss components over the steps of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Summary of one stage execution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// 0 for stages 1 and 2, the cycle (or self-training round) index from 1 otherwise.
    pub iteration: usize,
    pub epochs: Vec<EpochRecord>,
    /// End-of-stage scalars such as `test_accuracy` and `pseudo_label_count`.
    pub metrics: BTreeMap<String, f64>,
}

impl StageRecord {
    pub(crate) fn new(stage: Stage, iteration: usize) -> Self {
        Self {
            stage,
            iteration,
            epochs: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn test_accuracy(&self) -> Option<f64> {
        self.metric("test_accuracy")
    }

    /// Names of every loss component recorded in any epoch.
    pub fn loss_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.epochs.iter().flat_map(|e| e.metrics.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }
}

/// Accumulates per-step loss components into epoch means.
#[derive(Default)]
pub(crate) struct EpochAccumulator {
    sums: BTreeMap<String, (f64, usize)>,
}

impl EpochAccumulator {
    pub(crate) fn add(&mut self, name: &str, value: f64) {
        let e = self.sums.entry(name.to_string()).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
    }

    pub(crate) fn count(&mut self, name: &str, n: usize) {
        let e = self.sums.entry(name.to_string()).or_insert((0.0, 0));
        e.0 += n as f64;
        e.1 = 1;
    }

    pub(crate) fn finish(self, epoch: usize) -> EpochRecord {
        EpochRecord {
            epoch,
            metrics: self.sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        }
    }
}

/// Accuracy, per-class accuracy and confusion matrix on labeled test videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut confusion = vec![vec![0usize; classes]; classes];
        let mut n = 0usize;
        for (truth, pred) in pairs {
            if truth >= classes || pred >= classes {
                return Err(Error::LabelOutOfRange {
                    label: truth.max(pred),
                    classes,
                });
            }
            confusion[truth][pred] += 1;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Empty("test set"));
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect();
        Ok(Self {
            accuracy: correct as f64 / n as f64,
            per_class,
            confusion,
        })
    }

    /// Accuracy restricted to videos whose true class is in `classes`.
    pub fn subset_accuracy(&self, classes: &[usize]) -> Option<f64> {
        let (mut hit, mut n) = (0usize, 0usize);
        for &c in classes {
            let row = self.confusion.get(c)?;
            hit += row[c];
            n += row.iter().sum::<usize>();
        }
        (n > 0).then(|| hit as f64 / n as f64)
    }

    /// Tab-separated text rendering.
    pub fn to_text(&self) -> String {
        let mut s = format!("accuracy\t{:.6}\n\nclass\taccuracy\tcount\n", self.accuracy);
        for (c, (acc, row)) in self.per_class.iter().zip(&self.confusion).enumerate() {
            let acc = acc.map_or("-".to_string(), |a| format!("{a:.6}"));
            s.push_str(&format!("{c}\t{acc}\t{}\n", row.iter().sum::<usize>()));
        }
        s.push_str("\nconfusion (rows: true class, columns: predicted class)\n");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join("\t"));
            s.push('\n');
        }
        s
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 evaluation of a video model.
pub fn evaluate(model: &VideoModel, test: &[LabeledVideo]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let videos: Vec<_> = test.iter().map(|v| v.video.clone()).collect();
    let probs = video_probs(model, &videos)?;
    EvalReport::from_predictions(
        model.dims.classes,
        test.iter().zip(&probs).map(|(v, p)| (v.label, argmax(p))),
    )
}

fn frame_probs(model: &ImageModel, v: &LabeledVideo) -> Result<Tensor> {
    model.class_probs(&v.video.frames)
}

/// Image-model evaluation on videos: argmax of the frame-averaged class
/// probabilities over all frames.
pub fn evaluate_image_model(model: &ImageModel, test: &[LabeledVideo]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut pairs = Vec::with_capacity(test.len());
    for v in test {
        let probs = frame_probs(model, v)?;
        let k = probs.cols();
        let mut avg = vec![0.0; k];
        for r in 0..probs.rows() {
            for (a, p) in avg.iter_mut().zip(probs.row(r)) {
                *a += p;
            }
        }
        pairs.push((v.label, argmax(&avg)));
    }
    EvalReport::from_predictions(model.dims.classes, pairs)
}

/// Image-model evaluation on videos by majority vote of per-frame argmax
/// labels over all frames (ties as in pseudo-label aggregation).
pub fn evaluate_frame_majority(model: &ImageModel, test: &[LabeledVideo]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut pairs = Vec::with_capacity(test.len());
    for v in test {
        let probs = frame_probs(model, v)?;
        let preds: Vec<FramePrediction> = (0..probs.rows())
            .map(|t| FramePrediction::from_probs(0, t, probs.row(t).to_vec()))
            .collect();
        let vote = threshold_and_vote(&preds, f64::NEG_INFINITY);
        pairs.push((v.label, vote[0].class_id));
    }
    EvalReport::from_predictions(model.dims.classes, pairs)
}
