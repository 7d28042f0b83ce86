//! Full-cycle, ablation and mixed-source runs with per-stage metrics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::models::{ImageModel, VideoModel};
use crate::pseudolabel::VideoPseudoLabel;
use crate::synthdata::{HiddenLabels, LabeledVideo, SyntheticDataset, Video};

use super::config::{AblationCase, CycleMode, StageConfig};
use super::metrics::{evaluate, evaluate_frame_majority, evaluate_image_model, StageRecord};
use super::stages::{run_self_training, run_stage1, run_stage2, run_stage3, run_stage4, MixedSourceData, StageOutput};

/// Data a run may look at. Training stages only receive `source` and the
/// unlabeled `target`; `hidden` and `test` feed metrics.
#[derive(Clone, Copy, Debug)]
pub struct RunData<'a> {
    pub source: &'a MixedSourceData,
    pub target: &'a [Video],
    pub hidden: &'a HiddenLabels,
    pub test: &'a [LabeledVideo],
    /// Classes reported separately as `confusable_accuracy`.
    pub confusable: &'a [usize],
}

/// Models and pseudo labels at a point of the cycle, plus the stage history.
#[derive(Clone, Debug)]
pub struct CycleState {
    /// Completed stage-3/stage-4 iterations.
    pub iteration: usize,
    pub image_model: ImageModel,
    pub video_model: Option<VideoModel>,
    /// Latest image-model (stage 2 or 4) video labels.
    pub frame_pseudo_labels: Vec<VideoPseudoLabel>,
    /// Latest video-model (stage 3) labels.
    pub video_pseudo_labels: Vec<VideoPseudoLabel>,
    pub history: Vec<StageRecord>,
}

impl CycleState {
    /// Test accuracy of the last recorded stage.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.history.last().and_then(StageRecord::test_accuracy)
    }

    fn check_labels(&self, target: &[Video]) -> Result<()> {
        let ids: std::collections::BTreeSet<usize> = target.iter().map(|v| v.id).collect();
        for l in self.frame_pseudo_labels.iter().chain(&self.video_pseudo_labels) {
            if !ids.contains(&l.video_id) {
                return Err(Error::invalid("cycle state", format!("pseudo label for unknown video {}", l.video_id)));
            }
        }
        Ok(())
    }
}

fn label_metrics(record: &mut StageRecord, labels: &[VideoPseudoLabel], hidden: &HiddenLabels) {
    if let Some(acc) = hidden.accuracy(labels.iter().map(|l| (l.video_id, l.class_id))) {
        record.metrics.insert("pseudo_label_accuracy".into(), acc);
    }
}

fn image_metrics(record: &mut StageRecord, model: &ImageModel, data: &RunData) -> Result<()> {
    let report = evaluate_image_model(model, data.test)?;
    record.metrics.insert("test_accuracy".into(), report.accuracy);
    let majority = evaluate_frame_majority(model, data.test)?;
    record.metrics.insert("frame_majority_accuracy".into(), majority.accuracy);
    if let Some(a) = report.subset_accuracy(data.confusable) {
        record.metrics.insert("confusable_accuracy".into(), a);
    }
    if let Some(a) = majority.subset_accuracy(data.confusable) {
        record.metrics.insert("frame_majority_confusable_accuracy".into(), a);
    }
    Ok(())
}

fn video_metrics(record: &mut StageRecord, model: &VideoModel, data: &RunData) -> Result<()> {
    let report = evaluate(model, data.test)?;
    record.metrics.insert("test_accuracy".into(), report.accuracy);
    if let Some(a) = report.subset_accuracy(data.confusable) {
        record.metrics.insert("confusable_accuracy".into(), a);
    }
    Ok(())
}

fn stage1(config: &StageConfig, data: &RunData, seed: u64) -> Result<StageOutput<ImageModel>> {
    let mut out = run_stage1(config, data.source, data.target, seed)?;
    image_metrics(&mut out.record, &out.model, data)?;
    Ok(out)
}

fn stage2(config: &StageConfig, image: &ImageModel, data: &RunData, seed: u64) -> Result<StageOutput<VideoModel>> {
    let mut out = run_stage2(config, image, data.target, &data.source.videos, seed)?;
    label_metrics(&mut out.record, &out.labels, data.hidden);
    video_metrics(&mut out.record, &out.model, data)?;
    Ok(out)
}

/// State after stages 1 and 2.
pub fn run_prefix(config: &StageConfig, data: &RunData, seed: u64) -> Result<CycleState> {
    let s1 = stage1(config, data, seed)?;
    let s2 = stage2(config, &s1.model, data, seed)?;
    Ok(CycleState {
        iteration: 0,
        image_model: s1.model,
        video_model: Some(s2.model),
        frame_pseudo_labels: s2.labels,
        video_pseudo_labels: Vec::new(),
        history: vec![s1.record, s2.record],
    })
}

/// Runs `n` further stage-3/stage-4 iterations on `state`.
///
/// In [`CycleMode::Reinit`] every stage 3 starts from `stage1_model`; in
/// [`CycleMode::Continue`] from the previous stage-3 image model.
pub fn run_iterations(
    config: &StageConfig,
    data: &RunData,
    mut state: CycleState,
    stage1_model: &ImageModel,
    n: usize,
    seed: u64,
) -> Result<CycleState> {
    for _ in 0..n {
        let iteration = state.iteration + 1;
        let video = state
            .video_model
            .as_ref()
            .ok_or(Error::invalid("cycle state", "stage 3 needs a trained video model"))?;
        let start = match config.cycle_mode {
            CycleMode::Continue => &state.image_model,
            CycleMode::Reinit => stage1_model,
        };
        let mut s3 = run_stage3(config, start, video, data.source, data.target, seed, iteration)?;
        label_metrics(&mut s3.record, &s3.labels, data.hidden);
        image_metrics(&mut s3.record, &s3.model, data)?;
        let mut s4 = run_stage4(config, &s3.model, data.target, &data.source.videos, seed, iteration, video)?;
        label_metrics(&mut s4.record, &s4.labels, data.hidden);
        video_metrics(&mut s4.record, &s4.model, data)?;

        state.iteration = iteration;
        state.image_model = s3.model;
        state.video_model = Some(s4.model);
        state.video_pseudo_labels = s3.labels;
        state.frame_pseudo_labels = s4.labels;
        state.history.push(s3.record);
        state.history.push(s4.record);
        state.check_labels(data.target)?;
    }
    Ok(state)
}

/// Stage 1, stage 2, then `n_iterations` rounds of stages 3 and 4.
pub fn run_cycda_on(config: &StageConfig, data: &RunData, n_iterations: usize, seed: u64) -> Result<CycleState> {
    if n_iterations == 0 {
        return Err(Error::invalid("n_iterations", "must be at least 1"));
    }
    let state = run_prefix(config, data, seed)?;
    let stage1_model = state.image_model.clone();
    run_iterations(config, data, state, &stage1_model, n_iterations, seed)
}

/// The dataset's images as source, its unlabeled training videos as target.
pub fn plain_source(dataset: &SyntheticDataset) -> MixedSourceData {
    MixedSourceData::images_only(dataset.source_images.clone())
}

fn run_data<'a>(dataset: &'a SyntheticDataset, source: &'a MixedSourceData, confusable: &'a [usize]) -> RunData<'a> {
    RunData {
        source,
        target: &dataset.target_train,
        hidden: dataset.hidden_labels(),
        test: &dataset.target_test,
        confusable,
    }
}

/// The full cycle on a synthetic dataset with image-only source.
pub fn run_cycda(config: &StageConfig, dataset: &SyntheticDataset, n_iterations: usize, seed: u64) -> Result<CycleState> {
    let source = plain_source(dataset);
    let confusable = dataset.spec.confusable_classes();
    run_cycda_on(config, &run_data(dataset, &source, &confusable), n_iterations, seed)
}

/// The full cycle with `fraction` of the labeled source videos added to the source domain.
pub fn run_mixed_source(
    config: &StageConfig,
    dataset: &SyntheticDataset,
    fraction: f64,
    n_iterations: usize,
    seed: u64,
) -> Result<CycleState> {
    let source = MixedSourceData::with_video_fraction(dataset.source_images.clone(), &dataset.source_videos, fraction)?;
    let confusable = dataset.spec.confusable_classes();
    run_cycda_on(config, &run_data(dataset, &source, &confusable), n_iterations, seed)
}

/// Runs the requested ablation cases, sharing common stage prefixes.
///
/// Cases A and B use `beta_max = 0` in stage 1; the others use the
/// configured value. Each returned state carries the full history of its
/// case, and its final accuracy is that of the last stage.
pub fn run_ablation_on(
    config: &StageConfig,
    data: &RunData,
    cases: &[AblationCase],
    seed: u64,
) -> Result<BTreeMap<AblationCase, CycleState>> {
    let mut out = BTreeMap::new();
    let wants = |c: AblationCase| cases.contains(&c);

    if wants(AblationCase::A) || wants(AblationCase::B) {
        let mut source_only = config.clone();
        source_only.beta_max = 0.0;
        let s1 = stage1(&source_only, data, seed)?;
        let a = CycleState {
            iteration: 0,
            image_model: s1.model.clone(),
            video_model: None,
            frame_pseudo_labels: Vec::new(),
            video_pseudo_labels: Vec::new(),
            history: vec![s1.record.clone()],
        };
        if wants(AblationCase::B) {
            let s2 = stage2(&source_only, &s1.model, data, seed)?;
            let mut b = a.clone();
            b.video_model = Some(s2.model);
            b.frame_pseudo_labels = s2.labels;
            b.history.push(s2.record);
            out.insert(AblationCase::B, b);
        }
        if wants(AblationCase::A) {
            out.insert(AblationCase::A, a);
        }
    }

    let later = [AblationCase::C, AblationCase::D, AblationCase::E, AblationCase::F];
    if later.iter().any(|&c| wants(c)) {
        debug_assert!(later.iter().all(|c| c.adversarial()));
        let prefix = run_prefix(config, data, seed)?;
        if wants(AblationCase::D) || wants(AblationCase::E) {
            let mut state = prefix.clone();
            for round in 1..=2 {
                let video = state.video_model.as_ref().expect("prefix has a video model");
                let mut st = run_self_training(config, video, data.target, &data.source.videos, seed, round)?;
                label_metrics(&mut st.record, &st.labels, data.hidden);
                video_metrics(&mut st.record, &st.model, data)?;
                state.video_model = Some(st.model);
                state.frame_pseudo_labels = st.labels;
                state.history.push(st.record);
                let case = if round == 1 { AblationCase::D } else { AblationCase::E };
                if wants(case) {
                    out.insert(case, state.clone());
                }
                if !wants(AblationCase::E) {
                    break;
                }
            }
        }
        if wants(AblationCase::F) {
            let stage1_model = prefix.image_model.clone();
            out.insert(
                AblationCase::F,
                run_iterations(config, data, prefix.clone(), &stage1_model, 1, seed)?,
            );
        }
        if wants(AblationCase::C) {
            out.insert(AblationCase::C, prefix);
        }
    }
    Ok(out)
}

/// [`run_ablation_on`] for a synthetic dataset with image-only source.
pub fn run_ablation(
    config: &StageConfig,
    dataset: &SyntheticDataset,
    cases: &[AblationCase],
    seed: u64,
) -> Result<BTreeMap<AblationCase, CycleState>> {
    let source = plain_source(dataset);
    let confusable = dataset.spec.confusable_classes();
    run_ablation_on(config, &run_data(dataset, &source, &confusable), cases, seed)
}
