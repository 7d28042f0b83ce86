//! The four training stages and video-model self-training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, NORM_FLOOR};
use crate::error::{Error, Result};
use crate::losses::{add_node, ce_node, contrastive_node, stage1_objective, stage3_objective};
use crate::models::{ImageModel, VideoModel};
use crate::optim::Sgd;
use crate::pseudolabel::{aggregate, disseminate, predict_all_frames, predict_videos, VideoPseudoLabel};
use crate::synthdata::{mix, FrameSampler, LabeledImage, LabeledVideo, Video};

use super::config::{Stage3Strategy, StageConfig, VideoInit};
use super::metrics::{EpochAccumulator, EpochRecord, Stage, StageRecord};

const STREAM_STAGE1: u64 = 11;
const STREAM_VIDEO: u64 = 12;
const STREAM_STAGE3: u64 = 13;
const TARGET_SAMPLER_KEY: u64 = 0x7467_745f_6672_6d73;
const SOURCE_SAMPLER_KEY: u64 = 0x7372_635f_6672_6d73;

/// Source-domain data: labeled images and, for mixed-source adaptation,
/// labeled source videos. Image-model stages treat frames sampled from the
/// source videos as additional labeled images.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedSourceData {
    pub images: Vec<LabeledImage>,
    pub videos: Vec<LabeledVideo>,
}

impl MixedSourceData {
    pub fn images_only(images: Vec<LabeledImage>) -> Self {
        Self {
            images,
            videos: Vec::new(),
        }
    }

    /// Keeps the first `floor(fraction * n_c)` source videos of every class `c`.
    pub fn with_video_fraction(images: Vec<LabeledImage>, videos: &[LabeledVideo], fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::invalid("source_video_fraction", format!("must be in [0, 1], got {fraction}")));
        }
        let mut per_class: BTreeMap<usize, Vec<&LabeledVideo>> = BTreeMap::new();
        for v in videos {
            per_class.entry(v.label).or_default().push(v);
        }
        let mut kept = Vec::new();
        for (_, vs) in per_class {
            let n = ((fraction * vs.len() as f64) + 1e-9).floor() as usize;
            kept.extend(vs.into_iter().take(n).cloned());
        }
        kept.sort_by_key(|v| v.video.id);
        Ok(Self { images, videos: kept })
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty() && self.videos.is_empty()
    }

    /// Source images followed by the frames sampled from each source video
    /// in `epoch`, each frame inheriting its video's label.
    pub fn labeled_samples(&self, sampler: &FrameSampler, epoch: u64) -> Result<Vec<(&[f64], usize)>> {
        let mut out: Vec<(&[f64], usize)> = self.images.iter().map(|i| (i.features.as_slice(), i.label)).collect();
        for v in &self.videos {
            for t in sampler.sample(epoch, v.video.id, v.video.num_frames())? {
                out.push((v.video.frame(t), v.label));
            }
        }
        Ok(out)
    }
}

/// A trained model with the pseudo labels it was trained on (if any) and
/// its stage record.
#[derive(Clone, Debug)]
pub struct StageOutput<M> {
    pub model: M,
    pub labels: Vec<VideoPseudoLabel>,
    pub record: StageRecord,
}

pub(crate) fn target_sampler(config: &StageConfig, seed: u64) -> FrameSampler {
    FrameSampler::new(mix(seed ^ TARGET_SAMPLER_KEY), config.n_segments)
}

pub(crate) fn source_sampler(config: &StageConfig, seed: u64) -> FrameSampler {
    FrameSampler::new(mix(seed ^ SOURCE_SAMPLER_KEY), config.n_segments)
}

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn target_frames<'a>(videos: &'a [Video], sampler: &FrameSampler, epoch: u64) -> Result<Vec<&'a [f64]>> {
    let mut out = Vec::new();
    for v in videos {
        for t in sampler.sample(epoch, v.id, v.num_frames())? {
            out.push(v.frame(t));
        }
    }
    Ok(out)
}

fn range(lo: usize, hi: usize) -> Vec<usize> {
    (lo..hi).collect()
}

/// `len` items starting at `offset`, wrapping around `perm`.
fn cyclic<'p>(perm: &'p [usize], offset: usize, len: usize) -> impl Iterator<Item = usize> + 'p {
    let n = perm.len();
    (0..len).map(move |i| perm[(offset + i) % n])
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Class-agnostic adversarial alignment (stage 1).
///
/// Each step draws a source batch and an equally sized batch of target
/// frames. The discriminator sees the features through a reversal node with
/// coefficient beta, so one descent step trains the discriminator to
/// separate the domains and the encoder to confuse it. With `beta_max == 0`
/// the discriminator is not built and the stage is source-only training.
pub fn run_stage1(
    config: &StageConfig,
    source: &MixedSourceData,
    target: &[Video],
    seed: u64,
) -> Result<StageOutput<ImageModel>> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::Empty("source domain"));
    }
    let adversarial = config.beta_max > 0.0;
    if adversarial && target.is_empty() {
        return Err(Error::Empty("target domain"));
    }
    let mut model = ImageModel::init(&config.model, seed)?;
    let mut opt = Sgd::new(config.momentum);
    let mut rng = stage_rng(seed, STREAM_STAGE1);
    let (t_sampler, s_sampler) = (target_sampler(config, seed), source_sampler(config, seed));
    let b = config.batch_size;
    let mut record = StageRecord::new(Stage::Stage1, 0);

    let n_src = source.labeled_samples(&s_sampler, 0)?.len();
    let steps = n_src.div_ceil(b);
    let total = (steps * config.epochs.stage1).max(1);
    let mut step_index = 0usize;
    for epoch in 0..config.epochs.stage1 {
        let src = source.labeled_samples(&s_sampler, epoch as u64)?;
        let tgt = if adversarial {
            target_frames(target, &t_sampler, epoch as u64)?
        } else {
            Vec::new()
        };
        let src_perm = shuffled(src.len(), &mut rng);
        let tgt_perm = shuffled(tgt.len(), &mut rng);
        let mut acc = EpochAccumulator::default();
        for s in 0..steps {
            let batch = &src_perm[s * b..((s + 1) * b).min(src.len())];
            let ns = batch.len();
            let mut rows: Vec<&[f64]> = batch.iter().map(|&i| src[i].0).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| src[i].1).collect();
            if adversarial {
                rows.extend(cyclic(&tgt_perm, s * b, ns).map(|i| tgt[i]));
            }

            let mut g = Graph::new();
            let net = model.bind(&mut g)?;
            let x = g.input_value("x", Tensor::from_rows(&rows)?)?;
            let z = net.encode(&mut g, x)?;
            let zs = if adversarial { g.gather_rows(z, &range(0, ns))? } else { z };
            let probs = net.classify(&mut g, zs)?;
            let ce = ce_node(&mut g, probs, &labels)?;
            let (objective, add) = if adversarial {
                let beta = config.beta(step_index as f64 / total as f64)?;
                acc.add("beta", beta);
                let r = g.gradient_reversal(z, beta)?;
                let d = net.discriminate(&mut g, r)?;
                let ds = g.gather_rows(d, &range(0, ns))?;
                let dt = g.gather_rows(d, &range(ns, 2 * ns))?;
                let add = add_node(&mut g, ds, dt)?;
                (stage1_objective(&mut g, ce, add)?, Some(add))
            } else {
                (ce, None)
            };
            g.forward(&[])?;
            acc.add("ce_source", g.value(ce)?.item());
            if let Some(add) = add {
                acc.add("adversarial", g.value(add)?.item());
            }
            let grads = g.backward(objective)?;
            opt.step(&mut model.params, &grads, |n| config.image_rate(n));
            step_index += 1;
        }
        record.epochs.push(acc.finish(epoch));
    }
    Ok(StageOutput {
        model,
        labels: Vec::new(),
        record,
    })
}

/// Video-level pseudo labels from image-model predictions on every frame,
/// keeping a fraction `p` of the videos.
pub fn image_pseudo_labels(
    config: &StageConfig,
    image_model: &ImageModel,
    target: &[Video],
    p: f64,
) -> Result<Vec<VideoPseudoLabel>> {
    if target.is_empty() {
        return Err(Error::Empty("target videos"));
    }
    let preds = predict_all_frames(image_model, target)?;
    aggregate(&preds, p, config.aggregation)
}

/// Trains a video model on pseudo-labeled target videos plus any labeled
/// source videos, minimizing the mean CE over their union.
///
/// Initialization and batch order depend only on `seed`, so equal labels
/// and seed give bitwise-equal models.
pub fn train_video_model(
    config: &StageConfig,
    target: &[Video],
    labels: &[VideoPseudoLabel],
    source_videos: &[LabeledVideo],
    seed: u64,
    epochs: usize,
    init: Option<&VideoModel>,
) -> Result<(VideoModel, Vec<EpochRecord>)> {
    config.validate()?;
    let by_id: BTreeMap<usize, &Video> = target.iter().map(|v| (v.id, v)).collect();
    let mut examples: Vec<(&Tensor, usize)> = Vec::with_capacity(labels.len() + source_videos.len());
    for l in labels {
        let v = by_id
            .get(&l.video_id)
            .ok_or_else(|| Error::invalid("pseudo label", format!("unknown video id {}", l.video_id)))?;
        if l.class_id >= config.model.classes {
            return Err(Error::LabelOutOfRange {
                label: l.class_id,
                classes: config.model.classes,
            });
        }
        examples.push((&v.frames, l.class_id));
    }
    examples.extend(source_videos.iter().map(|v| (&v.video.frames, v.label)));
    if examples.is_empty() {
        return Err(Error::Empty("pseudo-labeled target videos"));
    }

    let mut model = match init {
        Some(m) => m.clone(),
        None => VideoModel::init(&config.model, seed)?,
    };
    let mut opt = Sgd::new(config.momentum);
    let mut rng = stage_rng(seed, STREAM_VIDEO);
    let b = config.batch_size;
    let n_epochs = epochs;
    let mut epochs = Vec::with_capacity(n_epochs);
    for epoch in 0..n_epochs {
        let perm = shuffled(examples.len(), &mut rng);
        let mut acc = EpochAccumulator::default();
        for batch in perm.chunks(b) {
            let clips: Vec<&Tensor> = batch.iter().map(|&i| examples[i].0).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| examples[i].1).collect();
            let mut g = Graph::new();
            let net = model.bind(&mut g)?;
            let x = g.input_value("x", model.stack_clips(&clips)?)?;
            let z = net.encode(&mut g, x)?;
            let probs = net.classify(&mut g, z)?;
            let ce = ce_node(&mut g, probs, &targets)?;
            g.forward(&[])?;
            acc.add("ce_video", g.value(ce)?.item());
            let grads = g.backward(ce)?;
            opt.step(&mut model.params, &grads, |n| config.video_rate(n));
        }
        epochs.push(acc.finish(epoch));
    }
    Ok((model, epochs))
}

fn video_stage(
    stage: Stage,
    iteration: usize,
    config: &StageConfig,
    labels: Vec<VideoPseudoLabel>,
    target: &[Video],
    source_videos: &[LabeledVideo],
    seed: u64,
    init: Option<&VideoModel>,
) -> Result<StageOutput<VideoModel>> {
    let n_epochs = if stage == Stage::Stage2 { config.epochs.stage2 } else { config.epochs.stage4 };
    let (model, epochs) = train_video_model(config, target, &labels, source_videos, seed, n_epochs, init)?;
    let mut record = StageRecord::new(stage, iteration);
    record.epochs = epochs;
    record.metrics.insert("pseudo_label_count".into(), labels.len() as f64);
    Ok(StageOutput { model, labels, record })
}

/// Spatio-temporal learning on image-model pseudo labels (stage 2).
pub fn run_stage2(
    config: &StageConfig,
    image_model: &ImageModel,
    target: &[Video],
    source_videos: &[LabeledVideo],
    seed: u64,
) -> Result<StageOutput<VideoModel>> {
    let labels = image_pseudo_labels(config, image_model, target, config.keep_ratios.stage2)?;
    video_stage(Stage::Stage2, 0, config, labels, target, source_videos, seed, None)
}

/// Video-model retraining on the refreshed image-model pseudo labels (stage 4).
///
/// With [`VideoInit::Fresh`] the model starts from the stage-2
/// initialization; with [`VideoInit::FineTune`] from `previous`.
pub fn run_stage4(
    config: &StageConfig,
    image_model: &ImageModel,
    target: &[Video],
    source_videos: &[LabeledVideo],
    seed: u64,
    iteration: usize,
    previous: &VideoModel,
) -> Result<StageOutput<VideoModel>> {
    let labels = image_pseudo_labels(config, image_model, target, config.keep_ratios.stage4)?;
    let init = (config.stage4_init == VideoInit::FineTune).then_some(previous);
    video_stage(Stage::Stage4, iteration, config, labels, target, source_videos, seed, init)
}

/// One round of video-model self-training: the model's own thresholded
/// predictions train a fresh video model.
pub fn run_self_training(
    config: &StageConfig,
    video_model: &VideoModel,
    target: &[Video],
    source_videos: &[LabeledVideo],
    seed: u64,
    round: usize,
) -> Result<StageOutput<VideoModel>> {
    let labels = predict_videos(video_model, target, config.keep_ratios.stage4)?;
    video_stage(Stage::SelfTrain, round, config, labels, target, source_videos, seed, None)
}

/// Image model after class-aware alignment, with the per-step contrastive
/// values of the run (empty unless the strategy uses the contrastive term).
#[derive(Clone, Debug)]
pub struct AlignOutput {
    pub model: ImageModel,
    pub epochs: Vec<EpochRecord>,
    pub contrastive_trace: Vec<f64>,
}

/// Stage-3 training given video pseudo labels.
///
/// The classifier head is re-initialized; encoder and discriminator carry
/// over from `image_model`. Every step pairs a source batch with a batch of
/// pseudo-labeled target frames. For the contrastive strategy each target
/// frame is an anchor with a freshly drawn source positive of its pseudo
/// class and a source negative of another class; anchors whose class has no
/// source exemplar, or with a zero-norm feature in the triplet, are skipped
/// and counted.
pub fn align_image_model(
    config: &StageConfig,
    image_model: &ImageModel,
    source: &MixedSourceData,
    target: &[Video],
    labels: &[VideoPseudoLabel],
    seed: u64,
    iteration: usize,
) -> Result<AlignOutput> {
    config.validate()?;
    if labels.is_empty() {
        return Err(Error::Empty("video pseudo labels"));
    }
    let strategy = config.stage3_strategy;
    if source.is_empty() && strategy.uses_source_ce() {
        return Err(Error::Empty("source domain"));
    }
    let mut model = image_model.clone();
    model.reinit_classifier(mix(seed ^ iteration as u64));
    let mut opt = Sgd::new(config.momentum);
    let mut rng = stage_rng(seed, STREAM_STAGE3 + 16 * iteration as u64);
    let (t_sampler, s_sampler) = (target_sampler(config, seed), source_sampler(config, seed));
    let b = config.batch_size;
    let k = config.model.classes;

    let n_src = source.labeled_samples(&s_sampler, 0)?.len();
    let n_tgt = labels.len() * config.n_segments;
    let steps = if strategy.uses_source_ce() { n_src } else { n_tgt }.div_ceil(b);
    let total = (steps * config.epochs.stage3).max(1);
    let by_id: BTreeMap<usize, &Video> = target.iter().map(|v| (v.id, v)).collect();
    let mut epochs = Vec::with_capacity(config.epochs.stage3);
    let mut trace = Vec::new();
    let mut step_index = 0usize;
    for epoch in 0..config.epochs.stage3 {
        let e = epoch as u64;
        let src = source.labeled_samples(&s_sampler, e)?;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, s) in src.iter().enumerate() {
            by_class[s.1].push(i);
        }
        let tgt: Vec<(&[f64], usize)> = disseminate(labels, target, &t_sampler, e)?
            .into_iter()
            .map(|f| (by_id[&f.video_id].frame(f.frame_index), f.class_id))
            .collect();
        let src_perm = shuffled(src.len(), &mut rng);
        let tgt_perm = shuffled(tgt.len(), &mut rng);
        let mut acc = EpochAccumulator::default();
        let (mut skipped_positive, mut skipped_norm) = (0usize, 0usize);
        for s in 0..steps {
            let src_batch: Vec<usize> = if strategy.uses_source_ce() {
                cyclic(&src_perm, s * b, b.min(src.len())).collect()
            } else {
                Vec::new()
            };
            let tgt_batch: Vec<usize> = cyclic(&tgt_perm, s * b, b.min(tgt.len())).collect();
            let (ns, nt) = (src_batch.len(), tgt_batch.len());
            let mut rows: Vec<&[f64]> = src_batch.iter().map(|&i| src[i].0).collect();
            rows.extend(tgt_batch.iter().map(|&i| tgt[i].0));

            // triplet partners, appended after the target rows
            let mut anchors = Vec::new();
            let (mut positives, mut negatives) = (Vec::new(), Vec::new());
            if strategy == Stage3Strategy::SourceCeContrastive {
                for (j, &ti) in tgt_batch.iter().enumerate() {
                    let c = tgt[ti].1;
                    let others = src.len() - by_class[c].len();
                    if by_class[c].is_empty() || others == 0 {
                        skipped_positive += 1;
                        continue;
                    }
                    let pos = by_class[c][rng.random_range(0..by_class[c].len())];
                    let neg = loop {
                        let i = rng.random_range(0..src.len());
                        if src[i].1 != c {
                            break i;
                        }
                    };
                    anchors.push(ns + j);
                    positives.push(src[pos].0);
                    negatives.push(src[neg].0);
                }
            }
            let n_pairs = anchors.len();
            let base = ns + nt;
            rows.extend(positives.iter().chain(&negatives).copied());

            let mut g = Graph::new();
            let net = model.bind(&mut g)?;
            let x = g.input_value("x", Tensor::from_rows(&rows)?)?;
            let z = net.encode(&mut g, x)?;
            let mut terms = Vec::new();
            if strategy.uses_source_ce() {
                let zs = g.gather_rows(z, &range(0, ns))?;
                let p = net.classify(&mut g, zs)?;
                let labels_s: Vec<usize> = src_batch.iter().map(|&i| src[i].1).collect();
                terms.push(("ce_source", ce_node(&mut g, p, &labels_s)?));
            }
            if strategy.uses_target_ce() {
                let zt = g.gather_rows(z, &range(ns, ns + nt))?;
                let p = net.classify(&mut g, zt)?;
                let labels_t: Vec<usize> = tgt_batch.iter().map(|&i| tgt[i].1).collect();
                terms.push(("ce_target", ce_node(&mut g, p, &labels_t)?));
            }
            let mut add = None;
            if strategy == Stage3Strategy::SourceTargetCeAdd {
                let beta = config.beta(step_index as f64 / total as f64)?;
                acc.add("beta", beta);
                let r = g.gradient_reversal(z, beta)?;
                let ds_in = g.gather_rows(r, &range(0, ns))?;
                let dt_in = g.gather_rows(r, &range(ns, ns + nt))?;
                let ds = net.discriminate(&mut g, ds_in)?;
                let dt = net.discriminate(&mut g, dt_in)?;
                add = Some(add_node(&mut g, ds, dt)?);
            }
            let mut contrastive = None;
            if n_pairs > 0 {
                // drop triplets containing a zero-norm feature before building the loss
                g.run(z)?;
                let zv = g.value(z)?;
                let norm = |r: usize| zv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                let valid: Vec<usize> = (0..n_pairs)
                    .filter(|&i| {
                        norm(anchors[i]) >= NORM_FLOOR
                            && norm(base + i) >= NORM_FLOOR
                            && norm(base + n_pairs + i) >= NORM_FLOOR
                    })
                    .collect();
                skipped_norm += n_pairs - valid.len();
                if !valid.is_empty() {
                    let a_rows: Vec<usize> = valid.iter().map(|&i| anchors[i]).collect();
                    let p_rows: Vec<usize> = valid.iter().map(|&i| base + i).collect();
                    let n_rows: Vec<usize> = valid.iter().map(|&i| base + n_pairs + i).collect();
                    let za = g.gather_rows(z, &a_rows)?;
                    let zp = g.gather_rows(z, &p_rows)?;
                    let zn = g.gather_rows(z, &n_rows)?;
                    contrastive = Some(contrastive_node(&mut g, za, zp, zn, config.tau)?);
                }
            }

            let mut objective = match strategy {
                Stage3Strategy::SourceCeContrastive => stage3_objective(&mut g, terms[0].1, contrastive)?,
                _ => {
                    let mut o = terms[0].1;
                    for &(_, t) in &terms[1..] {
                        o = g.add(o, t)?;
                    }
                    o
                }
            };
            if let Some(a) = add {
                objective = stage1_objective(&mut g, objective, a)?;
            }
            g.forward(&[])?;
            for &(name, t) in &terms {
                acc.add(name, g.value(t)?.item());
            }
            if let Some(a) = add {
                acc.add("adversarial", g.value(a)?.item());
            }
            if let Some(c) = contrastive {
                let v = g.value(c)?.item();
                acc.add("contrastive", v);
                trace.push(v);
            }
            let grads = g.backward(objective)?;
            opt.step(&mut model.params, &grads, |n| config.image_rate(n));
            step_index += 1;
        }
        if strategy == Stage3Strategy::SourceCeContrastive {
            acc.count("skipped_no_positive", skipped_positive);
            acc.count("skipped_zero_norm", skipped_norm);
        }
        epochs.push(acc.finish(epoch));
    }
    Ok(AlignOutput {
        model,
        epochs,
        contrastive_trace: trace,
    })
}

/// Class-aware alignment with video-model pseudo labels (stage 3).
pub fn run_stage3(
    config: &StageConfig,
    image_model: &ImageModel,
    video_model: &VideoModel,
    source: &MixedSourceData,
    target: &[Video],
    seed: u64,
    iteration: usize,
) -> Result<StageOutput<ImageModel>> {
    let labels = predict_videos(video_model, target, config.keep_ratios.stage3)?;
    let out = align_image_model(config, image_model, source, target, &labels, seed, iteration)?;
    let mut record = StageRecord::new(Stage::Stage3, iteration);
    record.epochs = out.epochs;
    record.metrics.insert("pseudo_label_count".into(), labels.len() as f64);
    Ok(StageOutput {
        model: out.model,
        labels,
        record,
    })
}
