//! Classification, adversarial domain and cross-domain contrastive losses.
//!
//! Each loss has two forms: a closed-form evaluation on plain values that
//! returns a [`LossValue`], and a graph builder (`*_node`) used in training.
//! Batch reductions are means, so values are comparable across batch sizes.
//!
//! Domain convention for the discriminator: source rows are labeled 1,
//! target rows 0. The adversarial term is
//! `mean_src log D + mean_tgt log(1 - D)`, which a correct discriminator
//! drives towards 0 from below.

use crate::autodiff::{Axis, Graph, NodeId, Tensor, LOG_FLOOR, NORM_FLOOR};
use crate::error::{Error, Result};

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub reduction: Reduction,
}

impl LossValue {
    fn mean(per_sample: Vec<f64>) -> Self {
        let value = if per_sample.is_empty() {
            0.0
        } else {
            per_sample.iter().sum::<f64>() / per_sample.len() as f64
        };
        Self {
            value,
            per_sample,
            reduction: Reduction::Mean,
        }
    }

    fn sum(per_sample: Vec<f64>) -> Self {
        Self {
            value: per_sample.iter().sum(),
            per_sample,
            reduction: Reduction::Sum,
        }
    }

    /// Recomputes the reduction from `per_sample`.
    pub fn reduced(&self) -> f64 {
        match self.reduction {
            Reduction::Mean if self.per_sample.is_empty() => 0.0,
            Reduction::Mean => self.per_sample.iter().sum::<f64>() / self.per_sample.len() as f64,
            Reduction::Sum => self.per_sample.iter().sum(),
        }
    }
}

/// Mean of `-ln p[label]` over rows.
pub fn ce_loss(class_probs: &Tensor, labels: &[usize]) -> Result<LossValue> {
    if !class_probs.is_matrix() || class_probs.rows() != labels.len() {
        return Err(Error::shape(
            "ce_loss",
            format!("{:?} probabilities for {} labels", class_probs.shape(), labels.len()),
        ));
    }
    let k = class_probs.cols();
    let mut per = Vec::with_capacity(labels.len());
    for (r, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
        per.push(-class_probs.get(r, l).max(LOG_FLOOR).ln());
    }
    Ok(LossValue::mean(per))
}

fn check_prob(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("domain probability", format!("{p} is outside [0, 1]")));
    }
    Ok(p)
}

/// Adversarial domain term: `mean_src ln D + mean_tgt ln(1 - D)`.
///
/// `per_sample` holds each row's contribution already divided by its
/// domain's count, so the value is their sum.
pub fn add_loss(source_domain_probs: &[f64], target_domain_probs: &[f64]) -> Result<LossValue> {
    if source_domain_probs.is_empty() || target_domain_probs.is_empty() {
        return Err(Error::Empty("domain batch"));
    }
    let (ns, nt) = (source_domain_probs.len() as f64, target_domain_probs.len() as f64);
    let mut per = Vec::with_capacity(source_domain_probs.len() + target_domain_probs.len());
    for &p in source_domain_probs {
        per.push(check_prob(p)?.max(LOG_FLOOR).ln() / ns);
    }
    for &p in target_domain_probs {
        per.push((1.0 - check_prob(p)?).max(LOG_FLOOR).ln() / nt);
    }
    Ok(LossValue::sum(per))
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::shape("cosine_sim", format!("lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Err(Error::ZeroNorm);
    }
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((d / (nu * nv)).clamp(-1.0, 1.0))
}

/// An anchor target-frame feature with a same-class and a different-class
/// source feature.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveTriplet {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl ContrastiveTriplet {
    /// Checks the label invariant: positive shares the anchor's (pseudo)
    /// label, negative does not.
    pub fn new(
        anchor: (Vec<f64>, usize),
        positive: (Vec<f64>, usize),
        negative: (Vec<f64>, usize),
    ) -> Result<Self> {
        if positive.1 != anchor.1 {
            return Err(Error::invalid("triplet", "positive label differs from anchor label"));
        }
        if negative.1 == anchor.1 {
            return Err(Error::invalid("triplet", "negative label equals anchor label"));
        }
        Ok(Self {
            anchor: anchor.0,
            positive: positive.0,
            negative: negative.0,
        })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
    }
    Ok(())
}

/// Per triplet `-ln[h(a,p) / (h(a,p) + h(a,n))]` with `h(u,v) = exp(cos(u,v)/tau)`;
/// the value is the mean over triplets (0 for none).
pub fn contrastive_loss(triplets: &[ContrastiveTriplet], tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    let mut per = Vec::with_capacity(triplets.len());
    for t in triplets {
        let sp = cosine_sim(&t.anchor, &t.positive)? / tau;
        let sn = cosine_sim(&t.anchor, &t.negative)? / tau;
        // -ln(e^sp / (e^sp + e^sn)) = softplus(sn - sp), evaluated stably
        let x = sn - sp;
        per.push(if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() });
    }
    Ok(LossValue::mean(per))
}

/// Gradient-reversal coefficient ramp `2 / (1 + exp(-10 progress)) - 1`.
pub fn beta_schedule(progress: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::invalid("progress", format!("{progress} is outside [0, 1]")));
    }
    Ok(2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0)
}

/// Mean cross entropy of a probability node against integer labels.
pub fn ce_node(g: &mut Graph, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let p = g.pick(probs, labels)?;
    let l = g.log(p)?;
    let m = g.mean(l)?;
    g.neg(m)
}

/// The adversarial term (see [`add_loss`]) from `n x 1` discriminator outputs.
pub fn add_node(g: &mut Graph, source_dprobs: NodeId, target_dprobs: NodeId) -> Result<NodeId> {
    let ls = g.log(source_dprobs)?;
    let ms = g.mean(ls)?;
    let one_minus = g.affine(target_dprobs, -1.0, 1.0)?;
    let lt = g.log(one_minus)?;
    let mt = g.mean(lt)?;
    g.add(ms, mt)
}

/// Contrastive loss on row-aligned anchor, positive and negative features.
pub fn contrastive_node(g: &mut Graph, anchors: NodeId, positives: NodeId, negatives: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let sp = g.cosine_similarity(anchors, positives)?;
    let sn = g.cosine_similarity(anchors, negatives)?;
    let logits = g.concat(&[sp, sn], Axis::Cols)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let probs = g.softmax(logits)?;
    let zeros = vec![0; g.shape(probs).0];
    ce_node(g, probs, &zeros)
}

/// Stage-1 objective node: `CE - ADD`.
///
/// The discriminator descends this, i.e. maximizes the adversarial term. The
/// encoder is pushed the other way only when `add` was computed from features
/// passed through [`Graph::gradient_reversal`] with coefficient beta, so the
/// encoder sees `CE + beta * (reversed adversarial gradient)`.
pub fn stage1_objective(g: &mut Graph, ce: NodeId, add: NodeId) -> Result<NodeId> {
    let neg = g.neg(add)?;
    g.add(ce, neg)
}

/// Stage-3 objective node: source CE plus the contrastive term, if any.
pub fn stage3_objective(g: &mut Graph, ce_source: NodeId, contrastive: Option<NodeId>) -> Result<NodeId> {
    match contrastive {
        Some(c) => g.add(ce_source, c),
        None => Ok(ce_source),
    }
}

/// Value form of [`stage1_objective`].
pub fn stage1_value(ce: &LossValue, add: &LossValue) -> f64 {
    ce.value - add.value
}

/// Value form of [`stage3_objective`].
pub fn stage3_value(ce: &LossValue, contrastive: &LossValue) -> f64 {
    ce.value + contrastive.value
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_examples() {
        let p = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]);
        assert_eq!(ce_loss(&p, &[1]).unwrap().value, 0.0);
        let u = Tensor::matrix(2, 4, vec![0.25; 8]);
        let l = ce_loss(&u, &[0, 3]).unwrap();
        assert!((l.value - 1.3862943611198906).abs() < 1e-15);
        assert_eq!(l.per_sample.len(), 2);
        assert!(matches!(ce_loss(&u, &[0, 4]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn add_examples() {
        let l = add_loss(&[0.5], &[0.5]).unwrap();
        assert!((l.value - -1.3862943611198906).abs() < 1e-15);
        assert!((l.reduced() - l.value).abs() < 1e-15);
        let near = add_loss(&[1.0 - 1e-9], &[1e-9]).unwrap();
        assert!(near.value < 0.0 && near.value > -1e-8);
        assert!(add_loss(&[1.5], &[0.5]).is_err());
        assert!(add_loss(&[f64::NAN], &[0.5]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = [1.0, 2.0, -0.5];
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine_sim(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }

    fn triplet(a: &[f64], p: &[f64], n: &[f64]) -> ContrastiveTriplet {
        ContrastiveTriplet {
            anchor: a.to_vec(),
            positive: p.to_vec(),
            negative: n.to_vec(),
        }
    }

    #[test]
    fn contrastive_examples() {
        // pos == anchor, neg orthogonal, tau = 1: -ln(e / (e + 1))
        let t = triplet(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]);
        let l = contrastive_loss(&[t], 1.0).unwrap();
        assert!((l.value - 0.3132616875182228).abs() < 1e-15);

        let sym = triplet(&[1.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]);
        let l = contrastive_loss(&[sym], 0.05).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);

        assert_eq!(contrastive_loss(&[], 0.05).unwrap().value, 0.0);
        assert!(contrastive_loss(&[triplet(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0])], 1.0).is_err());
        assert!(contrastive_loss(&[], 0.0).is_err());
    }

    #[test]
    fn contrastive_decreases_with_positive_similarity() {
        let mut last = f64::INFINITY;
        for i in 0..=10 {
            let angle = std::f64::consts::PI * (1.0 - i as f64 / 10.0) * 0.9;
            let t = triplet(&[1.0, 0.0], &[angle.cos(), angle.sin()], &[0.0, -1.0]);
            let v = contrastive_loss(&[t], 0.5).unwrap().value;
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn triplet_label_invariant() {
        let a = (vec![1.0], 2);
        assert!(ContrastiveTriplet::new(a.clone(), (vec![1.0], 2), (vec![1.0], 0)).is_ok());
        assert!(ContrastiveTriplet::new(a.clone(), (vec![1.0], 1), (vec![1.0], 0)).is_err());
        assert!(ContrastiveTriplet::new(a, (vec![1.0], 2), (vec![1.0], 2)).is_err());
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta_schedule(0.0).unwrap(), 0.0);
        assert!((beta_schedule(1.0).unwrap() - 0.9999092042625952).abs() < 1e-15);
        let mut prev = -1.0;
        for i in 0..=100 {
            let b = beta_schedule(i as f64 / 100.0).unwrap();
            assert!(b > prev);
            prev = b;
        }
        assert!(beta_schedule(1.01).is_err());
        assert!(beta_schedule(-0.1).is_err());
    }

    #[test]
    fn node_forms_match_value_forms() {
        let probs = Tensor::matrix(2, 3, vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8]);
        let mut g = Graph::new();
        let p = g.input_value("p", probs.clone()).unwrap();
        let ce = ce_node(&mut g, p, &[1, 2]).unwrap();
        let ds = g.input_value("ds", Tensor::matrix(2, 1, vec![0.7, 0.9])).unwrap();
        let dt = g.input_value("dt", Tensor::matrix(1, 1, vec![0.4])).unwrap();
        let add = add_node(&mut g, ds, dt).unwrap();
        let a = g.input_value("a", Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0])).unwrap();
        let pp = g.input_value("pp", Tensor::matrix(1, 3, vec![0.5, 0.2, 1.0])).unwrap();
        let nn = g.input_value("nn", Tensor::matrix(1, 3, vec![-1.0, 0.4, 0.1])).unwrap();
        let con = contrastive_node(&mut g, a, pp, nn, 0.05).unwrap();
        g.forward(&[]).unwrap();

        let ce_v = ce_loss(&probs, &[1, 2]).unwrap();
        assert!((g.value(ce).unwrap().item() - ce_v.value).abs() < 1e-14);
        let add_v = add_loss(&[0.7, 0.9], &[0.4]).unwrap();
        assert!((g.value(add).unwrap().item() - add_v.value).abs() < 1e-14);
        let con_v = contrastive_loss(&[triplet(&[0.3, -1.0, 2.0], &[0.5, 0.2, 1.0], &[-1.0, 0.4, 0.1])], 0.05).unwrap();
        assert!((g.value(con).unwrap().item() - con_v.value).abs() < 1e-12);
    }
}
