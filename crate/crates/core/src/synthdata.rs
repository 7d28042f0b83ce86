//! Seeded synthetic image-to-video benchmark.
//!
//! Every class `c` has a spatial prototype `mu_c`, a temporal direction `u_c`
//! and a signature `s_c(t) = A sin(2 pi f_c t / (T - 1) + phi_c)`.
//!
//! * source image:  `mu_c + noise`
//! * target frame:  `R(theta) mu_c + b + s_c(t) u_c + j_v + noise`
//! * source video:  `R(f theta) mu_c + f b + s_c(t) u_c + j_v + noise`
//!
//! `R(theta)` rotates consecutive coordinate planes and `b` is a fixed bias
//! vector; together they are the spatial domain shift. Source videos carry
//! the fraction `f = source_video_shift` of it. `j_v` is a per-video
//! offset. Classes of a confusable pair share `u_c` and a half-period
//! signature with opposite phase, so one clip is the time reversal of the
//! other: the multiset of frames is the same and only frame order tells them
//! apart. Their prototypes differ by `+-pair_separation` along one direction.
//!
//! Target training labels are kept in [`HiddenLabels`], which only answers
//! accuracy queries.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ByteReader, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Rotation angle in radians applied to target prototypes.
    pub rotation: f64,
    /// Norm of the target bias vector.
    pub bias: f64,
    /// Standard deviation of per-sample isotropic noise (both domains).
    pub noise: f64,
}

/// Benchmark parameters; omitted keys take their default values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub images_per_class: usize,
    pub source_videos_per_class: usize,
    pub train_videos_per_class: usize,
    pub test_videos_per_class: usize,
    pub frames: usize,
    pub prototype_scale: f64,
    pub shift: DomainShift,
    pub video_jitter: f64,
    pub signature_amplitude: f64,
    pub confusable_pairs: Vec<(usize, usize)>,
    /// Signature frequency (cycles per clip) shared by both classes of a pair.
    pub pair_frequency: f64,
    pub pair_separation: f64,
    /// Fraction of the spatial shift (rotation angle and bias) applied to
    /// source videos: 0 puts them in the image domain, 1 in the target domain.
    pub source_video_shift: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            classes: 12,
            input_dim: 16,
            images_per_class: 50,
            source_videos_per_class: 10,
            train_videos_per_class: 30,
            test_videos_per_class: 20,
            frames: 16,
            prototype_scale: 3.0,
            shift: DomainShift {
                rotation: 0.9,
                bias: 1.0,
                noise: 0.7,
            },
            video_jitter: 0.5,
            signature_amplitude: 3.0,
            confusable_pairs: vec![(0, 1), (2, 3), (4, 5)],
            pair_frequency: 0.5,
            pair_separation: 1.0,
            source_video_shift: 0.5,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("classes", format!("need at least 2, got {}", self.classes)));
        }
        if self.input_dim < 2 {
            return Err(Error::invalid("input_dim", format!("need at least 2, got {}", self.input_dim)));
        }
        if self.frames < 4 {
            return Err(Error::invalid("frames", format!("need at least 4, got {}", self.frames)));
        }
        if self.images_per_class == 0 {
            return Err(Error::invalid("images_per_class", "must be positive"));
        }
        if self.train_videos_per_class == 0 {
            return Err(Error::invalid("train_videos_per_class", "must be positive"));
        }
        if self.test_videos_per_class == 0 {
            return Err(Error::invalid("test_videos_per_class", "must be positive"));
        }
        let nonneg = [
            ("prototype_scale", self.prototype_scale),
            ("shift.bias", self.shift.bias),
            ("shift.noise", self.shift.noise),
            ("video_jitter", self.video_jitter),
            ("signature_amplitude", self.signature_amplitude),
            ("pair_separation", self.pair_separation),
            ("pair_frequency", self.pair_frequency),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid("benchmark spec", format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.source_video_shift) {
            return Err(Error::invalid("source_video_shift", format!("must lie in [0, 1], got {}", self.source_video_shift)));
        }
        if !(self.prototype_scale > 0.0) {
            return Err(Error::invalid("prototype_scale", "must be positive"));
        }
        if !self.shift.rotation.is_finite() {
            return Err(Error::invalid("shift.rotation", "must be finite"));
        }
        let mut seen = vec![false; self.classes];
        for &(a, b) in &self.confusable_pairs {
            if a >= self.classes || b >= self.classes || a == b {
                return Err(Error::invalid("confusable_pairs", format!("bad pair ({a}, {b})")));
            }
            for c in [a, b] {
                if seen[c] {
                    return Err(Error::invalid("confusable_pairs", format!("class {c} appears in two pairs")));
                }
                seen[c] = true;
            }
        }
        Ok(())
    }

    /// Class ids that belong to some confusable pair, sorted.
    pub fn confusable_classes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.confusable_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A clip of `frames x input_dim` frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: usize,
    pub frames: Tensor,
}

impl Video {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub video: Video,
    pub label: usize,
}

/// Ground truth of the unlabeled target videos, usable for metrics only.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLabels {
    by_id: BTreeMap<usize, usize>,
}

impl HiddenLabels {
    /// Fraction of `(video_id, class_id)` guesses that are correct; `None`
    /// for an empty list.
    pub fn accuracy<I>(&self, guesses: I) -> Option<f64>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let (mut hit, mut n) = (0usize, 0usize);
        for (id, class) in guesses {
            n += 1;
            if self.by_id.get(&id) == Some(&class) {
                hit += 1;
            }
        }
        (n > 0).then(|| hit as f64 / n as f64)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: BenchmarkSpec,
    pub seed: u64,
    pub source_images: Vec<LabeledImage>,
    pub source_videos: Vec<LabeledVideo>,
    pub target_train: Vec<Video>,
    hidden: HiddenLabels,
    pub target_test: Vec<LabeledVideo>,
}

impl SyntheticDataset {
    pub fn hidden_labels(&self) -> &HiddenLabels {
        &self.hidden
    }
}

struct ClassStructure {
    prototypes: Vec<Vec<f64>>,
    directions: Vec<Vec<f64>>,
    frequency: Vec<f64>,
    phase: Vec<f64>,
    bias: Vec<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = gaussian_vec(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn structure(spec: &BenchmarkSpec, rng: &mut ChaCha8Rng) -> ClassStructure {
    let (k, d) = (spec.classes, spec.input_dim);
    let mut prototypes: Vec<Vec<f64>> = (0..k)
        .map(|_| unit_vec(rng, d).into_iter().map(|x| x * spec.prototype_scale).collect())
        .collect();
    let mut directions: Vec<Vec<f64>> = (0..k).map(|_| unit_vec(rng, d)).collect();
    let mut frequency: Vec<f64> = (0..k).map(|_| [1.0, 1.5, 2.0][rng.random_range(0..3)]).collect();
    let mut phase: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    for &(a, b) in &spec.confusable_pairs {
        let sep = unit_vec(rng, d);
        let base = prototypes[a].clone();
        prototypes[a] = base.iter().zip(&sep).map(|(m, s)| m + spec.pair_separation * s).collect();
        prototypes[b] = base.iter().zip(&sep).map(|(m, s)| m - spec.pair_separation * s).collect();
        directions[b] = directions[a].clone();
        // phases chosen so that b's signature is a's played backwards
        let f = spec.pair_frequency;
        frequency[a] = f;
        frequency[b] = f;
        phase[a] = -PI * f;
        phase[b] = PI - PI * f;
    }
    let bias = unit_vec(rng, d).into_iter().map(|x| x * spec.shift.bias).collect();
    ClassStructure {
        prototypes,
        directions,
        frequency,
        phase,
        bias,
    }
}

fn rotate(v: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = v.to_vec();
    for i in (0..v.len() - 1).step_by(2) {
        out[i] = c * v[i] - s * v[i + 1];
        out[i + 1] = s * v[i] + c * v[i + 1];
    }
    out
}

/// Signature value of class `c` at frame `t` of a `frames`-long clip.
fn signature(st: &ClassStructure, spec: &BenchmarkSpec, c: usize, t: usize, frames: usize) -> f64 {
    let x = t as f64 / (frames - 1) as f64;
    spec.signature_amplitude * (2.0 * PI * st.frequency[c] * x + st.phase[c]).sin()
}

enum Domain {
    Source,
    Target,
}

fn shifted(st: &ClassStructure, prototype: &[f64], rotation: f64, bias_scale: f64) -> Vec<f64> {
    rotate(prototype, rotation)
        .iter()
        .zip(&st.bias)
        .map(|(a, b)| a + bias_scale * b)
        .collect()
}

fn make_video(
    spec: &BenchmarkSpec,
    st: &ClassStructure,
    rng: &mut ChaCha8Rng,
    id: usize,
    class: usize,
    domain: &Domain,
) -> Video {
    let (d, t_len) = (spec.input_dim, spec.frames);
    let center: Vec<f64> = match domain {
        Domain::Source => {
            let f = spec.source_video_shift;
            shifted(st, &st.prototypes[class], f * spec.shift.rotation, f)
        }
        Domain::Target => shifted(st, &st.prototypes[class], spec.shift.rotation, 1.0),
    };
    let jitter: Vec<f64> = gaussian_vec(rng, d).into_iter().map(|x| x * spec.video_jitter).collect();
    let mut data = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        let s = signature(st, spec, class, t, t_len);
        for i in 0..d {
            let n: f64 = StandardNormal.sample(rng);
            data.push(center[i] + s * st.directions[class][i] + jitter[i] + spec.shift.noise * n);
        }
    }
    Video {
        id,
        frames: Tensor::matrix(t_len, d, data),
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate(spec: &BenchmarkSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let st = structure(spec, &mut stream(seed, 0));
    let (k, d) = (spec.classes, spec.input_dim);

    let mut rng = stream(seed, 1);
    let mut source_images = Vec::with_capacity(k * spec.images_per_class);
    for c in 0..k {
        for _ in 0..spec.images_per_class {
            let features = st.prototypes[c]
                .iter()
                .map(|m| m + spec.shift.noise * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            source_images.push(LabeledImage { features, label: c });
        }
    }
    debug_assert!(source_images.iter().all(|i| i.features.len() == d));

    let labeled = |stream_id: u64, per_class: usize, domain: Domain| {
        let mut rng = stream(seed, stream_id);
        let mut out = Vec::with_capacity(k * per_class);
        for c in 0..k {
            for _ in 0..per_class {
                let id = out.len();
                out.push(LabeledVideo {
                    video: make_video(spec, &st, &mut rng, id, c, &domain),
                    label: c,
                });
            }
        }
        out
    };

    let source_videos = labeled(2, spec.source_videos_per_class, Domain::Source);
    let train = labeled(3, spec.train_videos_per_class, Domain::Target);
    let target_test = labeled(4, spec.test_videos_per_class, Domain::Target);

    let hidden = HiddenLabels {
        by_id: train.iter().map(|v| (v.video.id, v.label)).collect(),
    };
    let target_train = train.into_iter().map(|v| v.video).collect();

    Ok(SyntheticDataset {
        spec: spec.clone(),
        seed,
        source_images,
        source_videos,
        target_train,
        hidden,
        target_test,
    })
}

/// One uniformly drawn frame index per segment; segment `s` covers
/// `[floor(s T / n), floor((s + 1) T / n))`.
pub fn sample_frames<R: Rng + ?Sized>(frames: usize, n_segments: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_segments == 0 || n_segments > frames {
        return Err(Error::invalid(
            "n_segments",
            format!("{n_segments} segments for a {frames}-frame video"),
        ));
    }
    Ok((0..n_segments)
        .map(|s| {
            let lo = s * frames / n_segments;
            let hi = (s + 1) * frames / n_segments;
            rng.random_range(lo..hi)
        })
        .collect())
}

/// Per-(epoch, video) frame sampling with an RNG keyed only by
/// `(seed, epoch, video id)`, so dataset order never changes the draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameSampler {
    pub seed: u64,
    pub n_segments: usize,
}

impl FrameSampler {
    pub fn new(seed: u64, n_segments: usize) -> Self {
        Self { seed, n_segments }
    }

    pub fn sample(&self, epoch: u64, video_id: usize, frames: usize) -> Result<Vec<usize>> {
        let key = mix(mix(mix(self.seed) ^ epoch) ^ video_id as u64);
        sample_frames(frames, self.n_segments, &mut ChaCha8Rng::seed_from_u64(key))
    }
}

/// splitmix64 finalizer.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// Binary dataset file, little-endian:
//
//   magic "CYCDADAT", version u32, seed u64,
//   spec_len u32, spec (JSON, UTF-8),
//   n_images u32,  per image:  label u32, input_dim f64
//   then three video sections (source videos, target train, target test),
//   each: count u32, per video: id u32, label u32, frames*input_dim f64
//   sha256 of all preceding bytes (32 bytes)
//
// Floats are stored as raw bit patterns.

const MAGIC: &[u8; 8] = b"CYCDADAT";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

impl SyntheticDataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        let spec = serde_json::to_vec(&self.spec).expect("spec serializes");
        put_u32(&mut buf, spec.len());
        buf.extend_from_slice(&spec);
        put_u32(&mut buf, self.source_images.len());
        for img in &self.source_images {
            put_u32(&mut buf, img.label);
            put_f64s(&mut buf, &img.features);
        }
        let sections: [Vec<(usize, usize, &Tensor)>; 3] = [
            self.source_videos.iter().map(|v| (v.video.id, v.label, &v.video.frames)).collect(),
            self.target_train
                .iter()
                .map(|v| (v.id, self.hidden.by_id[&v.id], &v.frames))
                .collect(),
            self.target_test.iter().map(|v| (v.video.id, v.label, &v.video.frames)).collect(),
        ];
        for section in &sections {
            put_u32(&mut buf, section.len());
            for (id, label, frames) in section {
                put_u32(&mut buf, *id);
                put_u32(&mut buf, *label);
                put_f64s(&mut buf, frames.data());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(Error::Format("dataset file truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("dataset checksum mismatch".into()));
        }
        let mut r = ByteReader::new(body);
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("dataset version {version}, expected {VERSION}")));
        }
        let seed = r.u64()?;
        let spec_len = r.u32()? as usize;
        let spec: BenchmarkSpec = serde_json::from_slice(r.take(spec_len)?)
            .map_err(|e| Error::Format(format!("dataset spec: {e}")))?;
        spec.validate()?;
        let (d, t) = (spec.input_dim, spec.frames);
        let read_label = |r: &mut ByteReader, k: usize| -> Result<usize> {
            let l = r.u32()? as usize;
            if l >= k {
                return Err(Error::Format(format!("label {l} out of range")));
            }
            Ok(l)
        };

        let n = r.u32()? as usize;
        let mut source_images = Vec::with_capacity(n);
        for _ in 0..n {
            let label = read_label(&mut r, spec.classes)?;
            let features = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            source_images.push(LabeledImage { features, label });
        }
        let mut sections = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = r.u32()? as usize;
            let mut vids = Vec::with_capacity(n);
            for _ in 0..n {
                let id = r.u32()? as usize;
                let label = read_label(&mut r, spec.classes)?;
                let data = (0..t * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                vids.push(LabeledVideo {
                    video: Video {
                        id,
                        frames: Tensor::matrix(t, d, data),
                    },
                    label,
                });
            }
            sections.push(vids);
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes in dataset file".into()));
        }
        let target_test = sections.pop().expect("three sections");
        let train = sections.pop().expect("three sections");
        let source_videos = sections.pop().expect("three sections");
        let hidden = HiddenLabels {
            by_id: train.iter().map(|v| (v.video.id, v.label)).collect(),
        };
        if hidden.len() != train.len() {
            return Err(Error::Format("duplicate target video ids".into()));
        }
        Ok(Self {
            spec,
            seed,
            source_images,
            source_videos,
            target_train: train.into_iter().map(|v| v.video).collect(),
            hidden,
            target_test,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Tab-separated `split id label norm` lines for inspection. Target
    /// training labels are not exported.
    pub fn write_metadata<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "split\tid\tlabel\tmean_norm")?;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, img) in self.source_images.iter().enumerate() {
            writeln!(w, "source_image\t{i}\t{}\t{:.6}", img.label, norm(&img.features))?;
        }
        let clip_norm = |v: &Video| (0..v.num_frames()).map(|t| norm(v.frame(t))).sum::<f64>() / v.num_frames() as f64;
        for v in &self.source_videos {
            writeln!(w, "source_video\t{}\t{}\t{:.6}", v.video.id, v.label, clip_norm(&v.video))?;
        }
        for v in &self.target_train {
            writeln!(w, "target_train\t{}\t-\t{:.6}", v.id, clip_norm(v))?;
        }
        for v in &self.target_test {
            writeln!(w, "target_test\t{}\t{}\t{:.6}", v.video.id, v.label, clip_norm(&v.video))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> BenchmarkSpec {
        BenchmarkSpec {
            classes: 4,
            input_dim: 6,
            images_per_class: 3,
            source_videos_per_class: 1,
            train_videos_per_class: 2,
            test_videos_per_class: 2,
            frames: 6,
            confusable_pairs: vec![(0, 1)],
            ..BenchmarkSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(BenchmarkSpec::default().validate().is_ok());
        let mut s = tiny_spec();
        s.classes = 1;
        s.confusable_pairs.clear();
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.confusable_pairs = vec![(0, 1), (1, 2)];
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.frames = 3;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.shift.noise = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn sizes_follow_spec() {
        let ds = generate(&tiny_spec(), 3).unwrap();
        assert_eq!(ds.source_images.len(), 12);
        assert_eq!(ds.source_videos.len(), 4);
        assert_eq!(ds.target_train.len(), 8);
        assert_eq!(ds.target_test.len(), 8);
        assert_eq!(ds.hidden_labels().len(), 8);
        for v in &ds.target_train {
            assert_eq!(v.frames.shape(), &[6, 6]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&tiny_spec(), 9).unwrap();
        let b = generate(&tiny_spec(), 9).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate(&tiny_spec(), 10).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn save_load_round_trip() {
        let ds = generate(&tiny_spec(), 1).unwrap();
        let bytes = ds.to_bytes();
        let back = SyntheticDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back.spec, ds.spec);
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = generate(&tiny_spec(), 1).unwrap().to_bytes();
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(SyntheticDataset::from_bytes(&flipped).is_err());
        let mut bad_sum = bytes.clone();
        let n = bad_sum.len();
        bad_sum[n - 1] ^= 0xff;
        assert!(SyntheticDataset::from_bytes(&bad_sum).is_err());
        assert!(SyntheticDataset::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    }

    #[test]
    fn pair_signatures_are_time_reversals() {
        let spec = tiny_spec();
        let st = structure(&spec, &mut stream(5, 0));
        let t = spec.frames;
        for i in 0..t {
            let a = signature(&st, &spec, 0, i, t);
            let b = signature(&st, &spec, 1, t - 1 - i, t);
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(st.directions[0], st.directions[1]);
    }

    #[test]
    fn sample_frames_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_frames(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        for _ in 0..50 {
            let f = sample_frames(10, 5, &mut rng).unwrap();
            for (i, &x) in f.iter().enumerate() {
                assert!(x == 2 * i || x == 2 * i + 1);
            }
        }
        assert!(sample_frames(4, 5, &mut rng).is_err());
    }

    #[test]
    fn sampler_is_keyed_by_epoch_and_video() {
        let s = FrameSampler::new(3, 5);
        assert_eq!(s.sample(2, 7, 16).unwrap(), s.sample(2, 7, 16).unwrap());
        let draws: Vec<_> = (0..20).map(|e| s.sample(e, 7, 16).unwrap()).collect();
        assert!(draws.iter().any(|d| d != &draws[0]));
    }

    #[test]
    fn hidden_labels_only_score() {
        let ds = generate(&tiny_spec(), 2).unwrap();
        let h = ds.hidden_labels();
        assert_eq!(h.accuracy(std::iter::empty()), None);
        // video ids are assigned class-major, two per class
        let perfect: Vec<(usize, usize)> = (0..8).map(|id| (id, id / 2)).collect();
        assert_eq!(h.accuracy(perfect), Some(1.0));
    }
}
