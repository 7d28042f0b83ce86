//! Image model (encoder, classifier, domain discriminator) and video model
//! (per-frame affine, temporal convolution, mean pooling, classifier).
//!
//! Both encoders emit `feature_dim` features. Parameters live in a flat
//! [`Params`] map; `bind` registers them on a [`Graph`] once so the same
//! weights can be applied to several node inputs within one step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Params, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub frames: usize,
    pub image_hidden: usize,
    pub video_hidden: usize,
    pub disc_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input_dim: 16,
            feature_dim: 32,
            classes: 12,
            frames: 16,
            image_hidden: 64,
            video_hidden: 32,
            disc_hidden: 32,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("frames", self.frames),
            ("image_hidden", self.image_hidden),
            ("video_hidden", self.video_hidden),
            ("disc_hidden", self.disc_hidden),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid("model dims", format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::invalid("model dims", format!("classes must be at least 2, got {}", self.classes)));
        }
        if self.frames < 3 {
            return Err(Error::invalid("model dims", format!("frames must be at least 3, got {}", self.frames)));
        }
        Ok(())
    }
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data)
}

fn layer(params: &mut Params, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, rows: usize, cols: usize) {
    params.insert(format!("{prefix}.w"), uniform_fan_in(rng, fan_in, rows, cols));
    params.insert(format!("{prefix}.b"), Tensor::zeros(1, cols));
}

fn model_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const IMAGE_STREAM: u64 = 1;
const VIDEO_STREAM: u64 = 2;
const HEAD_STREAM: u64 = 3;

pub mod names {
    pub const IMAGE_ENCODER: &str = "image.enc";
    pub const IMAGE_CLASSIFIER: &str = "image.cls";
    pub const IMAGE_DISCRIMINATOR: &str = "image.disc";
    pub const VIDEO_ENCODER: &str = "video.enc";
    pub const VIDEO_CLASSIFIER: &str = "video.cls";
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageModel {
    pub dims: ModelDims,
    pub params: Params,
}

/// Output of [`ImageModel::forward`].
#[derive(Clone, Debug)]
pub struct ImageOutput {
    pub features: Tensor,
    pub class_probs: Tensor,
    pub domain_probs: Tensor,
}

/// Image-model parameters registered on one graph.
#[derive(Clone, Copy, Debug)]
pub struct ImageNet {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    cls_w: NodeId,
    cls_b: NodeId,
    d_w1: NodeId,
    d_b1: NodeId,
    d_w2: NodeId,
    d_b2: NodeId,
}

impl ImageModel {
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = model_rng(seed, IMAGE_STREAM);
        let mut params = Params::new();
        let d = dims;
        layer(&mut params, &mut rng, "image.enc.l1", d.input_dim, d.input_dim, d.image_hidden);
        layer(&mut params, &mut rng, "image.enc.l2", d.image_hidden, d.image_hidden, d.feature_dim);
        layer(&mut params, &mut rng, "image.cls", d.feature_dim, d.feature_dim, d.classes);
        layer(&mut params, &mut rng, "image.disc.l1", d.feature_dim, d.feature_dim, d.disc_hidden);
        layer(&mut params, &mut rng, "image.disc.l2", d.disc_hidden, d.disc_hidden, 1);
        Ok(Self {
            dims: dims.clone(),
            params,
        })
    }

    /// Re-draws the classifier head, keeping encoder and discriminator.
    pub fn reinit_classifier(&mut self, seed: u64) {
        let mut rng = model_rng(seed, HEAD_STREAM);
        let d = &self.dims;
        let (f, k) = (d.feature_dim, d.classes);
        layer(&mut self.params, &mut rng, "image.cls", f, f, k);
    }

    pub fn from_params(dims: &ModelDims, params: Params) -> Result<Self> {
        dims.validate()?;
        let expected = Self::init(dims, 0)?;
        check_layout(&expected.params, &params)?;
        Ok(Self {
            dims: dims.clone(),
            params,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> Result<ImageNet> {
        let p = &self.params;
        Ok(ImageNet {
            w1: g.param_from(p, "image.enc.l1.w")?,
            b1: g.param_from(p, "image.enc.l1.b")?,
            w2: g.param_from(p, "image.enc.l2.w")?,
            b2: g.param_from(p, "image.enc.l2.b")?,
            cls_w: g.param_from(p, "image.cls.w")?,
            cls_b: g.param_from(p, "image.cls.b")?,
            d_w1: g.param_from(p, "image.disc.l1.w")?,
            d_b1: g.param_from(p, "image.disc.l1.b")?,
            d_w2: g.param_from(p, "image.disc.l2.w")?,
            d_b2: g.param_from(p, "image.disc.l2.b")?,
        })
    }

    /// Features, class probabilities and domain probabilities for a batch of
    /// `input_dim` rows.
    pub fn forward(&self, batch: &Tensor) -> Result<ImageOutput> {
        if !batch.is_matrix() || batch.cols() != self.dims.input_dim {
            return Err(Error::shape(
                "image_forward",
                format!("expected rows of {} values, got {:?}", self.dims.input_dim, batch.shape()),
            ));
        }
        let mut g = Graph::new();
        let net = self.bind(&mut g)?;
        let x = g.input_value("x", batch.clone())?;
        let z = net.encode(&mut g, x)?;
        let probs = net.classify(&mut g, z)?;
        let dom = net.discriminate(&mut g, z)?;
        g.forward(&[])?;
        Ok(ImageOutput {
            features: g.value(z)?.clone(),
            class_probs: g.value(probs)?.clone(),
            domain_probs: g.value(dom)?.clone(),
        })
    }

    pub fn class_probs(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let net = self.bind(&mut g)?;
        let x = g.input_value("x", batch.clone())?;
        let z = net.encode(&mut g, x)?;
        let probs = net.classify(&mut g, z)?;
        Ok(g.run(probs)?.clone())
    }
}

impl ImageNet {
    pub fn encode(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, self.w1)?;
        let h = g.add(h, self.b1)?;
        let h = g.relu(h)?;
        let z = g.matmul(h, self.w2)?;
        let z = g.add(z, self.b2)?;
        g.relu(z)
    }

    pub fn logits(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let l = g.matmul(z, self.cls_w)?;
        g.add(l, self.cls_b)
    }

    pub fn classify(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let l = self.logits(g, z)?;
        g.softmax(l)
    }

    /// Probability that each feature row comes from the source domain.
    pub fn discriminate(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let h = g.matmul(z, self.d_w1)?;
        let h = g.add(h, self.d_b1)?;
        let h = g.relu(h)?;
        let o = g.matmul(h, self.d_w2)?;
        let o = g.add(o, self.d_b2)?;
        g.sigmoid(o)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoModel {
    pub dims: ModelDims,
    pub params: Params,
}

#[derive(Clone, Debug)]
pub struct VideoOutput {
    pub features: Tensor,
    pub class_probs: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct VideoNet {
    frame_w: NodeId,
    frame_b: NodeId,
    conv_w: NodeId,
    conv_b: NodeId,
    cls_w: NodeId,
    cls_b: NodeId,
    frames: usize,
}

impl VideoModel {
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = model_rng(seed, VIDEO_STREAM);
        let mut params = Params::new();
        let d = dims;
        layer(&mut params, &mut rng, "video.enc.frame", d.input_dim, d.input_dim, d.video_hidden);
        layer(&mut params, &mut rng, "video.enc.conv", 3 * d.video_hidden, 3 * d.video_hidden, d.feature_dim);
        layer(&mut params, &mut rng, "video.cls", d.feature_dim, d.feature_dim, d.classes);
        Ok(Self {
            dims: dims.clone(),
            params,
        })
    }

    pub fn from_params(dims: &ModelDims, params: Params) -> Result<Self> {
        dims.validate()?;
        let expected = Self::init(dims, 0)?;
        check_layout(&expected.params, &params)?;
        Ok(Self {
            dims: dims.clone(),
            params,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> Result<VideoNet> {
        let p = &self.params;
        Ok(VideoNet {
            frame_w: g.param_from(p, "video.enc.frame.w")?,
            frame_b: g.param_from(p, "video.enc.frame.b")?,
            conv_w: g.param_from(p, "video.enc.conv.w")?,
            conv_b: g.param_from(p, "video.enc.conv.b")?,
            cls_w: g.param_from(p, "video.cls.w")?,
            cls_b: g.param_from(p, "video.cls.b")?,
            frames: self.dims.frames,
        })
    }

    /// Stacks clips (each `frames x input_dim`) into one clip-major matrix.
    pub fn stack_clips(&self, clips: &[&Tensor]) -> Result<Tensor> {
        let (t, d) = (self.dims.frames, self.dims.input_dim);
        if clips.is_empty() {
            return Err(Error::Empty("clip batch"));
        }
        let mut data = Vec::with_capacity(clips.len() * t * d);
        for c in clips {
            if c.shape() != [t, d] {
                if c.is_matrix() && c.rows() < 3 {
                    return Err(Error::shape("video_forward", format!("clip of {} frames is shorter than the kernel", c.rows())));
                }
                return Err(Error::shape("video_forward", format!("clip {:?}, expected {t}x{d}", c.shape())));
            }
            data.extend_from_slice(c.data());
        }
        Ok(Tensor::matrix(clips.len() * t, d, data))
    }

    pub fn forward(&self, clips: &[&Tensor]) -> Result<VideoOutput> {
        let stacked = self.stack_clips(clips)?;
        let mut g = Graph::new();
        let net = self.bind(&mut g)?;
        let x = g.input_value("x", stacked)?;
        let z = net.encode(&mut g, x)?;
        let probs = net.classify(&mut g, z)?;
        g.forward(&[])?;
        Ok(VideoOutput {
            features: g.value(z)?.clone(),
            class_probs: g.value(probs)?.clone(),
        })
    }
}

impl VideoNet {
    /// `x` is `batch*frames x input_dim`; returns `batch x feature_dim`.
    pub fn encode(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, self.frame_w)?;
        let h = g.add(h, self.frame_b)?;
        let c = g.temporal_conv(h, self.conv_w, self.frames)?;
        let c = g.add(c, self.conv_b)?;
        let c = g.relu(c)?;
        g.time_mean_pool(c, self.frames)
    }

    pub fn classify(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let l = g.matmul(z, self.cls_w)?;
        let l = g.add(l, self.cls_b)?;
        g.softmax(l)
    }
}

fn check_layout(expected: &Params, got: &Params) -> Result<()> {
    for (name, t) in expected.iter() {
        match got.get(name) {
            Some(g) if g.shape() == t.shape() => {}
            Some(g) => {
                return Err(Error::shape(
                    "checkpoint",
                    format!("`{name}` has shape {:?}, model expects {:?}", g.shape(), t.shape()),
                ))
            }
            None => return Err(Error::invalid("checkpoint", format!("missing parameter `{name}`"))),
        }
    }
    if got.len() != expected.len() {
        return Err(Error::invalid("checkpoint", "unexpected extra parameters"));
    }
    Ok(())
}
