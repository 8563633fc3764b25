//! Perceptual feature distance.
//!
//! A fixed (non-trained) convolutional feature extractor is loaded from a
//! container file of kind `"perceptual"`; the distance between two fields is
//! the sum over configured feature levels of the mean squared feature
//! difference. Single-channel vorticity is replicated to the extractor's
//! input channel count and shifted/scaled to its expected input statistics.
//!
//! The term is optional: when disabled it contributes exactly zero, and a
//! missing weights file is a configuration error raised at startup, never
//! mid-training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerMeta {
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExtractorMeta {
    /// Input channels the network expects (single-channel fields are
    /// replicated up to this count).
    in_channels: usize,
    /// Expected input statistics: the field is mapped to (x - mean) / std.
    input_mean: f64,
    input_std: f64,
    /// Which activations enter the distance: 0 is the normalized input,
    /// i >= 1 is the ReLU output of layer i.
    feature_levels: Vec<usize>,
    layers: Vec<LayerMeta>,
}

#[derive(Debug)]
struct ExtractorLayer {
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
}

/// Frozen feature network for the perceptual loss.
#[derive(Debug)]
pub struct PerceptualExtractor {
    meta: ExtractorMeta,
    layers: Vec<ExtractorLayer>,
}

impl PerceptualExtractor {
    /// Load extractor weights; `path` must be a container of kind
    /// `"perceptual"`. A missing or unreadable file is a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "perceptual loss enabled but weights file {} does not exist",
                path.display()
            )));
        }
        let c = Container::open(path)?;
        if c.kind() != "perceptual" {
            return Err(Error::Config(format!(
                "{} holds a '{}' container, not perceptual extractor weights",
                path.display(),
                c.kind()
            )));
        }
        let meta: ExtractorMeta = c.typed_meta()?;
        if meta.layers.is_empty() {
            return Err(Error::Config("perceptual extractor has no layers".into()));
        }
        if meta.input_std <= 0.0 {
            return Err(Error::Config(format!(
                "perceptual extractor input_std must be positive, got {}",
                meta.input_std
            )));
        }
        for (i, lv) in meta.feature_levels.iter().enumerate() {
            if *lv > meta.layers.len() {
                return Err(Error::Config(format!(
                    "feature level {lv} (entry {i}) exceeds layer count {}",
                    meta.layers.len()
                )));
            }
        }
        let mut layers = Vec::with_capacity(meta.layers.len());
        let mut cin = meta.in_channels;
        for (i, lm) in meta.layers.iter().enumerate() {
            let w = c.read_f64(&format!("layer{i}.w"))?;
            let b = c.read_f64(&format!("layer{i}.b"))?;
            let expect = lm.out_channels * cin * lm.kernel * lm.kernel;
            if w.len() != expect || b.len() != lm.out_channels {
                return Err(Error::Config(format!(
                    "perceptual layer {i} weight sizes do not match its metadata"
                )));
            }
            layers.push(ExtractorLayer {
                w: Tensor::from_vec(&[lm.out_channels, cin, lm.kernel, lm.kernel], w),
                b: Tensor::from_vec(&[lm.out_channels], b),
                stride: lm.stride,
                pad: lm.pad,
            });
            cin = lm.out_channels;
        }
        Ok(PerceptualExtractor { meta, layers })
    }

    /// Normalized + channel-replicated input, then the conv/ReLU stack,
    /// collecting the activations selected by `feature_levels`.
    fn features(&self, g: &mut Graph, x: NodeId) -> Vec<NodeId> {
        let shape = g.value(x).shape.clone();
        assert_eq!(shape.len(), 4, "perceptual input must be NCHW");
        assert_eq!(shape[1], 1, "perceptual input must be single-channel");
        // (x - mean) / std as scale + constant add.
        let scaled = g.scale(x, 1.0 / self.meta.input_std);
        let offset = g.constant(Tensor::from_vec(
            &shape,
            vec![-self.meta.input_mean / self.meta.input_std; shape.iter().product()],
        ));
        let mut h = g.add(scaled, offset);
        // Replicate to in_channels via a fixed ones-valued 1x1 convolution.
        if self.meta.in_channels > 1 {
            let rep_w = g.constant(Tensor::from_vec(
                &[self.meta.in_channels, 1, 1, 1],
                vec![1.0; self.meta.in_channels],
            ));
            let rep_b = g.constant(Tensor::zeros(&[self.meta.in_channels]));
            h = g.conv2d(h, rep_w, rep_b, 1, 0);
        }
        let mut acts = vec![h];
        for layer in &self.layers {
            let w = g.constant(layer.w.clone());
            let b = g.constant(layer.b.clone());
            let z = g.conv2d(h, w, b, layer.stride, layer.pad);
            h = g.leaky_relu(z, 0.0); // plain ReLU
            acts.push(h);
        }
        self.meta.feature_levels.iter().map(|&l| acts[l]).collect()
    }

    /// Differentiable perceptual distance between two (N,1,H,W) nodes:
    /// sum over feature levels of mean squared feature difference.
    /// Symmetric in (a, b); zero iff the features agree.
    pub fn distance(&self, g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let mut total: Option<NodeId> = None;
        for (na, nb) in fa.into_iter().zip(fb) {
            let term = g.mse(na, nb);
            total = Some(match total {
                Some(t) => g.add(t, term),
                None => term,
            });
        }
        total.expect("feature_levels must be non-empty")
    }
}

/// Write a small random extractor (2 conv layers, levels {0, 1, 2}) — used by
/// tests and smoke runs in environments without pretrained weights. Seeded
/// and deterministic.
pub fn write_random_extractor(path: &Path, seed: u64) -> Result<()> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let meta = ExtractorMeta {
        in_channels: 3,
        input_mean: 0.0,
        input_std: 1.0,
        feature_levels: vec![0, 1, 2],
        layers: vec![
            LayerMeta { out_channels: 8, kernel: 3, stride: 1, pad: 1 },
            LayerMeta { out_channels: 16, kernel: 3, stride: 2, pad: 1 },
        ],
    };
    let mut w = ContainerWriter::new("perceptual", &meta)?;
    let mut cin = meta.in_channels;
    for (i, lm) in meta.layers.iter().enumerate() {
        let count = lm.out_channels * cin * lm.kernel * lm.kernel;
        let std = (2.0 / (cin * lm.kernel * lm.kernel) as f64).sqrt();
        let weights: Vec<f64> = (0..count)
            .map(|_| std * crate::solver::standard_normal(&mut rng))
            .collect();
        w.add_f64(
            &format!("layer{i}.w"),
            &[lm.out_channels, cin, lm.kernel, lm.kernel],
            &weights,
        );
        w.add_f64(&format!("layer{i}.b"), &[lm.out_channels], &vec![0.0; lm.out_channels]);
        cin = lm.out_channels;
    }
    w.write(path)
}
