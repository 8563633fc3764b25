//! The completion model: convolutional encoder, vector-quantization
//! bottleneck, post-quantization convolution, convolutional decoder, and a
//! patch discriminator, all expressed as [`autodiff`] graphs over a flat
//! [`ParamStore`].
//!
//! Architecture (desk scale): mirrored encoder/decoder with residual blocks
//! and four stride-2 stages (64^2 input -> 4^2 latent, 8-dimensional codes,
//! K = 512), VQGAN-style proportions scaled down. The discriminator is a
//! patch classifier whose receptive-field stack maps a 64^2 field to a 6x6
//! grid of logits.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::solver::standard_normal;

/// Hyperparameters fixing every tensor shape in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Side of the (square) input field.
    pub input_grid: usize,
    /// 1 in Stage 1; 3 after the Stage-2 input expansion.
    pub in_channels: usize,
    /// Width of the first encoder level.
    pub base_width: usize,
    /// Per-level width multipliers; the length is the number of stride-2
    /// stages, so the latent grid is `input_grid >> channel_mults.len()`.
    pub channel_mults: Vec<usize>,
    /// Dimension d of each latent cell and codebook vector.
    pub latent_channels: usize,
    /// Number of codebook entries K.
    pub codebook_size: usize,
    /// Group count for all group-norm layers.
    pub norm_groups: usize,
    /// Width of the first discriminator layer.
    pub disc_base_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_grid: 64,
            in_channels: 1,
            base_width: 16,
            channel_mults: vec![1, 1, 2, 2],
            latent_channels: 8,
            codebook_size: 512,
            norm_groups: 8,
            disc_base_width: 16,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mults.len();
        if levels == 0 {
            return Err(Error::Config("channel_mults must be non-empty".into()));
        }
        if !self.input_grid.is_power_of_two() || self.input_grid < (1 << levels) * 4 {
            return Err(Error::Config(format!(
                "input_grid {} must be a power of two with room for {} stride-2 stages",
                self.input_grid, levels
            )));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config(format!(
                "in_channels must be 1 (stage 1) or 3 (stage 2), got {}",
                self.in_channels
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        for (i, w) in self.level_widths().iter().enumerate() {
            if w % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "level {i} width {w} is not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        for w in [2 * self.disc_base_width, 4 * self.disc_base_width] {
            if w % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "discriminator width {w} is not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    /// Encoder width after each level.
    pub fn level_widths(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_width).collect()
    }

    /// Side of the latent grid.
    pub fn latent_grid(&self) -> usize {
        self.input_grid >> self.channel_mults.len()
    }

    /// Latent cells per sample.
    pub fn cells_per_sample(&self) -> usize {
        self.latent_grid() * self.latent_grid()
    }

    /// Whether the discriminator stack (three stride-2 k4p1 layers, then two
    /// stride-1 k4p1 layers) fits the input grid.
    pub fn supports_discriminator(&self) -> bool {
        self.input_grid / 8 >= 3
    }

    /// Side of the discriminator's patch-logit grid.
    pub fn patch_grid(&self) -> usize {
        assert!(
            self.supports_discriminator(),
            "input grid {} too small for the patch discriminator",
            self.input_grid
        );
        (self.input_grid / 8) - 2
    }
}

/// Model state: shapes, parameters, codebook-usage counters, and the data
/// normalization constant. The codebook itself is the parameter named
/// `"codebook"`.
#[derive(Debug, Clone)]
pub struct VqModel {
    pub arch: ArchConfig,
    pub params: ParamStore,
    /// Per-code assignment counts since the last dead-code sweep.
    pub usage: Vec<u64>,
    /// Global max-abs of the training split; fields are divided by this
    /// before entering the model and multiplied back for evaluation.
    pub norm_scale: f64,
    /// 1 or 2.
    pub stage: u8,
    /// The mask configuration a stage-2 model was fine-tuned for.
    pub mask: Option<MaskConfig>,
}

fn he_conv(rng: &mut ChaCha12Rng, out_c: usize, in_c: usize, k: usize) -> Tensor {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let data = (0..out_c * in_c * k * k)
        .map(|_| std * standard_normal(rng))
        .collect();
    Tensor::from_vec(&[out_c, in_c, k, k], data)
}

/// Adds conv weight+bias params named `{name}.w` / `{name}.b`.
fn add_conv(ps: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, out_c: usize, in_c: usize, k: usize) {
    ps.add(&format!("{name}.w"), he_conv(rng, out_c, in_c, k));
    ps.add(&format!("{name}.b"), Tensor::zeros(&[out_c]));
}

/// Adds group-norm gamma/beta params named `{name}.g` / `{name}.b`.
fn add_norm(ps: &mut ParamStore, name: &str, channels: usize) {
    ps.add(&format!("{name}.g"), Tensor::from_vec(&[channels], vec![1.0; channels]));
    ps.add(&format!("{name}.b"), Tensor::zeros(&[channels]));
}

fn add_resblock(ps: &mut ParamStore, rng: &mut ChaCha12Rng, prefix: &str, cin: usize, cout: usize) {
    add_norm(ps, &format!("{prefix}.norm1"), cin);
    add_conv(ps, rng, &format!("{prefix}.conv1"), cout, cin, 3);
    add_norm(ps, &format!("{prefix}.norm2"), cout);
    add_conv(ps, rng, &format!("{prefix}.conv2"), cout, cout, 3);
    if cin != cout {
        add_conv(ps, rng, &format!("{prefix}.skip"), cout, cin, 1);
    }
}

impl VqModel {
    /// Fresh stage-1 model with seeded initialization (He-normal convolutions,
    /// unit-gamma norms, uniform +-1/K codebook).
    pub fn new_stage1(arch: ArchConfig, norm_scale: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        if !(norm_scale.is_finite() && norm_scale > 0.0) {
            return Err(Error::Config(format!(
                "normalization scale must be positive and finite, got {norm_scale}"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamStore::default();
        let widths = arch.level_widths();
        let d = arch.latent_channels;
        let last = *widths.last().unwrap();

        // Encoder.
        add_conv(&mut ps, &mut rng, "enc.conv_in", arch.base_width, arch.in_channels, 3);
        let mut prev = arch.base_width;
        for (i, &w) in widths.iter().enumerate() {
            add_resblock(&mut ps, &mut rng, &format!("enc.l{i}.res"), prev, w);
            add_conv(&mut ps, &mut rng, &format!("enc.l{i}.down"), w, w, 3);
            prev = w;
        }
        add_resblock(&mut ps, &mut rng, "enc.mid", last, last);
        add_norm(&mut ps, "enc.norm_out", last);
        add_conv(&mut ps, &mut rng, "enc.conv_out", d, last, 3);
        add_conv(&mut ps, &mut rng, "quant_conv", d, d, 1);

        // Codebook: uniform in [-1/K, 1/K] (dead-code reinit during training
        // spreads the entries to the encoder's output distribution).
        let k = arch.codebook_size;
        let mut cb = Vec::with_capacity(k * d);
        for _ in 0..k * d {
            let u: f64 = rand::Rng::gen(&mut rng);
            cb.push((2.0 * u - 1.0) / k as f64);
        }
        ps.add("codebook", Tensor::from_vec(&[k, d], cb));

        add_conv(&mut ps, &mut rng, "post_quant_conv", d, d, 1);

        // Decoder (mirror).
        add_conv(&mut ps, &mut rng, "dec.conv_in", last, d, 3);
        add_resblock(&mut ps, &mut rng, "dec.mid", last, last);
        let mut cur = last;
        for i in (0..widths.len()).rev() {
            let target = if i == 0 { arch.base_width } else { widths[i - 1] };
            add_conv(&mut ps, &mut rng, &format!("dec.l{i}.up"), cur, cur, 3);
            add_resblock(&mut ps, &mut rng, &format!("dec.l{i}.res"), cur, target);
            cur = target;
        }
        add_norm(&mut ps, "dec.norm_out", cur);
        add_conv(&mut ps, &mut rng, "dec.conv_out", 1, cur, 3);

        // Patch discriminator.
        let dw = arch.disc_base_width;
        add_conv(&mut ps, &mut rng, "disc.c0", dw, 1, 4);
        add_conv(&mut ps, &mut rng, "disc.c1", 2 * dw, dw, 4);
        add_norm(&mut ps, "disc.n1", 2 * dw);
        add_conv(&mut ps, &mut rng, "disc.c2", 4 * dw, 2 * dw, 4);
        add_norm(&mut ps, "disc.n2", 4 * dw);
        add_conv(&mut ps, &mut rng, "disc.c3", 4 * dw, 4 * dw, 4);
        add_norm(&mut ps, "disc.n3", 4 * dw);
        add_conv(&mut ps, &mut rng, "disc.c4", 1, 4 * dw, 4);

        Ok(VqModel {
            usage: vec![0; arch.codebook_size],
            arch,
            params: ps,
            norm_scale,
            stage: 1,
            mask: None,
        })
    }

    /// Convert a stage-1 model into the stage-2 configuration: the first
    /// encoder convolution grows from 1 to 3 input channels (pretrained
    /// kernel in channel 0, zeros in channels 1-2, preserving the stage-1
    /// function at initialization) and every `dec.*` parameter is frozen.
    pub fn into_stage2(mut self, mask: MaskConfig) -> Result<Self> {
        if self.stage != 1 {
            return Err(Error::StageMismatch(format!(
                "stage-2 fine-tuning requires a stage-1 checkpoint, found stage {}",
                self.stage
            )));
        }
        mask.validate()?;
        let p = self.params.get_mut("enc.conv_in.w");
        let [o, cin, kh, kw] = p.tensor.shape[..] else {
            panic!("enc.conv_in.w is not 4D")
        };
        assert_eq!(cin, 1, "stage-1 first conv must have 1 input channel");
        let mut grown = Tensor::zeros(&[o, 3, kh, kw]);
        for oi in 0..o {
            for idx in 0..kh * kw {
                grown.data[(oi * 3) * kh * kw + idx] = p.tensor.data[oi * kh * kw + idx];
            }
        }
        p.tensor = grown;
        self.arch.in_channels = 3;
        self.params.freeze_prefix("dec.");
        self.stage = 2;
        self.mask = Some(mask);
        Ok(self)
    }
}

/// Per-step binding of every parameter to a graph leaf node.
pub struct Binding {
    /// Node id per parameter, index-aligned with `ParamStore::params`.
    pub node_of: Vec<NodeId>,
    names: Vec<String>,
}

impl Binding {
    /// Bind all parameters of `store` into `g` as gradient-bearing leaves.
    pub fn bind(g: &mut Graph, store: &ParamStore) -> Self {
        let mut node_of = Vec::with_capacity(store.params.len());
        let mut names = Vec::with_capacity(store.params.len());
        for p in &store.params {
            node_of.push(g.param(p.tensor.clone()));
            names.push(p.name.clone());
        }
        Binding { node_of, names }
    }

    /// Node of a parameter by name (panics on unknown names: a model-builder
    /// bug, not a runtime condition).
    pub fn node(&self, name: &str) -> NodeId {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unbound param '{name}'"));
        self.node_of[idx]
    }
}

const GN_EPS: f64 = 1e-6;

struct Builder<'a, 'b> {
    g: &'a mut Graph,
    b: &'b Binding,
    groups: usize,
}

impl Builder<'_, '_> {
    fn conv(&mut self, name: &str, x: NodeId, stride: usize, pad: usize) -> NodeId {
        let w = self.b.node(&format!("{name}.w"));
        let bias = self.b.node(&format!("{name}.b"));
        self.g.conv2d(x, w, bias, stride, pad)
    }

    fn norm(&mut self, name: &str, x: NodeId) -> NodeId {
        let gamma = self.b.node(&format!("{name}.g"));
        let beta = self.b.node(&format!("{name}.b"));
        self.g.group_norm(x, gamma, beta, self.groups, GN_EPS)
    }

    fn resblock(&mut self, prefix: &str, x: NodeId, cin: usize, cout: usize) -> NodeId {
        let h = self.norm(&format!("{prefix}.norm1"), x);
        let h = self.g.silu(h);
        let h = self.conv(&format!("{prefix}.conv1"), h, 1, 1);
        let h = self.norm(&format!("{prefix}.norm2"), h);
        let h = self.g.silu(h);
        let h = self.conv(&format!("{prefix}.conv2"), h, 1, 1);
        let skip = if cin != cout {
            self.conv(&format!("{prefix}.skip"), x, 1, 0)
        } else {
            x
        };
        self.g.add(h, skip)
    }
}

/// Encoder + 1x1 quant conv: input (N, in_channels, H, W) -> continuous
/// latent Z_c of shape (N, d, h_l, w_l).
pub fn encode(g: &mut Graph, b: &Binding, arch: &ArchConfig, x: NodeId) -> NodeId {
    assert_eq!(
        g.value(x).shape[1..],
        [arch.in_channels, arch.input_grid, arch.input_grid],
        "encoder input shape mismatch"
    );
    let widths = arch.level_widths();
    let last = *widths.last().unwrap();
    let mut bl = Builder { g, b, groups: arch.norm_groups };
    let mut h = bl.conv("enc.conv_in", x, 1, 1);
    let mut prev = arch.base_width;
    for (i, &w) in widths.iter().enumerate() {
        h = bl.resblock(&format!("enc.l{i}.res"), h, prev, w);
        h = bl.conv(&format!("enc.l{i}.down"), h, 2, 1);
        prev = w;
    }
    h = bl.resblock("enc.mid", h, last, last);
    h = bl.norm("enc.norm_out", h);
    h = bl.g.silu(h);
    h = bl.conv("enc.conv_out", h, 1, 1);
    bl.conv("quant_conv", h, 1, 0)
}

/// Post-quant 1x1 conv + decoder: quantized latent (N, d, h_l, w_l) ->
/// reconstruction (N, 1, H, W).
pub fn decode(g: &mut Graph, b: &Binding, arch: &ArchConfig, z_q: NodeId) -> NodeId {
    let widths = arch.level_widths();
    let last = *widths.last().unwrap();
    let mut bl = Builder { g, b, groups: arch.norm_groups };
    let mut h = bl.conv("post_quant_conv", z_q, 1, 0);
    h = bl.conv("dec.conv_in", h, 1, 1);
    h = bl.resblock("dec.mid", h, last, last);
    let mut cur = last;
    for i in (0..widths.len()).rev() {
        let target = if i == 0 { arch.base_width } else { widths[i - 1] };
        h = bl.g.upsample_nearest2(h);
        h = bl.conv(&format!("dec.l{i}.up"), h, 1, 1);
        h = bl.resblock(&format!("dec.l{i}.res"), h, cur, target);
        cur = target;
    }
    h = bl.norm("dec.norm_out", h);
    h = bl.g.silu(h);
    bl.conv("dec.conv_out", h, 1, 1)
}

/// Patch discriminator: (N, 1, H, W) -> logits (N, 1, p, p).
pub fn discriminate(g: &mut Graph, b: &Binding, arch: &ArchConfig, x: NodeId) -> NodeId {
    let mut bl = Builder { g, b, groups: arch.norm_groups };
    let mut h = bl.conv("disc.c0", x, 2, 1);
    h = bl.g.leaky_relu(h, 0.2);
    h = bl.conv("disc.c1", h, 2, 1);
    h = bl.norm("disc.n1", h);
    h = bl.g.leaky_relu(h, 0.2);
    h = bl.conv("disc.c2", h, 2, 1);
    h = bl.norm("disc.n2", h);
    h = bl.g.leaky_relu(h, 0.2);
    h = bl.conv("disc.c3", h, 1, 1);
    h = bl.norm("disc.n3", h);
    h = bl.g.leaky_relu(h, 0.2);
    let out = bl.conv("disc.c4", h, 1, 1);
    let p = arch.patch_grid();
    assert_eq!(g.value(out).shape[2..], [p, p], "patch grid mismatch");
    out
}

/// Nearest codebook row per cell, Euclidean metric, strict lowest-index
/// tie-breaking. `cells` is (num_cells, d), `codebook` (K, d).
pub fn nearest_codes(cells: &Tensor, codebook: &Tensor) -> Vec<usize> {
    assert_eq!(cells.shape.len(), 2);
    assert_eq!(codebook.shape.len(), 2);
    assert_eq!(cells.shape[1], codebook.shape[1], "latent dim mismatch");
    let d = cells.shape[1];
    let k = codebook.shape[0];
    let mut out = Vec::with_capacity(cells.shape[0]);
    for cell in cells.data.chunks_exact(d) {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for ki in 0..k {
            let code = &codebook.data[ki * d..(ki + 1) * d];
            let mut dist = 0.0;
            for j in 0..d {
                let diff = cell[j] - code[j];
                dist += diff * diff;
            }
            // Strict '<': on exact ties the earliest (lowest-index) code wins.
            if dist < best_d {
                best_d = dist;
                best = ki;
            }
        }
        out.push(best);
    }
    out
}

/// Everything the training step needs from one generator forward pass.
pub struct GeneratorOut {
    /// Continuous latents as (cells, d) rows.
    pub z_c_cells: NodeId,
    /// Chosen code index per cell.
    pub codes: Vec<usize>,
    /// Quantized rows gathered from the codebook (gradients reach the book).
    pub z_q_cells: NodeId,
    /// Reconstruction (N, 1, H, W), decoded from the straight-through latent.
    pub x_tilde: NodeId,
}

/// Full generator pass: encode, quantize (straight-through), decode.
pub fn generator_forward(g: &mut Graph, b: &Binding, arch: &ArchConfig, x: NodeId) -> GeneratorOut {
    let n = g.value(x).shape[0];
    let hl = arch.latent_grid();
    let z_c = encode(g, b, arch, x);
    let z_c_cells = g.nchw_to_cells(z_c);
    let codebook = b.node("codebook");
    let codes = nearest_codes(g.value(z_c_cells), g.value(codebook));
    let z_q_cells = g.gather_rows(codebook, &codes);
    let st = g.straight_through(z_c_cells, z_q_cells);
    let st_nchw = g.cells_to_nchw(st, n, arch.latent_channels, hl, hl);
    let x_tilde = decode(g, b, arch, st_nchw);
    GeneratorOut {
        z_c_cells,
        codes,
        z_q_cells,
        x_tilde,
    }
}

/// Inference-only completion: returns the reconstruction values (and code
/// indices) for a batch, without building loss terms.
pub fn reconstruct(model: &VqModel, batch: &Tensor) -> (Tensor, Vec<usize>) {
    let mut g = Graph::new();
    let b = Binding::bind(&mut g, &model.params);
    let x = g.constant(batch.clone());
    let out = generator_forward(&mut g, &b, &model.arch, x);
    (g.value(out.x_tilde).clone(), out.codes)
}

// ---------------------------------------------------------------------------
// Checkpoint I/O (container format shared with datasets).
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    stage: u8,
    arch: ArchConfig,
    norm_scale: f64,
    mask: Option<MaskConfig>,
    trained_steps: u64,
    params: Vec<ParamMeta>,
}

/// Write `model` (parameters, codebook usage, normalization, stage tag) as a
/// container directory of kind `"checkpoint"`. Deterministic byte-for-byte.
pub fn save_checkpoint(model: &VqModel, trained_steps: u64, dir: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        stage: model.stage,
        arch: model.arch.clone(),
        norm_scale: model.norm_scale,
        mask: model.mask.clone(),
        trained_steps,
        params: model
            .params
            .params
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.tensor.shape.clone(),
                frozen: p.frozen,
            })
            .collect(),
    };
    let mut w = ContainerWriter::new("checkpoint", &meta)?;
    for p in &model.params.params {
        w.add_f64(&p.name, &p.tensor.shape, &p.tensor.data);
    }
    let usage: Vec<i64> = model.usage.iter().map(|&u| u as i64).collect();
    w.add_i64("codebook.usage", &[usage.len()], &usage);
    w.write(dir)
}

/// Load a checkpoint written by [`save_checkpoint`]. Returns the model and
/// its trained-step counter.
pub fn load_checkpoint(dir: &Path) -> Result<(VqModel, u64)> {
    let c = Container::open(dir)?;
    if c.kind() != "checkpoint" {
        return Err(Error::StageMismatch(format!(
            "{} holds a '{}' container, not a model checkpoint",
            dir.display(),
            c.kind()
        )));
    }
    let meta: CheckpointMeta = c.typed_meta()?;
    meta.arch.validate()?;
    let mut ps = ParamStore::default();
    for pm in &meta.params {
        let data = c.read_f64(&pm.name)?;
        let expected: usize = pm.shape.iter().product();
        if data.len() != expected {
            return Err(Error::Config(format!(
                "checkpoint param '{}' holds {} values, shape {:?} needs {}",
                pm.name,
                data.len(),
                pm.shape,
                expected
            )));
        }
        let idx = ps.add(&pm.name, Tensor::from_vec(&pm.shape, data));
        ps.params[idx].frozen = pm.frozen;
    }
    let usage: Vec<u64> = c
        .read_i64("codebook.usage")?
        .iter()
        .map(|&u| u.max(0) as u64)
        .collect();
    if usage.len() != meta.arch.codebook_size {
        return Err(Error::Config(format!(
            "checkpoint usage table has {} entries for codebook size {}",
            usage.len(),
            meta.arch.codebook_size
        )));
    }
    Ok((
        VqModel {
            arch: meta.arch,
            params: ps,
            usage,
            norm_scale: meta.norm_scale,
            stage: meta.stage,
            mask: meta.mask,
        },
        meta.trained_steps,
    ))
}
