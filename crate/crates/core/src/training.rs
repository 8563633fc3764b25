//! Loss functions and the two-stage optimization procedures.
//!
//! Stage 1 trains encoder, codebook, post-quantization convolution, decoder,
//! and patch discriminator on full fields:
//!
//! ```text
//! min_{E,C,D} max_F  E_X[ L_VQ + L_percep + lambda * L_GAN ]
//! L_VQ = |X - X~|^2 + |sg(Z_c) - Z|^2 + beta * |Z_c - sg(Z)|^2
//! ```
//!
//! Stage 2 freezes the decoder, widens the encoder input to the stacked
//! `(X_mask, 1-M, M)` triple, and substitutes the masked composite
//! `X_mask + X~ (.) M` for `X~` in every loss term, so the objective depends
//! only on predictions over the missing region.
//!
//! The GAN weight lambda is adaptive: the ratio of the gradient norms of the
//! reconstruction-side and adversarial losses at the last trainable layer
//! feeding the prediction (decoder output convolution in Stage 1; the
//! post-quantization convolution in Stage 2, since the decoder is frozen).

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Grads, Tensor};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::masking::{build_mask, MaskConfig, MaskGrid};
use crate::percept::PerceptualExtractor;
use crate::vqvae::{
    discriminate, generator_forward, save_checkpoint, ArchConfig, Binding, VqModel,
};

/// Knobs for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// 1 (reconstruction pre-training) or 2 (completion fine-tuning).
    pub stage: u8,
    /// Commitment weight beta in L_VQ.
    pub beta: f64,
    /// Learning rate for encoder/codebook/decoder parameters.
    pub lr_model: f64,
    /// Learning rate for the discriminator.
    pub lr_disc: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub gan_enabled: bool,
    /// First step (0-based) at which the adversarial terms turn on;
    /// default is 25% of `steps`.
    pub gan_start_step: Option<usize>,
    pub percept_enabled: bool,
    /// Container of perceptual-extractor weights; required when
    /// `percept_enabled` (checked at startup, never mid-training).
    pub percept_weights: Option<PathBuf>,
    /// Upper clamp for the adaptive GAN weight.
    pub lambda_clamp: f64,
    /// Stage 2: keep the stage-1 discriminator (true) or reinitialize it.
    pub warm_start_disc: bool,
    /// Stage 2: keep the stage-1 post-quantization convolution (true) or
    /// reinitialize it.
    pub warm_start_post_quant: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            beta: 0.25,
            lr_model: 1e-4,
            lr_disc: 4e-4,
            steps: 200,
            batch_size: 16,
            gan_enabled: true,
            gan_start_step: None,
            percept_enabled: false,
            percept_weights: None,
            lambda_clamp: 1e4,
            warm_start_disc: true,
            warm_start_post_quant: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr_model > 0.0 && self.lr_disc > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lambda_clamp < 0.0 {
            return Err(Error::Config(format!(
                "lambda_clamp must be non-negative, got {}",
                self.lambda_clamp
            )));
        }
        if self.percept_enabled && self.percept_weights.is_none() {
            return Err(Error::Config(
                "percept_enabled requires percept_weights to point at an extractor file".into(),
            ));
        }
        Ok(())
    }

    /// Effective first adversarial step.
    pub fn effective_gan_start(&self) -> usize {
        self.gan_start_step.unwrap_or(self.steps / 4)
    }
}

/// Per-step loss report. `commitment` is the raw squared norm; `total`
/// applies beta, matching `total = recon + codebook + beta*commitment +
/// perceptual + lambda_used*gan_generator` for the enabled terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub perceptual: f64,
    pub gan_generator: f64,
    pub gan_discriminator: f64,
    pub lambda_used: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zeros() -> Self {
        LossBreakdown {
            recon: 0.0,
            codebook: 0.0,
            commitment: 0.0,
            perceptual: 0.0,
            gan_generator: 0.0,
            gan_discriminator: 0.0,
            lambda_used: 0.0,
            total: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon,
            self.codebook,
            self.commitment,
            self.perceptual,
            self.gan_generator,
            self.gan_discriminator,
            self.lambda_used,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

// ---------------------------------------------------------------------------
// Value-level loss primitives (the graph versions live in the step builder).
// ---------------------------------------------------------------------------

/// L_VQ terms by value: mean squared reconstruction error plus the codebook
/// and commitment norms averaged over latent cells. Gradient routing (which
/// side of the quantizer each term's stop-gradient freezes) is a property of
/// the training graph; the values coincide.
pub fn vq_loss(
    x: &Tensor,
    x_tilde: &Tensor,
    z_c: &Tensor,
    z_q: &Tensor,
    beta: f64,
) -> LossBreakdown {
    assert_eq!(x.shape, x_tilde.shape, "field shape mismatch");
    assert_eq!(z_c.shape, z_q.shape, "latent shape mismatch");
    assert_eq!(z_c.shape.len(), 2, "latents must be (cells, d)");
    let recon = x
        .data
        .iter()
        .zip(&x_tilde.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.numel() as f64;
    let cells = z_c.shape[0] as f64;
    let quant_err = z_c
        .data
        .iter()
        .zip(&z_q.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / cells;
    let mut out = LossBreakdown::zeros();
    out.recon = recon;
    out.codebook = quant_err;
    out.commitment = quant_err;
    out.total = recon + quant_err + beta * quant_err;
    out
}

/// Adversarial terms from patch logits: the generator minimizes the
/// non-saturating `mean softplus(-fake)`; the reported discriminator value is
/// the classic GAN objective `mean[log p(real)] + mean[log(1 - p(fake))]`
/// (so an undecided discriminator at p = 1/2 reports -2 log 2).
pub fn gan_loss(real_logits: &[f64], fake_logits: &[f64]) -> (f64, f64) {
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let mean_of = |v: &[f64], f: &dyn Fn(f64) -> f64| -> f64 {
        v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64
    };
    let generator = mean_of(fake_logits, &|x| softplus(-x));
    let discriminator = -(mean_of(real_logits, &|x| softplus(-x)) + mean_of(fake_logits, &softplus));
    (generator, discriminator)
}

/// Adaptive GAN weight: `recon_grad_norm / (gan_grad_norm + 1e-6)`, clamped
/// to `[0, clamp]`.
pub fn adaptive_lambda(recon_grad_norm: f64, gan_grad_norm: f64, clamp: f64) -> f64 {
    (recon_grad_norm / (gan_grad_norm + 1e-6)).clamp(0.0, clamp)
}

/// `X_mask + X~ (.) M`: ground truth on known cells, prediction on missing
/// ones.
pub fn masked_composite(x_mask: &[f64], x_tilde: &[f64], mask: &MaskGrid) -> Vec<f64> {
    let m = mask.as_f64();
    assert_eq!(x_mask.len(), x_tilde.len());
    assert_eq!(x_mask.len(), m.len(), "mask shape mismatch");
    x_mask
        .iter()
        .zip(x_tilde)
        .zip(&m)
        .map(|((k, p), mi)| k + p * mi)
        .collect()
}

// ---------------------------------------------------------------------------
// The shared training step.
// ---------------------------------------------------------------------------

/// Fixed per-run stage-2 context: the mask and derived per-frame constants.
struct MaskCtx {
    grid: MaskGrid,
    /// Missing-region indicator flattened (h*w).
    m: Vec<f64>,
}

struct StepOutcome {
    breakdown: LossBreakdown,
    /// Gradients for the generator-side optimizer (disc entries stripped).
    model_grads: Vec<Option<Tensor>>,
    /// Gradients for the discriminator optimizer (only disc entries kept).
    disc_grads: Option<Vec<Option<Tensor>>>,
    codes: Vec<usize>,
    /// Continuous latents (cells, d), for dead-code reinitialization.
    z_c_value: Tensor,
}

fn collect_param_grads(g: &Grads, binding: &Binding) -> Vec<Option<Tensor>> {
    binding.node_of.iter().map(|&n| g.get(n).cloned()).collect()
}

/// Build the full step graph for one batch and compute every gradient the
/// optimizers need. `truth` is the normalized ground-truth batch (N,1,H,W);
/// `batch` is the encoder input (equal to `truth` in Stage 1, the stacked
/// 3-channel tensor in Stage 2).
fn build_step(
    model: &VqModel,
    percept: Option<&PerceptualExtractor>,
    batch: &Tensor,
    truth: &Tensor,
    mask_ctx: Option<&MaskCtx>,
    gan_active: bool,
    cfg: &TrainConfig,
) -> StepOutcome {
    let arch = &model.arch;
    let n = batch.shape[0];
    let hw = arch.input_grid * arch.input_grid;

    let mut g = Graph::new();
    let binding = Binding::bind(&mut g, &model.params);
    let x_in = g.constant(batch.clone());
    let x_truth = g.constant(truth.clone());

    let gen = generator_forward(&mut g, &binding, arch, x_in);

    // Prediction entering the reconstruction/perceptual/GAN terms, and the
    // reconstruction loss itself.
    let (pred, recon) = match mask_ctx {
        None => (gen.x_tilde, g.mse(gen.x_tilde, x_truth)),
        Some(ctx) => {
            // Composite = X_mask + X~ (.) M, with X_mask = X (.) (1-M).
            let mut m_b = Vec::with_capacity(n * hw);
            let mut xm_b = Vec::with_capacity(n * hw);
            for bi in 0..n {
                for j in 0..hw {
                    m_b.push(ctx.m[j]);
                    xm_b.push(truth.data[bi * hw + j] * (1.0 - ctx.m[j]));
                }
            }
            let shape = [n, 1, arch.input_grid, arch.input_grid];
            let m_node = g.constant(Tensor::from_vec(&shape, m_b));
            let xm_node = g.constant(Tensor::from_vec(&shape, xm_b));
            let masked_pred = g.mul(gen.x_tilde, m_node);
            let composite = g.add(xm_node, masked_pred);
            // Masked MSE divides by the masked-cell count, not H*W.
            let diff = g.sub(composite, x_truth);
            let sq = g.square(diff);
            let s = g.sum_all(sq);
            let recon = g.scale(s, 1.0 / (ctx.grid.masked_cells() * n) as f64);
            (composite, recon)
        }
    };

    let percept_term = percept.map(|ex| ex.distance(&mut g, pred, x_truth));
    let nll = match percept_term {
        Some(p) => g.add(recon, p),
        None => recon,
    };

    // Quantization terms over latent cells: the codebook term stops
    // gradients at Z_c (updates only the book), the commitment term stops
    // them at Z (updates only the encoder).
    let cells_total = g.value(gen.z_c_cells).shape[0] as f64;
    let zc_sg = g.detach(gen.z_c_cells);
    let zq_sg = g.detach(gen.z_q_cells);
    let cb_diff = g.sub(zc_sg, gen.z_q_cells);
    let cb_sq = g.square(cb_diff);
    let cb_sum = g.sum_all(cb_sq);
    let codebook_term = g.scale(cb_sum, 1.0 / cells_total);
    let cm_diff = g.sub(gen.z_c_cells, zq_sg);
    let cm_sq = g.square(cm_diff);
    let cm_sum = g.sum_all(cm_sq);
    let commitment_term = g.scale(cm_sum, 1.0 / cells_total);
    let commitment_weighted = g.scale(commitment_term, cfg.beta);
    let vq_terms = g.add(codebook_term, commitment_weighted);

    // Everything the generator minimizes except the adversarial term.
    let gen_base = g.add(nll, vq_terms);

    let mut breakdown = LossBreakdown::zeros();
    breakdown.recon = g.scalar_value(recon);
    breakdown.codebook = g.scalar_value(codebook_term);
    breakdown.commitment = g.scalar_value(commitment_term);
    breakdown.perceptual = percept_term.map_or(0.0, |p| g.scalar_value(p));

    let probe = if model.stage == 1 {
        "dec.conv_out.w"
    } else {
        "post_quant_conv.w"
    };
    let is_disc = |name: &str| name.starts_with("disc.");

    let (model_grads, disc_grads) = if gan_active {
        // Generator-side adversarial term (gradients flow into the model).
        let fake_logits = discriminate(&mut g, &binding, arch, pred);
        let neg_fake = g.scale(fake_logits, -1.0);
        let sp = g.softplus(neg_fake);
        let gan_gen = g.mean_all(sp);

        // Discriminator objective on real fields and detached predictions.
        let pred_sg = g.detach(pred);
        let real_logits = discriminate(&mut g, &binding, arch, x_truth);
        let fake_logits_sg = discriminate(&mut g, &binding, arch, pred_sg);
        let neg_real = g.scale(real_logits, -1.0);
        let sp_real = g.softplus(neg_real);
        let d_real = g.mean_all(sp_real);
        let sp_fake = g.softplus(fake_logits_sg);
        let d_fake = g.mean_all(sp_fake);
        let d_sum = g.add(d_real, d_fake);
        let d_obj = g.scale(d_sum, 0.5);

        breakdown.gan_generator = g.scalar_value(gan_gen);
        breakdown.gan_discriminator = -(g.scalar_value(d_real) + g.scalar_value(d_fake));

        // The VQ terms never reach the probe layer (it sits after the
        // quantizer on the decoding path), so the probe gradient of
        // `gen_base` equals that of the reconstruction+perceptual part.
        let base_grads = g.backward(gen_base);
        let gan_grads = g.backward(gan_gen);
        let probe_node = binding.node(probe);
        let r_norm = base_grads.get(probe_node).map_or(0.0, |t| t.norm());
        let g_norm = gan_grads.get(probe_node).map_or(0.0, |t| t.norm());
        let lambda = adaptive_lambda(r_norm, g_norm, cfg.lambda_clamp);
        breakdown.lambda_used = lambda;

        let base = collect_param_grads(&base_grads, &binding);
        let gan = collect_param_grads(&gan_grads, &binding);
        let mut combined = Vec::with_capacity(base.len());
        for (i, p) in model.params.params.iter().enumerate() {
            if is_disc(&p.name) {
                combined.push(None);
                continue;
            }
            let merged = match (&base[i], &gan[i]) {
                (None, None) => None,
                (a, b) => {
                    let shape = p.tensor.shape.clone();
                    let mut t = Tensor::zeros(&shape);
                    if let Some(av) = a {
                        for (o, v) in t.data.iter_mut().zip(&av.data) {
                            *o += v;
                        }
                    }
                    if let Some(bv) = b {
                        for (o, v) in t.data.iter_mut().zip(&bv.data) {
                            *o += lambda * v;
                        }
                    }
                    Some(t)
                }
            };
            combined.push(merged);
        }

        let d_grads_all = g.backward(d_obj);
        let mut d_grads = collect_param_grads(&d_grads_all, &binding);
        for (i, p) in model.params.params.iter().enumerate() {
            if !is_disc(&p.name) {
                d_grads[i] = None;
            }
        }
        (combined, Some(d_grads))
    } else {
        let base_grads = g.backward(gen_base);
        let mut grads = collect_param_grads(&base_grads, &binding);
        for (i, p) in model.params.params.iter().enumerate() {
            if is_disc(&p.name) {
                grads[i] = None;
            }
        }
        (grads, None)
    };

    breakdown.total = breakdown.recon
        + breakdown.codebook
        + cfg.beta * breakdown.commitment
        + breakdown.perceptual
        + breakdown.lambda_used * breakdown.gan_generator;

    StepOutcome {
        breakdown,
        model_grads,
        disc_grads,
        codes: gen.codes,
        z_c_value: g.value(gen.z_c_cells).clone(),
    }
}

// ---------------------------------------------------------------------------
// Training loops.
// ---------------------------------------------------------------------------

fn grads_finite(grads: &[Option<Tensor>]) -> bool {
    grads.iter().flatten().all(|t| t.data.iter().all(|v| v.is_finite()))
}

/// Normalized (N,1,H,W) truth batch from dataset frames.
fn truth_batch(dataset: &Dataset, idxs: &[usize], scale: f64) -> Tensor {
    let nn = dataset.grid();
    let mut data = Vec::with_capacity(idxs.len() * nn * nn);
    for &i in idxs {
        data.extend(dataset.frame(i).iter().map(|&v| v as f64 / scale));
    }
    Tensor::from_vec(&[idxs.len(), 1, nn, nn], data)
}

/// Stacked stage-2 (N,3,H,W) batch: channels (X_mask, 1-M, M).
fn stacked_batch(truth: &Tensor, m: &[f64]) -> Tensor {
    let (n, hw) = (truth.shape[0], m.len());
    let side = truth.shape[2];
    let mut data = Vec::with_capacity(n * 3 * hw);
    for bi in 0..n {
        let x = &truth.data[bi * hw..(bi + 1) * hw];
        data.extend(x.iter().zip(m).map(|(v, mi)| v * (1.0 - mi)));
        data.extend(m.iter().map(|mi| 1.0 - mi));
        data.extend_from_slice(m);
    }
    Tensor::from_vec(&[n, 3, side, side], data)
}

/// Epoch length in steps for dead-code bookkeeping.
fn steps_per_epoch(train_frames: usize, batch: usize) -> usize {
    train_frames.div_ceil(batch).max(1)
}

/// Reinitialize codes unused over the last epoch to random encoder outputs
/// from the current batch.
fn reinit_dead_codes(model: &mut VqModel, z_c: &Tensor, rng: &mut ChaCha12Rng) {
    let d = model.arch.latent_channels;
    let cells = z_c.shape[0];
    if cells == 0 {
        return;
    }
    let book = &mut model.params.get_mut("codebook").tensor;
    for (k, used) in model.usage.iter_mut().enumerate() {
        if *used == 0 {
            let cell = rng.gen_range(0..cells);
            book.data[k * d..(k + 1) * d].copy_from_slice(&z_c.data[cell * d..(cell + 1) * d]);
        }
        *used = 0;
    }
}

struct Trainer<'a> {
    model: VqModel,
    dataset: &'a Dataset,
    cfg: &'a TrainConfig,
    percept: Option<PerceptualExtractor>,
    mask_ctx: Option<MaskCtx>,
    ckpt_out: &'a Path,
}

impl Trainer<'_> {
    fn run(mut self, log: &mut dyn IoWrite) -> Result<VqModel> {
        let cfg = self.cfg;
        let train_idx = self.dataset.train_indices();
        if train_idx.is_empty() {
            return Err(Error::Config("dataset has no training frames".into()));
        }
        if cfg.gan_enabled && !self.model.arch.supports_discriminator() {
            return Err(Error::Config(format!(
                "input grid {} is too small for the patch discriminator; disable the GAN term",
                self.model.arch.input_grid
            )));
        }

        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(u64::from(cfg.stage)));
        let mut opt_model = Adam::new(cfg.lr_model, &self.model.params);
        let mut opt_disc = Adam::new(cfg.lr_disc, &self.model.params);
        let epoch_len = steps_per_epoch(train_idx.len(), cfg.batch_size);
        let gan_start = cfg.effective_gan_start();

        // Empty-mask gate: the composite equals the ground truth exactly and
        // the masked MSE is 0/0; the contract makes every term zero with no
        // parameter updates, so the steps are no-ops by construction.
        let empty_mask = self.mask_ctx.as_ref().is_some_and(|c| c.grid.is_empty());

        let mut order: Vec<usize> = Vec::new();
        for step in 0..cfg.steps {
            if empty_mask {
                write_log(log, step, &LossBreakdown::zeros())?;
                continue;
            }
            // Epoch-shuffled sampling without replacement.
            let mut idxs = Vec::with_capacity(cfg.batch_size);
            while idxs.len() < cfg.batch_size {
                if order.is_empty() {
                    order = train_idx.clone();
                    order.shuffle(&mut rng);
                }
                idxs.push(order.pop().unwrap());
            }

            let truth = truth_batch(self.dataset, &idxs, self.model.norm_scale);
            let batch = match &self.mask_ctx {
                None => truth.clone(),
                Some(ctx) => stacked_batch(&truth, &ctx.m),
            };
            let gan_active = cfg.gan_enabled && step >= gan_start;
            let out = build_step(
                &self.model,
                self.percept.as_ref(),
                &batch,
                &truth,
                self.mask_ctx.as_ref(),
                gan_active,
                cfg,
            );

            // NaN gate: detect before applying updates so the parameters on
            // disk are the last good state.
            if !out.breakdown.is_finite()
                || !grads_finite(&out.model_grads)
                || out.disc_grads.as_deref().is_some_and(|gset| !grads_finite(gset))
            {
                save_checkpoint(&self.model, step as u64, self.ckpt_out)?;
                return Err(Error::Instability {
                    time: step as f64,
                    max_abs: f64::NAN,
                });
            }

            opt_model.step(&mut self.model.params, &out.model_grads);
            if let Some(d) = &out.disc_grads {
                opt_disc.step(&mut self.model.params, d);
            }

            for &c in &out.codes {
                self.model.usage[c] += 1;
            }
            if (step + 1) % epoch_len == 0 {
                reinit_dead_codes(&mut self.model, &out.z_c_value, &mut rng);
            }

            write_log(log, step, &out.breakdown)?;
        }

        save_checkpoint(&self.model, cfg.steps as u64, self.ckpt_out)?;
        Ok(self.model)
    }
}

fn write_log(log: &mut dyn IoWrite, step: usize, loss: &LossBreakdown) -> Result<()> {
    let record = LogRecord { step, loss: *loss };
    let line = serde_json::to_string(&record)
        .map_err(|e| Error::Config(format!("failed to encode log record: {e}")))?;
    writeln!(log, "{line}").map_err(|e| Error::io(Path::new("<training log>"), e))
}

fn load_percept(cfg: &TrainConfig) -> Result<Option<PerceptualExtractor>> {
    if !cfg.percept_enabled {
        return Ok(None);
    }
    let path = cfg.percept_weights.as_ref().expect("validated");
    Ok(Some(PerceptualExtractor::load(path)?))
}

/// Stage-1 reconstruction training. Writes the final (or, on instability,
/// last-good) checkpoint to `ckpt_out` and returns the trained model.
pub fn train_stage1(
    dataset: &Dataset,
    arch: ArchConfig,
    cfg: &TrainConfig,
    ckpt_out: &Path,
    log: &mut dyn IoWrite,
) -> Result<VqModel> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::StageMismatch(format!(
            "train_stage1 called with a stage-{} config",
            cfg.stage
        )));
    }
    arch.validate()?;
    if arch.in_channels != 1 {
        return Err(Error::Config(
            "stage-1 architecture must take a single input channel".into(),
        ));
    }
    if arch.input_grid != dataset.grid() {
        return Err(Error::Config(format!(
            "architecture expects {}^2 fields but the dataset stores {}^2",
            arch.input_grid,
            dataset.grid()
        )));
    }
    let norm_scale = dataset.train_max_abs();
    if !(norm_scale.is_finite()) || norm_scale == 0.0 {
        return Err(Error::Config(
            "training split is degenerate (max |vorticity| is zero or non-finite)".into(),
        ));
    }
    let percept = load_percept(cfg)?;
    let model = VqModel::new_stage1(arch, norm_scale, cfg.seed)?;
    Trainer {
        model,
        dataset,
        cfg,
        percept,
        mask_ctx: None,
        ckpt_out,
    }
    .run(log)
}

/// Stage-2 completion fine-tuning from a stage-1 checkpoint. The decoder is
/// frozen (bit-identical afterwards); the encoder sees stacked
/// `(X_mask, 1-M, M)` inputs; losses act on the masked composite.
pub fn train_stage2(
    stage1: VqModel,
    dataset: &Dataset,
    mask: MaskConfig,
    cfg: &TrainConfig,
    ckpt_out: &Path,
    log: &mut dyn IoWrite,
) -> Result<VqModel> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::StageMismatch(format!(
            "train_stage2 called with a stage-{} config",
            cfg.stage
        )));
    }
    if dataset.grid() != stage1.arch.input_grid {
        return Err(Error::Config(format!(
            "checkpoint expects {}^2 fields but the dataset stores {}^2",
            stage1.arch.input_grid,
            dataset.grid()
        )));
    }
    let percept = load_percept(cfg)?;
    let seed = cfg.seed;
    let mut model = stage1.into_stage2(mask.clone())?; // enforces the stage tag
    if !cfg.warm_start_disc || !cfg.warm_start_post_quant {
        reinit_prefixes(&mut model, seed, !cfg.warm_start_disc, !cfg.warm_start_post_quant);
    }
    let grid = build_mask(&mask, dataset.grid(), dataset.grid())?;
    let m = grid.as_f64();
    Trainer {
        model,
        dataset,
        cfg,
        percept,
        mask_ctx: Some(MaskCtx { grid, m }),
        ckpt_out,
    }
    .run(log)
}

/// Fresh draws for the discriminator and/or post-quant conv when a stage-2
/// run opts out of warm-starting them.
fn reinit_prefixes(model: &mut VqModel, seed: u64, disc: bool, post_quant: bool) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5157_u64);
    let names: Vec<String> = model.params.params.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let hit = (disc && name.starts_with("disc.")) || (post_quant && name.starts_with("post_quant_conv."));
        if !hit {
            continue;
        }
        let p = model.params.get_mut(&name);
        if name.ends_with(".w") && p.tensor.shape.len() == 4 {
            let [_, cin, kh, kw] = p.tensor.shape[..] else { unreachable!() };
            let std = (2.0 / (cin * kh * kw) as f64).sqrt();
            for v in p.tensor.data.iter_mut() {
                *v = std * crate::solver::standard_normal(&mut rng);
            }
        } else {
            for v in p.tensor.data.iter_mut() {
                *v = 0.0;
            }
        }
    }
}
