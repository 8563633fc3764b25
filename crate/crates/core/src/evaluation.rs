//! Completion metrics: masked relative L2, annulus-binned kinetic
//! energy spectra, and pooled vorticity distributions over the test split;
//! plus a file interface for scoring externally produced completions with
//! the same pipeline.
//!
//! Spectrum convention (fixed here and relied on by the tests): with the
//! unscaled forward transform of [`crate::fft`], the kinetic energy of mode
//! `k` obtained spectrally from vorticity is
//!
//! ```text
//! E_k = 1/2 |u_hat(k)|^2 / n^4 = 1/2 |w_hat(k)|^2 / (|k|^2 n^4),
//! ```
//!
//! so that the sum over all modes equals `1/2 <|u|^2>`, the kinetic energy
//! per unit area. Modes are aggregated on integer annuli `round(|k|)`; the
//! `k = 0` mode carries no kinetic energy and is skipped.
//!
//! Spectra and distributions are computed on full composite fields
//! (ground truth on known cells, model output on missing cells), matching
//! how completed fields would be consumed downstream; this choice is
//! recorded in the report metadata.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::container::{Container, ContainerWriter};
use crate::dataset::Dataset;
use crate::error::{Error, FormatError, Result};
use crate::fft::{self, Fft2};
use crate::masking::{build_mask, MaskConfig, MaskGrid};
use crate::solver::FlowField;
use crate::vqvae::{reconstruct, VqModel};

/// Bin count for vorticity distributions.
pub const PDF_BINS: usize = 81;
/// Largest batch used when running the model over the test split.
pub const EVAL_BATCH: usize = 16;
/// Name under which the evaluated checkpoint's own metrics are reported.
pub const MODEL_ENTRY: &str = "model";

/// Binning choices (and execution width) for [`evaluate`].
///
/// The two bin counts are configuration; `threads` is an execution detail
/// set from the environment by the CLI, so it is never serialized and a
/// parsed options struct always starts at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Spectrum shells `k = 1..=bins`; `None` means `grid / 2`.
    pub spectrum_bins: Option<usize>,
    /// Bin count for the pooled vorticity distributions.
    pub pdf_bins: usize,
    /// Worker threads for the per-frame model forward passes.
    #[serde(skip_serializing, skip_deserializing, default = "one_thread")]
    pub threads: usize,
}

fn one_thread() -> usize {
    1
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            spectrum_bins: None,
            pdf_bins: PDF_BINS,
            threads: 1,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.pdf_bins < 2 {
            return Err(Error::Config(format!(
                "pdf_bins must be at least 2, got {}",
                self.pdf_bins
            )));
        }
        if self.spectrum_bins == Some(0) {
            return Err(Error::Config("spectrum_bins must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }
}

/// `sqrt( sum_{M=1} (X~ - X)^2 / sum_{M=1} X^2 )`: the relative L2
/// distance restricted to the missing region.
pub fn relative_l2_masked(x_tilde: &[f64], x: &[f64], mask: &MaskGrid) -> Result<f64> {
    let px = mask.h * mask.w;
    if x.len() != px || x_tilde.len() != px {
        return Err(Error::Config(format!(
            "field/mask size mismatch: fields have {} and {} values, mask is {}x{}",
            x_tilde.len(),
            x.len(),
            mask.h,
            mask.w
        )));
    }
    if mask.is_empty() {
        return Err(Error::UndefinedMetric(
            "relative L2 over an empty mask".into(),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&p, &t), &m) in x_tilde.iter().zip(x).zip(&mask.m) {
        if m == 1 {
            num += (p - t) * (p - t);
            den += t * t;
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric(
            "reference field is zero everywhere on the masked region".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// Number of annuli needed to capture every mode of an `n x n` grid
/// (`ceil(sqrt(2) * n/2)`).
pub fn full_spectrum_bins(n: usize) -> usize {
    ((n as f64 / 2.0) * std::f64::consts::SQRT_2).ceil() as usize
}

/// Kinetic energy per integer annulus, as `(k, E(k))` pairs for
/// `k = 1..=bins`. Modes beyond `bins` are dropped; pass
/// [`full_spectrum_bins`] to keep everything (e.g. for Parseval checks).
pub fn energy_spectrum(field: &FlowField, bins: usize) -> Vec<(f64, f64)> {
    let e = spectrum_values(field, bins);
    (1..=bins).map(|b| (b as f64, e[b - 1])).collect()
}

/// The `E(k)` column of [`energy_spectrum`], indexed by `k - 1`.
pub fn spectrum_values(field: &FlowField, bins: usize) -> Vec<f64> {
    assert!(bins >= 1, "need at least one annulus");
    let n = field.n;
    let mut w = fft::to_complex(&field.values);
    Fft2::new(n).forward(&mut w);
    let k = fft::wavenumbers(n);
    let n4 = (n as f64).powi(4);
    let mut e = vec![0.0; bins];
    for i in 0..n {
        for j in 0..n {
            let ksq = k[i] * k[i] + k[j] * k[j];
            if ksq == 0.0 {
                continue;
            }
            let shell = ksq.sqrt().round() as usize; // >= 1 whenever ksq > 0
            if shell <= bins {
                e[shell - 1] += 0.5 * w[i * n + j].norm_sqr() / (ksq * n4);
            }
        }
    }
    e
}

/// A binned probability density: `edges` has one more entry than `density`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    /// `sum(density * width)`; 1 when any sample fell inside the range.
    pub fn integral(&self) -> f64 {
        self.density
            .iter()
            .enumerate()
            .map(|(i, d)| d * (self.edges[i + 1] - self.edges[i]))
            .sum()
    }
}

/// Normalized density of pooled pointwise vorticity values over uniform
/// bins. The final edge is inclusive; samples outside the range are
/// discarded and the density renormalized over what remains, so the
/// integral over the binned range is 1 whenever any sample lands inside.
/// A degenerate range (hi <= lo) is widened by 1 on each side.
pub fn vorticity_pdf(fields: &[FlowField], num_bins: usize, range: (f64, f64)) -> Histogram {
    assert!(!fields.is_empty(), "need at least one field");
    assert!(num_bins >= 1, "need at least one bin");
    let (mut lo, mut hi) = range;
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let width = (hi - lo) / num_bins as f64;
    let edges: Vec<f64> = (0..=num_bins)
        .map(|i| lo + (hi - lo) * i as f64 / num_bins as f64)
        .collect();
    let mut counts = vec![0u64; num_bins];
    let mut in_range = 0u64;
    for f in fields {
        for &v in &f.values {
            if v < lo || v > hi {
                continue;
            }
            let bin = (((v - lo) / width) as usize).min(num_bins - 1);
            counts[bin] += 1;
            in_range += 1;
        }
    }
    let density = if in_range == 0 {
        vec![0.0; num_bins]
    } else {
        counts
            .iter()
            .map(|&c| c as f64 / (in_range as f64 * width))
            .collect()
    };
    Histogram { edges, density }
}

/// Metrics of one completion method (the evaluated checkpoint or one
/// imported baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    /// Masked relative L2 per test frame, in frame order.
    pub rel_l2_per_frame: Vec<f64>,
    pub rel_l2_mean: f64,
    /// Population standard deviation across test frames.
    pub rel_l2_std: f64,
    /// Mean `E(k)` over test-frame composites, `k = 1..=spectrum_bins`.
    pub spectrum: Vec<f64>,
    /// Pooled composite vorticity density over the report's bins.
    pub pdf_density: Vec<f64>,
    /// This model's composite of the report's example frame (for figures).
    pub example_composite: Vec<f64>,
}

/// Everything `evaluate` measures for one mask configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mask: MaskConfig,
    pub grid: usize,
    /// Dataset frame indices scored, in order.
    pub test_frames: Vec<usize>,
    pub spectrum_bins: usize,
    /// Bin edges shared by every density in the report (ground-truth pool
    /// mean +- 4 sigma, fixed across models for comparability).
    pub pdf_edges: Vec<f64>,
    pub truth_spectrum: Vec<f64>,
    pub truth_pdf: Vec<f64>,
    /// Dataset frame index of the representative frame stored for figures
    /// (the first test frame).
    pub example_frame: usize,
    /// Ground truth of the example frame, physical units.
    pub example_truth: Vec<f64>,
    /// The occluded example frame (`X (.) (1-M)`), physical units.
    pub example_masked: Vec<f64>,
    /// Keyed by model name; the evaluated checkpoint is [`MODEL_ENTRY`].
    pub models: BTreeMap<String, ModelEval>,
}

/// Externally produced completions aligned to the test split.
#[derive(Debug, Clone)]
pub struct BaselineSet {
    pub name: String,
    /// One completed field per test frame, in test-frame order, physical
    /// units.
    pub frames: Vec<Vec<f64>>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Composite of prediction and truth: truth on known cells, prediction on
/// missing cells.
fn composite_of(truth: &[f64], pred: &[f64], m: &[f64]) -> Vec<f64> {
    truth
        .iter()
        .zip(pred)
        .zip(m)
        .map(|((&t, &p), &mi)| t * (1.0 - mi) + p * mi)
        .collect()
}

fn field_of(n: usize, values: Vec<f64>) -> FlowField {
    FlowField {
        n,
        values,
        time: 0.0,
    }
}

/// Score one set of composites against the ground truth.
fn score_composites(
    truths: &[Vec<f64>],
    composites: Vec<Vec<f64>>,
    mask: &MaskGrid,
    grid: usize,
    spectrum_bins: usize,
    pdf_bins: usize,
    pdf_range: (f64, f64),
) -> Result<ModelEval> {
    let mut rel = Vec::with_capacity(truths.len());
    let mut spec_sum = vec![0.0; spectrum_bins];
    let mut fields = Vec::with_capacity(composites.len());
    for (t, c) in truths.iter().zip(&composites) {
        rel.push(relative_l2_masked(c, t, mask)?);
        for (acc, v) in spec_sum.iter_mut().zip(spectrum_values(
            &field_of(grid, c.clone()),
            spectrum_bins,
        )) {
            *acc += v;
        }
    }
    let example_composite = composites[0].clone();
    for c in composites {
        fields.push(field_of(grid, c));
    }
    let frames = truths.len() as f64;
    for v in spec_sum.iter_mut() {
        *v /= frames;
    }
    let pdf = vorticity_pdf(&fields, pdf_bins, pdf_range);
    let (mean, std) = mean_std(&rel);
    Ok(ModelEval {
        rel_l2_per_frame: rel,
        rel_l2_mean: mean,
        rel_l2_std: std,
        spectrum: spec_sum,
        pdf_density: pdf.density,
        example_composite,
    })
}

/// Run the stage-2 checkpoint over every test frame and assemble the report.
///
/// `mask` must equal the configuration the checkpoint was fine-tuned for;
/// baselines are scored with the same mask, bins, and ranges so every entry
/// in the report is directly comparable.
pub fn evaluate(
    model: &VqModel,
    dataset: &Dataset,
    mask: &MaskConfig,
    baselines: &[BaselineSet],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.validate()?;
    if model.stage != 2 {
        return Err(Error::StageMismatch(format!(
            "evaluation requires a stage-2 checkpoint, got stage {}",
            model.stage
        )));
    }
    if model.mask.as_ref() != Some(mask) {
        return Err(Error::StageMismatch(format!(
            "checkpoint was fine-tuned for mask {:?}, asked to evaluate {:?}",
            model.mask, mask
        )));
    }
    let grid = dataset.grid();
    if grid != model.arch.input_grid {
        return Err(Error::Config(format!(
            "checkpoint expects {}^2 fields but the dataset stores {}^2",
            model.arch.input_grid, grid
        )));
    }
    let test_frames = dataset.test_indices();
    if test_frames.is_empty() {
        return Err(Error::Config("dataset has no test frames".into()));
    }
    let mut names: Vec<&str> = baselines.iter().map(|b| b.name.as_str()).collect();
    names.push(MODEL_ENTRY);
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(format!(
            "duplicate model name in report (reserved name: '{MODEL_ENTRY}')"
        )));
    }
    for b in baselines {
        if b.frames.len() != test_frames.len() {
            return Err(Error::Config(format!(
                "baseline '{}' holds {} frames but the test split has {}",
                b.name,
                b.frames.len(),
                test_frames.len()
            )));
        }
    }

    let mask_grid = build_mask(mask, grid, grid)?;
    let m = mask_grid.as_f64();
    let hw = grid * grid;
    let scale = model.norm_scale;

    // Ground truth in physical units, in test-frame order.
    let truths: Vec<Vec<f64>> = test_frames.iter().map(|&i| dataset.frame_f64(i)).collect();

    // Model completions, batched. One batch is an independent forward pass,
    // so batches can run on worker threads; results are spliced back in
    // order, which keeps the report bit-identical for any thread count.
    let run_chunk = |chunk: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let n = chunk.len();
        let mut stacked = Vec::with_capacity(n * 3 * hw);
        for t in chunk {
            stacked.extend(t.iter().zip(&m).map(|(v, mi)| v / scale * (1.0 - mi)));
            stacked.extend(m.iter().map(|mi| 1.0 - mi));
            stacked.extend_from_slice(&m);
        }
        let batch = Tensor::from_vec(&[n, 3, grid, grid], stacked);
        let (x_tilde, _codes) = reconstruct(model, &batch);
        (0..n)
            .map(|bi| {
                x_tilde.data[bi * hw..(bi + 1) * hw]
                    .iter()
                    .map(|v| v * scale)
                    .collect()
            })
            .collect()
    };
    let batches: Vec<&[Vec<f64>]> = truths.chunks(EVAL_BATCH).collect();
    let per_batch: Vec<Vec<Vec<f64>>> = if opts.threads <= 1 || batches.len() <= 1 {
        batches.iter().map(|c| run_chunk(c)).collect()
    } else {
        let group = batches.len().div_ceil(opts.threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = batches
                .chunks(group)
                .map(|chunks| s.spawn(|| chunks.iter().map(|c| run_chunk(c)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let completions: Vec<Vec<f64>> = per_batch.into_iter().flatten().collect();

    // Shared binning from the ground-truth pool: mean +- 4 sigma.
    let pool_n = (truths.len() * hw) as f64;
    let mu = truths.iter().flatten().sum::<f64>() / pool_n;
    let var = truths
        .iter()
        .flatten()
        .map(|v| (v - mu) * (v - mu))
        .sum::<f64>()
        / pool_n;
    let sigma = var.sqrt();
    let pdf_range = (mu - 4.0 * sigma, mu + 4.0 * sigma);
    let spectrum_bins = opts.spectrum_bins.unwrap_or(grid / 2);

    let truth_fields: Vec<FlowField> =
        truths.iter().map(|t| field_of(grid, t.clone())).collect();
    let mut truth_spectrum = vec![0.0; spectrum_bins];
    for f in &truth_fields {
        for (acc, v) in truth_spectrum.iter_mut().zip(spectrum_values(f, spectrum_bins)) {
            *acc += v;
        }
    }
    for v in truth_spectrum.iter_mut() {
        *v /= truths.len() as f64;
    }
    let truth_hist = vorticity_pdf(&truth_fields, opts.pdf_bins, pdf_range);

    let mut models = BTreeMap::new();
    let model_composites: Vec<Vec<f64>> = truths
        .iter()
        .zip(&completions)
        .map(|(t, p)| composite_of(t, p, &m))
        .collect();
    models.insert(
        MODEL_ENTRY.to_string(),
        score_composites(
            &truths,
            model_composites,
            &mask_grid,
            grid,
            spectrum_bins,
            opts.pdf_bins,
            pdf_range,
        )?,
    );
    for b in baselines {
        for (fi, f) in b.frames.iter().enumerate() {
            if f.len() != hw {
                return Err(Error::Config(format!(
                    "baseline '{}' frame {} has {} values, expected {}",
                    b.name,
                    fi,
                    f.len(),
                    hw
                )));
            }
        }
        let composites: Vec<Vec<f64>> = truths
            .iter()
            .zip(&b.frames)
            .map(|(t, p)| composite_of(t, p, &m))
            .collect();
        models.insert(
            b.name.clone(),
            score_composites(
                &truths,
                composites,
                &mask_grid,
                grid,
                spectrum_bins,
                opts.pdf_bins,
                pdf_range,
            )?,
        );
    }

    let example_truth = truths[0].clone();
    let example_masked: Vec<f64> = example_truth
        .iter()
        .zip(&m)
        .map(|(v, mi)| v * (1.0 - mi))
        .collect();
    Ok(EvalReport {
        mask: mask.clone(),
        grid,
        example_frame: test_frames[0],
        test_frames,
        spectrum_bins,
        pdf_edges: truth_hist.edges,
        truth_spectrum,
        truth_pdf: truth_hist.density,
        example_truth,
        example_masked,
        models,
    })
}

// ---------------------------------------------------------------------------
// Report persistence.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ReportMeta {
    mask: MaskConfig,
    grid: usize,
    spectrum_bins: usize,
    num_test_frames: usize,
    example_frame: usize,
    /// What the spectra/distributions were computed on.
    statistics_domain: String,
    /// Per-model scalar summary (arrays live in the payload).
    summary: BTreeMap<String, RelL2Summary>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RelL2Summary {
    rel_l2_mean: f64,
    rel_l2_std: f64,
}

/// Persist a report as a container of kind `"report"`. Writing the same
/// report twice produces byte-identical files.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    let meta = ReportMeta {
        mask: report.mask.clone(),
        grid: report.grid,
        spectrum_bins: report.spectrum_bins,
        num_test_frames: report.test_frames.len(),
        example_frame: report.example_frame,
        statistics_domain: "full composite fields".into(),
        summary: report
            .models
            .iter()
            .map(|(name, m)| {
                (
                    name.clone(),
                    RelL2Summary {
                        rel_l2_mean: m.rel_l2_mean,
                        rel_l2_std: m.rel_l2_std,
                    },
                )
            })
            .collect(),
    };
    let mut w = ContainerWriter::new("report", &meta)?;
    let test_frames: Vec<i64> = report.test_frames.iter().map(|&v| v as i64).collect();
    w.add_i64("test_frames", &[test_frames.len()], &test_frames);
    w.add_f64("pdf_edges", &[report.pdf_edges.len()], &report.pdf_edges);
    w.add_f64(
        "truth.spectrum",
        &[report.truth_spectrum.len()],
        &report.truth_spectrum,
    );
    w.add_f64("truth.pdf", &[report.truth_pdf.len()], &report.truth_pdf);
    let g = report.grid;
    w.add_f64("example.truth", &[g, g], &report.example_truth);
    w.add_f64("example.masked", &[g, g], &report.example_masked);
    for (name, m) in &report.models {
        w.add_f64(
            &format!("{name}.rel_l2"),
            &[m.rel_l2_per_frame.len()],
            &m.rel_l2_per_frame,
        );
        w.add_f64(&format!("{name}.spectrum"), &[m.spectrum.len()], &m.spectrum);
        w.add_f64(&format!("{name}.pdf"), &[m.pdf_density.len()], &m.pdf_density);
        w.add_f64(&format!("{name}.example"), &[g, g], &m.example_composite);
    }
    w.write(dir)
}

/// Load a report written by [`write_report`].
pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let c = Container::open(dir)?;
    if c.kind() != "report" {
        return Err(Error::format(
            dir,
            FormatError::Metadata(format!("expected a report container, found '{}'", c.kind())),
        ));
    }
    let meta: ReportMeta = c.typed_meta()?;
    let mut models = BTreeMap::new();
    for (name, s) in &meta.summary {
        models.insert(
            name.clone(),
            ModelEval {
                rel_l2_per_frame: c.read_f64(&format!("{name}.rel_l2"))?,
                rel_l2_mean: s.rel_l2_mean,
                rel_l2_std: s.rel_l2_std,
                spectrum: c.read_f64(&format!("{name}.spectrum"))?,
                pdf_density: c.read_f64(&format!("{name}.pdf"))?,
                example_composite: c.read_f64(&format!("{name}.example"))?,
            },
        );
    }
    Ok(EvalReport {
        mask: meta.mask,
        grid: meta.grid,
        test_frames: c
            .read_i64("test_frames")?
            .into_iter()
            .map(|v| v as usize)
            .collect(),
        spectrum_bins: meta.spectrum_bins,
        pdf_edges: c.read_f64("pdf_edges")?,
        truth_spectrum: c.read_f64("truth.spectrum")?,
        truth_pdf: c.read_f64("truth.pdf")?,
        example_frame: meta.example_frame,
        example_truth: c.read_f64("example.truth")?,
        example_masked: c.read_f64("example.masked")?,
        models,
    })
}

// ---------------------------------------------------------------------------
// Baseline import/export.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct BaselineMeta {
    grid: usize,
}

/// Write a baseline container: completed fields (physical units) for the
/// given dataset frame indices.
pub fn write_baseline(
    dir: &Path,
    grid: usize,
    frame_indices: &[usize],
    frames: &[Vec<f64>],
) -> Result<()> {
    if frame_indices.len() != frames.len() {
        return Err(Error::Config(format!(
            "{} frame indices but {} frames",
            frame_indices.len(),
            frames.len()
        )));
    }
    let hw = grid * grid;
    let mut flat = Vec::with_capacity(frames.len() * hw);
    for (i, f) in frames.iter().enumerate() {
        if f.len() != hw {
            return Err(Error::Config(format!(
                "baseline frame {i} has {} values, expected {hw}",
                f.len()
            )));
        }
        flat.extend_from_slice(f);
    }
    let idx: Vec<i64> = frame_indices.iter().map(|&v| v as i64).collect();
    let mut w = ContainerWriter::new("baseline", &BaselineMeta { grid })?;
    w.add_i64("frame_index", &[idx.len()], &idx);
    w.add_f64("frames", &[frames.len(), grid, grid], &flat);
    w.write(dir)
}

/// Read externally produced completions and align them to `dataset`'s test
/// split. Every test frame index must be present in the container; each is
/// matched by dataset frame index, so baselines may store frames in any
/// order (extra non-test frames are ignored).
pub fn import_baseline(dir: &Path, name: &str, dataset: &Dataset) -> Result<BaselineSet> {
    let c = Container::open(dir)?;
    if c.kind() != "baseline" {
        return Err(Error::format(
            dir,
            FormatError::Metadata(format!(
                "expected a baseline container, found '{}'",
                c.kind()
            )),
        ));
    }
    let meta: BaselineMeta = c.typed_meta()?;
    if meta.grid != dataset.grid() {
        return Err(Error::format(
            dir,
            FormatError::Metadata(format!(
                "baseline stores {}^2 fields but the dataset stores {}^2",
                meta.grid,
                dataset.grid()
            )),
        ));
    }
    let idx = c.read_i64("frame_index")?;
    let flat = c.read_f64("frames")?;
    let hw = meta.grid * meta.grid;
    if flat.len() != idx.len() * hw {
        return Err(Error::format(
            dir,
            FormatError::Metadata(format!(
                "frames array holds {} values, expected {} for {} frames of {}^2",
                flat.len(),
                idx.len() * hw,
                idx.len(),
                meta.grid
            )),
        ));
    }
    let position: BTreeMap<i64, usize> =
        idx.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let mut frames = Vec::with_capacity(dataset.test_indices().len());
    for ti in dataset.test_indices() {
        let Some(&p) = position.get(&(ti as i64)) else {
            return Err(Error::format(
                dir,
                FormatError::Metadata(format!(
                    "baseline is missing completions for test frame index {ti}"
                )),
            ));
        };
        frames.push(flat[p * hw..(p + 1) * hw].to_vec());
    }
    Ok(BaselineSet {
        name: name.to_string(),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetSpec};
    use crate::solver::{vorticity_to_velocity, SolverParams};
    use std::sync::OnceLock;

    const TAU: f64 = std::f64::consts::TAU;

    fn field_from_fn(n: usize, f: impl Fn(f64, f64) -> f64) -> FlowField {
        FlowField::from_fn(n, f)
    }

    fn toy_dataset() -> &'static Dataset {
        static DS: OnceLock<Dataset> = OnceLock::new();
        DS.get_or_init(|| {
            let spec = DatasetSpec {
                num_runs: 2,
                train_runs: 1,
                duration: 0.25,
                sample_interval: 1.0 / 32.0,
                sim_grid: 32,
                out_grid: 32,
                base_seed: 21,
                skip_initial_seconds: 0.0,
                solver: SolverParams {
                    dt: 1.0 / 128.0,
                    ..SolverParams::default()
                },
            };
            generate_dataset(&spec).unwrap()
        })
    }

    fn toy_stage2_model(mask: &MaskConfig) -> VqModel {
        let arch = crate::vqvae::ArchConfig {
            input_grid: 32,
            in_channels: 1,
            base_width: 4,
            channel_mults: vec![1, 2],
            latent_channels: 3,
            codebook_size: 8,
            norm_groups: 2,
            disc_base_width: 4,
        };
        let scale = toy_dataset().train_max_abs();
        VqModel::new_stage1(arch, scale, 3)
            .unwrap()
            .into_stage2(mask.clone())
            .unwrap()
    }

    // ----- relative_l2_masked -----

    #[test]
    fn relative_l2_identities() {
        let mask = build_mask(&MaskConfig::single(2), 4, 4).unwrap();
        let x: Vec<f64> = (1..=16).map(|v| v as f64).collect();
        // Perfect completion.
        assert_eq!(relative_l2_masked(&x, &x, &mask).unwrap(), 0.0);
        // Zero fill: exactly 1.
        let x_mask: Vec<f64> = x
            .iter()
            .zip(mask.as_f64())
            .map(|(v, m)| v * (1.0 - m))
            .collect();
        assert_eq!(relative_l2_masked(&x_mask, &x, &mask).unwrap(), 1.0);
        // Known-region values are ignored entirely.
        let mut junk = x_mask.clone();
        for (v, m) in junk.iter_mut().zip(mask.as_f64()) {
            if m == 0.0 {
                *v = 1e9;
            }
        }
        assert_eq!(relative_l2_masked(&junk, &x, &mask).unwrap(), 1.0);
    }

    #[test]
    fn relative_l2_is_scale_invariant() {
        let mask = build_mask(&MaskConfig::grid(2, 2, 2), 8, 8).unwrap();
        let x: Vec<f64> = (0..64).map(|v| ((v * 7) % 13) as f64 - 6.0).collect();
        let xt: Vec<f64> = x.iter().map(|v| v * 0.9 + 0.1).collect();
        let base = relative_l2_masked(&xt, &x, &mask).unwrap();
        for c in [2.0, -3.7, 1e-6] {
            let xs: Vec<f64> = x.iter().map(|v| c * v).collect();
            let xts: Vec<f64> = xt.iter().map(|v| c * v).collect();
            let scaled = relative_l2_masked(&xts, &xs, &mask).unwrap();
            assert!((scaled - base).abs() < 1e-12, "c = {c}");
        }
        assert!(base >= 0.0);
    }

    #[test]
    fn relative_l2_undefined_cases() {
        let x = vec![1.0; 16];
        let empty = MaskGrid {
            h: 4,
            w: 4,
            m: vec![0; 16],
        };
        assert!(matches!(
            relative_l2_masked(&x, &x, &empty).unwrap_err(),
            Error::UndefinedMetric(_)
        ));
        let mask = build_mask(&MaskConfig::single(2), 4, 4).unwrap();
        let zeros = vec![0.0; 16];
        assert!(matches!(
            relative_l2_masked(&x, &zeros, &mask).unwrap_err(),
            Error::UndefinedMetric(_)
        ));
        // Shape mismatch is a config error, not an undefined metric.
        assert!(matches!(
            relative_l2_masked(&x[..15], &x, &mask).unwrap_err(),
            Error::Config(_)
        ));
    }

    // ----- energy_spectrum -----

    #[test]
    fn zero_field_has_zero_spectrum() {
        let e = energy_spectrum(&FlowField::zeros(32), 16);
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|&(_, v)| v == 0.0));
        assert_eq!(e[0].0, 1.0);
        assert_eq!(e[15].0, 16.0);
    }

    #[test]
    fn single_mode_lands_in_its_annulus_with_known_energy() {
        // w = sin(3 x1): u = (0, -cos(3 x1)/3), so E_total = <u^2>/2 = 1/36,
        // all of it in the |k| = 3 shell.
        let f = field_from_fn(64, |x1, _| (3.0 * x1).sin());
        let e = spectrum_values(&f, full_spectrum_bins(64));
        assert!((e[2] - 1.0 / 36.0).abs() < 1e-12, "E(3) = {}", e[2]);
        for (i, &v) in e.iter().enumerate() {
            if i != 2 {
                assert!(v.abs() < 1e-12, "E({}) = {v}", i + 1);
            }
        }
    }

    #[test]
    fn spectrum_satisfies_parseval_against_spatial_integration() {
        // A multi-mode deterministic field; total spectral energy must equal
        // the direct spatial kinetic energy 1/2 <|u|^2>.
        let f = field_from_fn(64, |x1, x2| {
            (3.0 * x1).sin() + 0.7 * (5.0 * x2).cos() - 0.4 * (2.0 * x1 + 7.0 * x2).sin()
        });
        let e = spectrum_values(&f, full_spectrum_bins(64));
        let spectral: f64 = e.iter().sum();
        let (u1, u2) = vorticity_to_velocity(&f);
        let spatial = u1
            .iter()
            .zip(&u2)
            .map(|(a, b)| a * a + b * b)
            .sum::<f64>()
            / (2.0 * (64.0 * 64.0));
        assert!(
            (spectral - spatial).abs() <= 1e-10 * spatial.max(1.0),
            "spectral {spectral} vs spatial {spatial}"
        );
    }

    #[test]
    fn truncating_bins_drops_high_shells_only() {
        let f = field_from_fn(64, |x1, x2| (3.0 * x1).sin() + (20.0 * x2).cos());
        let full = spectrum_values(&f, full_spectrum_bins(64));
        let cut = spectrum_values(&f, 10);
        assert_eq!(&full[..10], &cut[..]);
        assert!(full[19] > 0.0); // the k=20 shell exists in the full version
    }

    // ----- vorticity_pdf -----

    #[test]
    fn constant_zero_fields_put_all_mass_in_the_zero_bin() {
        let fields = vec![FlowField::zeros(16), FlowField::zeros(16)];
        let h = vorticity_pdf(&fields, PDF_BINS, (0.0, 0.0)); // degenerate -> widened
        assert!((h.integral() - 1.0).abs() < 1e-12);
        let nonzero: Vec<usize> = h
            .density
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero.len(), 1);
        let b = nonzero[0];
        assert!(h.edges[b] <= 0.0 && 0.0 <= h.edges[b + 1]);
    }

    #[test]
    fn pdf_integrates_to_one_even_with_out_of_range_samples() {
        let f = field_from_fn(32, |x1, _| 10.0 * (x1).sin());
        let h = vorticity_pdf(&[f], 17, (-3.0, 3.0));
        assert!((h.integral() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_matches_arcsine_law_within_binning_error() {
        // Values of sin(theta) over uniform angles follow the arcsine law
        // with CDF F(v) = 1/2 + asin(v)/pi on [-1, 1]. The phase
        // x1 + x2/n enumerates n^2 distinct uniform angles, so the pooled
        // sample is a fine quadrature of that law.
        let f = field_from_fn(256, |x1, x2| (x1 + x2 / 256.0).sin());
        let h = vorticity_pdf(&[f], PDF_BINS, (-1.0, 1.0));
        assert!((h.integral() - 1.0).abs() < 1e-12);
        let cdf = |v: f64| 0.5 + v.clamp(-1.0, 1.0).asin() / std::f64::consts::PI;
        let mut tv = 0.0;
        for i in 0..PDF_BINS {
            let (lo, hi) = (h.edges[i], h.edges[i + 1]);
            let analytic = cdf(hi) - cdf(lo);
            let empirical = h.density[i] * (hi - lo);
            tv += 0.5 * (analytic - empirical).abs();
        }
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn pool_statistics_respect_sample_multiplicity() {
        // Two fields: one all 0.5s, one all -0.5s -> equal mass in the two
        // middle bins (values chosen off the bin edges).
        let a = FlowField {
            n: 16,
            values: vec![0.5; 256],
            time: 0.0,
        };
        let b = FlowField {
            n: 16,
            values: vec![-0.5; 256],
            time: 0.0,
        };
        let h = vorticity_pdf(&[a, b], 4, (-2.0, 2.0));
        assert!((h.integral() - 1.0).abs() < 1e-12);
        assert_eq!(h.density[0], 0.0);
        assert_eq!(h.density[3], 0.0);
        assert!((h.density[1] - h.density[2]).abs() < 1e-15);
    }

    // ----- evaluate + baselines + report persistence -----

    #[test]
    fn evaluate_rejects_stage_and_mask_mismatches() {
        let ds = toy_dataset();
        let mask = MaskConfig::single(16);
        // Stage-1 model.
        let arch = toy_stage2_model(&mask).arch.clone();
        let m1 = VqModel::new_stage1(
            crate::vqvae::ArchConfig {
                in_channels: 1,
                ..arch
            },
            1.0,
            0,
        )
        .unwrap();
        assert!(matches!(
            evaluate(&m1, ds, &mask, &[], &EvalOptions::default()).unwrap_err(),
            Error::StageMismatch(_)
        ));
        // Stage-2 model asked about a different mask.
        let m2 = toy_stage2_model(&mask);
        let other = MaskConfig::grid(2, 2, 8);
        assert!(matches!(
            evaluate(&m2, ds, &other, &[], &EvalOptions::default()).unwrap_err(),
            Error::StageMismatch(_)
        ));
    }

    #[test]
    fn evaluate_is_thread_count_invariant() {
        // Enough test frames for several forward batches, so the scoped
        // worker path actually splits the work.
        static DS: OnceLock<Dataset> = OnceLock::new();
        let ds = DS.get_or_init(|| {
            let spec = DatasetSpec {
                num_runs: 2,
                train_runs: 1,
                duration: 0.625,
                sample_interval: 1.0 / 32.0,
                sim_grid: 32,
                out_grid: 32,
                base_seed: 23,
                skip_initial_seconds: 0.0,
                solver: SolverParams {
                    dt: 1.0 / 128.0,
                    ..SolverParams::default()
                },
            };
            generate_dataset(&spec).unwrap()
        });
        assert!(ds.test_indices().len() > EVAL_BATCH);
        let mask = MaskConfig::single(16);
        let model = toy_stage2_model(&mask);
        let serial = evaluate(&model, ds, &mask, &[], &EvalOptions::default()).unwrap();
        let threaded = evaluate(
            &model,
            ds,
            &mask,
            &[],
            &EvalOptions {
                threads: 3,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert_eq!(serial, threaded);
    }

    #[test]
    fn evaluate_honors_binning_options() {
        let ds = toy_dataset();
        let mask = MaskConfig::single(16);
        let model = toy_stage2_model(&mask);
        let default = evaluate(&model, ds, &mask, &[], &EvalOptions::default()).unwrap();
        let custom = evaluate(
            &model,
            ds,
            &mask,
            &[],
            &EvalOptions {
                spectrum_bins: Some(5),
                pdf_bins: 11,
                threads: 1,
            },
        )
        .unwrap();
        assert_eq!(custom.spectrum_bins, 5);
        assert_eq!(custom.pdf_edges.len(), 12);
        assert_eq!(custom.truth_pdf.len(), 11);
        // Truncating the shell range keeps the shared low-k bins.
        assert_eq!(custom.truth_spectrum[..], default.truth_spectrum[..5]);
        let integral: f64 = custom
            .truth_pdf
            .iter()
            .enumerate()
            .map(|(i, d)| d * (custom.pdf_edges[i + 1] - custom.pdf_edges[i]))
            .sum();
        assert!((integral - 1.0).abs() < 1e-12);
        assert!(matches!(
            evaluate(
                &model,
                ds,
                &mask,
                &[],
                &EvalOptions {
                    pdf_bins: 1,
                    ..EvalOptions::default()
                }
            )
            .unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn evaluate_produces_consistent_deterministic_reports() {
        let ds = toy_dataset();
        let mask = MaskConfig::single(16);
        let model = toy_stage2_model(&mask);
        let report = evaluate(&model, ds, &mask, &[], &EvalOptions::default()).unwrap();
        let n_test = ds.test_indices().len();
        assert_eq!(report.test_frames, ds.test_indices());
        let me = &report.models[MODEL_ENTRY];
        assert_eq!(me.rel_l2_per_frame.len(), n_test);
        assert!(me.rel_l2_per_frame.iter().all(|&v| v >= 0.0));
        assert!(me.rel_l2_mean > 0.0); // untrained model is not perfect
        assert_eq!(me.spectrum.len(), report.spectrum_bins);
        assert_eq!(report.pdf_edges.len(), PDF_BINS + 1);
        // Densities integrate to 1 over the binned range.
        for density in [&report.truth_pdf, &me.pdf_density] {
            let integral: f64 = density
                .iter()
                .enumerate()
                .map(|(i, d)| d * (report.pdf_edges[i + 1] - report.pdf_edges[i]))
                .sum();
            assert!((integral - 1.0).abs() < 1e-12);
        }
        // Example-frame figures payload: occluded truth, composite filling.
        assert_eq!(report.example_frame, ds.test_indices()[0]);
        let mgrid = build_mask(&mask, ds.grid(), ds.grid()).unwrap();
        for (i, &mi) in mgrid.as_f64().iter().enumerate() {
            if mi == 1.0 {
                assert_eq!(report.example_masked[i], 0.0);
            } else {
                assert_eq!(report.example_masked[i], report.example_truth[i]);
                assert_eq!(me.example_composite[i], report.example_truth[i]);
            }
        }
        // Roundtrip through the container format.
        let tmp = tempfile::tempdir().unwrap();
        let d1 = tmp.path().join("r1");
        write_report(&report, &d1).unwrap();
        let back = read_report(&d1).unwrap();
        assert_eq!(back, report);
        // Byte-identical on re-evaluation.
        let report2 = evaluate(&model, ds, &mask, &[], &EvalOptions::default()).unwrap();
        let d2 = tmp.path().join("r2");
        write_report(&report2, &d2).unwrap();
        assert_eq!(
            std::fs::read(d1.join("data.bin")).unwrap(),
            std::fs::read(d2.join("data.bin")).unwrap()
        );
        assert_eq!(
            std::fs::read(d1.join("meta.json")).unwrap(),
            std::fs::read(d2.join("meta.json")).unwrap()
        );
    }

    #[test]
    fn ground_truth_and_zero_fill_baselines_bracket_the_metric() {
        let ds = toy_dataset();
        let mask = MaskConfig::single(16);
        let model = toy_stage2_model(&mask);
        let test = ds.test_indices();
        let hw = ds.grid() * ds.grid();
        let tmp = tempfile::tempdir().unwrap();

        let truth_frames: Vec<Vec<f64>> = test.iter().map(|&i| ds.frame_f64(i)).collect();
        let truth_dir = tmp.path().join("truth");
        write_baseline(&truth_dir, ds.grid(), &test, &truth_frames).unwrap();
        let zero_dir = tmp.path().join("zero");
        write_baseline(&zero_dir, ds.grid(), &test, &vec![vec![0.0; hw]; test.len()]).unwrap();

        let baselines = vec![
            import_baseline(&truth_dir, "oracle", ds).unwrap(),
            import_baseline(&zero_dir, "zerofill", ds).unwrap(),
        ];
        let report = evaluate(&model, ds, &mask, &baselines, &EvalOptions::default()).unwrap();
        let oracle = &report.models["oracle"];
        assert!(oracle.rel_l2_per_frame.iter().all(|&v| v == 0.0));
        assert_eq!(oracle.rel_l2_mean, 0.0);
        // Identical spectra and distribution as the ground truth.
        assert_eq!(oracle.spectrum, report.truth_spectrum);
        assert_eq!(oracle.pdf_density, report.truth_pdf);
        let zf = &report.models["zerofill"];
        assert!(zf.rel_l2_per_frame.iter().all(|&v| v == 1.0));
        assert_eq!(zf.rel_l2_mean, 1.0);
        assert_eq!(zf.rel_l2_std, 0.0);
    }

    #[test]
    fn baseline_import_errors_name_the_offending_frame() {
        let ds = toy_dataset();
        let test = ds.test_indices();
        let hw = ds.grid() * ds.grid();
        let tmp = tempfile::tempdir().unwrap();
        // Drop the second test frame from the container.
        let missing = test[1];
        let kept: Vec<usize> = test.iter().copied().filter(|&i| i != missing).collect();
        let dir = tmp.path().join("partial");
        write_baseline(&dir, ds.grid(), &kept, &vec![vec![0.0; hw]; kept.len()]).unwrap();
        let err = import_baseline(&dir, "partial", ds).unwrap_err();
        assert!(
            err.to_string().contains(&missing.to_string()),
            "error should name frame {missing}: {err}"
        );
        // Wrong grid is rejected up front.
        let dir2 = tmp.path().join("wronggrid");
        write_baseline(&dir2, 16, &test, &vec![vec![0.0; 256]; test.len()]).unwrap();
        assert!(import_baseline(&dir2, "wronggrid", ds).is_err());
        // Wrong container kind is rejected.
        let err = import_baseline(tmp.path().join("nothere").as_path(), "x", ds).unwrap_err();
        assert!(matches!(err, Error::Io { .. } | Error::Format { .. }));
    }

    #[test]
    fn duplicate_model_names_are_rejected() {
        let ds = toy_dataset();
        let mask = MaskConfig::single(16);
        let model = toy_stage2_model(&mask);
        let hw = ds.grid() * ds.grid();
        let frames = vec![vec![0.0; hw]; ds.test_indices().len()];
        let b = |name: &str| BaselineSet {
            name: name.into(),
            frames: frames.clone(),
        };
        assert!(matches!(
            evaluate(&model, ds, &mask, &[b("a"), b("a")], &EvalOptions::default()).unwrap_err(),
            Error::Config(_)
        ));
        assert!(matches!(
            evaluate(&model, ds, &mask, &[b(MODEL_ENTRY)], &EvalOptions::default()).unwrap_err(),
            Error::Config(_)
        ));
    }
}
