//! Dataset production: run the solver over a family of seeds, downsample,
//! split by run, and persist/load the frame corpus in the container format.

use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::solver::{self, FlowField, SolverParams};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Full recipe for a dataset: seeds, durations, grids, solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Total simulation runs (each with its own seed).
    pub num_runs: usize,
    /// The first `train_runs` runs form the train split; the rest are test.
    pub train_runs: usize,
    /// Simulated seconds per run.
    pub duration: f64,
    /// Seconds between stored frames.
    pub sample_interval: f64,
    /// Native simulation grid (power of two).
    pub sim_grid: usize,
    /// Stored grid after strided downsampling (divides `sim_grid`).
    pub out_grid: usize,
    /// Seed of run 0; run `r` uses `base_seed + r`.
    pub base_seed: u64,
    /// Drop frames earlier than this many seconds (0 keeps the initial GRF).
    #[serde(default)]
    pub skip_initial_seconds: f64,
    pub solver: SolverParams,
}

impl Default for DatasetSpec {
    /// Desk-scale defaults: 8 runs (6 train / 2 test), 256^2 simulated,
    /// 64^2 stored, 4 s per run sampled every 1/32 s.
    fn default() -> Self {
        DatasetSpec {
            num_runs: 8,
            train_runs: 6,
            duration: 4.0,
            sample_interval: 1.0 / 32.0,
            sim_grid: 256,
            out_grid: 64,
            base_seed: 0,
            skip_initial_seconds: 0.0,
            solver: SolverParams::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.num_runs == 0 {
            return Err(Error::Config("num_runs must be positive".into()));
        }
        if self.train_runs >= self.num_runs {
            return Err(Error::Config(format!(
                "train_runs {} must be smaller than num_runs {}",
                self.train_runs, self.num_runs
            )));
        }
        if self.out_grid == 0 || self.sim_grid % self.out_grid != 0 {
            return Err(Error::Config(format!(
                "sim_grid {} must be an integer multiple of out_grid {}",
                self.sim_grid, self.out_grid
            )));
        }
        if self.skip_initial_seconds < 0.0 || self.skip_initial_seconds > self.duration {
            return Err(Error::Config(format!(
                "skip_initial_seconds {} must lie in [0, duration]",
                self.skip_initial_seconds
            )));
        }
        Ok(())
    }

    /// Frames stored per run.
    pub fn frames_per_run(&self) -> usize {
        let total = if self.duration == 0.0 {
            0
        } else {
            (self.duration / self.sample_interval).round() as usize
        };
        let skipped = if self.skip_initial_seconds == 0.0 {
            0
        } else {
            // First kept sample index: smallest m with m*interval >= skip.
            (self.skip_initial_seconds / self.sample_interval).ceil() as usize
        };
        total + 1 - skipped.min(total + 1)
    }
}

/// A materialized dataset: every frame of every run, plus per-frame labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Row-major frames, shape (num_frames, out_grid, out_grid).
    pub frames: Vec<f32>,
    /// Run index per frame.
    pub run_index: Vec<i64>,
    /// Simulation time per frame (seconds).
    pub frame_time: Vec<f64>,
    /// 0 = train, 1 = test, per frame.
    pub split: Vec<u8>,
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.run_index.len()
    }

    pub fn grid(&self) -> usize {
        self.spec.out_grid
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let px = self.grid() * self.grid();
        &self.frames[i * px..(i + 1) * px]
    }

    /// Frame as f64 values.
    pub fn frame_f64(&self, i: usize) -> Vec<f64> {
        self.frame(i).iter().map(|&v| v as f64).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.num_frames()).filter(|&i| self.split[i] == 0).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.num_frames()).filter(|&i| self.split[i] == 1).collect()
    }

    /// Largest |vorticity| over the train split (the normalization scale
    /// stored in checkpoints).
    pub fn train_max_abs(&self) -> f64 {
        self.train_indices()
            .into_iter()
            .flat_map(|i| self.frame(i))
            .fold(0.0_f64, |a, &v| a.max((v as f64).abs()))
    }
}

/// Strided subsampling (every `factor`-th node starting at offset 0).
///
/// Chosen over spectral truncation so a stored value is exactly the solver's
/// value at that node — pointwise ground truth for completion metrics.
pub fn downsample(field: &FlowField, factor: usize) -> Result<FlowField> {
    if factor == 0 || field.n % factor != 0 {
        return Err(Error::Config(format!(
            "downsample factor {factor} does not divide grid size {}",
            field.n
        )));
    }
    if factor == 1 {
        return Ok(field.clone());
    }
    let m = field.n / factor;
    let mut values = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            values.push(field.values[(i * factor) * field.n + j * factor]);
        }
    }
    Ok(FlowField {
        n: m,
        values,
        time: field.time,
    })
}

/// Number of worker threads for run-parallel generation: the
/// `FLOWFILL_THREADS` environment variable if set, else available
/// parallelism.
pub fn worker_threads() -> usize {
    std::env::var("FLOWFILL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|v| v.get())
                .unwrap_or(1)
        })
}

fn generate_run(spec: &DatasetSpec, run: usize) -> Result<Vec<FlowField>> {
    let seed = spec.base_seed + run as u64;
    let annotate = |e: Error| e.annotate(format!("run {run} (seed {seed})"));
    let initial = solver::grf_sample(seed, spec.sim_grid).map_err(annotate)?;
    let traj = solver::simulate(
        &initial,
        spec.duration,
        spec.sample_interval,
        &spec.solver,
        seed,
    )
    .map_err(|e| e.annotate(format!("run {run} (seed {seed})")))?;
    let factor = spec.sim_grid / spec.out_grid;
    let mut out = Vec::new();
    for frame in &traj.frames {
        if frame.time + 1e-12 < spec.skip_initial_seconds {
            continue;
        }
        out.push(downsample(frame, factor).map_err(|e| e.annotate(format!("run {run}")))?);
    }
    Ok(out)
}

/// Run the solver for every seed and assemble the split corpus.
///
/// Runs execute in parallel across [`worker_threads`] threads (each run is
/// fully independent); frames are assembled in run order regardless of
/// completion order, so output is deterministic.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let runs: Vec<Result<Vec<FlowField>>> = {
        let threads = worker_threads().min(spec.num_runs).max(1);
        if threads == 1 {
            (0..spec.num_runs).map(|r| generate_run(spec, r)).collect()
        } else {
            let mut slots: Vec<Option<Result<Vec<FlowField>>>> =
                (0..spec.num_runs).map(|_| None).collect();
            let next = std::sync::atomic::AtomicUsize::new(0);
            let slots_mutex = std::sync::Mutex::new(&mut slots);
            std::thread::scope(|scope| {
                for _ in 0..threads {
                    scope.spawn(|| loop {
                        let r = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        if r >= spec.num_runs {
                            break;
                        }
                        let result = generate_run(spec, r);
                        slots_mutex.lock().unwrap()[r] = Some(result);
                    });
                }
            });
            slots.into_iter().map(|s| s.expect("run slot filled")).collect()
        }
    };

    let mut frames = Vec::new();
    let mut run_index = Vec::new();
    let mut frame_time = Vec::new();
    let mut split = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        let fields = run?;
        for f in fields {
            frames.extend(f.values.iter().map(|&v| v as f32));
            run_index.push(r as i64);
            frame_time.push(f.time);
            split.push(if r < spec.train_runs { 0 } else { 1 });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        frames,
        run_index,
        frame_time,
        split,
    })
}

pub const DATASET_KIND: &str = "dataset";

/// Persist a dataset as a container directory.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let n = ds.num_frames();
    let g = ds.grid();
    let mut w = ContainerWriter::new(DATASET_KIND, &ds.spec)?;
    w.add_f32("frames", &[n, g, g], &ds.frames);
    w.add_i64("run_index", &[n], &ds.run_index);
    w.add_f64("frame_time", &[n], &ds.frame_time);
    w.add_u8("split", &[n], &ds.split);
    w.write(dir)
}

/// Open a dataset directory and load every array.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let c = open_dataset(dir)?;
    let spec: DatasetSpec = c.typed_meta()?;
    Ok(Dataset {
        spec,
        frames: c.read_f32("frames")?,
        run_index: c.read_i64("run_index")?,
        frame_time: c.read_f64("frame_time")?,
        split: c.read_u8("split")?,
    })
}

/// Open a dataset container without touching the frame payload (metadata
/// stays cheap for large corpora).
pub fn open_dataset(dir: impl AsRef<Path>) -> Result<Container> {
    let c = Container::open(&dir)?;
    if c.kind() != DATASET_KIND {
        return Err(Error::StageMismatch(format!(
            "{} is a '{}' container, expected a dataset",
            dir.as_ref().display(),
            c.kind()
        )));
    }
    Ok(c)
}
