//! Crop sampling, the optimization loop, validation and checkpointing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, LossConfig, Tensor};
use crate::error::{Error, Result};
use crate::infer::segment_volume;
use crate::io::{create_dir_all, write_atomic};
use crate::metrics::{csv_row, distance_tolerant_prf, ToleranceReport};
use crate::net::{shape_plan, Checkpoint, CheckpointMeta, NetConfig, Network};
use crate::synth::{load_sample, Manifest, Sample};
use crate::volume::{Volume, VoxelBox};

pub const LOG_FILE: &str = "train_log.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const FINAL_CHECKPOINT: &str = "final.rnet";
pub const BEST_CHECKPOINT: &str = "best.rnet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub crop_size: usize,
    /// Crops per optimizer step; gradients are averaged over them.
    pub batch_size: usize,
    pub steps: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    /// Steps between validations; 0 validates only after the last step.
    pub validation_interval: u64,
    pub seed: u64,
    /// Share of steps whose crops must contain a root voxel.
    pub root_crop_fraction: f64,
    /// Extra draws allowed when a crop must contain root.
    pub max_retries: usize,
    pub threshold: f64,
    pub tolerances: Vec<f64>,
    /// Tolerance whose micro-averaged F1 selects the best checkpoint.
    pub selection_tolerance: f64,
    /// Tile size for full-volume validation inference.
    pub val_tile_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop_size: 60,
            batch_size: 1,
            steps: 2000,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            validation_interval: 0,
            seed: 0,
            root_crop_fraction: 0.5,
            max_retries: 20,
            threshold: 0.5,
            tolerances: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            selection_tolerance: 1.0,
            val_tile_size: 92,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        shape_plan(self.crop_size, &NetConfig::default())?;
        shape_plan(self.val_tile_size, &NetConfig::default())?;
        self.loss.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.root_crop_fraction) {
            return Err(Error::config(format!("root_crop_fraction must lie in [0, 1], got {}", self.root_crop_fraction)));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("adam needs lr >= 0, betas in [0, 1) and eps > 0"));
        }
        if self.tolerances.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::config("tolerances must be >= 0"));
        }
        Ok(())
    }
}

/// One training crop with its SR supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    /// Input window origin at 1x.
    pub origin: [usize; 3],
    pub input: Volume,
    /// SR box covered by the network output.
    pub target_box: VoxelBox,
    pub target: Volume,
    pub dontcare: Volume,
    /// Windows drawn, including the accepted one.
    pub draws: usize,
}

/// Draws a uniformly placed `s`-cube from `sample` with the matching SR labels.
///
/// With `require_root`, windows whose labels contain no root voxel are
/// redrawn up to `max_retries` times; the last draw is kept regardless.
pub fn sample_crop(sample: &Sample, s: usize, require_root: bool, max_retries: usize, rng: &mut impl Rng) -> Result<Crop> {
    let plan = shape_plan(s, &NetConfig::default())?;
    let sp = sample.mri.spatial();
    if sp.iter().any(|&n| n < s) {
        return Err(Error::shape(format!("sample {sp:?} smaller than crop size {s}")));
    }
    let m = plan.input_margin;
    let ext = plan.output_size;
    let mut draws = 0;
    loop {
        draws += 1;
        let origin = sp.map(|n| rng.random_range(0..=n - s));
        let target_box = VoxelBox::new(origin.map(|o| 2 * (o + m)), [ext; 3]);
        let target = sample.target.crop(&target_box)?;
        let has_root = target.as_u8().is_some_and(|t| t.iter().any(|&v| v != 0));
        if !require_root || has_root || draws > max_retries {
            return Ok(Crop {
                origin,
                input: sample.mri.crop(&VoxelBox::new(origin, [s; 3]))?,
                dontcare: sample.dontcare.crop(&target_box)?,
                target_box,
                target,
                draws,
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub per_volume: Vec<ToleranceReport>,
    pub micro: ToleranceReport,
}

impl ValidationReport {
    /// CSV rows (`step,volume,...`) for every volume and the pooled average.
    pub fn csv_rows(&self, step: u64) -> String {
        let mut s = String::new();
        let labelled = self.per_volume.iter().enumerate().map(|(i, r)| (i.to_string(), r)).chain(std::iter::once(("micro".to_string(), &self.micro)));
        for (label, r) in labelled {
            for e in &r.entries {
                s.push_str(&format!("{step},{label},{}\n", csv_row(e)));
            }
        }
        s
    }
}

pub const VALIDATION_HEADER: &str = "step,volume,tolerance,precision,recall,f1,pred_count,gt_count\n";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<(u64, ValidationReport)>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.loss).collect()
    }
}

/// Segments every volume, scores it with don't-care exclusion and pools counts.
pub fn validate(net: &Network<f32>, val: &[Sample], tolerances: &[f64], threshold: f64, tile_size: usize) -> Result<ValidationReport> {
    let mut per_volume = Vec::with_capacity(val.len());
    for s in val {
        let seg = segment_volume(net, &s.mri, threshold, tile_size)?.seg;
        per_volume.push(distance_tolerant_prf(&seg, &s.target, tolerances, Some(&s.dontcare))?);
    }
    let micro = ToleranceReport::micro_average(&per_volume)?;
    Ok(ValidationReport { per_volume, micro })
}

/// Loaded training and validation samples.
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let manifest = Manifest::load(dir)?;
        let load = |entries: &[crate::synth::SampleEntry]| entries.iter().map(|e| load_sample(dir, e)).collect::<Result<Vec<_>>>();
        Ok(Dataset { train: load(&manifest.train)?, val: load(&manifest.val)? })
    }
}

/// Where training artifacts go; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub best: Option<(u64, f64)>,
    pub log: TrainLog,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Loss and parameter gradients for one crop.
fn crop_gradients(net: &Network<f32>, crop: &Crop, loss: &LossConfig) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let vars = net.attach(&mut g);
    let x = g.constant(Tensor::new(crop.input.dims().to_vec(), crop.input.to_f32_vec())?);
    let p = net.forward_graph(&mut g, &vars, x)?;
    let target = crop.target.as_u8().ok_or_else(|| Error::shape("target must be u8"))?;
    let dc = crop.dontcare.as_u8().ok_or_else(|| Error::shape("don't-care mask must be u8"))?;
    let l = g.weighted_masked_bce(p, target, Some(dc), loss)?;
    g.backward(l)?;
    let value = f64::from(g.value(l).item());
    let grads = vars.iter().zip(net.params()).map(|(&v, (_, t))| g.take_grad(v).unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    Ok((value, grads))
}

/// Trains a freshly initialised network on `data`.
pub fn train(net_cfg: &NetConfig, cfg: &TrainConfig, data: &Dataset, out: &TrainOutputs) -> Result<TrainResult> {
    cfg.validate()?;
    net_cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("dataset has no training samples"));
    }
    for s in data.train.iter().chain(&data.val) {
        let sp = s.mri.spatial();
        if s.target.dims() != [1, 2 * sp[0], 2 * sp[1], 2 * sp[2]] || s.dontcare.dims() != s.target.dims() {
            return Err(Error::shape(format!("sample labels {:?} do not match input {:?}", s.target.dims(), s.mri.dims())));
        }
    }
    if let Some(s) = data.train.iter().find(|s| s.mri.spatial().iter().any(|&n| n < cfg.crop_size)) {
        return Err(Error::shape(format!("training sample {:?} smaller than crop size {}", s.mri.spatial(), cfg.crop_size)));
    }
    let mut log_file = match &out.dir {
        Some(dir) => {
            create_dir_all(dir)?;
            let path = dir.join(LOG_FILE);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            w.write_all(b"step,loss,seconds\n").map_err(|e| Error::io(&path, e))?;
            write_atomic(&dir.join(VALIDATION_FILE), VALIDATION_HEADER.as_bytes())?;
            Some((w, path))
        }
        None => None,
    };

    let mut net = Network::<f32>::build(*net_cfg, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam, net.params().iter().map(|(_, t)| t));
    let mut log = TrainLog::default();
    let mut best: Option<(u64, f64)> = None;
    let mut validation_csv = VALIDATION_HEADER.to_string();
    let start = Instant::now();
    let meta = |step| CheckpointMeta { step, seed: cfg.seed };

    for step in 1..=cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let mut total = 0.0;
        let mut acc: Option<Vec<Vec<f32>>> = None;
        for _ in 0..cfg.batch_size {
            let sample = &data.train[rng.random_range(0..data.train.len())];
            let require_root = rng.random::<f64>() < cfg.root_crop_fraction;
            let crop = sample_crop(sample, cfg.crop_size, require_root, cfg.max_retries, &mut rng)?;
            let (loss, grads) = crop_gradients(&net, &crop, &cfg.loss)?;
            total += loss;
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.iter_mut().zip(g).for_each(|(a, g)| *a += g)),
            }
        }
        let mut grads = acc.expect("batch_size >= 1");
        if cfg.batch_size > 1 {
            let inv = 1.0 / cfg.batch_size as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
        }
        let loss = total / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::shape(format!("loss became non-finite at step {step}")));
        }
        let mut tensors = net.take_params();
        let stepped = adam.step(&mut tensors, &grads);
        net.restore_params(tensors);
        stepped?;

        let record = StepRecord { step, loss, seconds: start.elapsed().as_secs_f64() };
        if let Some((w, path)) = &mut log_file {
            writeln!(w, "{},{},{:.3}", record.step, record.loss, record.seconds).and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.steps.push(record);

        let due = step == cfg.steps || (cfg.validation_interval > 0 && step % cfg.validation_interval == 0);
        if due && !data.val.is_empty() {
            let report = validate(&net, &data.val, &cfg.tolerances, cfg.threshold, cfg.val_tile_size)?;
            let f1 = report.micro.at(cfg.selection_tolerance).map(|e| e.f1);
            if let Some(dir) = &out.dir {
                validation_csv.push_str(&report.csv_rows(step));
                write_atomic(&dir.join(VALIDATION_FILE), validation_csv.as_bytes())?;
            }
            if let Some(f1) = f1 {
                if best.is_none_or(|(_, b)| f1 > b) {
                    best = Some((step, f1));
                    if let Some(dir) = &out.dir {
                        Checkpoint { network: net.clone(), meta: meta(step) }.save(dir.join(BEST_CHECKPOINT))?;
                    }
                }
            }
            log.validations.push((step, report));
        }
    }
    let checkpoint = Checkpoint { network: net, meta: meta(cfg.steps) };
    if let Some(dir) = &out.dir {
        checkpoint.save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainResult { checkpoint, best, log })
}
