//! Dataset assembly: per-sample seeding, parallel generation and the manifest.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::compose::{compose_sample, Augmentation, Sample, Symmetry};
use super::raster::rasterize;
use super::root::{generate_root, RootGenParams};
use super::soil::{make_soil, SoilSpec};
use crate::error::{Error, Result};
use crate::io::{create_dir_all, read_file, write_atomic};
use crate::volume::Volume;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    /// Edge length of each 1x volume; targets are twice this.
    pub volume_size: usize,
    pub base_seed: u64,
    /// Distinct root systems shared by the training samples.
    pub n_train_roots: usize,
    /// Further root systems reserved for validation.
    pub n_val_roots: usize,
    pub root: RootGenParams,
    pub soil: SoilSpec,
    pub contrast: [f64; 2],
    pub noise_sigma: [f64; 2],
    /// Don't-care border width in SR voxels.
    pub t_dc: f64,
    /// Largest lateral offset of the taproot base from the volume center, 1x voxels.
    pub max_shift: f64,
    /// Draw one of the 48 cube symmetries per sample instead of keeping roots upright.
    pub symmetries: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 24,
            n_val: 6,
            volume_size: 72,
            base_seed: 1000,
            n_train_roots: 24,
            n_val_roots: 6,
            root: RootGenParams::default(),
            soil: SoilSpec::default(),
            contrast: [0.15, 0.4],
            noise_sigma: [0.01, 0.05],
            t_dc: 1.0,
            max_shift: 8.0,
            symmetries: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.root.validate()?;
        self.soil.validate()?;
        if self.volume_size == 0 {
            return Err(Error::config("volume_size must be >= 1"));
        }
        if self.n_train > 0 && self.n_train_roots == 0 || self.n_val > 0 && self.n_val_roots == 0 {
            return Err(Error::config("each non-empty split needs at least one root system"));
        }
        for (name, r) in [("contrast", self.contrast), ("noise_sigma", self.noise_sigma)] {
            if !(r[0] <= r[1] && r[0].is_finite() && r[1].is_finite()) {
                return Err(Error::config(format!("{name} must be a range [lo, hi], got {r:?}")));
            }
        }
        if self.noise_sigma[0] < 0.0 || !(self.t_dc >= 0.0) || !(self.max_shift >= 0.0) {
            return Err(Error::config("noise_sigma, t_dc and max_shift must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub mri: String,
    pub target: String,
    pub dontcare: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub seed: u64,
    pub root_index: usize,
    pub root_seed: u64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub symmetry: usize,
    pub root_voxels: u64,
    /// Paths relative to the dataset directory.
    pub files: SampleFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub train: Vec<SampleEntry>,
    pub val: Vec<SampleEntry>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Manifest> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let bytes = read_file(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn entries(&self, split: Split) -> &[SampleEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Reads the three volumes of a manifest entry.
pub fn load_sample(dir: impl AsRef<Path>, entry: &SampleEntry) -> Result<Sample> {
    let dir = dir.as_ref();
    Ok(Sample {
        mri: Volume::read_rvol(dir.join(&entry.files.mri))?,
        target: Volume::read_rvol(dir.join(&entry.files.target))?,
        dontcare: Volume::read_rvol(dir.join(&entry.files.dontcare))?,
    })
}

/// Generates one sample from its split and index alone.
///
/// The sample seed is `base_seed + global index` (validation indices follow
/// the training ones), so any subset can be regenerated in any order.
pub fn generate_sample(cfg: &DatasetConfig, split: Split, index: usize) -> Result<(Sample, SampleEntry)> {
    let (global, root_index) = match split {
        Split::Train => (index, index % cfg.n_train_roots),
        Split::Val => (cfg.n_train + index, cfg.n_train_roots + index % cfg.n_val_roots),
    };
    let seed = cfg.base_seed.wrapping_add(global as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.volume_size;
    let root_seed = cfg.root.seed.wrapping_add(root_index as u64);
    let root = generate_root(&RootGenParams { seed: root_seed, ..cfg.root.clone() })?;
    let shift = |rng: &mut ChaCha8Rng| if cfg.max_shift > 0.0 { rng.random_range(-cfg.max_shift..=cfg.max_shift) } else { 0.0 };
    let centre = s as f64 / 2.0;
    let offset = [0.5, centre + shift(&mut rng), centre + shift(&mut rng)];
    let (occ_sr, occ_frac) = rasterize(&root.translated(offset), s);
    let pick = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..r[1]) } else { r[0] };
    let contrast = pick(&mut rng, cfg.contrast);
    let noise_sigma = pick(&mut rng, cfg.noise_sigma);
    let symmetry = if cfg.symmetries { Symmetry::from_index(rng.random_range(0..Symmetry::COUNT)) } else { Symmetry::identity() };
    let soil_seed = rng.next_u64();
    let noise_seed = rng.next_u64();
    let soil = make_soil(&cfg.soil, [s, s, s], soil_seed)?;
    let aug = Augmentation { contrast, noise_sigma, symmetry, noise_seed };
    let sample = compose_sample(&occ_frac, &occ_sr, &soil, &aug, cfg.t_dc)?;
    let root_voxels = sample.target.to_mask().iter().filter(|&&b| b).count() as u64;
    let stem = format!("{}/{index:04}", split.dir_name());
    let entry = SampleEntry {
        index,
        seed,
        root_index,
        root_seed,
        contrast,
        noise_sigma,
        symmetry: symmetry.index(),
        root_voxels,
        files: SampleFiles {
            mri: format!("{stem}.mri.rvol"),
            target: format!("{stem}.target.rvol"),
            dontcare: format!("{stem}.dontcare.rvol"),
        },
    };
    Ok((sample, entry))
}

/// Writes the dataset under `out_dir` using `workers` threads and returns the manifest.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>, workers: usize) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    for split in [Split::Train, Split::Val] {
        create_dir_all(&out_dir.join(split.dir_name()))?;
    }
    let jobs: Vec<(Split, usize)> =
        (0..cfg.n_train).map(|i| (Split::Train, i)).chain((0..cfg.n_val).map(|i| (Split::Val, i))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SampleEntry>>>> = Mutex::new(jobs.iter().map(|_| None).collect());
    let run = |out: &Path| loop {
        let j = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(split, index)) = jobs.get(j) else { break };
        let res = generate_sample(cfg, split, index).and_then(|(sample, entry)| {
            write_sample(out, &sample, &entry)?;
            Ok(entry)
        });
        results.lock().expect("worker panicked")[j] = Some(res);
    };
    std::thread::scope(|scope| {
        for _ in 1..workers.max(1) {
            scope.spawn(|| run(out_dir));
        }
        run(out_dir);
    });
    let mut manifest = Manifest { config: cfg.clone(), train: Vec::new(), val: Vec::new() };
    for (res, &(split, _)) in results.into_inner().expect("workers finished").into_iter().zip(&jobs) {
        let entry = res.expect("every job ran")?;
        match split {
            Split::Train => manifest.train.push(entry),
            Split::Val => manifest.val.push(entry),
        }
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&out_dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

fn write_sample(out: &Path, sample: &Sample, entry: &SampleEntry) -> Result<()> {
    let path = |f: &str| -> PathBuf { out.join(f) };
    sample.mri.write_rvol(path(&entry.files.mri))?;
    sample.target.write_rvol(path(&entry.files.target))?;
    sample.dontcare.write_rvol(path(&entry.files.dontcare))
}
