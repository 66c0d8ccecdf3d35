//! Soil backgrounds: cropped scans from disk or procedural value noise with bright blobs.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VoxelBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Octave {
    pub amplitude: f64,
    /// Lattice frequency in cycles per voxel.
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSoil {
    pub base: f64,
    pub octaves: Vec<Octave>,
    /// Expected artifacts per voxel.
    pub artifact_density: f64,
    /// Peak brightness added at an artifact center.
    pub artifact_intensity: f64,
    /// Semi-axis range of the artifact ellipsoids, voxels.
    pub artifact_radius: [f64; 2],
    pub noise_sigma: f64,
}

impl Default for SyntheticSoil {
    fn default() -> Self {
        SyntheticSoil {
            base: 0.3,
            octaves: vec![
                Octave { amplitude: 0.08, frequency: 1.0 / 18.0 },
                Octave { amplitude: 0.05, frequency: 1.0 / 7.0 },
                Octave { amplitude: 0.03, frequency: 1.0 / 2.5 },
            ],
            artifact_density: 1.5e-4,
            artifact_intensity: 0.3,
            artifact_radius: [0.6, 2.0],
            noise_sigma: 0.03,
        }
    }
}

/// Where soil backgrounds come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SoilSpec {
    /// A single-channel soil scan; intensities are clamped to [0, 1].
    File { path: PathBuf },
    Synthetic(SyntheticSoil),
}

impl Default for SoilSpec {
    fn default() -> Self {
        SoilSpec::Synthetic(SyntheticSoil::default())
    }
}

impl SoilSpec {
    pub fn validate(&self) -> Result<()> {
        let SoilSpec::Synthetic(s) = self else { return Ok(()) };
        if !(0.0..=1.0).contains(&s.base) {
            return Err(Error::config(format!("soil base must lie in [0, 1], got {}", s.base)));
        }
        if !(s.noise_sigma >= 0.0) || !(s.artifact_density >= 0.0) || !(s.artifact_intensity >= 0.0) {
            return Err(Error::config("soil noise, artifact density and intensity must be >= 0"));
        }
        if !(s.artifact_radius[0] > 0.0 && s.artifact_radius[0] <= s.artifact_radius[1]) {
            return Err(Error::config(format!("artifact_radius must be a range with 0 < lo <= hi, got {:?}", s.artifact_radius)));
        }
        if s.octaves.iter().any(|o| !(o.amplitude >= 0.0 && o.frequency > 0.0)) {
            return Err(Error::config("octaves need amplitude >= 0 and frequency > 0"));
        }
        Ok(())
    }
}

fn fade(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in [-1, 1], added into `out` with weight `amp`.
fn add_value_noise(out: &mut [f64], dims: [usize; 3], octave: Octave, rng: &mut ChaCha8Rng) {
    let f = octave.frequency;
    let lat: Vec<usize> = dims.iter().map(|&n| ((n as f64) * f).ceil() as usize + 2).collect();
    let table: Vec<f64> = (0..lat[0] * lat[1] * lat[2]).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let at = |i: usize, j: usize, k: usize| table[(i * lat[1] + j) * lat[2] + k];
    let split = |v: usize| {
        let x = v as f64 * f;
        let i = x.floor();
        (i as usize, fade(x - i))
    };
    let [d, h, w] = dims;
    for z in 0..d {
        let (i, tz) = split(z);
        for y in 0..h {
            let (j, ty) = split(y);
            for x in 0..w {
                let (k, tx) = split(x);
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(i, j, k), at(i, j, k + 1), tx);
                let c01 = lerp(at(i, j + 1, k), at(i, j + 1, k + 1), tx);
                let c10 = lerp(at(i + 1, j, k), at(i + 1, j, k + 1), tx);
                let c11 = lerp(at(i + 1, j + 1, k), at(i + 1, j + 1, k + 1), tx);
                let v = lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz);
                out[(z * h + y) * w + x] += octave.amplitude * v;
            }
        }
    }
}

fn add_artifacts(out: &mut [f64], dims: [usize; 3], s: &SyntheticSoil, rng: &mut ChaCha8Rng) {
    let voxels = (dims[0] * dims[1] * dims[2]) as f64;
    let count = (s.artifact_density * voxels).round() as usize;
    let [d, h, w] = dims;
    for _ in 0..count {
        let c: Vec<f64> = dims.iter().map(|&n| rng.random_range(0.0..n as f64)).collect();
        let r: Vec<f64> = (0..3)
            .map(|_| if s.artifact_radius[0] == s.artifact_radius[1] { s.artifact_radius[0] } else { rng.random_range(s.artifact_radius[0]..s.artifact_radius[1]) })
            .collect();
        let peak = s.artifact_intensity * rng.random_range(0.5..=1.0);
        let lo = |a: usize| (c[a] - r[a]).floor().max(0.0) as usize;
        let hi = |a: usize, n: usize| ((c[a] + r[a]).ceil() as usize).min(n - 1);
        for z in lo(0)..=hi(0, d) {
            for y in lo(1)..=hi(1, h) {
                for x in lo(2)..=hi(2, w) {
                    let q = ((z as f64 + 0.5 - c[0]) / r[0]).powi(2)
                        + ((y as f64 + 0.5 - c[1]) / r[1]).powi(2)
                        + ((x as f64 + 0.5 - c[2]) / r[2]).powi(2);
                    if q < 1.0 {
                        out[(z * h + y) * w + x] += peak * (1.0 - q);
                    }
                }
            }
        }
    }
}

/// Produces a `(1, D, H, W)` float soil volume in [0, 1].
pub fn make_soil(spec: &SoilSpec, dims: [usize; 3], seed: u64) -> Result<Volume> {
    spec.validate()?;
    match spec {
        SoilSpec::File { path } => {
            let v = Volume::read_rvol(path)?;
            if v.channels() != 1 {
                return Err(Error::shape(format!("soil scan {} must have one channel", path.display())));
            }
            let sp = v.spatial();
            if (0..3).any(|a| dims[a] > sp[a]) {
                return Err(Error::shape(format!("soil crop {dims:?} larger than soil scan {sp:?} in {}", path.display())));
            }
            let origin = [0, 1, 2].map(|a| (sp[a] - dims[a]) / 2);
            let crop = v.crop(&VoxelBox::new(origin, dims))?;
            let data = crop.to_f32_vec().into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
            Volume::from_f32([1, dims[0], dims[1], dims[2]], data)
        }
        SoilSpec::Synthetic(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = dims.iter().product();
            let mut acc = vec![s.base; n];
            for &o in &s.octaves {
                if o.amplitude > 0.0 {
                    add_value_noise(&mut acc, dims, o, &mut rng);
                }
            }
            if s.artifact_density > 0.0 && s.artifact_intensity > 0.0 {
                add_artifacts(&mut acc, dims, s, &mut rng);
            }
            if s.noise_sigma > 0.0 {
                let normal = Normal::new(0.0, s.noise_sigma).expect("sigma checked");
                for v in &mut acc {
                    *v += normal.sample(&mut rng);
                }
            }
            let data = acc.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
            Volume::from_f32([1, dims[0], dims[1], dims[2]], data)
        }
    }
}
