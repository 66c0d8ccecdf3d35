//! Compositing roots into soil, cube symmetries and don't-care borders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{edt_squared_mask, within_tolerance};
use crate::volume::{Volume, VoxelData};

const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// One of the 48 axis-aligned symmetries of the cube: an axis permutation
/// followed by per-axis flips. Output axis `a` reads input axis `perm[a]`,
/// reversed when `flip[a]` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Symmetry {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl Symmetry {
    pub const COUNT: usize = 48;

    pub fn identity() -> Self {
        Symmetry::from_index(0)
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < Self::COUNT, "symmetry index {i} out of range");
        let bits = i % 8;
        Symmetry { perm: PERMUTATIONS[i / 8], flip: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0] }
    }

    pub fn index(&self) -> usize {
        let p = PERMUTATIONS.iter().position(|p| *p == self.perm).expect("valid permutation");
        p * 8 + self.flip.iter().enumerate().map(|(a, &f)| usize::from(f) << a).sum::<usize>()
    }

    pub fn all() -> impl Iterator<Item = Symmetry> {
        (0..Self::COUNT).map(Symmetry::from_index)
    }

    pub fn inverse(&self) -> Self {
        let mut perm = [0; 3];
        let mut flip = [false; 3];
        for a in 0..3 {
            perm[self.perm[a]] = a;
            flip[self.perm[a]] = self.flip[a];
        }
        Symmetry { perm, flip }
    }

    pub fn output_spatial(&self, sp: [usize; 3]) -> [usize; 3] {
        [sp[self.perm[0]], sp[self.perm[1]], sp[self.perm[2]]]
    }

    /// Source spatial index for every output voxel, in output order.
    fn gather_map(&self, sp: [usize; 3]) -> Vec<usize> {
        let out = self.output_spatial(sp);
        let mut map = Vec::with_capacity(sp.iter().product());
        for o0 in 0..out[0] {
            for o1 in 0..out[1] {
                for o2 in 0..out[2] {
                    let o = [o0, o1, o2];
                    let mut src = [0; 3];
                    for a in 0..3 {
                        src[self.perm[a]] = if self.flip[a] { out[a] - 1 - o[a] } else { o[a] };
                    }
                    map.push((src[0] * sp[1] + src[1]) * sp[2] + src[2]);
                }
            }
        }
        map
    }

    /// Applies the symmetry to every channel of `v`.
    pub fn apply(&self, v: &Volume) -> Volume {
        let sp = v.spatial();
        let out = self.output_spatial(sp);
        let dims = [v.channels(), out[0], out[1], out[2]];
        let map = self.gather_map(sp);
        let n = map.len();
        fn gather<T: Copy>(src: &[T], map: &[usize], n: usize, channels: usize) -> Vec<T> {
            (0..channels).flat_map(|c| map.iter().map(move |&i| src[c * n + i])).collect()
        }
        match v.data() {
            VoxelData::U8(d) => Volume::from_u8(dims, gather(d, &map, n, v.channels())),
            VoxelData::F32(d) => Volume::from_f32(dims, gather(d, &map, n, v.channels())),
        }
        .expect("permuted dims keep the voxel count")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Root intensity above the soil mean.
    pub contrast: f64,
    /// Standard deviation of additive intensity noise.
    pub noise_sigma: f64,
    pub symmetry: Symmetry,
    pub noise_seed: u64,
}

impl Augmentation {
    pub fn plain(contrast: f64) -> Self {
        Augmentation { contrast, noise_sigma: 0.0, symmetry: Symmetry::identity(), noise_seed: 0 }
    }
}

/// Aligned training triple: 1x input and 2x target plus don't-care mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub mri: Volume,
    pub target: Volume,
    pub dontcare: Volume,
}

impl Sample {
    pub fn apply(&self, g: Symmetry) -> Sample {
        Sample { mri: g.apply(&self.mri), target: g.apply(&self.target), dontcare: g.apply(&self.dontcare) }
    }
}

/// Flags voxels within `t_dc` of the root/soil boundary on either side.
///
/// Outside voxels use their distance to the nearest root voxel, inside voxels
/// their distance to the nearest soil voxel.
pub fn make_dontcare(occ_sr: &Volume, t_dc: f64) -> Result<Volume> {
    if !(t_dc >= 0.0) {
        return Err(Error::config(format!("don't-care width must be >= 0, got {t_dc}")));
    }
    if occ_sr.channels() != 1 {
        return Err(Error::shape("don't-care input must have one channel"));
    }
    let root = occ_sr.to_mask();
    let sp = occ_sr.spatial();
    let mut flagged = vec![false; root.len()];
    if t_dc >= 1.0 {
        let to_root = edt_squared_mask(&root, sp);
        let soil: Vec<bool> = root.iter().map(|&r| !r).collect();
        let to_soil = edt_squared_mask(&soil, sp);
        for (i, f) in flagged.iter_mut().enumerate() {
            let d = if root[i] { to_soil.data[i] } else { to_root.data[i] };
            *f = within_tolerance(d, t_dc);
        }
    }
    Volume::from_mask(occ_sr.dims(), &flagged)
}

/// Blends a root into a soil crop, adds noise, derives the don't-care mask
/// and applies the symmetry to all three volumes.
pub fn compose_sample(occ_frac: &Volume, occ_sr: &Volume, soil: &Volume, aug: &Augmentation, t_dc: f64) -> Result<Sample> {
    let sp = soil.spatial();
    if occ_frac.dims() != soil.dims() || soil.channels() != 1 {
        return Err(Error::shape(format!("dim mismatch: occupancy {:?} vs soil {:?}", occ_frac.dims(), soil.dims())));
    }
    if occ_sr.dims() != [1, 2 * sp[0], 2 * sp[1], 2 * sp[2]] {
        return Err(Error::shape(format!("dim mismatch: SR occupancy {:?} vs soil {:?}", occ_sr.dims(), soil.dims())));
    }
    if !(aug.noise_sigma >= 0.0) {
        return Err(Error::config(format!("noise_sigma must be >= 0, got {}", aug.noise_sigma)));
    }
    let s = soil.to_f32_vec();
    let f = occ_frac.to_f32_vec();
    let mean = s.iter().map(|&v| f64::from(v)).sum::<f64>() / s.len() as f64;
    let root_level = mean + aug.contrast;
    let mut rng = ChaCha8Rng::seed_from_u64(aug.noise_seed);
    let normal = (aug.noise_sigma > 0.0).then(|| Normal::new(0.0, aug.noise_sigma).expect("sigma checked"));
    let mri: Vec<f32> = s
        .iter()
        .zip(&f)
        .map(|(&sv, &fv)| {
            let (sv, fv) = (f64::from(sv), f64::from(fv));
            let mut v = (1.0 - fv) * sv + fv * root_level;
            if let Some(n) = &normal {
                v += n.sample(&mut rng);
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    let target = Volume::from_mask(occ_sr.dims(), &occ_sr.to_mask())?;
    let dontcare = make_dontcare(&target, t_dc)?;
    let sample = Sample { mri: Volume::from_f32(soil.dims(), mri)?, target, dontcare };
    Ok(if aug.symmetry == Symmetry::identity() { sample } else { sample.apply(aug.symmetry) })
}
