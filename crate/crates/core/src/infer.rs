//! Full-volume segmentation by tiling the network over a padded input.
//!
//! Valid convolutions shrink every tile by a fixed margin, so the input is
//! reflection-padded by that margin and windows are placed such that their
//! 2x outputs tile the SR grid with each voxel written exactly once.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::net::{shape_plan, Network};
use crate::volume::{Volume, VoxelBox};

/// How consecutive windows are spaced along an axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileMode {
    /// Stride equal to the covered core (`s - 42`), last window pulled inward.
    #[default]
    Abutting,
    /// Stride rounded down to a multiple of the pooling period (4), windows
    /// starting on that lattice. Results then do not depend on the tile size.
    PhaseAligned,
}

/// Input voxels per axis that share one pooling phase.
pub const POOL_PERIOD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    /// Input window in padded coordinates.
    pub input: VoxelBox,
    /// Voxels written by this tile, in SR coordinates of the unpadded volume.
    pub output: VoxelBox,
    /// Where `output` starts inside the tile's own SR prediction.
    pub source_origin: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub volume: [usize; 3],
    pub tile_size: usize,
    pub pad_lo: [usize; 3],
    pub pad_hi: [usize; 3],
    pub tiles: Vec<Tile>,
}

#[derive(Debug, Clone, Copy)]
struct AxisTile {
    /// Window origin in unpadded 1x coordinates (the padded origin is this plus `pad_lo`
    /// minus the margin).
    core_origin: usize,
    out_start: usize,
    out_len: usize,
    src_offset: usize,
}

fn axis_tiles(n: usize, core: usize, mode: TileMode) -> Result<(Vec<AxisTile>, usize)> {
    let stride = match mode {
        TileMode::Abutting => core,
        TileMode::PhaseAligned => core - core % POOL_PERIOD,
    };
    if stride == 0 {
        return Err(Error::config(format!("tile core {core} is too small for phase-aligned tiling")));
    }
    let mut origins = Vec::new();
    let mut o = 0;
    loop {
        origins.push(o);
        if o + core >= n {
            break;
        }
        o += stride;
    }
    if mode == TileMode::Abutting && n >= core {
        let last = origins.last_mut().expect("at least one window");
        *last = (*last).min(n - core);
    }
    let reach = origins.last().expect("at least one window") + core;
    let extra = reach.saturating_sub(n);
    let mut tiles = Vec::new();
    let mut written = 0;
    for o in origins {
        let end = (2 * (o + core)).min(2 * n);
        if end <= written {
            continue;
        }
        tiles.push(AxisTile { core_origin: o, out_start: written, out_len: end - written, src_offset: written - 2 * o });
        written = end;
    }
    Ok((tiles, extra))
}

/// Windows of size `s` covering a `dims` volume in the default abutting mode.
pub fn tile_plan(dims: [usize; 3], s: usize) -> Result<TilePlan> {
    tile_plan_with(dims, s, TileMode::Abutting)
}

pub fn tile_plan_with(dims: [usize; 3], s: usize, mode: TileMode) -> Result<TilePlan> {
    let plan = shape_plan(s, &Default::default())?;
    if dims.contains(&0) {
        return Err(Error::shape("cannot tile an empty volume"));
    }
    let margin = plan.input_margin;
    let core = plan.output_size / 2;
    let mut per_axis = Vec::new();
    let mut pad_hi = [0; 3];
    for a in 0..3 {
        let (tiles, extra) = axis_tiles(dims[a], core, mode)?;
        pad_hi[a] = margin + extra;
        per_axis.push(tiles);
    }
    let mut tiles = Vec::new();
    for tz in &per_axis[0] {
        for ty in &per_axis[1] {
            for tx in &per_axis[2] {
                let t = [tz, ty, tx];
                tiles.push(Tile {
                    // Padded origin = core origin + margin - margin.
                    input: VoxelBox::new(t.map(|t| t.core_origin), [s; 3]),
                    output: VoxelBox::new(t.map(|t| t.out_start), t.map(|t| t.out_len)),
                    source_origin: t.map(|t| t.src_offset),
                });
            }
        }
    }
    Ok(TilePlan { volume: dims, tile_size: s, pad_lo: [margin; 3], pad_hi, tiles })
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Mirror padding without edge repetition; repeats periodically when the
/// pad exceeds the volume.
pub fn pad_reflect(v: &Volume, lo: [usize; 3], hi: [usize; 3]) -> Result<Volume> {
    let [c, d, h, w] = v.dims();
    let out = [d + lo[0] + hi[0], h + lo[1] + hi[1], w + lo[2] + hi[2]];
    let src = v.to_f32_vec();
    let map = |len: usize, n: usize, pad: usize| -> Vec<usize> { (0..len).map(|i| reflect(i as isize - pad as isize, n)).collect() };
    let (mz, my, mx) = (map(out[0], d, lo[0]), map(out[1], h, lo[1]), map(out[2], w, lo[2]));
    let mut data = Vec::with_capacity(c * out.iter().product::<usize>());
    for ch in 0..c {
        for &z in &mz {
            for &y in &my {
                let row = ((ch * d + z) * h + y) * w;
                data.extend(mx.iter().map(|&x| src[row + x]));
            }
        }
    }
    Volume::from_f32([c, out[0], out[1], out[2]], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub prob: Volume,
    pub seg: Volume,
}

/// Binary mask `prob >= threshold`.
pub fn threshold_mask(prob: &Volume, threshold: f64) -> Result<Volume> {
    let mask: Vec<bool> = prob.to_f32_vec().iter().map(|&p| f64::from(p) >= threshold).collect();
    Volume::from_mask(prob.dims(), &mask)
}

/// SR probabilities for a `(1, D, H, W)` volume following `plan`.
pub fn predict_volume<T: Real>(net: &Network<T>, volume: &Volume, plan: &TilePlan) -> Result<Volume> {
    if volume.channels() != 1 || volume.spatial() != plan.volume {
        return Err(Error::shape(format!("volume {:?} does not match tile plan for {:?}", volume.dims(), plan.volume)));
    }
    let padded = pad_reflect(volume, plan.pad_lo, plan.pad_hi)?;
    let [d, h, w] = plan.volume.map(|n| 2 * n);
    let mut prob = vec![0f32; d * h * w];
    for tile in &plan.tiles {
        let out = net.forward(&padded.crop(&tile.input)?)?;
        let [_, _, th, tw] = out.dims();
        let p = out.as_f32().expect("network output is float");
        let (o, e, so) = (tile.output.origin, tile.output.extent, tile.source_origin);
        for z in 0..e[0] {
            for y in 0..e[1] {
                let src = ((so[0] + z) * th + so[1] + y) * tw + so[2];
                let dst = ((o[0] + z) * h + o[1] + y) * w + o[2];
                prob[dst..dst + e[2]].copy_from_slice(&p[src..src + e[2]]);
            }
        }
    }
    Volume::from_f32([1, d, h, w], prob)
}

/// Segments a full volume at twice its resolution with `s`-sized tiles.
pub fn segment_volume<T: Real>(net: &Network<T>, volume: &Volume, threshold: f64, s: usize) -> Result<Segmentation> {
    segment_volume_with(net, volume, threshold, s, TileMode::Abutting)
}

pub fn segment_volume_with<T: Real>(net: &Network<T>, volume: &Volume, threshold: f64, s: usize, mode: TileMode) -> Result<Segmentation> {
    let plan = tile_plan_with(volume.spatial(), s, mode)?;
    let prob = predict_volume(net, volume, &plan)?;
    let seg = threshold_mask(&prob, threshold)?;
    Ok(Segmentation { prob, seg })
}
