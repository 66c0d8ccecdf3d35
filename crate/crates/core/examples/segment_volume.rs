//! Segments a whole volume at twice its resolution by tiling the network.
//!
//! Pass a checkpoint to use trained weights; otherwise a random network is
//! used, which is enough to see the tiling and output geometry.

use rootseg::infer::{segment_volume, tile_plan};
use rootseg::net::{Checkpoint, NetConfig, Network};
use rootseg::synth::{generate_sample, DatasetConfig, Split};

fn main() -> rootseg::Result<()> {
    let net = match std::env::args().nth(1) {
        Some(path) => Checkpoint::load(path)?.network,
        None => Network::build(NetConfig::with_base(4), 0)?,
    };
    let gen = DatasetConfig { volume_size: 40, ..DatasetConfig::default() };
    let (sample, _) = generate_sample(&gen, Split::Val, 0)?;
    let tile = 60;
    let plan = tile_plan([40, 40, 40], tile)?;
    println!("{} tiles of {tile}^3, padding {:?} / {:?}", plan.tiles.len(), plan.pad_lo, plan.pad_hi);
    let seg = segment_volume(&net, &sample.mri, 0.5, tile)?;
    let on = seg.seg.to_mask().iter().filter(|&&b| b).count();
    println!("input {:?} -> probabilities {:?}; {on} voxels above 0.5", sample.mri.dims(), seg.prob.dims());
    let out = std::env::temp_dir().join("rootseg-seg");
    std::fs::create_dir_all(&out).map_err(|e| rootseg::Error::Io { path: out.clone(), source: e })?;
    seg.prob.write_rvol(out.join("prob.rvol"))?;
    seg.seg.write_rvol(out.join("seg.rvol"))?;
    println!("wrote {}", out.display());
    Ok(())
}
