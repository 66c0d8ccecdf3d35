//! Writes every slice of an RVOL volume (or of a generated sample) as PGM.

use rootseg::synth::{generate_sample, DatasetConfig, Split};
use rootseg::{Axis, Normalization, Volume};

fn main() -> rootseg::Result<()> {
    let volume = match std::env::args().nth(1) {
        Some(path) => Volume::read_rvol(path)?,
        None => generate_sample(&DatasetConfig { volume_size: 32, ..DatasetConfig::default() }, Split::Train, 0)?.0.mri,
    };
    let dir = std::env::temp_dir().join("rootseg-slices");
    std::fs::create_dir_all(&dir).map_err(|e| rootseg::Error::Io { path: dir.clone(), source: e })?;
    let depth = volume.spatial()[0];
    for z in 0..depth {
        volume.export_slice(Axis::D, z, dir.join(format!("slice_{z:04}.pgm")), Normalization::MinMax)?;
    }
    println!("{depth} slices of {:?} in {}", volume.dims(), dir.display());
    Ok(())
}
