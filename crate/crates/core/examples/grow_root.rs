//! Grows one procedural root system, rasterizes it at twice the grid
//! resolution and exports the occupancy as image slices.

use rootseg::synth::{generate_root, rasterize, RootGenParams};
use rootseg::{Axis, Normalization};

fn main() -> rootseg::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let root = generate_root(&RootGenParams { seed, ..RootGenParams::default() })?;
    println!("{} branches, {} laterals, total length {:.1} voxels", root.branches.len(), root.lateral_count(), root.total_length());
    for (i, b) in root.branches.iter().enumerate().take(8) {
        println!(
            "  branch {i}: depth {} length {:.1} radius {:.2} -> {:.2}",
            b.depth,
            b.length(),
            b.radii[0],
            b.radii[b.radii.len() - 1]
        );
    }
    let s = 64;
    let (occ_sr, occ_frac) = rasterize(&root.translated([0.5, s as f64 / 2.0, s as f64 / 2.0]), s);
    let voxels = occ_sr.to_mask().iter().filter(|&&b| b).count();
    println!("{voxels} SR voxels occupied on a {}^3 grid", 2 * s);
    let dir = std::env::temp_dir().join("rootseg-root");
    std::fs::create_dir_all(&dir).map_err(|e| rootseg::Error::Io { path: dir.clone(), source: e })?;
    occ_frac.export_slice(Axis::W, s / 2, dir.join("fraction_x.pgm"), Normalization::Fixed(0.0, 1.0))?;
    occ_sr.export_slice(Axis::W, s, dir.join("occupancy_x.pgm"), Normalization::Fixed(0.0, 1.0))?;
    println!("slices in {}", dir.display());
    Ok(())
}
