//! Capsule rendering of root systems at twice the grid resolution.

use super::root::{Point, RootSystem};
use crate::volume::Volume;

/// Squared distance from `p` to segment `ab` and the clamped segment parameter.
pub(crate) fn point_segment(p: Point, a: Point, b: Point) -> (f64, f64) {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
    (d2, t)
}

/// Marks SR voxels whose centers lie inside one tapered capsule.
fn fill_capsule(occ: &mut [u8], n: usize, a: Point, b: Point, ra: f64, rb: f64) {
    let rmax = ra.max(rb);
    // SR voxel j has its center at (j + 0.5) / 2 in 1x units.
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for ax in 0..3 {
        let min = a[ax].min(b[ax]) - rmax;
        let max = a[ax].max(b[ax]) + rmax;
        let l = (2.0 * min - 0.5).floor().max(0.0);
        let h = (2.0 * max - 0.5).ceil().min(n as f64 - 1.0);
        if h < l || h < 0.0 {
            return;
        }
        lo[ax] = l as usize;
        hi[ax] = h as usize;
    }
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let p = [(z as f64 + 0.5) / 2.0, (y as f64 + 0.5) / 2.0, (x as f64 + 0.5) / 2.0];
                let (d2, t) = point_segment(p, a, b);
                let r = ra + t * (rb - ra);
                if d2 <= r * r {
                    occ[(z * n + y) * n + x] = 1;
                }
            }
        }
    }
}

/// Renders `root` on an `s`-voxel cube: binary occupancy at `2s` and the 1x
/// occupancy fraction (mean of the 8 SR children of each voxel).
pub fn rasterize(root: &RootSystem, s: usize) -> (Volume, Volume) {
    let n = 2 * s;
    let mut occ = vec![0u8; n * n * n];
    for b in &root.branches {
        if b.vertices.len() == 1 {
            fill_capsule(&mut occ, n, b.vertices[0], b.vertices[0], b.radii[0], b.radii[0]);
        }
        for i in 1..b.vertices.len() {
            fill_capsule(&mut occ, n, b.vertices[i - 1], b.vertices[i], b.radii[i - 1], b.radii[i]);
        }
    }
    let frac = downsample_fraction(&occ, s);
    (
        Volume::from_u8([1, n, n, n], occ).expect("dims match"),
        Volume::from_f32([1, s, s, s], frac).expect("dims match"),
    )
}

/// Mean of the 8 children of every coarse voxel of an `(2s)^3` binary grid.
pub(crate) fn downsample_fraction(occ: &[u8], s: usize) -> Vec<f32> {
    let n = 2 * s;
    let mut frac = vec![0f32; s * s * s];
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let mut count = 0u32;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            count += u32::from(occ[((2 * z + dz) * n + 2 * y + dy) * n + 2 * x + dx]);
                        }
                    }
                }
                frac[(z * s + y) * s + x] = count as f32 / 8.0;
            }
        }
    }
    frac
}
