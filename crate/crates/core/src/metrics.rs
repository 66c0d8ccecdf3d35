//! Exact Euclidean distance transform and distance-tolerant precision/recall/F1.
//!
//! A predicted voxel counts as correct at tolerance `d` when some ground-truth
//! voxel lies within Euclidean distance `d` of it; recall is the mirror
//! statement. Distances come from an exact squared EDT (separable lower
//! envelope of parabolas), so integral tolerances compare integers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{create_dir_all, write_atomic};
use crate::volume::{encode_ppm, Axis, Volume};

/// Squared distance of voxels with no feature anywhere in the grid.
pub const UNREACHABLE: u64 = u64::MAX;

/// Per-voxel squared Euclidean distance to the nearest feature voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceField {
    pub dims: [usize; 3],
    pub data: Vec<u64>,
}

impl DistanceField {
    pub fn within(&self, i: usize, tolerance: f64) -> bool {
        within_tolerance(self.data[i], tolerance)
    }
}

/// Whether squared distance `sq` is at most `tolerance`; exact for integral tolerances.
pub fn within_tolerance(sq: u64, tolerance: f64) -> bool {
    if sq == UNREACHABLE {
        return false;
    }
    if tolerance.fract() == 0.0 && tolerance < 4.0e9 {
        let t = tolerance as u64;
        sq <= t * t
    } else {
        (sq as f64) <= tolerance * tolerance
    }
}

/// One-dimensional squared distance transform of sampled function `f`
/// (`UNREACHABLE` entries are absent sites).
fn dt1d(f: &[u64], out: &mut [u64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q] == UNREACHABLE {
            continue;
        }
        let fq = f[q] as f64 + (q * q) as f64;
        loop {
            let Some(&p) = v.last() else { break };
            let s = (fq - (f[p] as f64 + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        }
    }
    if v.is_empty() {
        out.fill(UNREACHABLE);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q.abs_diff(p) as u64;
        *o = dq * dq + f[p];
    }
}

/// Exact squared EDT of a flat `(D, H, W)` boolean mask.
pub fn edt_squared_mask(mask: &[bool], dims: [usize; 3]) -> DistanceField {
    let [d, h, w] = dims;
    assert_eq!(mask.len(), d * h * w, "mask length must match dims");
    let mut data: Vec<u64> = mask.iter().map(|&m| if m { 0 } else { UNREACHABLE }).collect();
    let longest = d.max(h).max(w);
    let mut line = vec![0u64; longest];
    let mut out = vec![0u64; longest];
    let (mut v, mut z) = (Vec::with_capacity(longest), Vec::with_capacity(longest));
    let axes: [(usize, usize, [usize; 2], [usize; 2]); 3] = [
        // (length, stride, outer extents, outer strides)
        (w, 1, [d, h], [h * w, w]),
        (h, w, [d, w], [h * w, 1]),
        (d, h * w, [h, w], [w, 1]),
    ];
    for (len, stride, outer, ostride) in axes {
        for a in 0..outer[0] {
            for b in 0..outer[1] {
                let base = a * ostride[0] + b * ostride[1];
                for i in 0..len {
                    line[i] = data[base + i * stride];
                }
                dt1d(&line[..len], &mut out[..len], &mut v, &mut z);
                for i in 0..len {
                    data[base + i * stride] = out[i];
                }
            }
        }
    }
    DistanceField { dims, data }
}

fn single_channel_mask(v: &Volume, what: &str) -> Result<Vec<bool>> {
    if v.channels() != 1 {
        return Err(Error::shape(format!("{what} must have one channel, got {}", v.channels())));
    }
    Ok(v.to_mask())
}

/// Squared EDT to the non-zero voxels of a single-channel volume.
pub fn edt_squared(mask: &Volume) -> Result<DistanceField> {
    Ok(edt_squared_mask(&single_channel_mask(mask, "edt input")?, mask.spatial()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceEntry {
    pub tolerance: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pred_count: u64,
    pub gt_count: u64,
    /// Predicted voxels within tolerance of the ground truth.
    pub pred_matched: u64,
    /// Ground-truth voxels within tolerance of the prediction.
    pub gt_matched: u64,
}

impl ToleranceEntry {
    /// Builds scores from raw counts. Both masks empty counts as a perfect
    /// answer; exactly one empty scores zero.
    pub fn from_counts(tolerance: f64, pred_count: u64, gt_count: u64, pred_matched: u64, gt_matched: u64) -> Self {
        let (precision, recall) = match (pred_count, gt_count) {
            (0, 0) => (1.0, 1.0),
            (0, _) | (_, 0) => (0.0, 0.0),
            (p, g) => (pred_matched as f64 / p as f64, gt_matched as f64 / g as f64),
        };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        ToleranceEntry { tolerance, precision, recall, f1, pred_count, gt_count, pred_matched, gt_matched }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceReport {
    pub entries: Vec<ToleranceEntry>,
    pub dontcare_excluded: bool,
}

impl ToleranceReport {
    pub fn at(&self, tolerance: f64) -> Option<&ToleranceEntry> {
        self.entries.iter().find(|e| e.tolerance == tolerance)
    }

    /// Pools raw counts across reports with identical tolerance lists.
    pub fn micro_average(reports: &[ToleranceReport]) -> Result<ToleranceReport> {
        let Some(first) = reports.first() else {
            return Err(Error::shape("micro-average of zero reports"));
        };
        let mut entries = Vec::with_capacity(first.entries.len());
        for (i, e) in first.entries.iter().enumerate() {
            let (mut p, mut g, mut pm, mut gm) = (0, 0, 0, 0);
            for r in reports {
                let x = r.entries.get(i).filter(|x| x.tolerance == e.tolerance).ok_or_else(|| Error::shape("reports use different tolerances"))?;
                p += x.pred_count;
                g += x.gt_count;
                pm += x.pred_matched;
                gm += x.gt_matched;
            }
            entries.push(ToleranceEntry::from_counts(e.tolerance, p, g, pm, gm));
        }
        Ok(ToleranceReport { entries, dontcare_excluded: first.dontcare_excluded })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tolerance,precision,recall,f1,pred_count,gt_count\n");
        for e in &self.entries {
            writeln!(s, "{}", csv_row(e)).expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

pub(crate) fn csv_row(e: &ToleranceEntry) -> String {
    format!("{:.6},{:.6},{:.6},{:.6},{},{}", e.tolerance, e.precision, e.recall, e.f1, e.pred_count, e.gt_count)
}

fn check_pair(pred: &Volume, gt: &Volume, dontcare: Option<&Volume>) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("dim mismatch: prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    if let Some(dc) = dontcare {
        if dc.dims() != gt.dims() {
            return Err(Error::shape(format!("dim mismatch: don't-care {:?} vs ground truth {:?}", dc.dims(), gt.dims())));
        }
    }
    Ok(())
}

/// Masks with don't-care voxels removed from both sides.
fn cared_masks(pred: &Volume, gt: &Volume, dontcare: Option<&Volume>) -> Result<(Vec<bool>, Vec<bool>)> {
    check_pair(pred, gt, dontcare)?;
    let mut p = single_channel_mask(pred, "prediction")?;
    let mut g = single_channel_mask(gt, "ground truth")?;
    if let Some(dc) = dontcare {
        for (i, flagged) in dc.to_mask().into_iter().enumerate() {
            if flagged {
                p[i] = false;
                g[i] = false;
            }
        }
    }
    Ok((p, g))
}

pub fn distance_tolerant_prf(pred: &Volume, gt: &Volume, tolerances: &[f64], dontcare: Option<&Volume>) -> Result<ToleranceReport> {
    if let Some(t) = tolerances.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
        return Err(Error::config(format!("tolerance must be a finite value >= 0, got {t}")));
    }
    let (p, g) = cared_masks(pred, gt, dontcare)?;
    let dims = gt.spatial();
    let to_gt = edt_squared_mask(&g, dims);
    let to_pred = edt_squared_mask(&p, dims);
    let pred_count = p.iter().filter(|&&x| x).count() as u64;
    let gt_count = g.iter().filter(|&&x| x).count() as u64;
    let pred_d: Vec<u64> = p.iter().zip(&to_gt.data).filter(|(&m, _)| m).map(|(_, &d)| d).collect();
    let gt_d: Vec<u64> = g.iter().zip(&to_pred.data).filter(|(&m, _)| m).map(|(_, &d)| d).collect();
    let entries = tolerances
        .iter()
        .map(|&t| {
            let pm = pred_d.iter().filter(|&&d| within_tolerance(d, t)).count() as u64;
            let gm = gt_d.iter().filter(|&&d| within_tolerance(d, t)).count() as u64;
            ToleranceEntry::from_counts(t, pred_count, gt_count, pm, gm)
        })
        .collect();
    Ok(ToleranceReport { entries, dontcare_excluded: dontcare.is_some() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Category {
    Background = 0,
    TruePositive = 1,
    FalsePositive = 2,
    FalseNegative = 3,
}

impl Category {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Category::Background => [0, 0, 0],
            Category::TruePositive => [0, 255, 0],
            Category::FalsePositive => [255, 0, 0],
            Category::FalseNegative => [0, 0, 255],
        }
    }
}

/// Per-voxel TP/FP/FN labelling at one tolerance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionVolume {
    pub dims: [usize; 3],
    pub data: Vec<Category>,
}

impl ConfusionVolume {
    pub fn count(&self, c: Category) -> usize {
        self.data.iter().filter(|&&x| x == c).count()
    }

    /// Writes one PPM per slice along `axis`; returns the file paths in order.
    pub fn export_slices(&self, axis: Axis, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let out_dir = out_dir.as_ref();
        create_dir_all(out_dir)?;
        let (rows, cols) = axis.slice_shape(self.dims);
        let [_, h, w] = self.dims;
        let mut paths = Vec::new();
        for idx in 0..self.dims[axis.index()] {
            let mut rgb = Vec::with_capacity(rows * cols * 3);
            for r in 0..rows {
                for c in 0..cols {
                    let [z, y, x] = axis.slice_to_spatial(idx, r, c);
                    rgb.extend_from_slice(&self.data[(z * h + y) * w + x].rgb());
                }
            }
            let path = out_dir.join(format!("slice_{idx:04}.ppm"));
            write_atomic(&path, &encode_ppm(cols, rows, &rgb))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

pub fn confusion_map(pred: &Volume, gt: &Volume, tolerance: f64, dontcare: Option<&Volume>) -> Result<ConfusionVolume> {
    let (p, g) = cared_masks(pred, gt, dontcare)?;
    let dims = gt.spatial();
    let to_gt = edt_squared_mask(&g, dims);
    let to_pred = edt_squared_mask(&p, dims);
    let data = (0..p.len())
        .map(|i| {
            if p[i] {
                if to_gt.within(i, tolerance) {
                    Category::TruePositive
                } else {
                    Category::FalsePositive
                }
            } else if g[i] && !to_pred.within(i, tolerance) {
                Category::FalseNegative
            } else {
                Category::Background
            }
        })
        .collect();
    Ok(ConfusionVolume { dims, data })
}
