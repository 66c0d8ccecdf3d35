//! Dense voxel grids and the RVOL container format.
//!
//! A [`Volume`] stores `channels x depth x height x width` scalars in
//! channel-major, then depth-row-column order. Two element types are
//! supported: `u8` (masks) and `f32` (intensities, probabilities).
//!
//! RVOL layout, all integers little-endian:
//!
//! ```text
//! 0..6   magic "RVOL1\0"
//! 6      dtype code (0 = u8, 1 = f32)
//! 7      ndim (always 4)
//! 8..24  u32 dims C, D, H, W
//! 24..   payload, no padding, no trailing bytes
//! ```

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, FormatError, Result};
use crate::io::{read_file, write_atomic, Cursor};

pub const RVOL_MAGIC: &[u8; 6] = b"RVOL1\0";
const HEADER_LEN: usize = 24;
const DIM_NAMES: [&str; 4] = ["C", "D", "H", "W"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::U8 => 0,
            Dtype::F32 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::U8),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl VoxelData {
    fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }
}

/// Dense `(C, D, H, W)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 4],
    data: VoxelData,
}

/// Axis-aligned box in spatial `(d, h, w)` voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VoxelBox {
    pub origin: [usize; 3],
    pub extent: [usize; 3],
}

impl VoxelBox {
    pub fn new(origin: [usize; 3], extent: [usize; 3]) -> Self {
        VoxelBox { origin, extent }
    }

    pub fn end(&self) -> [usize; 3] {
        [
            self.origin[0] + self.extent[0],
            self.origin[1] + self.extent[1],
            self.origin[2] + self.extent[2],
        ]
    }

    pub fn voxel_count(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn fits_in(&self, spatial: [usize; 3]) -> bool {
        self.extent.iter().all(|&e| e >= 1) && self.end().iter().zip(spatial).all(|(&e, s)| e <= s)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.extent[a])
    }
}

fn check_dims(dims: [usize; 4], len: usize) -> Result<()> {
    if let Some(a) = dims.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!("volume dim {} is zero", DIM_NAMES[a])));
    }
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match n {
        Some(n) if n == len => Ok(()),
        Some(n) => Err(Error::shape(format!("data length {len} does not match dims {dims:?} ({n})"))),
        None => Err(Error::shape(format!("dims {dims:?} overflow"))),
    }
}

impl Volume {
    pub fn from_f32(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        check_dims(dims, data.len())?;
        Ok(Volume { dims, data: VoxelData::F32(data) })
    }

    pub fn from_u8(dims: [usize; 4], data: Vec<u8>) -> Result<Self> {
        check_dims(dims, data.len())?;
        Ok(Volume { dims, data: VoxelData::U8(data) })
    }

    /// Binary mask volume from booleans (stored as u8 0/1).
    pub fn from_mask(dims: [usize; 4], mask: &[bool]) -> Result<Self> {
        Self::from_u8(dims, mask.iter().map(|&b| b as u8).collect())
    }

    pub fn zeros(dims: [usize; 4], dtype: Dtype) -> Self {
        let n: usize = dims.iter().product();
        assert!(n > 0, "volume dims must be non-zero");
        let data = match dtype {
            Dtype::U8 => VoxelData::U8(vec![0; n]),
            Dtype::F32 => VoxelData::F32(vec![0.0; n]),
        };
        Volume { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.dims[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.dims[1], self.dims[2], self.dims[3]]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            VoxelData::U8(_) => Dtype::U8,
            VoxelData::F32(_) => Dtype::F32,
        }
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            VoxelData::F32(v) => Some(v),
            VoxelData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            VoxelData::U8(v) => Some(v),
            VoxelData::F32(_) => None,
        }
    }

    pub fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.data {
            VoxelData::F32(v) => Some(v),
            VoxelData::U8(_) => None,
        }
    }

    pub fn as_u8_mut(&mut self) -> Option<&mut [u8]> {
        match &mut self.data {
            VoxelData::U8(v) => Some(v),
            VoxelData::F32(_) => None,
        }
    }

    /// Element `i` widened to f64 regardless of dtype.
    pub fn get(&self, i: usize) -> f64 {
        match &self.data {
            VoxelData::U8(v) => v[i] as f64,
            VoxelData::F32(v) => v[i] as f64,
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            VoxelData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::F32(v) => v.clone(),
        }
    }

    /// Non-zero voxels as booleans (any channel layout, flat order).
    pub fn to_mask(&self) -> Vec<bool> {
        match &self.data {
            VoxelData::U8(v) => v.iter().map(|&x| x != 0).collect(),
            VoxelData::F32(v) => v.iter().map(|&x| x != 0.0).collect(),
        }
    }

    pub fn index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((c * self.dims[1] + d) * self.dims[2] + h) * self.dims[3] + w
    }

    /// Spatial sub-box, all channels.
    pub fn crop(&self, b: &VoxelBox) -> Result<Volume> {
        if !b.fits_in(self.spatial()) {
            return Err(Error::shape(format!(
                "crop box {:?}+{:?} exceeds volume {:?}",
                b.origin,
                b.extent,
                self.spatial()
            )));
        }
        let [c, ..] = self.dims;
        let [ed, eh, ew] = b.extent;
        let dims = [c, ed, eh, ew];
        fn gather<T: Copy>(src: &[T], v: &Volume, b: &VoxelBox, c: usize) -> Vec<T> {
            let [ed, eh, ew] = b.extent;
            let mut out = Vec::with_capacity(c * ed * eh * ew);
            for ch in 0..c {
                for d in 0..ed {
                    for h in 0..eh {
                        let start = v.index(ch, b.origin[0] + d, b.origin[1] + h, b.origin[2]);
                        out.extend_from_slice(&src[start..start + ew]);
                    }
                }
            }
            out
        }
        let data = match &self.data {
            VoxelData::U8(src) => VoxelData::U8(gather(src, self, b, c)),
            VoxelData::F32(src) => VoxelData::F32(gather(src, self, b, c)),
        };
        Ok(Volume { dims, data })
    }

    /// Spatial center region of size `extent`; margins must be even per axis.
    pub fn center_crop(&self, extent: [usize; 3]) -> Result<Volume> {
        let origin = center_origin(self.spatial(), extent)?;
        self.crop(&VoxelBox::new(origin, extent))
    }

    pub fn read_rvol(path: impl AsRef<Path>) -> Result<Volume> {
        let bytes = read_file(path.as_ref())?;
        Ok(Self::decode(&bytes)?)
    }

    pub fn write_rvol(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * self.dtype().size());
        out.extend_from_slice(RVOL_MAGIC);
        out.push(self.dtype().code());
        out.push(4);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            VoxelData::U8(v) => out.extend_from_slice(v),
            VoxelData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Volume, FormatError> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.take(6, "magic")?;
        if magic != RVOL_MAGIC {
            return Err(FormatError::BadMagic { expected: "RVOL1\\0", found: magic.to_vec() });
        }
        let code = cur.u8("dtype")?;
        let dtype = Dtype::from_code(code).ok_or(FormatError::UnknownDtype(code))?;
        let ndim = cur.u8("ndim")?;
        if ndim != 4 {
            return Err(FormatError::BadNdim { found: ndim, expected: 4 });
        }
        let mut dims = [0usize; 4];
        let mut count: u64 = 1;
        for (a, name) in DIM_NAMES.iter().enumerate() {
            let d = cur.u32(name)?;
            if d == 0 {
                return Err(FormatError::ZeroDim { field: name });
            }
            count = count
                .checked_mul(d as u64)
                .filter(|&n| n.checked_mul(dtype.size() as u64).is_some_and(|b| b <= usize::MAX as u64))
                .ok_or(FormatError::DimOverflow { field: name, value: d as u64 })?;
            dims[a] = d as usize;
        }
        let n = count as usize;
        let payload = cur.take(n * dtype.size(), "payload")?;
        if cur.remaining() > 0 {
            return Err(FormatError::TrailingBytes(cur.remaining()));
        }
        let data = match dtype {
            Dtype::U8 => VoxelData::U8(payload.to_vec()),
            Dtype::F32 => VoxelData::F32(
                payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
            ),
        };
        Ok(Volume { dims, data })
    }

    /// Writes one spatial slice as an 8-bit binary PGM.
    pub fn export_slice(
        &self,
        axis: Axis,
        index: usize,
        path: impl AsRef<Path>,
        normalization: Normalization,
    ) -> Result<()> {
        let (w, h, pixels) = self.slice_pixels(axis, index, normalization)?;
        write_atomic(path.as_ref(), &encode_pgm(w, h, &pixels))
    }

    /// Slice as `(width, height, row-major gray pixels)`.
    pub fn slice_pixels(&self, axis: Axis, index: usize, normalization: Normalization) -> Result<(usize, usize, Vec<u8>)> {
        if self.channels() != 1 {
            return Err(Error::shape(format!("slice export needs a single-channel volume, got {} channels", self.channels())));
        }
        let sp = self.spatial();
        let a = axis.index();
        if index >= sp[a] {
            return Err(Error::shape(format!("slice index {index} out of range for axis {axis} (extent {})", sp[a])));
        }
        let (lo, hi) = match normalization {
            Normalization::MinMax => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for i in 0..self.len() {
                    let v = self.get(i);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo, hi)
            }
            Normalization::Fixed(lo, hi) => (lo, hi),
        };
        let (rows, cols) = axis.slice_shape(sp);
        let mut pixels = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let p = axis.slice_to_spatial(index, r, c);
                let v = self.get(self.index(0, p[0], p[1], p[2]));
                pixels.push(normalize_u8(v, lo, hi));
            }
        }
        Ok((cols, rows, pixels))
    }
}

fn normalize_u8(v: f64, lo: f64, hi: f64) -> u8 {
    if !(hi > lo) {
        return 0;
    }
    ((v - lo) * 255.0 / (hi - lo)).floor().clamp(0.0, 255.0) as u8
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Origin of a centered box; errors when the box is too large or a margin is odd.
pub fn center_origin(dims: [usize; 3], extent: [usize; 3]) -> Result<[usize; 3]> {
    let mut origin = [0; 3];
    for a in 0..3 {
        if extent[a] == 0 || extent[a] > dims[a] {
            return Err(Error::shape(format!(
                "extent too large: crop {:?} from {:?}",
                extent, dims
            )));
        }
        let margin = dims[a] - extent[a];
        if margin % 2 != 0 {
            return Err(Error::shape(format!(
                "odd margin on axis {a}: {} -> {}",
                dims[a], extent[a]
            )));
        }
        origin[a] = margin / 2;
    }
    Ok(origin)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    MinMax,
    Fixed(f64, f64),
}

/// Spatial axis. `z`, `y`, `x` are accepted as aliases for `d`, `h`, `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    D,
    H,
    W,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::D => 0,
            Axis::H => 1,
            Axis::W => 2,
        }
    }

    /// `(rows, cols)` of a slice orthogonal to this axis.
    pub fn slice_shape(self, sp: [usize; 3]) -> (usize, usize) {
        match self {
            Axis::D => (sp[1], sp[2]),
            Axis::H => (sp[0], sp[2]),
            Axis::W => (sp[0], sp[1]),
        }
    }

    pub fn slice_to_spatial(self, index: usize, r: usize, c: usize) -> [usize; 3] {
        match self {
            Axis::D => [index, r, c],
            Axis::H => [r, index, c],
            Axis::W => [r, c, index],
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::D => "d",
            Axis::H => "h",
            Axis::W => "w",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d" | "z" => Ok(Axis::D),
            "h" | "y" => Ok(Axis::H),
            "w" | "x" => Ok(Axis::W),
            other => Err(Error::config(format!("unknown axis {other:?} (expected d|h|w or z|y|x)"))),
        }
    }
}
