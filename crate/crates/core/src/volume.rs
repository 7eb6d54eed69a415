//! Intensity volumes, binary masks and the VOL1 container.
//!
//! All grids use a z-major layout with x varying fastest:
//! `index = (z * height + y) * width + x`.
//!
//! VOL1 layout (all integers little-endian):
//!
//! ```text
//! "VOL1" | dtype u8 (1 = f32, 2 = u8) | D u32 | H u32 | W u32 | payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const VOL1_MAGIC: &[u8; 4] = b"VOL1";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U8: u8 = 2;
const HEADER_LEN: usize = 4 + 1 + 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(depth: usize, height: usize, width: usize) -> Result<Self> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "every axis needs at least one voxel, got {depth}x{height}x{width}"
            )));
        }
        Ok(Self {
            depth,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.width;
        let y = (index / self.width) % self.height;
        let z = index / (self.width * self.height);
        [x, y, z]
    }

    /// Largest L1 distance between two voxels of the grid.
    pub fn max_l1_extent(&self) -> usize {
        (self.depth - 1) + (self.height - 1) + (self.width - 1)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueUnit {
    Raw,
    /// Every value lies in `[0, 1]`.
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f32>,
    unit: ValueUnit,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>, unit: ValueUnit) -> Result<Self> {
        let dims = Dims::new(dims.depth, dims.height, dims.width)?;
        if data.len() != dims.len() {
            return Err(Error::Length {
                expected: dims.len(),
                found: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite intensity {bad}")));
        }
        if unit == ValueUnit::Normalized {
            if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Value(format!(
                    "normalized volume holds {bad}, outside [0, 1]"
                )));
            }
        }
        Ok(Self { dims, data, unit })
    }

    pub fn filled(dims: Dims, value: f32, unit: ValueUnit) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()], unit)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn unit(&self) -> ValueUnit {
        self.unit
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    dims: Dims,
    data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        let dims = Dims::new(dims.depth, dims.height, dims.width)?;
        if data.len() != dims.len() {
            return Err(Error::Length {
                expected: dims.len(),
                found: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Value(format!("mask label {bad} is not 0 or 1")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![0; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }
}

/// Sparse coordinate view of the foreground of a mask, as `(x, y, z)` triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelSet {
    coords: Vec<[usize; 3]>,
    bounds: Dims,
}

impl VoxelSet {
    /// Builds a set from arbitrary coordinates; duplicates are removed and the
    /// result is stored in z-major order.
    pub fn from_coords(bounds: Dims, coords: impl IntoIterator<Item = [usize; 3]>) -> Result<Self> {
        let bounds = Dims::new(bounds.depth, bounds.height, bounds.width)?;
        let mut coords: Vec<[usize; 3]> = coords.into_iter().collect();
        if let Some(c) = coords
            .iter()
            .find(|c| c[0] >= bounds.width || c[1] >= bounds.height || c[2] >= bounds.depth)
        {
            return Err(Error::Dimension(format!(
                "voxel ({}, {}, {}) lies outside {bounds}",
                c[0], c[1], c[2]
            )));
        }
        coords.sort_by_key(|c| bounds.index(c[0], c[1], c[2]));
        coords.dedup();
        Ok(Self { coords, bounds })
    }

    pub fn coords(&self) -> &[[usize; 3]] {
        &self.coords
    }

    pub fn bounds(&self) -> Dims {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn to_mask(&self) -> MaskVolume {
        let mut data = vec![0u8; self.bounds.len()];
        for c in &self.coords {
            data[self.bounds.index(c[0], c[1], c[2])] = 1;
        }
        MaskVolume {
            dims: self.bounds,
            data,
        }
    }
}

pub fn to_voxel_set(mask: &MaskVolume) -> VoxelSet {
    let dims = mask.dims;
    let coords = mask
        .data
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(i, _)| dims.coords(i))
        .collect();
    VoxelSet {
        coords,
        bounds: dims,
    }
}

fn encode_header(dtype: u8, dims: Dims, payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len);
    out.extend_from_slice(VOL1_MAGIC);
    out.push(dtype);
    for n in [dims.depth, dims.height, dims.width] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = encode_header(DTYPE_F32, v.dims, v.data.len() * 4);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_mask(m: &MaskVolume) -> Vec<u8> {
    let mut out = encode_header(DTYPE_U8, m.dims, m.data.len());
    out.extend_from_slice(&m.data);
    out
}

fn decode_header(bytes: &[u8], want_dtype: u8) -> Result<(Dims, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != VOL1_MAGIC {
        return Err(Error::Format("missing VOL1 magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let dtype = bytes[4];
    if dtype != want_dtype {
        return Err(Error::Format(format!(
            "dtype code {dtype}, expected {want_dtype}"
        )));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let dims = Dims::new(read_u32(5), read_u32(9), read_u32(13))?;
    Ok((dims, &bytes[HEADER_LEN..]))
}

/// Decodes a VOL1 f32 payload. The value tag is not stored on disk; pass the
/// tag the caller expects and it is validated.
pub fn decode_volume(bytes: &[u8], unit: ValueUnit) -> Result<Volume> {
    let (dims, payload) = decode_header(bytes, DTYPE_F32)?;
    if payload.len() != dims.len() * 4 {
        return Err(Error::Length {
            expected: dims.len(),
            found: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims, data, unit)
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskVolume> {
    let (dims, payload) = decode_header(bytes, DTYPE_U8)?;
    if payload.len() != dims.len() {
        return Err(Error::Length {
            expected: dims.len(),
            found: payload.len(),
        });
    }
    MaskVolume::new(dims, payload.to_vec())
}

/// Loads a volume tagged as raw intensity.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    load_volume_as(path, ValueUnit::Raw)
}

pub fn load_volume_as(path: impl AsRef<Path>, unit: ValueUnit) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, unit)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes)
}

pub fn save_mask(m: &MaskVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(m)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(d: usize, h: usize, w: usize) -> Dims {
        Dims::new(d, h, w).unwrap()
    }

    #[test]
    fn minimal_volume_payload_is_one_float() {
        let v = Volume::new(dims(1, 1, 1), vec![0.5], ValueUnit::Raw).unwrap();
        let bytes = encode_volume(&v);
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert_eq!(&bytes[..4], b"VOL1");
        assert_eq!(bytes[4], DTYPE_F32);
        assert_eq!(&bytes[HEADER_LEN..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = encode_volume(&Volume::filled(dims(2, 2, 2), 1.0, ValueUnit::Raw).unwrap());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_volume(&bytes, ValueUnit::Raw), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let bytes = encode_volume(&Volume::filled(dims(2, 3, 5), 1.0, ValueUnit::Raw).unwrap());
        let err = decode_volume(&bytes[..bytes.len() - 4], ValueUnit::Raw).unwrap_err();
        assert!(matches!(err, Error::Length { expected: 30, found: 29 }));
        assert_eq!(decode_volume(&bytes, ValueUnit::Raw).unwrap().data().len(), 30);
    }

    #[test]
    fn zero_dim_is_rejected() {
        let mut bytes = encode_volume(&Volume::filled(dims(1, 1, 1), 1.0, ValueUnit::Raw).unwrap());
        bytes[5..9].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_volume(&bytes, ValueUnit::Raw), Err(Error::Dimension(_))));
        assert!(Dims::new(0, 1, 1).is_err());
    }

    #[test]
    fn normalized_out_of_range_rejected_before_write() {
        let err = Volume::new(dims(1, 1, 1), vec![1.5], ValueUnit::Normalized).unwrap_err();
        assert!(matches!(err, Error::Value(_)));
    }

    #[test]
    fn mask_payload_byte_two_is_a_value_error() {
        let mut bytes = encode_mask(&MaskVolume::zeros(dims(2, 2, 2)).unwrap());
        bytes[HEADER_LEN + 3] = 2;
        assert!(matches!(decode_mask(&bytes), Err(Error::Value(_))));
    }

    #[test]
    fn empty_mask_loads_with_zero_voxels() {
        let m = MaskVolume::zeros(dims(2, 2, 2)).unwrap();
        let back = decode_mask(&encode_mask(&m)).unwrap();
        assert_eq!(back.data(), &[0u8; 8]);
        assert!(to_voxel_set(&back).is_empty());
    }

    #[test]
    fn singleton_voxel_set() {
        let d = dims(4, 4, 4);
        let mut data = vec![0u8; d.len()];
        data[d.index(1, 2, 3)] = 1;
        let set = to_voxel_set(&MaskVolume::new(d, data).unwrap());
        assert_eq!(set.coords(), &[[1, 2, 3]]);
    }

    #[test]
    fn voxel_set_orders_z_major_and_dedups() {
        let d = dims(2, 2, 2);
        let set = VoxelSet::from_coords(d, [[1, 1, 1], [0, 0, 1], [1, 0, 0], [1, 0, 0]]).unwrap();
        assert_eq!(set.coords(), &[[1, 0, 0], [0, 0, 1], [1, 1, 1]]);
        assert_eq!(to_voxel_set(&set.to_mask()), set);
        assert!(VoxelSet::from_coords(d, [[2, 0, 0]]).is_err());
    }
}
