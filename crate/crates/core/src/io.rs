//! Volume I/O: a NIfTI-1 reader and the internal container format.
//!
//! The container is one UTF-8 JSON header line terminated by `'\n'`
//! followed by raw little-endian voxels, x-fastest. The same container
//! stores masks (`"u8"`) and checkpoint tensors (`"f32"` without spacing or
//! affine).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{spacing_affine, Affine, Dims, Mask, Volume};

pub mod nifti {
    //! Field offsets of the 348-byte NIfTI-1 header.
    pub const HEADER_SIZE: usize = 348;
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;

    pub const DT_INT16: i16 = 4;
    pub const DT_FLOAT32: i16 = 16;
    pub const DT_FLOAT64: i16 = 64;
}

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn le_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Reads an uncompressed little-endian single-file NIfTI-1 volume.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes)
}

pub fn parse_nifti(b: &[u8]) -> Result<Volume> {
    use nifti::*;

    if b.len() >= 2 && b[0] == 0x1f && b[1] == 0x8b {
        return Err(Error::BadMagic("gzip-compressed input".into()));
    }
    if b.len() < 4 {
        return Err(Error::BadMagic("file too short".into()));
    }
    let sizeof_hdr = le_i32(b, SIZEOF_HDR);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::BadMagic(format!(
            "sizeof_hdr = {sizeof_hdr} (big-endian or NIfTI-2 input?)"
        )));
    }
    if b.len() < HEADER_SIZE {
        return Err(Error::TruncatedFile {
            expected: HEADER_SIZE,
            found: b.len(),
        });
    }
    let magic = &b[MAGIC..MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(Error::BadMagic(format!("magic {:?}", String::from_utf8_lossy(magic))));
    }

    let dim: Vec<i16> = (0..8).map(|i| le_i16(b, DIM + 2 * i)).collect();
    if dim[0] != 3 {
        return Err(Error::UnsupportedDim(dim[0]));
    }
    if dim[1..4].iter().any(|d| *d < 1) {
        return Err(Error::HeaderParse(format!("non-positive extent {:?}", &dim[1..4])));
    }
    let dims = Dims::new(dim[1] as usize, dim[2] as usize, dim[3] as usize);

    let datatype = le_i16(b, DATATYPE);
    let width = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };

    let pixdim: Vec<f32> = (0..8).map(|i| le_f32(b, PIXDIM + 4 * i)).collect();
    let spacing = [
        pixdim[1].abs() as f64,
        pixdim[2].abs() as f64,
        pixdim[3].abs() as f64,
    ];
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::InvalidSpacing(spacing));
    }

    let vox_offset = le_f32(b, VOX_OFFSET);
    let offset = if vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32 {
        vox_offset as usize
    } else {
        352
    };
    let n = dims.len();
    let expected = n * width;
    let found = b.len().saturating_sub(offset);
    if found < expected {
        return Err(Error::TruncatedFile { expected, found });
    }
    let payload = &b[offset..offset + expected];

    let slope = le_f32(b, SCL_SLOPE) as f64;
    let inter = le_f32(b, SCL_INTER) as f64;
    let scale = |raw: f64| -> f32 {
        if slope != 0.0 && slope.is_finite() {
            (slope * raw + if inter.is_finite() { inter } else { 0.0 }) as f32
        } else {
            raw as f32
        }
    };
    let data: Vec<f32> = match datatype {
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| scale(i16::from_le_bytes([c[0], c[1]]) as f64))
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| scale(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| scale(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };

    let affine = if le_i16(b, SFORM_CODE) > 0 {
        let mut a = spacing_affine([1.0; 3]);
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = le_f32(b, SROW_X + 16 * r + 4 * c) as f64;
            }
        }
        a
    } else {
        spacing_affine(spacing)
    };

    Volume::new(dims, data, spacing, affine)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub shape: Vec<usize>,
    pub dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<Affine>,
}

/// Payload of a decoded container.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

pub fn encode_container(header: &ContainerHeader, payload: &Payload) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    match payload {
        Payload::F32(v) => {
            out.reserve(v.len() * 4);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Payload::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<(ContainerHeader, Payload)> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::HeaderParse("missing header line terminator".into()))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::HeaderParse(e.to_string()))?;
    let body = &bytes[nl + 1..];
    let n: usize = header.shape.iter().product();
    if body.len() != n * header.dtype.width() {
        return Err(Error::HeaderParse(format!(
            "shape {:?} promises {} {:?} values, payload holds {} bytes",
            header.shape,
            n,
            header.dtype,
            body.len()
        )));
    }
    let payload = match header.dtype {
        DType::F32 => Payload::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => Payload::U8(body.to_vec()),
    };
    Ok((header, payload))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_container(path: &Path) -> Result<(ContainerHeader, Payload)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

fn volume_header(dims: Dims, dtype: DType, spacing: [f64; 3], affine: Affine) -> ContainerHeader {
    ContainerHeader {
        shape: dims.0.to_vec(),
        dtype,
        spacing: Some(spacing),
        affine: Some(affine),
    }
}

fn grid_of(header: &ContainerHeader) -> Result<(Dims, [f64; 3], Affine)> {
    let [x, y, z]: [usize; 3] = header
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::HeaderParse(format!("expected 3D shape, got {:?}", header.shape)))?;
    let spacing = header
        .spacing
        .ok_or_else(|| Error::HeaderParse("missing spacing".into()))?;
    let affine = header.affine.unwrap_or_else(|| spacing_affine(spacing));
    Ok((Dims::new(x, y, z), spacing, affine))
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let header = volume_header(v.dims, DType::F32, v.spacing, v.affine);
    let bytes = encode_container(&header, &Payload::F32(v.data.clone()))?;
    write_bytes(path.as_ref(), &bytes)
}

/// Reads a container as a volume. `u8` masks are widened to 0.0/1.0.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (header, payload) = read_container(path.as_ref())?;
    let (dims, spacing, affine) = grid_of(&header)?;
    let data = match payload {
        Payload::F32(v) => v,
        Payload::U8(v) => v.into_iter().map(f32::from).collect(),
    };
    Volume::new(dims, data, spacing, affine)
}

pub fn write_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let header = volume_header(m.dims, DType::U8, m.spacing, m.affine);
    let bytes = encode_container(&header, &Payload::U8(m.data.clone()))?;
    write_bytes(path.as_ref(), &bytes)
}

/// Reads a mask; `f32` containers are accepted when every value is 0 or 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let (header, payload) = read_container(path.as_ref())?;
    let (dims, spacing, affine) = grid_of(&header)?;
    let data = match payload {
        Payload::U8(v) => v,
        Payload::F32(v) => v
            .into_iter()
            .map(|x| match x {
                0.0 => Ok(0),
                1.0 => Ok(1),
                other => Err(Error::HeaderParse(format!("non-binary mask value {other}"))),
            })
            .collect::<Result<_>>()?,
    };
    Mask::with_affine(dims, data, spacing, affine)
}

/// Loads a volume from NIfTI (`.nii`) or the internal container (anything else).
pub fn load_any(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => read_nifti(path),
        _ => read_volume(path),
    }
}

pub fn write_f32_blob(path: impl AsRef<Path>, shape: &[usize], values: &[f32]) -> Result<()> {
    let header = ContainerHeader {
        shape: shape.to_vec(),
        dtype: DType::F32,
        spacing: None,
        affine: None,
    };
    let bytes = encode_container(&header, &Payload::F32(values.to_vec()))?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_f32_blob(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    match read_container(path.as_ref())? {
        (h, Payload::F32(v)) => Ok((h.shape, v)),
        (h, Payload::U8(_)) => Err(Error::HeaderParse(format!(
            "expected f32 blob, got {:?}",
            h.dtype
        ))),
    }
}
