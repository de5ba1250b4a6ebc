//! SG3D: a 28-byte little-endian header followed by a raw payload.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "SG3D"
//!      4     4  version (u32)
//!      8     4  channels C (u32)
//!     12    12  D, H, W (u32 each)
//!     24     4  dtype (u32): 1 = float32, 2 = uint8
//!     28     -  payload, C-major then D, H, W with W fastest
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SG3D";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    U8 = 2,
}

impl Dtype {
    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::U8),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VolumeHeader {
    pub version: u32,
    pub channels: u32,
    pub depth: u32,
    pub height: u32,
    pub width: u32,
    pub dtype: Dtype,
}

impl VolumeHeader {
    pub fn new(channels: usize, [d, h, w]: [usize; 3], dtype: Dtype) -> Self {
        Self {
            version: VERSION,
            channels: channels as u32,
            depth: d as u32,
            height: h as u32,
            width: w as u32,
            dtype,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.depth as usize, self.height as usize, self.width as usize]
    }

    pub fn voxel_count(&self) -> usize {
        self.channels as usize * self.dims().iter().product::<usize>()
    }

    pub fn payload_len(&self) -> usize {
        self.voxel_count() * self.dtype.size()
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Shape(format!(
                "SG3D dims must be >= 1, got C={} D={} H={} W={}",
                self.channels, self.depth, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&MAGIC);
        let fields = [
            self.version,
            self.channels,
            self.depth,
            self.height,
            self.width,
            self.dtype as u32,
        ];
        for (i, f) in fields.iter().enumerate() {
            out[4 + 4 * i..8 + 4 * i].copy_from_slice(&f.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: MAGIC,
            });
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let header = Self {
            version: u(0),
            channels: u(1),
            depth: u(2),
            height: u(3),
            width: u(4),
            dtype: Dtype::from_code(u(5))?,
        };
        header.validate()?;
        Ok(header)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::U8(_) => Dtype::U8,
        }
    }

    /// Payload as floats, widening uint8 codes.
    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            Payload::F32(v) => v.clone(),
            Payload::U8(v) => v.iter().map(|&b| b as f32).collect(),
        }
    }
}

pub fn encode(header: &VolumeHeader, payload: &Payload) -> Result<Vec<u8>> {
    header.validate()?;
    if payload.dtype() != header.dtype || payload.len() != header.voxel_count() {
        return Err(Error::Shape(format!(
            "payload of {} {:?} values does not match header ({} {:?} voxels)",
            payload.len(),
            payload.dtype(),
            header.voxel_count(),
            header.dtype
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len());
    out.extend_from_slice(&header.to_bytes());
    match payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(VolumeHeader, Payload)> {
    let header = VolumeHeader::from_bytes(bytes)?;
    let body = &bytes[HEADER_LEN..];
    let expected = header.payload_len();
    if body.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: body.len(),
        });
    }
    if body.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            body.len() - expected
        )));
    }
    let payload = match header.dtype {
        Dtype::F32 => Payload::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        Dtype::U8 => Payload::U8(body.to_vec()),
    };
    Ok((header, payload))
}

pub fn write_volume(path: impl AsRef<Path>, header: &VolumeHeader, payload: &Payload) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(header, payload)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<(VolumeHeader, Payload)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
