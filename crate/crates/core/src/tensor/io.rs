//! SV3D container: a 40-byte header followed by a little-endian payload.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SV3D" (0x53 0x56 0x33 0x44)
//! 4       1     version (1)
//! 5       1     dtype (0 = f32, 1 = f64)
//! 6       2     reserved (0)
//! 8       32    c, d, h, w as u64 little-endian
//! 40      ...   c*d*h*w values, row-major, w fastest
//! ```

use std::io::{ErrorKind, Read, Write};

use super::{Element, Shape4, Volume4};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SV3D";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::format(format!("unsupported dtype code {other}"))),
        }
    }
}

struct Header {
    dtype: DType,
    shape: Shape4,
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut buf = [0u8; HEADER_LEN];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::format("truncated SV3D header (need 40 bytes)")
        } else {
            Error::Io(e)
        }
    })?;
    if buf[..4] != MAGIC {
        return Err(Error::format(format!(
            "bad magic: expected {:02x?} (\"SV3D\"), found {:02x?}",
            MAGIC,
            &buf[..4]
        )));
    }
    if buf[4] != VERSION {
        return Err(Error::format(format!(
            "unsupported SV3D version {} (expected {VERSION})",
            buf[4]
        )));
    }
    let dtype = DType::from_code(buf[5])?;
    let reserved = u16::from_le_bytes([buf[6], buf[7]]);
    if reserved != 0 {
        return Err(Error::format(format!("reserved header field is {reserved}, expected 0")));
    }
    let mut dims = [0usize; 4];
    for (i, slot) in dims.iter_mut().enumerate() {
        let off = 8 + 8 * i;
        let v = u64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
        *slot = usize::try_from(v)
            .map_err(|_| Error::format(format!("dimension {v} does not fit in memory")))?;
    }
    let shape = Shape4 { c: dims[0], d: dims[1], h: dims[2], w: dims[3] };
    shape
        .validate()
        .map_err(|e| Error::format(format!("invalid SV3D dims: {e}")))?;
    Ok(Header { dtype, shape })
}

fn read_payload<T: Element>(r: &mut impl Read, shape: Shape4) -> Result<Volume4<T>> {
    let size = T::DTYPE.size();
    let n_bytes = shape
        .len()
        .checked_mul(size)
        .ok_or_else(|| Error::format(format!("payload for {shape} overflows")))?;
    let mut bytes = Vec::new();
    let got = r.take(n_bytes as u64).read_to_end(&mut bytes)?;
    if got != n_bytes {
        return Err(Error::format(format!(
            "truncated payload: header {shape} ({:?}) needs {n_bytes} bytes, found {got}",
            T::DTYPE
        )));
    }
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Ok(Volume4 { shape, data })
}

impl<T: Element> Volume4<T> {
    pub fn write_sv3d(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_sv3d_bytes())?;
        Ok(())
    }

    pub fn to_sv3d_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * T::DTYPE.size());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(T::DTYPE.code());
        out.extend_from_slice(&0u16.to_le_bytes());
        for d in self.shape.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Read one container. Bytes after the payload are left in the reader.
    pub fn read_sv3d(r: &mut impl Read) -> Result<Self> {
        let header = read_header(r)?;
        if header.dtype != T::DTYPE {
            return Err(Error::format(format!(
                "dtype mismatch: file holds {:?}, expected {:?}",
                header.dtype,
                T::DTYPE
            )));
        }
        read_payload(r, header.shape)
    }

    /// Decode a buffer that holds exactly one container.
    pub fn from_sv3d_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let v = Self::read_sv3d(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::format(format!(
                "payload length mismatch: {} trailing bytes after {} values",
                cursor.len(),
                v.len()
            )));
        }
        Ok(v)
    }
}

/// A volume whose element type is only known after reading the header.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    F32(Volume4<f32>),
    F64(Volume4<f64>),
}

impl AnyVolume {
    pub fn read_sv3d(r: &mut impl Read) -> Result<Self> {
        let header = read_header(r)?;
        Ok(match header.dtype {
            DType::F32 => AnyVolume::F32(read_payload(r, header.shape)?),
            DType::F64 => AnyVolume::F64(read_payload(r, header.shape)?),
        })
    }

    pub fn shape(&self) -> Shape4 {
        match self {
            AnyVolume::F32(v) => v.shape(),
            AnyVolume::F64(v) => v.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyVolume::F32(_) => DType::F32,
            AnyVolume::F64(_) => DType::F64,
        }
    }
}
