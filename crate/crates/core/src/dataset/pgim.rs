//! The `PGIM` raw image container: magic, version u16, height u16, width
//! u16, channels u8, then planar u8 samples. Little-endian throughout.

use std::path::Path;

use diffcomp::Tensor;

use super::scene::{bytes_to_tensor, unit_to_byte};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PGIM";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 11;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Planar, `channels·height·width`.
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn from_tensor(image: &Tensor<f32>) -> Result<Self> {
        let &[channels, height, width] = image.shape() else {
            return Err(Error::Invalid(format!("expected a C×H×W image, got {:?}", image.shape())));
        };
        Ok(Self {
            height,
            width,
            channels,
            data: image.data().iter().map(|&v| unit_to_byte(v)).collect(),
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        bytes_to_tensor(&self.data, self.channels, self.height, self.width)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let dim = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::Invalid(format!("{what} {v} does not fit the PGIM header")))
        };
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&dim(self.height, "height")?.to_le_bytes());
        out.extend_from_slice(&dim(self.width, "width")?.to_le_bytes());
        out.push(u8::try_from(self.channels).map_err(|_| Error::Invalid("too many channels".into()))?);
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(path, "truncated PGIM header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(path, "bad PGIM magic"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let version = u16_at(4) as u16;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported PGIM version {version}")));
        }
        let (height, width, channels) = (u16_at(6), u16_at(8), bytes[10] as usize);
        let expected = height * width * channels;
        let data = &bytes[HEADER_LEN..];
        if data.len() != expected {
            return Err(Error::format(
                path,
                format!("PGIM payload is {} bytes, header declares {expected}", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data: data.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    RawImage::from_tensor(image)?.write(path)
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    RawImage::read(path)?.to_tensor()
}
