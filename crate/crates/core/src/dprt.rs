//! DPRT flat binary tensors.
//!
//! Layout (little-endian): magic `DPRT`, u8 version (1), u8 dtype
//! (0 = f32 real, 1 = f32 complex interleaved), u8 rank, `rank` u32 dims,
//! then the payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::{Complex32, Complex64};

use crate::field_ops::{ComplexField, RealImage, ValueRange};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DPRT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real(Vec<f32>),
    Complex(Vec<Complex32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Tensor {
    pub fn real(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let t = Self {
            dims,
            data: TensorData::Real(data),
        };
        t.check()?;
        Ok(t)
    }

    pub fn complex(dims: Vec<u32>, data: Vec<Complex32>) -> Result<Self> {
        let t = Self {
            dims,
            data: TensorData::Complex(data),
        };
        t.check()?;
        Ok(t)
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    fn check(&self) -> Result<()> {
        let len = match &self.data {
            TensorData::Real(v) => v.len(),
            TensorData::Complex(v) => v.len(),
        };
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::Format("rank exceeds 255".into()));
        }
        if len != self.numel() {
            return Err(Error::Shape(format!("{len} values for dims {:?}", self.dims)));
        }
        Ok(())
    }

    /// Image as `[C, H, W]`.
    pub fn from_image(img: &RealImage) -> Self {
        Self {
            dims: vec![img.channels as u32, img.height as u32, img.width as u32],
            data: TensorData::Real(img.data.iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn to_image(&self, range: ValueRange) -> Result<RealImage> {
        let TensorData::Real(v) = &self.data else {
            return Err(Error::Format("expected a real tensor".into()));
        };
        let (c, h, w) = match self.dims[..] {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => return Err(Error::Format(format!("image tensor rank {}", self.dims.len()))),
        };
        RealImage::from_vec(
            h as usize,
            w as usize,
            c as usize,
            v.iter().map(|&x| x as f64).collect(),
            range,
        )
    }

    pub fn from_field(field: &ComplexField) -> Self {
        Self {
            dims: vec![field.height as u32, field.width as u32],
            data: TensorData::Complex(
                field
                    .data
                    .iter()
                    .map(|z| Complex32::new(z.re as f32, z.im as f32))
                    .collect(),
            ),
        }
    }

    pub fn to_complex_vec(&self) -> Result<Vec<Complex64>> {
        match &self.data {
            TensorData::Complex(v) => Ok(v.iter().map(|z| Complex64::new(z.re as f64, z.im as f64)).collect()),
            TensorData::Real(_) => Err(Error::Format("expected a complex tensor".into())),
        }
    }

    pub fn to_real_vec(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::Real(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::Complex(_) => Err(Error::Format("expected a real tensor".into())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + 8 * self.numel());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(match self.data {
            TensorData::Real(_) => 0,
            TensorData::Complex(_) => 1,
        });
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::Real(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::Complex(v) => v.iter().for_each(|z| {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }),
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 7];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if head[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", head[4])));
        }
        let dtype = head[5];
        let rank = head[6] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut word = [0u8; 4];
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            dims.push(u32::from_le_bytes(word));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::Format("dims overflow".into()))?;
        let floats = match dtype {
            0 => numel,
            1 => numel
                .checked_mul(2)
                .ok_or_else(|| Error::Format("dims overflow".into()))?,
            other => return Err(Error::Format(format!("unknown dtype {other}"))),
        };
        let mut payload = Vec::new();
        r.take((floats * 4) as u64).read_to_end(&mut payload)?;
        if payload.len() != floats * 4 {
            return Err(Error::Format("truncated payload".into()));
        }
        let vals: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let data = if dtype == 0 {
            TensorData::Real(vals)
        } else {
            TensorData::Complex(vals.chunks_exact(2).map(|p| Complex32::new(p[0], p[1])).collect())
        };
        Ok(Self { dims, data })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(fs::File::open(path)?))
    }
}

/// Writes `bytes` to a temp file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let tmp_name = format!(".{}.tmp{}", name.to_string_lossy(), std::process::id());
    let tmp = match dir {
        Some(d) => d.join(tmp_name),
        None => Path::new(&tmp_name).to_path_buf(),
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::real(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[..4], b"DPRT");
        assert_eq!(bytes[4..7], [1, 0, 2]);
        assert_eq!(bytes[7..11], 2u32.to_le_bytes());
        assert_eq!(bytes[11..15], 1u32.to_le_bytes());
        assert_eq!(bytes[15..19], 1.0f32.to_le_bytes());
        assert_eq!(bytes[19..23], (-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 23);
    }

    #[test]
    fn complex_is_interleaved() {
        let t = Tensor::complex(vec![1], vec![Complex32::new(3.0, 4.0)]).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes[5], 1);
        assert_eq!(bytes[11..15], 3.0f32.to_le_bytes());
        assert_eq!(bytes[15..19], 4.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Tensor::real(vec![3], vec![0.0; 2]).is_err());
        assert!(Tensor::read_from(&b"NOPE\x01\x00\x00"[..]).is_err());
        let mut bytes = Tensor::real(vec![4], vec![0.0; 4]).unwrap().encode();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(Tensor::read_from(&bytes[..]), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dprt");
        let img = RealImage::gray(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        Tensor::from_image(&img).write_file(&path).unwrap();
        let back = Tensor::read_file(&path).unwrap().to_image(ValueRange::Unit).unwrap();
        assert_eq!(back, img);
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            dims in proptest::collection::vec(1u32..5, 0..4),
            complex in any::<bool>(),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let vals: Vec<f32> = (0..2 * n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            let t = if complex {
                Tensor::complex(dims, vals.chunks_exact(2).map(|p| Complex32::new(p[0], p[1])).collect()).unwrap()
            } else {
                Tensor::real(dims, vals[..n].to_vec()).unwrap()
            };
            let back = Tensor::read_from(&t.encode()[..]).unwrap();
            prop_assert_eq!(back.encode(), t.encode());
        }
    }
}
