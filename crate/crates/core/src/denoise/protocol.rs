//! DNZ1 framing.
//!
//! All integers and floats are little-endian. A request is
//!
//! ```text
//! "DNZ1" u32 seq  u8 op  u32 t_index  f64 sigma_t  f64 alpha_t  u32 H  u32 W  u32 C  f32[H*W*C]
//! ```
//!
//! with the payload in channel-major order (each channel row-major). Ping and
//! info requests carry the full header with zero fields and no payload.
//!
//! A response is `"DNZ1" u32 seq u8 status` followed, on success, by the
//! payload for the request's op: `f32[H*W*C]` for denoise, nothing for ping,
//! and `u32 len` + UTF-8 JSON for info. On error (status 1) it is followed by
//! `u32 len` + a UTF-8 message.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::{DenoiseRequest, Geometry};
use crate::field_ops::{RealImage, ValueRange};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DNZ1";
pub const STATUS_OK: u8 = 0;
pub const STATUS_ERROR: u8 = 1;
/// Refuse payloads above this many floats (1 GiB).
pub const MAX_FLOATS: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Op {
    Denoise = 1,
    Ping = 2,
    Info = 3,
}

impl Op {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Op::Denoise),
            2 => Ok(Op::Ping),
            3 => Ok(Op::Info),
            other => Err(Error::Protocol(format!("unknown op {other}"))),
        }
    }
}

/// The `info` response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub model_id: String,
    pub geometry: Option<Geometry>,
    #[serde(rename = "schedule_T")]
    pub schedule_t: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestFrame {
    pub seq: u32,
    pub op: Op,
    pub t_index: u32,
    pub sigma_t: f64,
    pub alpha_t: f64,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub payload: Vec<f32>,
}

impl RequestFrame {
    pub fn control(seq: u32, op: Op) -> Self {
        Self {
            seq,
            op,
            t_index: 0,
            sigma_t: 0.0,
            alpha_t: 0.0,
            height: 0,
            width: 0,
            channels: 0,
            payload: Vec::new(),
        }
    }

    pub fn denoise(seq: u32, req: &DenoiseRequest) -> Self {
        let x = &req.x_t;
        Self {
            seq,
            op: Op::Denoise,
            t_index: req.t_index as u32,
            sigma_t: req.sigma_t,
            alpha_t: req.alpha_t,
            height: x.height as u32,
            width: x.width as u32,
            channels: x.channels as u32,
            payload: x.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }

    /// Converts a denoise frame back into a request.
    pub fn to_request(&self) -> Result<DenoiseRequest> {
        let x_t = RealImage::from_vec(
            self.height as usize,
            self.width as usize,
            self.channels as usize,
            self.payload.iter().map(|&v| v as f64).collect(),
            ValueRange::Symmetric,
        )
        .map_err(|e| Error::Protocol(e.to_string()))?;
        Ok(DenoiseRequest {
            x_t,
            t_index: self.t_index as usize,
            sigma_t: self.sigma_t,
            alpha_t: self.alpha_t,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(41 + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.push(self.op as u8);
        out.extend_from_slice(&self.t_index.to_le_bytes());
        out.extend_from_slice(&self.sigma_t.to_le_bytes());
        out.extend_from_slice(&self.alpha_t.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Reads one frame; `Ok(None)` on a clean end of stream.
    pub fn read_from(r: &mut impl Read) -> Result<Option<Self>> {
        let mut magic = [0u8; 4];
        // only a stream that ends before the first byte is a clean close
        loop {
            match r.read(&mut magic[..1]) {
                Ok(0) => return Ok(None),
                Ok(_) => break,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
        r.read_exact(&mut magic[1..])?;
        check_magic(&magic)?;
        let seq = read_u32(r)?;
        let op = Op::from_byte(read_u8(r)?)?;
        let t_index = read_u32(r)?;
        let sigma_t = f64::from_le_bytes(read_array(r)?);
        let alpha_t = f64::from_le_bytes(read_array(r)?);
        let height = read_u32(r)?;
        let width = read_u32(r)?;
        let channels = read_u32(r)?;
        let mut frame = Self {
            seq,
            op,
            t_index,
            sigma_t,
            alpha_t,
            height,
            width,
            channels,
            payload: Vec::new(),
        };
        if op == Op::Denoise {
            frame.payload = read_f32s(r, frame.numel())?;
        }
        Ok(Some(frame))
    }
}

/// What a client expects after a successful status byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Floats(usize),
    Empty,
    LengthPrefixed,
}

impl Expect {
    pub fn for_request(frame: &RequestFrame) -> Self {
        match frame.op {
            Op::Denoise => Expect::Floats(frame.numel()),
            Op::Ping => Expect::Empty,
            Op::Info => Expect::LengthPrefixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResponseBody {
    Floats(Vec<f32>),
    Empty,
    Bytes(Vec<u8>),
    Error(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseFrame {
    pub seq: u32,
    pub body: ResponseBody,
}

impl ResponseFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.seq.to_le_bytes());
        let status = match self.body {
            ResponseBody::Error(_) => STATUS_ERROR,
            _ => STATUS_OK,
        };
        out.push(status);
        match &self.body {
            ResponseBody::Floats(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ResponseBody::Empty => {}
            ResponseBody::Bytes(b) => {
                out.extend_from_slice(&(b.len() as u32).to_le_bytes());
                out.extend_from_slice(b);
            }
            ResponseBody::Error(msg) => {
                out.extend_from_slice(&(msg.len() as u32).to_le_bytes());
                out.extend_from_slice(msg.as_bytes());
            }
        }
        out
    }

    /// Reads the header of a response; the caller picks the body shape from
    /// the matching request via `expect(seq)`.
    pub fn read_from(r: &mut impl Read, expect: impl FnOnce(u32) -> Result<Expect>) -> Result<Self> {
        let magic: [u8; 4] = read_array(r)?;
        check_magic(&magic)?;
        let seq = read_u32(r)?;
        let status = read_u8(r)?;
        let body = match status {
            STATUS_OK => match expect(seq)? {
                Expect::Floats(n) => ResponseBody::Floats(read_f32s(r, n)?),
                Expect::Empty => ResponseBody::Empty,
                Expect::LengthPrefixed => ResponseBody::Bytes(read_prefixed(r)?),
            },
            STATUS_ERROR => ResponseBody::Error(String::from_utf8_lossy(&read_prefixed(r)?).into_owned()),
            other => return Err(Error::Protocol(format!("unknown status {other}"))),
        };
        Ok(Self { seq, body })
    }
}

fn check_magic(m: &[u8; 4]) -> Result<()> {
    if m != MAGIC {
        return Err(Error::Protocol(format!("bad magic {m:?}")));
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    Ok(read_array::<1>(r)?[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_prefixed(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    if len > 4 * MAX_FLOATS {
        return Err(Error::Protocol(format!("message length {len} too large")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    if n > MAX_FLOATS {
        return Err(Error::Protocol(format!("payload of {n} floats too large")));
    }
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Writes a frame and flushes.
pub fn send(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_header_layout() {
        let img = RealImage::from_vec(1, 2, 1, vec![0.5, -0.25], ValueRange::Symmetric).unwrap();
        let req = DenoiseRequest::new(img, 7, 1.0);
        let bytes = RequestFrame::denoise(42, &req).encode();
        assert_eq!(&bytes[..4], b"DNZ1");
        assert_eq!(bytes[4..8], 42u32.to_le_bytes());
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes[9..13], 7u32.to_le_bytes());
        assert_eq!(bytes[13..21], 1.0f64.to_le_bytes());
        assert_eq!(bytes[21..29], 0.5f64.to_le_bytes());
        assert_eq!(bytes[29..33], 1u32.to_le_bytes());
        assert_eq!(bytes[33..37], 2u32.to_le_bytes());
        assert_eq!(bytes[37..41], 1u32.to_le_bytes());
        assert_eq!(bytes[41..45], 0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 49);
        let back = RequestFrame::read_from(&mut &bytes[..]).unwrap().unwrap();
        assert_eq!(back.to_request().unwrap(), req);
    }

    #[test]
    fn control_frames_have_no_payload() {
        let bytes = RequestFrame::control(3, Op::Ping).encode();
        assert_eq!(bytes.len(), 41);
        let back = RequestFrame::read_from(&mut &bytes[..]).unwrap().unwrap();
        assert_eq!(back.op, Op::Ping);
        assert!(RequestFrame::read_from(&mut &b""[..]).unwrap().is_none());
    }

    #[test]
    fn responses_round_trip() {
        for (body, expect) in [
            (ResponseBody::Floats(vec![1.5, -2.0]), Expect::Floats(2)),
            (ResponseBody::Empty, Expect::Empty),
            (ResponseBody::Bytes(b"{}".to_vec()), Expect::LengthPrefixed),
            (ResponseBody::Error("bad shape".into()), Expect::Floats(2)),
        ] {
            let frame = ResponseFrame { seq: 9, body };
            let bytes = frame.encode();
            let back = ResponseFrame::read_from(&mut &bytes[..], |s| {
                assert_eq!(s, 9);
                Ok(expect)
            })
            .unwrap();
            assert_eq!(back, frame);
        }
    }

    #[test]
    fn error_frame_layout() {
        let bytes = ResponseFrame {
            seq: 1,
            body: ResponseBody::Error("no".into()),
        }
        .encode();
        assert_eq!(bytes[8], STATUS_ERROR);
        assert_eq!(bytes[9..13], 2u32.to_le_bytes());
        assert_eq!(&bytes[13..], b"no");
    }

    #[test]
    fn rejects_bad_magic_and_op() {
        let mut bytes = RequestFrame::control(0, Op::Info).encode();
        bytes[8] = 9;
        assert!(matches!(
            RequestFrame::read_from(&mut &bytes[..]),
            Err(Error::Protocol(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            RequestFrame::read_from(&mut &bytes[..]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn info_json_uses_wire_names() {
        let info = ServerInfo {
            model_id: "gaussian".into(),
            geometry: Some(Geometry {
                height: 4,
                width: 4,
                channels: 1,
            }),
            schedule_t: Some(1000),
        };
        let json = serde_json::to_string(&info).unwrap();
        assert!(json.contains("\"schedule_T\":1000"));
        assert_eq!(serde_json::from_str::<ServerInfo>(&json).unwrap(), info);
    }
}
