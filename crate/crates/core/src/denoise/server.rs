//! A DNZ1 server for builtin denoisers.
//!
//! Used by the tests and examples, and by `ddrmpr --task serve` so that the
//! stdio transport can be exercised without any external model host.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use super::protocol::{Op, RequestFrame, ResponseBody, ResponseFrame, ServerInfo};
use super::{DenoiseRequest, Denoiser};
use crate::field_ops::RealImage;
use crate::Result;

/// Returns its input untouched, for transport round-trip checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoDenoiser;

impl Denoiser for EchoDenoiser {
    fn id(&self) -> String {
        "echo".into()
    }

    fn denoise(&self, req: &DenoiseRequest) -> Result<RealImage> {
        Ok(req.x_t.clone())
    }
}

fn respond(frame: &RequestFrame, den: &dyn Denoiser, info: &ServerInfo) -> ResponseBody {
    match frame.op {
        Op::Ping => ResponseBody::Empty,
        Op::Info => match serde_json::to_vec(info) {
            Ok(b) => ResponseBody::Bytes(b),
            Err(e) => ResponseBody::Error(e.to_string()),
        },
        Op::Denoise => {
            if let Some(g) = info.geometry {
                let got = (frame.height as usize, frame.width as usize, frame.channels as usize);
                if got != (g.height, g.width, g.channels) {
                    return ResponseBody::Error(format!(
                        "geometry {got:?} does not match {}x{}x{}",
                        g.height, g.width, g.channels
                    ));
                }
            }
            match frame.to_request().and_then(|r| den.denoise(&r)) {
                Ok(img) => ResponseBody::Floats(img.data.iter().map(|&v| v as f32).collect()),
                Err(e) => ResponseBody::Error(e.to_string()),
            }
        }
    }
}

/// Serves frames until the peer closes the stream.
pub fn serve_stream(reader: impl Read, writer: impl Write, den: &dyn Denoiser, info: &ServerInfo) -> Result<()> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    while let Some(frame) = RequestFrame::read_from(&mut reader)? {
        let resp = ResponseFrame {
            seq: frame.seq,
            body: respond(&frame, den, info),
        };
        writer.write_all(&resp.encode())?;
        // Flush once the pipelined requests already buffered have been answered.
        if reader.buffer().is_empty() {
            writer.flush()?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(listener: TcpListener, den: Arc<dyn Denoiser>, info: ServerInfo) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let (den, info) = (Arc::clone(&den), info.clone());
        thread::spawn(move || {
            if let Ok(read_half) = stream.try_clone() {
                let _ = serve_stream(read_half, stream, den.as_ref(), &info);
            }
        });
    }
    Ok(())
}

/// Binds an ephemeral loopback port and serves in a background thread.
pub fn spawn_tcp(den: Arc<dyn Denoiser>, info: ServerInfo) -> Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let handle = thread::spawn(move || {
        let _ = serve_tcp(listener, den, info);
    });
    Ok((addr, handle))
}

/// Serves on this process's stdin/stdout.
pub fn serve_stdio(den: &dyn Denoiser, info: &ServerInfo) -> Result<()> {
    serve_stream(std::io::stdin().lock(), std::io::stdout().lock(), den, info)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::protocol;
    use crate::denoise::remote::{Endpoint, RemoteDenoiser};
    use crate::denoise::{DenoiserHandle, Geometry};
    use crate::field_ops::ValueRange;
    use crate::rng::{normal_vec, stream, StreamTag};
    use crate::Error;

    fn info(id: &str, geometry: Option<Geometry>) -> ServerInfo {
        ServerInfo {
            model_id: id.into(),
            geometry,
            schedule_t: Some(1000),
        }
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> RealImage {
        let mut rng = stream(seed, StreamTag::Fixture, 0);
        let data = normal_vec(&mut rng, h * w * c)
            .into_iter()
            .map(|v| (v as f32) as f64)
            .collect();
        RealImage::from_vec(h, w, c, data, ValueRange::Symmetric).unwrap()
    }

    #[test]
    fn echo_round_trip_is_bit_exact() {
        let (addr, _h) = spawn_tcp(Arc::new(EchoDenoiser), info("echo", None)).unwrap();
        let client = RemoteDenoiser::connect_tcp(&addr.to_string()).unwrap();
        assert_eq!(client.info().unwrap().model_id, "echo");
        let x = random_image(64, 64, 3, 1);
        let out = client.denoise(&DenoiseRequest::new(x.clone(), 5, 0.3)).unwrap();
        assert!(out.data.iter().zip(&x.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn remote_gaussian_matches_builtin() {
        let builtin = DenoiserHandle::gaussian(4.0);
        let (addr, _h) = spawn_tcp(Arc::new(builtin.clone()), info("gaussian", None)).unwrap();
        let remote = DenoiserHandle::from_spec(&addr.to_string()).unwrap();
        let reqs: Vec<_> = (0..5)
            .map(|s| DenoiseRequest::new(random_image(8, 8, 1, s).map(|v| 0.3 * v), s as usize, 0.2 * s as f64))
            .collect();
        let a = remote.denoise_batch(&reqs).unwrap();
        for (r, out) in reqs.iter().zip(&a) {
            let b = builtin.denoise(r).unwrap();
            let err = out
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn server_errors_surface_as_protocol_errors() {
        let g = Geometry {
            height: 4,
            width: 4,
            channels: 1,
        };
        let (addr, _h) = spawn_tcp(Arc::new(EchoDenoiser), info("echo", Some(g))).unwrap();
        let client = RemoteDenoiser::connect_tcp(&addr.to_string()).unwrap();
        let bad = DenoiseRequest::new(random_image(2, 2, 1, 0), 0, 0.1);
        assert!(matches!(client.denoise(&bad), Err(Error::Protocol(_))));
        // the connection stays usable
        client.ping().unwrap();
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let err = RemoteDenoiser::connect(Endpoint::Tcp(addr.to_string()), 1).unwrap_err();
        assert!(matches!(err, Error::Transport { retries: 1, .. }));
    }

    #[test]
    fn concurrent_callers_get_their_own_answers() {
        let (addr, _h) = spawn_tcp(Arc::new(EchoDenoiser), info("echo", None)).unwrap();
        let client = RemoteDenoiser::connect_tcp(&addr.to_string()).unwrap();
        thread::scope(|s| {
            for k in 0..16u64 {
                let client = client.clone();
                s.spawn(move || {
                    let x = random_image(4, 4, 1, k);
                    let out = client.denoise(&DenoiseRequest::new(x.clone(), 0, 0.1)).unwrap();
                    assert_eq!(out.data, x.data);
                });
            }
        });
    }

    #[test]
    fn pipelined_frames_are_answered_in_order() {
        let frames: Vec<u8> = [
            RequestFrame::control(1, Op::Ping),
            RequestFrame::control(2, Op::Info),
            RequestFrame::denoise(3, &DenoiseRequest::new(random_image(1, 2, 1, 0), 0, 0.0)),
        ]
        .iter()
        .flat_map(|f| f.encode())
        .collect();
        let mut out = Vec::new();
        serve_stream(&frames[..], &mut out, &EchoDenoiser, &info("echo", None)).unwrap();
        let mut r = &out[..];
        let seqs: Vec<u32> = (0..3)
            .map(|i| {
                ResponseFrame::read_from(&mut r, |_| {
                    Ok([
                        protocol::Expect::Empty,
                        protocol::Expect::LengthPrefixed,
                        protocol::Expect::Floats(2),
                    ][i])
                })
                .unwrap()
                .seq
            })
            .collect();
        assert_eq!(seqs, vec![1, 2, 3]);
        assert!(r.is_empty());
    }
}
