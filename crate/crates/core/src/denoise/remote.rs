//! Client side of DNZ1 over TCP or a child process's stdio.
//!
//! A [`RemoteDenoiser`] owns a small connection pool. Batches are pipelined
//! on one connection and matched back to requests by sequence id, so callers
//! never see reordering. I/O failures drop the connection and retry on a
//! fresh one; a server-reported error is not retried.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use super::protocol::{self, Expect, Op, RequestFrame, ResponseBody, ResponseFrame, ServerInfo};
use super::{DenoiseRequest, Geometry};
use crate::field_ops::{RealImage, ValueRange};
use crate::{Error, Result};

pub const DEFAULT_RETRIES: u32 = 2;
const TCP_POOL: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Stdio(String),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp:{a}"),
            Endpoint::Stdio(c) => write!(f, "stdio:{c}"),
        }
    }
}

struct Conn {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Drop for Conn {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // Closing stdin lets a well-behaved server exit on its own.
            self.writer = Box::new(io::sink());
            if !matches!(child.try_wait(), Ok(Some(_))) {
                let _ = child.kill();
            }
            let _ = child.wait();
        }
    }
}

impl Conn {
    fn open(endpoint: &Endpoint) -> io::Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                Ok(Self {
                    reader: Box::new(BufReader::new(stream.try_clone()?)),
                    writer: Box::new(BufWriter::new(stream)),
                    child: None,
                })
            }
            Endpoint::Stdio(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Self {
                    reader: Box::new(BufReader::new(stdout)),
                    writer: Box::new(BufWriter::new(stdin)),
                    child: Some(child),
                })
            }
        }
    }

    fn exchange(&mut self, frames: &[RequestFrame]) -> Result<Vec<ResponseFrame>> {
        let mut bytes = Vec::new();
        for f in frames {
            bytes.extend_from_slice(&f.encode());
        }
        protocol::send(&mut self.writer, &bytes)?;
        let expect: HashMap<u32, Expect> = frames.iter().map(|f| (f.seq, Expect::for_request(f))).collect();
        let mut got: HashMap<u32, ResponseFrame> = HashMap::with_capacity(frames.len());
        while got.len() < frames.len() {
            let resp = ResponseFrame::read_from(&mut self.reader, |seq| {
                expect
                    .get(&seq)
                    .copied()
                    .ok_or_else(|| Error::Protocol(format!("response for unknown sequence id {seq}")))
            })?;
            if got.insert(resp.seq, resp).is_some() {
                return Err(Error::Protocol("duplicate response".into()));
            }
        }
        Ok(frames
            .iter()
            .map(|f| got.remove(&f.seq).expect("all present"))
            .collect())
    }
}

struct PoolState {
    idle: Vec<Conn>,
    open: usize,
}

struct Inner {
    endpoint: Endpoint,
    max_conns: usize,
    retries: u32,
    state: Mutex<PoolState>,
    freed: Condvar,
    next_seq: AtomicU32,
    info: Mutex<Option<ServerInfo>>,
}

/// Handle to an out-of-process denoiser. Cheap to clone; clones share the pool.
#[derive(Clone)]
pub struct RemoteDenoiser {
    inner: Arc<Inner>,
}

impl fmt::Debug for RemoteDenoiser {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteDenoiser")
            .field("endpoint", &self.inner.endpoint)
            .field("info", &self.info())
            .finish()
    }
}

impl RemoteDenoiser {
    /// Connects and performs the ping + info handshake.
    pub fn connect(endpoint: Endpoint, retries: u32) -> Result<Self> {
        let max_conns = match endpoint {
            Endpoint::Tcp(_) => TCP_POOL,
            Endpoint::Stdio(_) => 1,
        };
        let client = Self {
            inner: Arc::new(Inner {
                endpoint,
                max_conns,
                retries,
                state: Mutex::new(PoolState {
                    idle: Vec::new(),
                    open: 0,
                }),
                freed: Condvar::new(),
                next_seq: AtomicU32::new(1),
                info: Mutex::new(None),
            }),
        };
        client.ping()?;
        let info = client.fetch_info()?;
        *client.inner.info.lock().unwrap() = Some(info);
        Ok(client)
    }

    pub fn connect_tcp(addr: &str) -> Result<Self> {
        Self::connect(Endpoint::Tcp(addr.to_string()), DEFAULT_RETRIES)
    }

    pub fn spawn_stdio(cmd: &str) -> Result<Self> {
        Self::connect(Endpoint::Stdio(cmd.to_string()), DEFAULT_RETRIES)
    }

    pub fn endpoint(&self) -> String {
        self.inner.endpoint.to_string()
    }

    pub fn info(&self) -> Option<ServerInfo> {
        self.inner.info.lock().unwrap().clone()
    }

    pub fn geometry(&self) -> Option<Geometry> {
        self.info().and_then(|i| i.geometry)
    }

    fn seq(&self) -> u32 {
        self.inner.next_seq.fetch_add(1, Ordering::Relaxed)
    }

    fn acquire(&self) -> io::Result<Conn> {
        let mut st = self.inner.state.lock().unwrap();
        loop {
            if let Some(c) = st.idle.pop() {
                return Ok(c);
            }
            if st.open < self.inner.max_conns {
                st.open += 1;
                drop(st);
                return Conn::open(&self.inner.endpoint).inspect_err(|_| {
                    self.inner.state.lock().unwrap().open -= 1;
                    self.inner.freed.notify_one();
                });
            }
            st = self.inner.freed.wait(st).unwrap();
        }
    }

    fn release(&self, conn: Conn, healthy: bool) {
        let mut st = self.inner.state.lock().unwrap();
        if healthy {
            st.idle.push(conn);
        } else {
            st.open -= 1;
            drop(st);
            drop(conn);
        }
        self.inner.freed.notify_one();
    }

    fn call(&self, frames: &[RequestFrame]) -> Result<Vec<ResponseFrame>> {
        let mut last = None;
        for _ in 0..=self.inner.retries {
            let mut conn = match self.acquire() {
                Ok(c) => c,
                Err(e) => {
                    last = Some(e);
                    continue;
                }
            };
            match conn.exchange(frames) {
                Ok(r) => {
                    self.release(conn, true);
                    return Ok(r);
                }
                Err(Error::Io(e)) => {
                    self.release(conn, false);
                    last = Some(e);
                }
                Err(other) => {
                    self.release(conn, false);
                    return Err(other);
                }
            }
        }
        Err(Error::Transport {
            retries: self.inner.retries,
            source: last.unwrap_or_else(|| io::Error::other("no attempt made")),
        })
    }

    pub fn ping(&self) -> Result<()> {
        let resp = self.call(&[RequestFrame::control(self.seq(), Op::Ping)])?;
        match &resp[0].body {
            ResponseBody::Empty => Ok(()),
            ResponseBody::Error(m) => Err(Error::Protocol(m.clone())),
            other => Err(Error::Protocol(format!("unexpected ping body {other:?}"))),
        }
    }

    fn fetch_info(&self) -> Result<ServerInfo> {
        let resp = self.call(&[RequestFrame::control(self.seq(), Op::Info)])?;
        match &resp[0].body {
            ResponseBody::Bytes(b) => Ok(serde_json::from_slice(b)?),
            ResponseBody::Error(m) => Err(Error::Protocol(m.clone())),
            other => Err(Error::Protocol(format!("unexpected info body {other:?}"))),
        }
    }

    /// Raw denoise call; no clamping or range tagging beyond the wire format.
    pub fn denoise(&self, req: &DenoiseRequest) -> Result<RealImage> {
        Ok(self.denoise_batch(std::slice::from_ref(req))?.remove(0))
    }

    pub fn denoise_batch(&self, reqs: &[DenoiseRequest]) -> Result<Vec<RealImage>> {
        if reqs.is_empty() {
            return Ok(Vec::new());
        }
        let frames: Vec<RequestFrame> = reqs.iter().map(|r| RequestFrame::denoise(self.seq(), r)).collect();
        self.call(&frames)?
            .into_iter()
            .zip(reqs)
            .map(|(resp, req)| match resp.body {
                ResponseBody::Floats(v) => RealImage::from_vec(
                    req.x_t.height,
                    req.x_t.width,
                    req.x_t.channels,
                    v.into_iter().map(f64::from).collect(),
                    ValueRange::Symmetric,
                )
                .map_err(|e| Error::Protocol(e.to_string())),
                ResponseBody::Error(m) => Err(Error::Protocol(m)),
                other => Err(Error::Protocol(format!("unexpected denoise body {other:?}"))),
            })
            .collect()
    }
}
