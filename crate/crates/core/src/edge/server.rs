//! Cloud-side receiver: reads length-prefixed frames, enforces the privacy
//! policy and hands accepted frames to a sink. Question answering itself is
//! not performed here.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use log::{debug, info, warn};
use thiserror::Error;

use super::frame::{decode_frame, MIN_FRAME_LEN};
use crate::codec::{PrivacyTier, SceneEncoding};

/// One-byte reply to every frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Status {
    Accepted = 0,
    TierRejected = 1,
    Malformed = 2,
    TooLarge = 3,
}

impl Status {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Accepted),
            1 => Some(Self::TierRejected),
            2 => Some(Self::Malformed),
            3 => Some(Self::TooLarge),
            _ => None,
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Accepted => "accepted",
            Self::TierRejected => "tier-rejected",
            Self::Malformed => "malformed",
            Self::TooLarge => "too-large",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("max_frame_bytes {0} is below the minimum frame size {MIN_FRAME_LEN}")]
    FrameBytes(usize),
    #[error("max_objects must be positive")]
    MaxObjects,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerPolicy {
    pub minimum_tier: PrivacyTier,
    pub max_objects: usize,
    pub max_frame_bytes: usize,
}

impl ServerPolicy {
    pub fn new(minimum_tier: PrivacyTier, max_objects: usize, max_frame_bytes: usize) -> Result<Self, PolicyError> {
        if max_objects == 0 {
            return Err(PolicyError::MaxObjects);
        }
        if max_frame_bytes < MIN_FRAME_LEN {
            return Err(PolicyError::FrameBytes(max_frame_bytes));
        }
        Ok(Self {
            minimum_tier,
            max_objects,
            max_frame_bytes,
        })
    }

    /// Status for a decoded frame, before any sink is involved.
    pub fn check(&self, enc: &SceneEncoding) -> Status {
        if enc.tier < self.minimum_tier {
            Status::TierRejected
        } else if enc.num_objects() > self.max_objects {
            Status::TooLarge
        } else {
            Status::Accepted
        }
    }
}

impl Default for ServerPolicy {
    fn default() -> Self {
        Self {
            minimum_tier: PrivacyTier::Private,
            max_objects: 100,
            max_frame_bytes: 16 << 20,
        }
    }
}

/// Receives accepted frames. Called concurrently from connection threads.
pub trait FrameSink: Send + Sync {
    fn deliver(&self, frame: &[u8], encoding: &SceneEncoding) -> io::Result<()>;
}

/// Keeps accepted encodings in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    received: Mutex<Vec<SceneEncoding>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn received(&self) -> Vec<SceneEncoding> {
        self.received.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.received.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameSink for MemorySink {
    fn deliver(&self, _frame: &[u8], encoding: &SceneEncoding) -> io::Result<()> {
        self.received.lock().unwrap().push(encoding.clone());
        Ok(())
    }
}

/// Writes each accepted frame verbatim to `<dir>/<seq>.symv`.
#[derive(Debug)]
pub struct RecordingSink {
    dir: PathBuf,
    next: AtomicU64,
}

impl RecordingSink {
    pub fn new(dir: impl AsRef<Path>) -> io::Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: dir.as_ref().to_path_buf(),
            next: AtomicU64::new(0),
        })
    }
}

impl FrameSink for RecordingSink {
    fn deliver(&self, frame: &[u8], _encoding: &SceneEncoding) -> io::Result<()> {
        let seq = self.next.fetch_add(1, Ordering::SeqCst);
        let path = self.dir.join(format!("{seq:08}.symv"));
        let tmp = path.with_extension("symv.part");
        fs::write(&tmp, frame)?;
        fs::rename(&tmp, &path)
    }
}

pub struct Server {
    listener: TcpListener,
    policy: ServerPolicy,
    sink: Arc<dyn FrameSink>,
    stop: Arc<AtomicBool>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, policy: ServerPolicy, sink: Arc<dyn FrameSink>) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            policy,
            sink,
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accept connections until stopped, one thread per connection.
    pub fn run(self) -> io::Result<()> {
        info!("listening on {}", self.local_addr()?);
        for stream in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let policy = self.policy;
            let sink = Arc::clone(&self.sink);
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle_connection(stream, &policy, sink.as_ref()) {
                    warn!("connection {peer:?}: {e}");
                }
            });
        }
        Ok(())
    }

    /// Run on a background thread.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::clone(&self.stop);
        let join = thread::spawn(move || self.run());
        Ok(ServerHandle { addr, stop, join })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: JoinHandle<io::Result<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting new connections. Open connections finish on their own.
    pub fn shutdown(self) -> io::Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        self.join
            .join()
            .map_err(|_| io::Error::other("server thread panicked"))?
    }
}

/// Read a 4-byte prefix; `None` on clean end of stream before the first byte.
fn read_prefix(stream: &mut impl Read) -> io::Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match stream.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

/// Serve one connection's frame stream until the peer closes it.
pub fn handle_connection(mut stream: TcpStream, policy: &ServerPolicy, sink: &dyn FrameSink) -> io::Result<()> {
    while let Some(len) = read_prefix(&mut stream)? {
        let len = len as usize;
        if len > policy.max_frame_bytes {
            debug!("frame of {len} bytes exceeds limit {}", policy.max_frame_bytes);
            stream.write_all(&[Status::TooLarge as u8])?;
            // drain the body so the next prefix lines up
            let drained = io::copy(&mut (&mut stream).take(len as u64), &mut io::sink())?;
            if drained < len as u64 {
                return Err(io::ErrorKind::UnexpectedEof.into());
            }
            continue;
        }
        let mut frame = vec![0u8; len];
        stream.read_exact(&mut frame)?;
        let reply: Vec<u8> = match decode_frame(&frame) {
            Err(e) => {
                debug!("malformed frame: {e}");
                vec![Status::Malformed as u8]
            }
            Ok(enc) => match policy.check(&enc) {
                Status::Accepted => match sink.deliver(&frame, &enc) {
                    Ok(()) => {
                        let mut r = vec![Status::Accepted as u8];
                        r.extend_from_slice(&(enc.num_objects() as u32).to_le_bytes());
                        r
                    }
                    Err(e) => {
                        stream.shutdown(Shutdown::Both).ok();
                        return Err(e);
                    }
                },
                status => vec![status as u8],
            },
        };
        stream.write_all(&reply)?;
    }
    Ok(())
}
