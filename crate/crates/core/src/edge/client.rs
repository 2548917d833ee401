//! Edge-side sender: ships frames over one connection and collects replies.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};

use thiserror::Error;

use super::frame::{encode_frame, FrameError};
use super::server::Status;
use crate::codec::SceneEncoding;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("frame {index}: {source}")]
    Encode { index: usize, source: FrameError },
    #[error("frame {index} is {len} bytes, longer than a 32-bit length prefix allows")]
    Oversize { index: usize, len: usize },
    #[error("transport failed at frame {frame_index}: {source}")]
    Transport { frame_index: usize, source: io::Error },
    #[error("frame {frame_index}: unknown reply status {code}")]
    BadReply { frame_index: usize, code: u8 },
}

/// Server reply to one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reply {
    pub status: Status,
    /// Object count echoed on acceptance.
    pub echoed_objects: Option<u32>,
}

/// Send pre-encoded frames in order over a single connection.
pub fn send_frames<A: ToSocketAddrs>(addr: A, frames: &[Vec<u8>]) -> Result<Vec<Reply>, ClientError> {
    if let Some((index, f)) = frames.iter().enumerate().find(|(_, f)| u32::try_from(f.len()).is_err()) {
        return Err(ClientError::Oversize { index, len: f.len() });
    }
    let mut stream = TcpStream::connect(addr).map_err(|source| ClientError::Transport { frame_index: 0, source })?;
    stream.set_nodelay(true).ok();
    let mut replies = Vec::with_capacity(frames.len());
    for (index, frame) in frames.iter().enumerate() {
        let transport = |source| ClientError::Transport {
            frame_index: index,
            source,
        };
        let mut message = Vec::with_capacity(4 + frame.len());
        message.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        message.extend_from_slice(frame);
        stream.write_all(&message).map_err(transport)?;

        let mut code = [0u8; 1];
        stream.read_exact(&mut code).map_err(transport)?;
        let status = Status::from_u8(code[0]).ok_or(ClientError::BadReply {
            frame_index: index,
            code: code[0],
        })?;
        let echoed_objects = if status == Status::Accepted {
            let mut n = [0u8; 4];
            stream.read_exact(&mut n).map_err(transport)?;
            Some(u32::from_le_bytes(n))
        } else {
            None
        };
        replies.push(Reply { status, echoed_objects });
    }
    Ok(replies)
}

/// Encode and send scene encodings; returns one status per frame, in order.
pub fn send<A: ToSocketAddrs>(addr: A, encodings: &[SceneEncoding]) -> Result<Vec<Status>, ClientError> {
    let frames = encodings
        .iter()
        .enumerate()
        .map(|(index, e)| encode_frame(e).map_err(|source| ClientError::Encode { index, source }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(send_frames(addr, &frames)?.into_iter().map(|r| r.status).collect())
}
