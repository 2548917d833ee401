//! Edge/cloud split: the `SYMV` frame format, the policy-enforcing receiver
//! and the sending client.
//!
//! On the socket every frame is preceded by its byte length as a u32 (LE).
//! The receiver answers each frame with one status byte, followed on
//! acceptance by the u32 (LE) object count it received.

pub mod client;
pub mod frame;
pub mod server;

pub use client::{send, send_frames, ClientError, Reply};
pub use frame::{decode_frame, decode_frame_prefix, encode_frame, split_frames, FrameError};
pub use server::{FrameSink, MemorySink, RecordingSink, Server, ServerHandle, ServerPolicy, Status};
