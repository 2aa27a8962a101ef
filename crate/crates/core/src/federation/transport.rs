//! Framed message transport: length-prefixed JSON over a reliable byte
//! stream, with a TCP implementation and an in-process loopback pipe that
//! honors the identical contract (same bytes, same framing, blocking reads
//! with a timeout).

use crate::error::{Error, Result};
use crate::federation::messages::{RoundMessage, PROTOCOL_VERSION};
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Frames larger than this are treated as protocol corruption.
const MAX_FRAME: u32 = 64 * 1024 * 1024;

/// A reliable, ordered frame channel.
pub trait FrameIo {
    fn send_frame(&mut self, bytes: &[u8]) -> Result<()>;
    fn recv_frame(&mut self) -> Result<Vec<u8>>;
}

/// Serialize a message into one frame: 4-byte big-endian length, then JSON.
pub fn encode_frame(msg: &RoundMessage) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(msg)?;
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decode the JSON body of a frame (length prefix already stripped) and
/// check the protocol version.
pub fn decode_body(body: &[u8]) -> Result<RoundMessage> {
    let msg: RoundMessage = serde_json::from_slice(body)
        .map_err(|e| Error::Protocol(format!("malformed frame: {e}")))?;
    if msg.protocol_version != PROTOCOL_VERSION {
        return Err(Error::Protocol(format!(
            "protocol version mismatch: peer speaks {}, this node speaks {PROTOCOL_VERSION}",
            msg.protocol_version
        )));
    }
    Ok(msg)
}

pub fn send_message<T: FrameIo + ?Sized>(io: &mut T, msg: &RoundMessage) -> Result<()> {
    let body = serde_json::to_vec(msg)?;
    io.send_frame(&body)
}

pub fn recv_message<T: FrameIo + ?Sized>(io: &mut T) -> Result<RoundMessage> {
    decode_body(&io.recv_frame()?)
}

// ---------------------------------------------------------------------------
// TCP
// ---------------------------------------------------------------------------

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream, timeout: Duration) -> Result<Self> {
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    /// Connect with retries so a school can start slightly before its
    /// server is listening.
    pub fn connect<A: ToSocketAddrs + Clone>(addr: A, timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        loop {
            match TcpStream::connect(addr.clone()) {
                Ok(stream) => return Self::new(stream, timeout),
                Err(e) => {
                    if Instant::now() >= deadline {
                        return Err(Error::Protocol(format!("connect failed: {e}")));
                    }
                    std::thread::sleep(Duration::from_millis(50));
                }
            }
        }
    }
}

impl FrameIo for TcpTransport {
    fn send_frame(&mut self, body: &[u8]) -> Result<()> {
        let len = (body.len() as u32).to_be_bytes();
        self.stream.write_all(&len)?;
        self.stream.write_all(body)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        let mut len = [0u8; 4];
        self.stream
            .read_exact(&mut len)
            .map_err(|e| Error::Protocol(format!("frame read failed: {e}")))?;
        let len = u32::from_be_bytes(len);
        if len > MAX_FRAME {
            return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
        }
        let mut body = vec![0u8; len as usize];
        self.stream
            .read_exact(&mut body)
            .map_err(|e| Error::Protocol(format!("truncated frame: {e}")))?;
        Ok(body)
    }
}

// ---------------------------------------------------------------------------
// Loopback
// ---------------------------------------------------------------------------

#[derive(Default)]
struct PipeState {
    buf: VecDeque<u8>,
    closed: bool,
}

type Shared = Arc<(Mutex<PipeState>, Condvar)>;

/// One end of an in-process duplex byte pipe. Reads block until enough
/// bytes arrive or the timeout elapses; the framing on top is byte-for-byte
/// the TCP framing.
pub struct LoopbackPipe {
    rx: Shared,
    tx: Shared,
    timeout: Duration,
}

/// A connected pair of loopback endpoints.
pub fn loopback_pair(timeout: Duration) -> (LoopbackPipe, LoopbackPipe) {
    let a: Shared = Arc::new((Mutex::new(PipeState::default()), Condvar::new()));
    let b: Shared = Arc::new((Mutex::new(PipeState::default()), Condvar::new()));
    (
        LoopbackPipe { rx: a.clone(), tx: b.clone(), timeout },
        LoopbackPipe { rx: b, tx: a, timeout },
    )
}

impl LoopbackPipe {
    fn write_bytes(&self, bytes: &[u8]) -> Result<()> {
        let (lock, cv) = &*self.tx;
        let mut state = lock.lock().unwrap();
        if state.closed {
            return Err(Error::Protocol("loopback peer closed".into()));
        }
        state.buf.extend(bytes);
        cv.notify_all();
        Ok(())
    }

    fn read_bytes(&self, n: usize) -> Result<Vec<u8>> {
        let (lock, cv) = &*self.rx;
        let deadline = Instant::now() + self.timeout;
        let mut state = lock.lock().unwrap();
        loop {
            if state.buf.len() >= n {
                return Ok(state.buf.drain(..n).collect());
            }
            if state.closed {
                return Err(Error::Protocol("loopback connection closed mid-frame".into()));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Protocol("loopback read timed out".into()));
            }
            let (next, timed_out) = cv.wait_timeout(state, deadline - now).unwrap();
            state = next;
            if timed_out.timed_out() && state.buf.len() < n {
                if state.closed {
                    return Err(Error::Protocol("loopback connection closed mid-frame".into()));
                }
                return Err(Error::Protocol("loopback read timed out".into()));
            }
        }
    }
}

impl Drop for LoopbackPipe {
    fn drop(&mut self) {
        for shared in [&self.rx, &self.tx] {
            let (lock, cv) = &**shared;
            lock.lock().unwrap().closed = true;
            cv.notify_all();
        }
    }
}

impl FrameIo for LoopbackPipe {
    fn send_frame(&mut self, body: &[u8]) -> Result<()> {
        let mut frame = Vec::with_capacity(4 + body.len());
        frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
        frame.extend_from_slice(body);
        self.write_bytes(&frame)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        let len = u32::from_be_bytes(self.read_bytes(4)?.try_into().unwrap());
        if len > MAX_FRAME {
            return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
        }
        self.read_bytes(len as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::messages::{GradientMessage, Payload};
    use std::net::TcpListener;

    fn sample_message() -> RoundMessage {
        RoundMessage::new(
            7,
            Payload::Grads(GradientMessage {
                school_id: 3,
                round: 7,
                grad: vec![0.1, -1.0 / 3.0, 4e-300, -7.25],
                loglik: -123.456,
            }),
        )
    }

    #[test]
    fn loopback_round_trip_is_lossless() {
        let (mut a, mut b) = loopback_pair(Duration::from_secs(1));
        let msg = sample_message();
        send_message(&mut a, &msg).unwrap();
        let got = recv_message(&mut b).unwrap();
        assert_eq!(got, msg);
    }

    #[test]
    fn tcp_and_loopback_produce_identical_bytes() {
        let msg = sample_message();
        let reference = encode_frame(&msg).unwrap();

        // Through the loopback.
        let (mut a, mut b) = loopback_pair(Duration::from_secs(1));
        send_message(&mut a, &msg).unwrap();
        let loop_body = b.recv_frame().unwrap();
        assert_eq!(loop_body, reference[4..]);

        // Through a real socket.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let sender = std::thread::spawn(move || {
            let mut t =
                TcpTransport::connect(addr, Duration::from_secs(5)).unwrap();
            send_message(&mut t, &sample_message()).unwrap();
        });
        let (stream, _) = listener.accept().unwrap();
        let mut t = TcpTransport::new(stream, Duration::from_secs(5)).unwrap();
        let tcp_body = t.recv_frame().unwrap();
        sender.join().unwrap();
        assert_eq!(tcp_body, loop_body);
        assert_eq!(decode_body(&tcp_body).unwrap(), msg);
    }

    #[test]
    fn truncated_frame_is_a_protocol_error() {
        let msg = sample_message();
        let frame = encode_frame(&msg).unwrap();
        let (mut a, mut b) = loopback_pair(Duration::from_millis(100));
        // Write the prefix and only half the body, then drop the sender.
        a.write_bytes(&frame[..frame.len() / 2]).unwrap();
        drop(a);
        let err = b.recv_frame().unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn malformed_body_is_a_protocol_error() {
        assert!(matches!(decode_body(b"not json"), Err(Error::Protocol(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut msg = sample_message();
        msg.protocol_version = 999;
        let body = serde_json::to_vec(&msg).unwrap();
        let err = decode_body(&body).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn loopback_read_times_out() {
        let (_a, mut b) = loopback_pair(Duration::from_millis(50));
        let start = Instant::now();
        let err = b.recv_frame().unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        assert!(start.elapsed() >= Duration::from_millis(40));
    }
}
