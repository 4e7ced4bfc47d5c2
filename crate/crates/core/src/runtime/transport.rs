//! Byte transports: in-process channel pairs and TCP sockets.
//!
//! A [`Connection`] moves whole frames (header + payload, as produced by
//! `encode_message`) between two endpoints. The loopback transport pushes
//! the encoded bytes through channels — messages still pass through the full
//! encode/decode path, so a loopback run exercises the codec exactly like a
//! socket run. The TCP transport reads the fixed-size header first and then
//! exactly the announced payload.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use crate::error::{Error, Result};

use super::message::{parse_header, HEADER_LEN};

/// One endpoint of a reliable, ordered frame pipe.
pub trait Connection: Send {
    fn send(&mut self, frame: &[u8]) -> Result<()>;

    /// Block until a whole frame arrives or the timeout passes
    /// ([`Error::Timeout`]). A closed peer yields [`Error::Transport`].
    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>>;
}

// ---------------------------------------------------------------------------
// Loopback
// ---------------------------------------------------------------------------

pub struct LoopbackConn {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn loopback_pair() -> (LoopbackConn, LoopbackConn) {
    let (atx, brx) = channel();
    let (btx, arx) = channel();
    (
        LoopbackConn { tx: atx, rx: arx },
        LoopbackConn { tx: btx, rx: brx },
    )
}

impl Connection for LoopbackConn {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.tx
            .send(frame.to_vec())
            .map_err(|_| Error::Transport("loopback peer hung up".into()))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>> {
        match self.rx.recv_timeout(timeout) {
            Ok(frame) => Ok(frame),
            Err(RecvTimeoutError::Timeout) => {
                Err(Error::Timeout("frame on loopback connection".into()))
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Transport("loopback peer hung up".into()))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// TCP
// ---------------------------------------------------------------------------

pub struct TcpConn {
    stream: TcpStream,
}

impl TcpConn {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream
            .set_nodelay(true)
            .map_err(|e| Error::Transport(format!("set_nodelay: {e}")))?;
        Ok(Self { stream })
    }

    /// Connect with retries — the server may not be listening yet when a
    /// client process starts.
    pub fn connect<A: ToSocketAddrs + Clone>(addr: A, attempts: u32, delay: Duration) -> Result<Self> {
        let mut last = None;
        for _ in 0..attempts.max(1) {
            match TcpStream::connect(addr.clone()) {
                Ok(stream) => return Self::new(stream),
                Err(e) => {
                    last = Some(e);
                    std::thread::sleep(delay);
                }
            }
        }
        Err(Error::Transport(format!(
            "could not connect after {attempts} attempts: {}",
            last.map(|e| e.to_string()).unwrap_or_default()
        )))
    }
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(
        e.kind(),
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
    )
}

impl Connection for TcpConn {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.stream
            .write_all(frame)
            .and_then(|()| self.stream.flush())
            .map_err(|e| Error::Transport(format!("tcp send: {e}")))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>> {
        self.stream
            .set_read_timeout(Some(timeout))
            .map_err(|e| Error::Transport(format!("set_read_timeout: {e}")))?;
        let mut head = [0u8; HEADER_LEN];
        self.stream.read_exact(&mut head).map_err(|e| {
            if is_timeout(&e) {
                Error::Timeout("frame header on tcp connection".into())
            } else {
                Error::Transport(format!("tcp recv header: {e}"))
            }
        })?;
        let (_, _, _, payload_len) = parse_header(&head)?;
        let mut frame = vec![0u8; HEADER_LEN + payload_len];
        frame[..HEADER_LEN].copy_from_slice(&head);
        // Once the header has landed the payload is already in flight;
        // a timeout mid-body is a broken peer, not a slow round.
        self.stream
            .read_exact(&mut frame[HEADER_LEN..])
            .map_err(|e| Error::Transport(format!("tcp recv payload: {e}")))?;
        Ok(frame)
    }
}

/// Accept exactly `expected` client sockets.
pub fn accept_clients(listener: &TcpListener, expected: usize) -> Result<Vec<TcpConn>> {
    let mut conns = Vec::with_capacity(expected);
    for _ in 0..expected {
        let (stream, _addr) = listener
            .accept()
            .map_err(|e| Error::Transport(format!("accept: {e}")))?;
        conns.push(TcpConn::new(stream)?);
    }
    Ok(conns)
}
