//! Wire format between the robot controller and the vision host, and an
//! in-process duplex byte stream standing in for the serial line.
//!
//! Every frame is `0xAA, type, payload.., checksum` where the checksum is the
//! XOR of all preceding bytes.
//!
//! | type | meaning           | payload                        |
//! |------|-------------------|--------------------------------|
//! | 0x01 | position request  | none                           |
//! | 0x02 | position response | X, Y: `i16` little-endian mm   |
//! | 0x03 | no object         | none                           |
//! | 0x0F | error             | one error code byte            |

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

pub const START: u8 = 0xAA;
pub const TYPE_REQUEST: u8 = 0x01;
pub const TYPE_POSITION: u8 = 0x02;
pub const TYPE_NO_OBJECT: u8 = 0x03;
pub const TYPE_ERROR: u8 = 0x0F;

/// Error codes carried by a 0x0F frame.
pub mod code {
    pub const CAMERA_TIMEOUT: u8 = 0x01;
    pub const DETECTION_FAILED: u8 = 0x02;
    pub const NO_GROUND_INTERSECTION: u8 = 0x03;
    pub const BAD_REQUEST: u8 = 0x04;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AcqFrame {
    PositionRequest,
    /// Object position on the ground in the robot frame, millimeters.
    PositionResponse { x_mm: i16, y_mm: i16 },
    NoObject,
    Error(u8),
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("bad start byte 0x{0:02x}")]
    BadStart(u8),
    #[error("unknown frame type 0x{0:02x}")]
    UnknownType(u8),
    #[error("short frame: need {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("frame is {got} bytes, type requires {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("checksum mismatch: computed 0x{computed:02x}, received 0x{received:02x}")]
    ChecksumMismatch { computed: u8, received: u8 },
    #[error("position {0} m does not fit the i16 millimeter range")]
    OutOfRange(f64),
}

pub fn checksum(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0, |a, b| a ^ b)
}

/// Payload length fixed by a frame type.
pub fn payload_len(frame_type: u8) -> Option<usize> {
    match frame_type {
        TYPE_REQUEST | TYPE_NO_OBJECT => Some(0),
        TYPE_POSITION => Some(4),
        TYPE_ERROR => Some(1),
        _ => None,
    }
}

fn to_mm(meters: f64) -> Result<i16, FrameError> {
    let mm = (meters * 1000.0).round();
    if !(mm >= i16::MIN as f64 && mm <= i16::MAX as f64) {
        return Err(FrameError::OutOfRange(meters));
    }
    Ok(mm as i16)
}

impl AcqFrame {
    pub fn position(x_m: f64, y_m: f64) -> Result<Self, FrameError> {
        Ok(AcqFrame::PositionResponse {
            x_mm: to_mm(x_m)?,
            y_mm: to_mm(y_m)?,
        })
    }

    pub fn frame_type(&self) -> u8 {
        match self {
            AcqFrame::PositionRequest => TYPE_REQUEST,
            AcqFrame::PositionResponse { .. } => TYPE_POSITION,
            AcqFrame::NoObject => TYPE_NO_OBJECT,
            AcqFrame::Error(_) => TYPE_ERROR,
        }
    }

    /// Position in meters, for response frames.
    pub fn meters(&self) -> Option<(f64, f64)> {
        match *self {
            AcqFrame::PositionResponse { x_mm, y_mm } => {
                Some((x_mm as f64 / 1000.0, y_mm as f64 / 1000.0))
            }
            _ => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![START, self.frame_type()];
        match *self {
            AcqFrame::PositionResponse { x_mm, y_mm } => {
                out.extend_from_slice(&x_mm.to_le_bytes());
                out.extend_from_slice(&y_mm.to_le_bytes());
            }
            AcqFrame::Error(c) => out.push(c),
            AcqFrame::PositionRequest | AcqFrame::NoObject => {}
        }
        out.push(checksum(&out));
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < 2 {
            return Err(FrameError::Truncated {
                expected: 3,
                got: bytes.len(),
            });
        }
        if bytes[0] != START {
            return Err(FrameError::BadStart(bytes[0]));
        }
        let ty = bytes[1];
        let len = payload_len(ty).ok_or(FrameError::UnknownType(ty))? + 3;
        if bytes.len() < len {
            return Err(FrameError::Truncated {
                expected: len,
                got: bytes.len(),
            });
        }
        if bytes.len() > len {
            return Err(FrameError::LengthMismatch {
                expected: len,
                got: bytes.len(),
            });
        }
        let computed = checksum(&bytes[..len - 1]);
        if computed != bytes[len - 1] {
            return Err(FrameError::ChecksumMismatch {
                computed,
                received: bytes[len - 1],
            });
        }
        let p = &bytes[2..len - 1];
        Ok(match ty {
            TYPE_REQUEST => AcqFrame::PositionRequest,
            TYPE_POSITION => AcqFrame::PositionResponse {
                x_mm: i16::from_le_bytes([p[0], p[1]]),
                y_mm: i16::from_le_bytes([p[2], p[3]]),
            },
            TYPE_NO_OBJECT => AcqFrame::NoObject,
            _ => AcqFrame::Error(p[0]),
        })
    }
}

/// Reads one frame from a byte stream: start byte, type, then the payload
/// and checksum that type requires.
pub fn read_frame(reader: &mut impl Read) -> crate::Result<AcqFrame> {
    let mut head = [0u8; 2];
    read_exact_or_truncated(reader, &mut head, 0, 3)?;
    if head[0] != START {
        return Err(FrameError::BadStart(head[0]).into());
    }
    let len = payload_len(head[1]).ok_or(FrameError::UnknownType(head[1]))? + 3;
    let mut frame = vec![0u8; len];
    frame[..2].copy_from_slice(&head);
    read_exact_or_truncated(reader, &mut frame[2..], 2, len)?;
    Ok(AcqFrame::decode(&frame)?)
}

fn read_exact_or_truncated(
    reader: &mut impl Read,
    buf: &mut [u8],
    already: usize,
    expected: usize,
) -> crate::Result<()> {
    let mut got = 0;
    while got < buf.len() {
        match reader.read(&mut buf[got..]) {
            Ok(0) => {
                return Err(FrameError::Truncated {
                    expected,
                    got: already + got,
                }
                .into())
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn write_frame(writer: &mut impl Write, frame: &AcqFrame) -> crate::Result<()> {
    writer.write_all(&frame.encode())?;
    writer.flush()?;
    Ok(())
}

#[derive(Default)]
struct Pipe {
    bytes: VecDeque<u8>,
    closed: bool,
}

#[derive(Default)]
struct Channel {
    pipe: Mutex<Pipe>,
    ready: Condvar,
}

impl Channel {
    fn close(&self) {
        self.pipe.lock().unwrap().closed = true;
        self.ready.notify_all();
    }
}

/// One end of an in-process byte stream. Reads block until bytes arrive, the
/// peer is dropped (end of stream) or the read timeout expires.
pub struct Endpoint {
    rx: Arc<Channel>,
    tx: Arc<Channel>,
    read_timeout: Option<Duration>,
}

/// A connected pair of endpoints; bytes written to one are read from the
/// other.
pub fn duplex() -> (Endpoint, Endpoint) {
    let a = Arc::new(Channel::default());
    let b = Arc::new(Channel::default());
    (
        Endpoint {
            rx: a.clone(),
            tx: b.clone(),
            read_timeout: None,
        },
        Endpoint {
            rx: b,
            tx: a,
            read_timeout: None,
        },
    )
}

impl Endpoint {
    pub fn set_read_timeout(&mut self, timeout: Option<Duration>) {
        self.read_timeout = timeout;
    }

    /// Bytes waiting to be read.
    pub fn pending(&self) -> usize {
        self.rx.pipe.lock().unwrap().bytes.len()
    }
}

impl Read for Endpoint {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        let deadline = self.read_timeout.map(|t| Instant::now() + t);
        let mut pipe = self.rx.pipe.lock().unwrap();
        while pipe.bytes.is_empty() && !pipe.closed {
            pipe = match deadline {
                None => self.rx.ready.wait(pipe).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(io::Error::new(io::ErrorKind::TimedOut, "read timed out"));
                    }
                    self.rx.ready.wait_timeout(pipe, d - now).unwrap().0
                }
            };
        }
        let n = buf.len().min(pipe.bytes.len());
        for (dst, src) in buf.iter_mut().zip(pipe.bytes.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }
}

impl Write for Endpoint {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let mut pipe = self.tx.pipe.lock().unwrap();
        if pipe.closed {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "peer closed"));
        }
        pipe.bytes.extend(buf);
        self.tx.ready.notify_all();
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.tx.close();
        self.rx.close();
    }
}
