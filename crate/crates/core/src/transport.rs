//! Length-prefixed framing over byte streams.
//!
//! ```text
//! length: u32 LE (= 1 + payload length) | type: u8 | payload
//! ```
//!
//! Frames above [`MAX_FRAME`] bytes are rejected on both ends.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc;

use thiserror::Error;

use crate::field::{FieldElement, FieldParams};

/// Largest accepted value of the length field.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    ConfigHash = 0x01,
    LinearMasked = 0x02,
    GcLabels = 0x03,
    GcOutputLabels = 0x04,
    BeaverOpen = 0x05,
    Logits = 0x06,
    OfflineMaterial = 0x08,
    Abort = 0x7F,
}

impl FrameType {
    pub const ALL: [FrameType; 8] = [
        FrameType::ConfigHash,
        FrameType::LinearMasked,
        FrameType::GcLabels,
        FrameType::GcOutputLabels,
        FrameType::BeaverOpen,
        FrameType::Logits,
        FrameType::OfflineMaterial,
        FrameType::Abort,
    ];

    pub fn from_byte(b: u8) -> Option<FrameType> {
        FrameType::ALL.into_iter().find(|t| *t as u8 == b)
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("connection closed mid-frame")]
    TruncatedFrame,
    #[error("connection closed")]
    Closed,
    #[error("frame length {0} outside 1..={MAX_FRAME}")]
    FrameSize(usize),
    #[error("unknown frame type {0:#04x}")]
    UnknownType(u8),
    #[error("peer aborted: {0}")]
    PeerAborted(String),
    #[error("expected a {expected:?} frame, got {got:?}")]
    Unexpected { expected: FrameType, got: FrameType },
    #[error("payload of {0} bytes is not a multiple of 8")]
    Misaligned(usize),
    #[error("element {0} is not below the modulus")]
    ElementRange(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameType, payload: Vec<u8>) -> Self {
        Frame { kind, payload }
    }

    /// Bytes on the wire including the length prefix.
    pub fn wire_len(&self) -> usize {
        5 + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&(1 + self.payload.len() as u32).to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.payload);
        out
    }
}

/// A vanished peer surfaces as `Closed` whichever direction notices it.
fn peer_error(e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::BrokenPipe
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted => TransportError::Closed,
        _ => e.into(),
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), TransportError> {
    let len = 1 + frame.payload.len();
    if len > MAX_FRAME {
        return Err(TransportError::FrameSize(len));
    }
    w.write_all(&(len as u32).to_le_bytes())
        .map_err(peer_error)?;
    w.write_all(&[frame.kind as u8]).map_err(peer_error)?;
    w.write_all(&frame.payload).map_err(peer_error)?;
    Ok(())
}

/// Reads until `buf` is full. `Ok(false)` means EOF before the first byte.
fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool, TransportError> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(false),
            Ok(0) => return Err(TransportError::TruncatedFrame),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(peer_error(e)),
        }
    }
    Ok(true)
}

/// Reads one whole frame. An `Abort` frame is returned like any other.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, TransportError> {
    let mut len = [0u8; 4];
    if !fill(r, &mut len)? {
        return Err(TransportError::Closed);
    }
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(TransportError::FrameSize(len));
    }
    let mut body = vec![0u8; len];
    if !fill(r, &mut body)? {
        return Err(TransportError::TruncatedFrame);
    }
    let kind = FrameType::from_byte(body[0]).ok_or(TransportError::UnknownType(body[0]))?;
    body.remove(0);
    Ok(Frame {
        kind,
        payload: body,
    })
}

pub fn serialize_elements(xs: &[FieldElement]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn deserialize_elements(
    bytes: &[u8],
    params: &FieldParams,
) -> Result<Vec<FieldElement>, TransportError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(TransportError::Misaligned(bytes.len()));
    }
    bytes
        .chunks_exact(8)
        .map(|c| {
            let v = u64::from_le_bytes(c.try_into().unwrap());
            params
                .element(v)
                .map_err(|_| TransportError::ElementRange(v))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Offline,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub kind: FrameType,
    /// Wire bytes, length prefix included.
    pub bytes: usize,
    pub phase: Phase,
}

/// Append-only log of frames seen by one endpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    fn push(&mut self, e: TranscriptEntry) {
        self.entries.push(e);
    }

    pub fn total_bytes(&self, phase: Phase) -> usize {
        self.entries
            .iter()
            .filter(|e| e.phase == phase)
            .map(|e| e.bytes)
            .sum()
    }

    pub fn bytes_by(&self, phase: Phase, direction: Direction) -> usize {
        self.entries
            .iter()
            .filter(|e| e.phase == phase && e.direction == direction)
            .map(|e| e.bytes)
            .sum()
    }

    pub fn frames(&self, phase: Phase) -> usize {
        self.entries.iter().filter(|e| e.phase == phase).count()
    }

    /// Number of maximal same-direction runs in `phase`.
    pub fn rounds(&self, phase: Phase) -> usize {
        let mut last = None;
        let mut n = 0;
        for e in self.entries.iter().filter(|e| e.phase == phase) {
            if last != Some(e.direction) {
                n += 1;
                last = Some(e.direction);
            }
        }
        n
    }
}

/// One ordered duplex endpoint.
pub trait Channel {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError>;

    /// Receives the next frame; an `Abort` frame becomes `PeerAborted`.
    fn recv(&mut self) -> Result<Frame, TransportError>;

    fn transcript(&self) -> &Transcript;

    fn set_phase(&mut self, phase: Phase);

    fn recv_expect(&mut self, kind: FrameType) -> Result<Vec<u8>, TransportError> {
        let f = self.recv()?;
        if f.kind != kind {
            return Err(TransportError::Unexpected {
                expected: kind,
                got: f.kind,
            });
        }
        Ok(f.payload)
    }

    /// Best-effort abort notice; errors are ignored because the peer may be gone.
    fn abort(&mut self, reason: &str) {
        let _ = self.send(Frame::new(FrameType::Abort, reason.as_bytes().to_vec()));
    }
}

/// Framing over any reader/writer pair.
pub struct FramedChannel<R: Read, W: Write> {
    reader: BufReader<R>,
    writer: BufWriter<W>,
    transcript: Transcript,
    phase: Phase,
}

impl<R: Read, W: Write> FramedChannel<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        FramedChannel {
            reader: BufReader::with_capacity(1 << 16, reader),
            writer: BufWriter::with_capacity(1 << 16, writer),
            transcript: Transcript::default(),
            phase: Phase::Offline,
        }
    }

    fn log(&mut self, direction: Direction, frame: &Frame) {
        let e = TranscriptEntry {
            direction,
            kind: frame.kind,
            bytes: frame.wire_len(),
            phase: self.phase,
        };
        self.transcript.push(e);
    }
}

impl<R: Read, W: Write> Channel for FramedChannel<R, W> {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        write_frame(&mut self.writer, &frame)?;
        self.writer.flush().map_err(peer_error)?;
        self.log(Direction::Sent, &frame);
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let frame = read_frame(&mut self.reader)?;
        self.log(Direction::Received, &frame);
        if frame.kind == FrameType::Abort {
            return Err(TransportError::PeerAborted(
                String::from_utf8_lossy(&frame.payload).into_owned(),
            ));
        }
        Ok(frame)
    }

    fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }
}

pub type TcpChannel = FramedChannel<TcpStream, TcpStream>;

impl FramedChannel<TcpStream, TcpStream> {
    pub fn tcp(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Ok(FramedChannel::new(reader, stream))
    }
}

/// Write half of an in-process byte pipe.
pub struct PipeWriter {
    tx: mpsc::Sender<Vec<u8>>,
}

/// Read half of an in-process byte pipe. Reports EOF once the writer is gone.
pub struct PipeReader {
    rx: mpsc::Receiver<Vec<u8>>,
    buf: Vec<u8>,
    pos: usize,
}

impl Write for PipeWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        self.tx
            .send(data.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "pipe reader dropped"))?;
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        while self.pos == self.buf.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.buf = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

pub fn pipe() -> (PipeWriter, PipeReader) {
    let (tx, rx) = mpsc::channel();
    (
        PipeWriter { tx },
        PipeReader {
            rx,
            buf: Vec::new(),
            pos: 0,
        },
    )
}

pub type LoopbackChannel = FramedChannel<PipeReader, PipeWriter>;

/// Two connected in-process endpoints.
pub fn loopback() -> (LoopbackChannel, LoopbackChannel) {
    let (w1, r1) = pipe();
    let (w2, r2) = pipe();
    (FramedChannel::new(r2, w1), FramedChannel::new(r1, w2))
}
