//! Length-prefixed binary messages exchanged between clients and the server,
//! and two transports that carry them.
//!
//! Every frame is a 32-bit little-endian body length followed by the body.
//! The body starts with a one-byte tag:
//!
//! - `1` UPLOAD: client id, round, encryption mode, tau, bucket count,
//!   epsilon, sample count, shape, then the payload (16-bit bucket indices,
//!   or f64 values in the unquantized modes).
//! - `2` SYNC: round, SHA-256 of the table, shape, f64 table values.
//! - `3` ACK: client id, round.
//!
//! Strings are a 32-bit length followed by UTF-8 bytes; shapes are a 32-bit
//! rank followed by 64-bit extents.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::binio::{Reader, Writer};
use crate::code_model::CodeEmbeddingTable;
use crate::error::{Error, Result};
use crate::privacy::{EncryptedGradient, NoiseMode, Payload};
use crate::server::ClientUpload;

const TAG_UPLOAD: u8 = 1;
const TAG_SYNC: u8 = 2;
const TAG_ACK: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyncMessage {
    pub round: u64,
    pub checksum: [u8; 32],
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl SyncMessage {
    pub fn from_table(round: u64, table: &CodeEmbeddingTable) -> Self {
        let (d, m, v) = table.shape();
        SyncMessage {
            round,
            checksum: table.checksum(),
            shape: vec![d, m, v],
            values: table.as_slice().to_vec(),
        }
    }

    /// Rebuilds the table and checks it against the carried checksum.
    pub fn to_table(&self) -> Result<CodeEmbeddingTable> {
        let shape: [usize; 3] = self
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::Protocol(format!("sync shape {:?} is not 3-d", self.shape)))?;
        let e = Array3::from_shape_vec(shape, self.values.clone())
            .map_err(|e| Error::Protocol(format!("sync tensor: {e}")))?;
        let table = CodeEmbeddingTable { e };
        if table.checksum() != self.checksum {
            return Err(Error::Protocol(format!(
                "sync checksum mismatch in round {}",
                self.round
            )));
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Upload(ClientUpload),
    Sync(SyncMessage),
    Ack { client_id: String, round: u64 },
}

fn mode_byte(m: NoiseMode) -> u8 {
    match m {
        NoiseMode::Randomized => 0,
        NoiseMode::NoNoise => 1,
        NoiseMode::Identity => 2,
        NoiseMode::Off => 3,
    }
}

fn mode_from_byte(b: u8) -> Result<NoiseMode> {
    Ok(match b {
        0 => NoiseMode::Randomized,
        1 => NoiseMode::NoNoise,
        2 => NoiseMode::Identity,
        3 => NoiseMode::Off,
        _ => return Err(Error::Protocol(format!("unknown encryption mode byte {b}"))),
    })
}

fn write_shape(w: &mut Writer, shape: &[usize]) {
    w.u32(shape.len() as u32);
    for &d in shape {
        w.u64(d as u64);
    }
}

fn read_shape(r: &mut Reader) -> Result<(Vec<usize>, usize)> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Protocol(format!("tensor rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = usize::try_from(r.u64()?)
            .map_err(|_| Error::Protocol("tensor extent overflows".into()))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Protocol("tensor size overflows".into()))?;
        shape.push(d);
    }
    Ok((shape, count))
}

impl Message {
    /// Framed bytes: body length then body.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Message::Upload(up) => {
                let e = &up.encrypted;
                w.u8(TAG_UPLOAD)
                    .string(&up.client_id)
                    .u64(up.round)
                    .u8(mode_byte(e.mode))
                    .f64(e.tau)
                    .u32(e.buckets)
                    .f64(e.epsilon)
                    .u64(e.sample_count);
                write_shape(&mut w, &e.shape);
                match &e.payload {
                    Payload::Buckets(v) => w.u16_slice(v),
                    Payload::Real(v) => w.f64_slice(v),
                };
            }
            Message::Sync(s) => {
                w.u8(TAG_SYNC).u64(s.round).bytes(&s.checksum);
                write_shape(&mut w, &s.shape);
                w.f64_slice(&s.values);
            }
            Message::Ack { client_id, round } => {
                w.u8(TAG_ACK).string(client_id).u64(*round);
            }
        }
        let mut framed = Vec::with_capacity(w.buf.len() + 4);
        framed.extend_from_slice(&(w.buf.len() as u32).to_le_bytes());
        framed.extend_from_slice(&w.buf);
        framed
    }

    /// Decodes one message body (without the length prefix).
    pub fn decode_body(body: &[u8]) -> Result<Message> {
        let mut r = Reader::new(body, "wire message");
        let msg = match r.u8()? {
            TAG_UPLOAD => {
                let client_id = r.string()?;
                let round = r.u64()?;
                let mode = mode_from_byte(r.u8()?)?;
                let tau = r.f64()?;
                let buckets = r.u32()?;
                let epsilon = r.f64()?;
                let sample_count = r.u64()?;
                let (shape, count) = read_shape(&mut r)?;
                let payload = if mode.quantizes() {
                    Payload::Buckets(r.u16_vec(count)?)
                } else {
                    Payload::Real(r.f64_vec(count)?)
                };
                let encrypted = EncryptedGradient {
                    payload,
                    shape,
                    sample_count,
                    tau,
                    buckets,
                    epsilon,
                    mode,
                };
                encrypted.validate()?;
                Message::Upload(ClientUpload {
                    client_id,
                    round,
                    encrypted,
                })
            }
            TAG_SYNC => {
                let round = r.u64()?;
                let checksum: [u8; 32] = r.take(32)?.try_into().unwrap();
                let (shape, count) = read_shape(&mut r)?;
                let values = r.f64_vec(count)?;
                Message::Sync(SyncMessage {
                    round,
                    checksum,
                    shape,
                    values,
                })
            }
            TAG_ACK => Message::Ack {
                client_id: r.string()?,
                round: r.u64()?,
            },
            tag => return Err(Error::Protocol(format!("unknown message tag {tag}"))),
        };
        r.finish()?;
        Ok(msg)
    }

    /// Splits a byte stream of frames into messages. A trailing partial
    /// frame is left unconsumed; the second value is the bytes consumed.
    pub fn decode_stream(bytes: &[u8]) -> Result<(Vec<Message>, usize)> {
        let mut out = Vec::new();
        let mut pos = 0;
        while bytes.len() - pos >= 4 {
            let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            if bytes.len() - pos - 4 < len {
                break;
            }
            out.push(Message::decode_body(&bytes[pos + 4..pos + 4 + len])?);
            pos += 4 + len;
        }
        Ok((out, pos))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Server,
    Client(String),
}

/// Moves framed messages between endpoints.
pub trait Transport: Send {
    /// Delivers `msg` to `to`'s mailbox and returns the framed size.
    fn send(&mut self, to: &Endpoint, msg: &Message) -> Result<usize>;
    /// Drains every message waiting at `at`.
    fn recv_all(&mut self, at: &Endpoint) -> Result<Vec<Message>>;
}

/// In-process transport that keeps a copy of every frame it carried.
#[derive(Debug, Default)]
pub struct Loopback {
    queues: HashMap<Endpoint, VecDeque<Vec<u8>>>,
    log: Vec<(Endpoint, Vec<u8>)>,
}

impl Loopback {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every frame sent so far, with its destination.
    pub fn log(&self) -> &[(Endpoint, Vec<u8>)] {
        &self.log
    }
}

impl Transport for Loopback {
    fn send(&mut self, to: &Endpoint, msg: &Message) -> Result<usize> {
        let frame = msg.encode();
        let n = frame.len();
        self.log.push((to.clone(), frame.clone()));
        self.queues.entry(to.clone()).or_default().push_back(frame);
        Ok(n)
    }

    fn recv_all(&mut self, at: &Endpoint) -> Result<Vec<Message>> {
        let Some(q) = self.queues.get_mut(at) else {
            return Ok(Vec::new());
        };
        q.drain(..)
            .map(|frame| Message::decode_body(&frame[4..]))
            .collect()
    }
}

/// Mailboxes as append-only files in a directory, one per endpoint.
#[derive(Debug)]
pub struct FileTransport {
    dir: PathBuf,
    cursors: HashMap<Endpoint, usize>,
}

impl FileTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(FileTransport {
            dir,
            cursors: HashMap::new(),
        })
    }

    pub fn mailbox(&self, at: &Endpoint) -> PathBuf {
        match at {
            Endpoint::Server => self.dir.join("server.wire"),
            Endpoint::Client(id) => self.dir.join(format!("client-{id}.wire")),
        }
    }

    /// Every message ever delivered to `at`, including consumed ones.
    pub fn read_mailbox(path: &Path) -> Result<Vec<Message>> {
        match fs::read(path) {
            Ok(bytes) => Ok(Message::decode_stream(&bytes)?.0),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Transport for FileTransport {
    fn send(&mut self, to: &Endpoint, msg: &Message) -> Result<usize> {
        let path = self.mailbox(to);
        let frame = msg.encode();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(&frame).map_err(|e| Error::io(&path, e))?;
        Ok(frame.len())
    }

    fn recv_all(&mut self, at: &Endpoint) -> Result<Vec<Message>> {
        let path = self.mailbox(at);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let cursor = self.cursors.entry(at.clone()).or_insert(0);
        let (msgs, used) = Message::decode_stream(&bytes[*cursor..])?;
        *cursor += used;
        Ok(msgs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_upload(mode: NoiseMode) -> Message {
        let payload = if mode.quantizes() {
            Payload::Buckets(vec![0, 5, 255, 7, 1, 2])
        } else {
            Payload::Real(vec![0.5, -1.25, 3.0, 0.0, 1e-9, -0.0])
        };
        Message::Upload(ClientUpload {
            client_id: "arts".into(),
            round: 4,
            encrypted: EncryptedGradient {
                payload,
                shape: vec![1, 2, 3],
                sample_count: 77,
                tau: 0.01,
                buckets: 256,
                epsilon: 0.5,
                mode,
            },
        })
    }

    #[test]
    fn messages_round_trip() {
        let table = CodeEmbeddingTable::init(2, 3, 2, 5).unwrap();
        let msgs = vec![
            sample_upload(NoiseMode::Randomized),
            sample_upload(NoiseMode::Identity),
            Message::Sync(SyncMessage::from_table(3, &table)),
            Message::Ack {
                client_id: "office".into(),
                round: 3,
            },
        ];
        let mut stream = Vec::new();
        for m in &msgs {
            let framed = m.encode();
            assert_eq!(Message::decode_body(&framed[4..]).unwrap(), *m);
            stream.extend(framed);
        }
        let (back, used) = Message::decode_stream(&stream).unwrap();
        assert_eq!(back, msgs);
        assert_eq!(used, stream.len());
        let (partial, used) = Message::decode_stream(&stream[..stream.len() - 3]).unwrap();
        assert_eq!(partial.len(), 3);
        assert!(used < stream.len());
    }

    #[test]
    fn upload_size_is_header_plus_payload() {
        let framed = sample_upload(NoiseMode::Randomized).encode();
        let header = 4 + 1 + (4 + 4) + 8 + 1 + 8 + 4 + 8 + 8 + (4 + 3 * 8);
        assert_eq!(framed.len(), header + 6 * 2);
    }

    #[test]
    fn corrupt_messages_rejected() {
        let mut framed = sample_upload(NoiseMode::Randomized).encode();
        framed[4] = 9;
        assert!(Message::decode_body(&framed[4..]).is_err());
        let framed = sample_upload(NoiseMode::Randomized).encode();
        assert!(Message::decode_body(&framed[4..framed.len() - 1]).is_err());
        let mut body = framed[4..].to_vec();
        body.push(0);
        assert!(Message::decode_body(&body).is_err());
    }

    #[test]
    fn sync_checksum_verified() {
        let table = CodeEmbeddingTable::init(2, 3, 2, 5).unwrap();
        let mut s = SyncMessage::from_table(0, &table);
        assert_eq!(s.to_table().unwrap(), table);
        s.values[0] += 1e-12;
        assert!(s.to_table().is_err());
    }

    #[test]
    fn loopback_delivers_in_order() {
        let mut t = Loopback::new();
        let a = Message::Ack {
            client_id: "a".into(),
            round: 0,
        };
        let b = sample_upload(NoiseMode::NoNoise);
        t.send(&Endpoint::Server, &a).unwrap();
        t.send(&Endpoint::Server, &b).unwrap();
        assert_eq!(t.recv_all(&Endpoint::Server).unwrap(), vec![a, b]);
        assert!(t.recv_all(&Endpoint::Server).unwrap().is_empty());
        assert!(t.recv_all(&Endpoint::Client("x".into())).unwrap().is_empty());
        assert_eq!(t.log().len(), 2);
    }

    #[test]
    fn file_transport_delivers_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = FileTransport::new(dir.path()).unwrap();
        let to = Endpoint::Client("office".into());
        let m1 = sample_upload(NoiseMode::Off);
        let m2 = Message::Ack {
            client_id: "s".into(),
            round: 1,
        };
        t.send(&to, &m1).unwrap();
        assert_eq!(t.recv_all(&to).unwrap(), vec![m1.clone()]);
        t.send(&to, &m2).unwrap();
        assert_eq!(t.recv_all(&to).unwrap(), vec![m2.clone()]);
        // A second reader over the same directory sees the whole history.
        let mut other = FileTransport::new(dir.path()).unwrap();
        assert_eq!(other.recv_all(&to).unwrap(), vec![m1.clone(), m2.clone()]);
        assert_eq!(
            FileTransport::read_mailbox(&t.mailbox(&to)).unwrap(),
            vec![m1, m2]
        );
    }
}
