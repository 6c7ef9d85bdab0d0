use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::time::Duration;

use super::{Message, ProtocolError, Result, MAX_FRAME};

/// Serialises `msg` as one frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    msg.validate().map_err(ProtocolError::Invalid)?;
    let payload = serde_json::to_vec(msg).map_err(|e| ProtocolError::Invalid(e.to_string()))?;
    if payload.len() > MAX_FRAME {
        return Err(ProtocolError::FrameTooLarge(payload.len()));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes exactly one frame; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Message> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(ProtocolError::Malformed(format!(
            "{} bytes after frame",
            bytes.len() - used
        )));
    }
    Ok(msg)
}

/// Decodes the frame at the start of `bytes`, returning it and the bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize)> {
    let Some(header) = bytes.get(..4) else {
        return Err(ProtocolError::NeedMoreData);
    };
    let len = u32::from_be_bytes(header.try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let Some(payload) = bytes.get(4..4 + len) else {
        return Err(ProtocolError::NeedMoreData);
    };
    Ok((parse_payload(payload)?, 4 + len))
}

fn parse_payload(payload: &[u8]) -> Result<Message> {
    let msg: Message =
        serde_json::from_slice(payload).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    msg.validate().map_err(ProtocolError::Invalid)?;
    Ok(msg)
}

/// Incremental decoder for a byte stream carrying consecutive frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `Ok(None)` if more bytes are needed. A malformed
    /// frame is consumed and reported; an oversize header poisons the stream.
    pub fn next_message(&mut self) -> Result<Option<Message>> {
        match decode_prefix(&self.buf) {
            Ok((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some(msg))
            }
            Err(ProtocolError::NeedMoreData) => Ok(None),
            Err(e @ (ProtocolError::Malformed(_) | ProtocolError::Invalid(_))) => {
                let len = u32::from_be_bytes(self.buf[..4].try_into().expect("4 bytes")) as usize;
                self.buf.drain(..4 + len);
                Err(e)
            }
            Err(e) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    let frame = encode(msg)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. EOF before the first header byte is [`ProtocolError::Closed`];
/// EOF anywhere later is [`ProtocolError::Truncated`].
pub fn read_message<R: Read>(r: &mut R) -> Result<Message> {
    let mut header = [0u8; 4];
    read_full(r, &mut header, true)?;
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let mut payload = vec![0u8; len];
    read_full(r, &mut payload, false)?;
    parse_payload(&payload)
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8], at_boundary: bool) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 && at_boundary => return Err(ProtocolError::Closed),
            Ok(0) => return Err(ProtocolError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// A framed TCP connection with independently owned read and write halves.
#[derive(Debug)]
pub struct FramedConn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl FramedConn {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let writer = BufWriter::new(stream.try_clone()?);
        Ok(Self {
            reader: BufReader::new(stream),
            writer,
        })
    }

    pub fn connect(addr: &str, timeout: Duration) -> Result<Self> {
        use std::net::ToSocketAddrs;
        let mut last = None;
        for sa in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&sa, timeout) {
                Ok(s) => return Ok(Self::new(s)?),
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .unwrap_or_else(|| {
                io::Error::new(io::ErrorKind::NotFound, format!("no address for {addr}"))
            })
            .into())
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        write_message(&mut self.writer, msg)
    }

    pub fn recv(&mut self) -> Result<Message> {
        read_message(&mut self.reader)
    }

    /// Sends a request and waits for its reply. `ERROR` replies become
    /// [`ProtocolError::Remote`]; any other type than the expected one is rejected.
    pub fn request(&mut self, msg: &Message) -> Result<Message> {
        let expected = msg.reply_kind().unwrap_or("a reply");
        self.send(msg)?;
        match self.recv()? {
            Message::Error { code, reason, .. } => Err(ProtocolError::Remote { code, reason }),
            reply if reply.kind() == expected => Ok(reply),
            other => Err(ProtocolError::UnexpectedReply {
                expected,
                got: other.kind().to_string(),
            }),
        }
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.reader.get_ref().set_read_timeout(t)
    }

    /// Splits into a reader and a writer that can live on different threads.
    pub fn split(self) -> io::Result<(FramedReader, FramedWriter)> {
        let writer = self.writer.into_inner().map_err(|e| e.into_error())?;
        Ok((
            FramedReader { inner: self.reader },
            FramedWriter {
                inner: BufWriter::new(writer),
            },
        ))
    }

    pub fn shutdown(&self) {
        let _ = self.reader.get_ref().shutdown(Shutdown::Both);
    }
}

#[derive(Debug)]
pub struct FramedReader {
    inner: BufReader<TcpStream>,
}

impl FramedReader {
    pub fn recv(&mut self) -> Result<Message> {
        read_message(&mut self.inner)
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.inner.get_ref().set_read_timeout(t)
    }

    pub fn shutdown(&self) {
        let _ = self.inner.get_ref().shutdown(Shutdown::Both);
    }
}

#[derive(Debug)]
pub struct FramedWriter {
    inner: BufWriter<TcpStream>,
}

impl FramedWriter {
    pub fn send(&mut self, msg: &Message) -> Result<()> {
        write_message(&mut self.inner, msg)
    }

    pub fn shutdown(&self) {
        let _ = self.inner.get_ref().shutdown(Shutdown::Both);
    }
}
