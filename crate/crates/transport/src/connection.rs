//! Message framing over TCP (4-byte length prefix) and WebSocket (one
//! message per frame).

use std::fmt;
use std::io::{ErrorKind, Read, Write};
use std::net::TcpStream;
use std::str::FromStr;
use std::time::{Duration, Instant};

use tungstenite::protocol::Message;
use tungstenite::WebSocket;

use crate::codec::Codec;
use crate::message::WireMessage;
use crate::TransportError;

/// Upper bound for a single frame payload.
pub const MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransportKind {
    Tcp,
    WebSocket,
}

/// `tcp://host:port` or `ws://host:port`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub kind: TransportKind,
    pub address: String,
}

impl Endpoint {
    pub fn tcp(address: impl Into<String>) -> Self {
        Endpoint { kind: TransportKind::Tcp, address: address.into() }
    }

    pub fn ws(address: impl Into<String>) -> Self {
        Endpoint { kind: TransportKind::WebSocket, address: address.into() }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TransportKind::Tcp => write!(f, "tcp://{}", self.address),
            TransportKind::WebSocket => write!(f, "ws://{}", self.address),
        }
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = if let Some(rest) = s.strip_prefix("tcp://") {
            (TransportKind::Tcp, rest)
        } else if let Some(rest) = s.strip_prefix("ws://") {
            (TransportKind::WebSocket, rest)
        } else {
            return Err(format!("endpoint '{s}' must start with tcp:// or ws://"));
        };
        let address = rest.trim_end_matches('/');
        if address.rsplit_once(':').is_none_or(|(host, port)| host.is_empty() || port.parse::<u16>().is_err()) {
            return Err(format!("endpoint '{s}' needs host:port"));
        }
        Ok(Endpoint { kind, address: address.to_owned() })
    }
}

enum Stream {
    Tcp { stream: TcpStream, buf: Vec<u8> },
    Ws(Box<WebSocket<TcpStream>>),
}

/// A framed, message-oriented connection. Reads time out after the poll
/// interval so one thread can interleave reading and writing.
pub struct Connection {
    stream: Stream,
    poll: Duration,
}

impl Connection {
    pub fn connect(endpoint: &Endpoint) -> Result<Connection, TransportError> {
        let tcp = TcpStream::connect(&endpoint.address)
            .map_err(|e| TransportError::Connect { endpoint: endpoint.to_string(), message: e.to_string() })?;
        tcp.set_nodelay(true).ok();
        let stream = match endpoint.kind {
            TransportKind::Tcp => Stream::Tcp { stream: tcp, buf: Vec::new() },
            TransportKind::WebSocket => {
                let url = format!("ws://{}/", endpoint.address);
                let (ws, _) = tungstenite::client(url.as_str(), tcp)
                    .map_err(|e| TransportError::Connect { endpoint: endpoint.to_string(), message: e.to_string() })?;
                Stream::Ws(Box::new(ws))
            }
        };
        Connection::new(stream)
    }

    /// Server side of an accepted socket.
    pub fn accept(tcp: TcpStream, kind: TransportKind) -> Result<Connection, TransportError> {
        tcp.set_nodelay(true).ok();
        let stream = match kind {
            TransportKind::Tcp => Stream::Tcp { stream: tcp, buf: Vec::new() },
            TransportKind::WebSocket => Stream::Ws(Box::new(
                tungstenite::accept(tcp).map_err(|e| TransportError::Io(format!("websocket handshake: {e}")))?,
            )),
        };
        Connection::new(stream)
    }

    fn new(stream: Stream) -> Result<Connection, TransportError> {
        let conn = Connection { stream, poll: Duration::from_millis(5) };
        conn.tcp().set_read_timeout(Some(conn.poll)).map_err(io)?;
        Ok(conn)
    }

    fn tcp(&self) -> &TcpStream {
        match &self.stream {
            Stream::Tcp { stream, .. } => stream,
            Stream::Ws(ws) => ws.get_ref(),
        }
    }

    pub fn peer_addr(&self) -> Option<std::net::SocketAddr> {
        self.tcp().peer_addr().ok()
    }

    pub fn send(&mut self, codec: Codec, msg: &WireMessage) -> Result<(), TransportError> {
        let payload = codec.encode(msg);
        self.send_raw(codec, &payload)
    }

    /// Sends an already encoded payload. Lets tests put arbitrary bytes on
    /// the wire.
    pub fn send_raw(&mut self, codec: Codec, payload: &[u8]) -> Result<(), TransportError> {
        match &mut self.stream {
            Stream::Tcp { stream, .. } => {
                let len =
                    u32::try_from(payload.len()).map_err(|_| TransportError::Protocol("frame too large".into()))?;
                let mut frame = Vec::with_capacity(4 + payload.len());
                frame.extend_from_slice(&len.to_be_bytes());
                frame.extend_from_slice(payload);
                stream.write_all(&frame).map_err(io)?;
                stream.flush().map_err(io)
            }
            Stream::Ws(ws) => {
                let msg = match codec {
                    Codec::Json => Message::text(
                        String::from_utf8(payload.to_vec())
                            .map_err(|_| TransportError::Protocol("JSON payload is not UTF-8".into()))?,
                    ),
                    Codec::Binary => Message::binary(payload.to_vec()),
                };
                ws.send(msg).map_err(ws_error)
            }
        }
    }

    /// Next complete frame, or `None` if nothing arrived within the poll
    /// interval.
    pub fn recv_raw(&mut self) -> Result<Option<(Codec, Vec<u8>)>, TransportError> {
        match &mut self.stream {
            Stream::Tcp { stream, buf } => {
                if let Some(frame) = take_frame(buf)? {
                    return Ok(Some(frame));
                }
                let mut chunk = [0u8; 16 * 1024];
                match stream.read(&mut chunk) {
                    Ok(0) => Err(TransportError::Closed),
                    Ok(n) => {
                        buf.extend_from_slice(&chunk[..n]);
                        take_frame(buf)
                    }
                    Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => Ok(None),
                    Err(e) if e.kind() == ErrorKind::Interrupted => Ok(None),
                    Err(e) => Err(io(e)),
                }
            }
            Stream::Ws(ws) => match ws.read() {
                Ok(Message::Text(t)) => Ok(Some((Codec::Json, t.into_bytes()))),
                Ok(Message::Binary(b)) => Ok(Some((Codec::Binary, b))),
                Ok(Message::Close(_)) => Err(TransportError::Closed),
                Ok(_) => Ok(None),
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    Ok(None)
                }
                Err(e) => Err(ws_error(e)),
            },
        }
    }

    /// Next decoded message, or `None` on timeout.
    pub fn recv(&mut self) -> Result<Option<(Codec, WireMessage)>, TransportError> {
        match self.recv_raw()? {
            None => Ok(None),
            Some((codec, payload)) => {
                let msg = codec.decode(&payload).map_err(|e| TransportError::Protocol(e.to_string()))?;
                Ok(Some((codec, msg)))
            }
        }
    }

    /// Blocks until a message arrives or `timeout` elapses.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<(Codec, WireMessage)>, TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(m) = self.recv()? {
                return Ok(Some(m));
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
        }
    }

    pub fn close(&mut self) {
        match &mut self.stream {
            Stream::Tcp { stream, .. } => {
                let _ = stream.shutdown(std::net::Shutdown::Both);
            }
            Stream::Ws(ws) => {
                let _ = ws.close(None);
                let _ = ws.flush();
                let _ = ws.get_ref().shutdown(std::net::Shutdown::Both);
            }
        }
    }
}

fn take_frame(buf: &mut Vec<u8>) -> Result<Option<(Codec, Vec<u8>)>, TransportError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME {
        return Err(TransportError::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let payload: Vec<u8> = buf.drain(..4 + len).skip(4).collect();
    Ok(Some((Codec::detect(&payload), payload)))
}

fn io(e: std::io::Error) -> TransportError {
    match e.kind() {
        ErrorKind::BrokenPipe
        | ErrorKind::ConnectionReset
        | ErrorKind::ConnectionAborted
        | ErrorKind::UnexpectedEof => TransportError::Closed,
        _ => TransportError::Io(e.to_string()),
    }
}

fn ws_error(e: tungstenite::Error) -> TransportError {
    match e {
        tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed => TransportError::Closed,
        tungstenite::Error::Io(e) => io(e),
        other => TransportError::Protocol(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_parse() {
        assert_eq!("tcp://127.0.0.1:7700".parse::<Endpoint>().unwrap(), Endpoint::tcp("127.0.0.1:7700"));
        assert_eq!("ws://localhost:80/".parse::<Endpoint>().unwrap(), Endpoint::ws("localhost:80"));
        assert!("http://x:1".parse::<Endpoint>().is_err());
        assert!("tcp://nohost".parse::<Endpoint>().is_err());
    }

    #[test]
    fn frames_split_across_reads() {
        let mut buf = vec![0, 0, 0, 2, 0x0B];
        assert!(take_frame(&mut buf).unwrap().is_none());
        buf.extend_from_slice(&[0x00, 0, 0, 0, 1, b'{']);
        let (codec, payload) = take_frame(&mut buf).unwrap().unwrap();
        assert_eq!((codec, payload), (Codec::Binary, vec![0x0B, 0x00]));
        assert_eq!(buf, [0, 0, 0, 1, b'{']);
        assert_eq!(take_frame(&mut buf).unwrap().unwrap().0, Codec::Json);
    }
}
