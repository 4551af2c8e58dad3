//! Compact binary encoding. All integers are big-endian; see PROTOCOL.md for
//! the byte layout of every message.

use opendip_core::{Capabilities, EntityKey, Uri};

use crate::codec::CodecError;
use crate::message::{ErrorCode, WireError, WireEvent, WireKind, WireMessage, WireNode, WireProperty, WireValue};

pub(crate) mod tag {
    pub const HELLO: u8 = 0x01;
    pub const REGISTRY_REQUEST: u8 = 0x02;
    pub const ROOT_ANNOUNCE: u8 = 0x03;
    pub const SUBSCRIBE: u8 = 0x04;
    pub const UNSUBSCRIBE: u8 = 0x05;
    pub const ENTITY_STATE: u8 = 0x06;
    pub const CHANGE: u8 = 0x07;
    pub const SET: u8 = 0x08;
    pub const SET_RESULT: u8 = 0x09;
    pub const ERROR: u8 = 0x0A;
    pub const PING: u8 = 0x0B;
    pub const PONG: u8 = 0x0C;
}

const VALUE_TEXT: u8 = 1;
const VALUE_INT: u8 = 2;
const VALUE_BYTES: u8 = 3;
const VALUE_REF: u8 = 4;

const CAP_OBSERVABLE: u8 = 0b01;
const CAP_CHANGEABLE: u8 = 0b10;

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(64));
    match msg {
        WireMessage::Hello { version, peer_name } => {
            w.u8(tag::HELLO);
            w.u32(*version);
            w.str(peer_name);
        }
        WireMessage::RegistryRequest { model_uri } => {
            w.u8(tag::REGISTRY_REQUEST);
            w.opt(model_uri.as_ref(), |w, s| w.str(s));
        }
        WireMessage::RootAnnounce { model_uri, root } => {
            w.u8(tag::ROOT_ANNOUNCE);
            w.opt(model_uri.as_ref(), |w, s| w.str(s));
            w.key(root);
        }
        WireMessage::Subscribe { target, include_descendants } => {
            w.u8(tag::SUBSCRIBE);
            w.key(target);
            w.u8(u8::from(*include_descendants));
        }
        WireMessage::Unsubscribe { target } => {
            w.u8(tag::UNSUBSCRIBE);
            w.key(target);
        }
        WireMessage::EntityState { nodes } => {
            w.u8(tag::ENTITY_STATE);
            w.len(nodes.len());
            for n in nodes {
                w.str(n.id.as_str());
                w.str(n.entity_type.as_str());
                w.caps(n.capabilities);
                w.opt(n.properties.as_ref(), |w, props| {
                    w.len(props.len());
                    for p in props {
                        w.str(&p.key);
                        w.value(&p.value);
                    }
                });
            }
        }
        WireMessage::Change { correlation, event } => {
            w.u8(tag::CHANGE);
            w.u64(*correlation);
            w.key(&event.entity);
            w.str(&event.key);
            w.u8(match event.kind {
                WireKind::Added => 1,
                WireKind::Updated => 2,
                WireKind::Removed => 3,
            });
            w.opt(event.old_value.as_ref(), Writer::value);
            w.opt(event.new_value.as_ref(), Writer::value);
            w.str(&event.origin);
        }
        WireMessage::Set { correlation, target, key, value, origin } => {
            w.u8(tag::SET);
            w.u64(*correlation);
            w.key(target);
            w.str(key);
            w.opt(value.as_ref(), Writer::value);
            w.str(origin);
        }
        WireMessage::SetResult { correlation, outcome } => {
            w.u8(tag::SET_RESULT);
            w.u64(*correlation);
            match outcome {
                Ok(()) => w.u8(1),
                Err(e) => {
                    w.u8(0);
                    w.str(e.code.as_str());
                    w.str(&e.detail);
                }
            }
        }
        WireMessage::Error { code, detail } => {
            w.u8(tag::ERROR);
            w.str(code.as_str());
            w.str(detail);
        }
        WireMessage::Ping { nonce } => {
            w.u8(tag::PING);
            w.u64(*nonce);
        }
        WireMessage::Pong { nonce } => {
            w.u8(tag::PONG);
            w.u64(*nonce);
        }
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<WireMessage, CodecError> {
    let mut r = Reader { bytes, pos: 0 };
    let tag = r.u8()?;
    let msg = match tag {
        tag::HELLO => WireMessage::Hello { version: r.u32()?, peer_name: r.string()? },
        tag::REGISTRY_REQUEST => WireMessage::RegistryRequest { model_uri: r.opt(Reader::string)? },
        tag::ROOT_ANNOUNCE => WireMessage::RootAnnounce { model_uri: r.opt(Reader::string)?, root: r.key()? },
        tag::SUBSCRIBE => WireMessage::Subscribe { target: r.key()?, include_descendants: r.bool()? },
        tag::UNSUBSCRIBE => WireMessage::Unsubscribe { target: r.key()? },
        tag::ENTITY_STATE => {
            let count = r.len()?;
            let mut nodes = Vec::with_capacity(count.min(1024));
            for _ in 0..count {
                let id = r.uri()?;
                let entity_type = r.uri()?;
                let capabilities = r.caps()?;
                let properties = r.opt(|r| {
                    let n = r.len()?;
                    let mut props = Vec::with_capacity(n.min(1024));
                    for _ in 0..n {
                        props.push(WireProperty { key: r.string()?, value: r.value()? });
                    }
                    Ok(props)
                })?;
                nodes.push(WireNode { id, entity_type, capabilities, properties });
            }
            WireMessage::EntityState { nodes }
        }
        tag::CHANGE => {
            let correlation = r.u64()?;
            let entity = r.key()?;
            let key = r.string()?;
            let kind = match r.u8()? {
                1 => WireKind::Added,
                2 => WireKind::Updated,
                3 => WireKind::Removed,
                other => return Err(CodecError::Malformed(format!("change kind {other}"))),
            };
            let old_value = r.opt(Reader::value)?;
            let new_value = r.opt(Reader::value)?;
            let origin = r.string()?;
            WireMessage::Change { correlation, event: WireEvent { entity, key, kind, old_value, new_value, origin } }
        }
        tag::SET => WireMessage::Set {
            correlation: r.u64()?,
            target: r.key()?,
            key: r.string()?,
            value: r.opt(Reader::value)?,
            origin: r.string()?,
        },
        tag::SET_RESULT => {
            let correlation = r.u64()?;
            let outcome = if r.bool()? {
                Ok(())
            } else {
                Err(WireError { code: ErrorCode::parse(&r.string()?), detail: r.string()? })
            };
            WireMessage::SetResult { correlation, outcome }
        }
        tag::ERROR => WireMessage::Error { code: ErrorCode::parse(&r.string()?), detail: r.string()? },
        tag::PING => WireMessage::Ping { nonce: r.u64()? },
        tag::PONG => WireMessage::Pong { nonce: r.u64()? },
        other => return Err(CodecError::Malformed(format!("unknown message tag 0x{other:02x}"))),
    };
    if r.pos != bytes.len() {
        return Err(CodecError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    msg.validate().map_err(CodecError::Malformed)?;
    Ok(msg)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }

    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }

    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.0.extend_from_slice(b);
    }

    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    fn key(&mut self, k: &EntityKey) {
        self.str(k.id.as_str());
        self.str(k.entity_type.as_str());
    }

    fn caps(&mut self, c: Capabilities) {
        let mut bits = 0;
        if c.observable {
            bits |= CAP_OBSERVABLE;
        }
        if c.changeable {
            bits |= CAP_CHANGEABLE;
        }
        self.u8(bits);
    }

    fn opt<T>(&mut self, v: Option<T>, f: impl FnOnce(&mut Self, T)) {
        match v {
            None => self.u8(0),
            Some(v) => {
                self.u8(1);
                f(self, v);
            }
        }
    }

    fn value(&mut self, v: &WireValue) {
        match v {
            WireValue::Text(s) => {
                self.u8(VALUE_TEXT);
                self.str(s);
            }
            WireValue::Int(i) => {
                self.u8(VALUE_INT);
                self.0.extend_from_slice(&i.to_be_bytes());
            }
            WireValue::Bytes(b) => {
                self.u8(VALUE_BYTES);
                self.bytes(b);
            }
            WireValue::Ref(k) => {
                self.u8(VALUE_REF);
                self.key(k);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CodecError::Truncated)?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        // every element occupies at least one byte
        if n > self.bytes.len() - self.pos {
            return Err(CodecError::Truncated);
        }
        Ok(n)
    }

    fn bool(&mut self) -> Result<bool, CodecError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(CodecError::Malformed(format!("boolean byte {other}"))),
        }
    }

    fn raw(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.len()?;
        Ok(self.take(n)?.to_vec())
    }

    fn string(&mut self) -> Result<String, CodecError> {
        String::from_utf8(self.raw()?).map_err(|_| CodecError::Malformed("invalid UTF-8".into()))
    }

    fn uri(&mut self) -> Result<Uri, CodecError> {
        Uri::parse(self.string()?).map_err(|e| CodecError::Malformed(e.to_string()))
    }

    fn key(&mut self) -> Result<EntityKey, CodecError> {
        Ok(EntityKey::new(self.uri()?, self.uri()?))
    }

    fn caps(&mut self) -> Result<Capabilities, CodecError> {
        let bits = self.u8()?;
        if bits & !(CAP_OBSERVABLE | CAP_CHANGEABLE) != 0 {
            return Err(CodecError::Malformed(format!("reserved capability bits in 0x{bits:02x}")));
        }
        Ok(Capabilities { observable: bits & CAP_OBSERVABLE != 0, changeable: bits & CAP_CHANGEABLE != 0 })
    }

    fn opt<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, CodecError>) -> Result<Option<T>, CodecError> {
        if self.bool()? {
            f(self).map(Some)
        } else {
            Ok(None)
        }
    }

    fn value(&mut self) -> Result<WireValue, CodecError> {
        Ok(match self.u8()? {
            VALUE_TEXT => WireValue::Text(self.string()?),
            VALUE_INT => WireValue::Int(i64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes"))),
            VALUE_BYTES => WireValue::Bytes(self.raw()?),
            VALUE_REF => WireValue::Ref(self.key()?),
            other => return Err(CodecError::Malformed(format!("value tag {other}"))),
        })
    }
}
