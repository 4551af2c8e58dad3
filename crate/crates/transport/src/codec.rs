use std::fmt;
use std::str::FromStr;

use crate::binary;
use crate::message::WireMessage;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("message truncated")]
    Truncated,
    #[error("malformed message: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Codec {
    Binary,
    Json,
}

impl Codec {
    pub fn encode(self, msg: &WireMessage) -> Vec<u8> {
        match self {
            Codec::Binary => binary::encode(msg),
            Codec::Json => serde_json::to_vec(msg).expect("wire messages always serialize"),
        }
    }

    pub fn decode(self, bytes: &[u8]) -> Result<WireMessage, CodecError> {
        match self {
            Codec::Binary => binary::decode(bytes),
            Codec::Json => {
                let msg: WireMessage =
                    serde_json::from_slice(bytes).map_err(|e| CodecError::Malformed(e.to_string()))?;
                msg.validate().map_err(CodecError::Malformed)?;
                Ok(msg)
            }
        }
    }

    /// Guesses the codec of a TCP frame payload: JSON objects start with `{`,
    /// binary messages with a tag byte below 0x20.
    pub fn detect(payload: &[u8]) -> Codec {
        match payload.first() {
            Some(b'{') => Codec::Json,
            _ => Codec::Binary,
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Codec::Binary => "binary",
            Codec::Json => "json",
        })
    }
}

impl FromStr for Codec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(Codec::Binary),
            "json" => Ok(Codec::Json),
            other => Err(format!("unknown codec '{other}' (expected binary or json)")),
        }
    }
}
