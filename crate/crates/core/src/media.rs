//! Normalized `type/subtype` media types.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid media type {0:?}")]
pub struct InvalidMediaType(pub String);

/// A media type stored lowercased with any parameters removed.
///
/// `IMAGE/JPEG; q=0.5` and `image/jpeg` normalize to the same value, which is
/// the only form rule matching ever sees.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MediaType(String);

impl MediaType {
    pub fn parse(raw: &str) -> Result<Self, InvalidMediaType> {
        let essence = raw.split(';').next().unwrap_or("").trim();
        let (ty, sub) = essence
            .split_once('/')
            .ok_or_else(|| InvalidMediaType(raw.to_string()))?;
        if !is_token(ty) || !is_token(sub) {
            return Err(InvalidMediaType(raw.to_string()));
        }
        Ok(MediaType(essence.to_ascii_lowercase()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn top_level(&self) -> &str {
        self.0.split('/').next().unwrap_or_default()
    }

    pub fn octet_stream() -> Self {
        MediaType("application/octet-stream".to_string())
    }
}

// RFC 9110 token characters.
fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s.bytes().all(|b| {
            b.is_ascii_alphanumeric()
                || matches!(
                    b,
                    b'!' | b'#'
                        | b'$'
                        | b'%'
                        | b'&'
                        | b'\''
                        | b'*'
                        | b'+'
                        | b'-'
                        | b'.'
                        | b'^'
                        | b'_'
                        | b'`'
                        | b'|'
                        | b'~'
                )
        })
}

impl fmt::Display for MediaType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for MediaType {
    type Err = InvalidMediaType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MediaType::parse(s)
    }
}

impl TryFrom<String> for MediaType {
    type Error = InvalidMediaType;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        MediaType::parse(&value)
    }
}

impl From<MediaType> for String {
    fn from(value: MediaType) -> Self {
        value.0
    }
}

impl AsRef<str> for MediaType {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl PartialEq<str> for MediaType {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for MediaType {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

pub mod well_known {
    pub const XBM: &str = "image/x-xbitmap";
    pub const PNG: &str = "image/png";
    pub const BMP: &str = "image/bmp";
    pub const GIF: &str = "image/gif";
    pub const JPEG: &str = "image/jpeg";
    pub const JP2: &str = "image/jp2";
}
