//! X BitMap: a C source fragment holding a 1-bit image.
//!
//! ```c
//! #define t_width 2
//! #define t_height 2
//! static char t_bits[] = {0x01, 0x02};
//! ```
//!
//! Rows are padded to whole array elements (bytes, or 16-bit words in the
//! older X10 `short` form) and bits are read least-significant first. Set bits
//! are black, clear bits white.

use super::{CodecError, RasterImage};

const FORMAT: &str = "XBM";
const BLACK: [u8; 4] = [0, 0, 0, 255];
const WHITE: [u8; 4] = [255, 255, 255, 255];

pub(super) fn decode(bytes: &[u8]) -> Result<RasterImage, CodecError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CodecError::decode(FORMAT, e.valid_up_to(), "not ASCII text"))?;

    let mut width = None;
    let mut height = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("#define") {
            let mut parts = rest.split_whitespace();
            if let (Some(name), Some(value)) = (parts.next(), parts.next()) {
                let at = offset + (line.len() - trimmed.len());
                let parsed = || {
                    parse_int(value)
                        .filter(|v| *v > 0 && *v <= u32::MAX as u64)
                        .map(|v| v as u32)
                        .ok_or_else(|| CodecError::decode(FORMAT, at, format!("bad dimension {value:?}")))
                };
                if name == "width" || name.ends_with("_width") {
                    width = Some(parsed()?);
                } else if name == "height" || name.ends_with("_height") {
                    height = Some(parsed()?);
                }
            }
        }
        offset += line.len();
    }
    let width = width.ok_or_else(|| CodecError::decode(FORMAT, 0, "missing #define ..._width"))?;
    let height = height.ok_or_else(|| CodecError::decode(FORMAT, 0, "missing #define ..._height"))?;

    let open = text
        .find('{')
        .ok_or_else(|| CodecError::decode(FORMAT, text.len(), "missing bitmap array"))?;
    let declaration = &text[..open];
    let statement_start = declaration
        .rfind("#define")
        .map(|i| declaration[i..].find('\n').map_or(declaration.len(), |n| i + n + 1))
        .unwrap_or(0);
    let is_short = declaration[statement_start..]
        .split(|c: char| !c.is_ascii_alphanumeric() && c != '_')
        .any(|word| word == "short");
    let unit_bits: u32 = if is_short { 16 } else { 8 };
    let close = text[open..]
        .find('}')
        .map(|i| open + i)
        .ok_or_else(|| CodecError::decode(FORMAT, text.len(), "unterminated bitmap array"))?;

    let units_per_row = width.div_ceil(unit_bits) as usize;
    let needed = units_per_row
        .checked_mul(height as usize)
        .ok_or_else(|| CodecError::decode(FORMAT, 0, "dimensions overflow"))?;
    let max_value = (1u64 << unit_bits) - 1;

    let mut units = Vec::with_capacity(needed.min(text.len()));
    let mut pos = open + 1;
    for token in text[open + 1..close].split(',') {
        let start = pos + (token.len() - token.trim_start().len());
        pos += token.len() + 1;
        let token = token.trim();
        if token.is_empty() {
            // trailing comma
            continue;
        }
        let value = parse_int(token)
            .filter(|v| *v <= max_value)
            .ok_or_else(|| CodecError::decode(FORMAT, start, format!("bad bitmap value {token:?}")))?;
        units.push(value as u16);
    }
    if units.len() < needed {
        return Err(CodecError::decode(
            FORMAT,
            close,
            format!("expected {needed} values, found {}", units.len()),
        ));
    }

    let mut pixels = Vec::with_capacity(width as usize * height as usize);
    for row in units.chunks(units_per_row).take(height as usize) {
        for x in 0..width {
            let unit = row[(x / unit_bits) as usize];
            let bit = (unit >> (x % unit_bits)) & 1;
            pixels.push(if bit == 1 { BLACK } else { WHITE });
        }
    }
    RasterImage::new(width, height, pixels)
}

fn parse_int(token: &str) -> Option<u64> {
    let token = token.trim();
    if let Some(hex) = token.strip_prefix("0x").or_else(|| token.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else if token.len() > 1 && token.starts_with('0') {
        u64::from_str_radix(&token[1..], 8).ok()
    } else {
        token.parse().ok()
    }
}
