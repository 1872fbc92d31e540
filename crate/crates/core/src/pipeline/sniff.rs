use crate::media::{well_known, MediaType};

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];
const JP2_SIGNATURE: &[u8] = &[
    0x00, 0x00, 0x00, 0x0C, b'j', b'P', b' ', b' ', 0x0D, 0x0A, 0x87, 0x0A,
];
// BITMAPCOREHEADER through BITMAPV5HEADER.
const BMP_HEADER_SIZES: &[u32] = &[12, 16, 40, 52, 56, 64, 108, 124];

/// Identifies a body by its leading bytes, falling back to `declared`.
pub fn sniff_format(bytes: &[u8], declared: &MediaType) -> MediaType {
    detect(bytes)
        .and_then(|m| MediaType::parse(m).ok())
        .unwrap_or_else(|| declared.clone())
}

fn detect(bytes: &[u8]) -> Option<&'static str> {
    if bytes.starts_with(PNG_SIGNATURE) {
        return Some(well_known::PNG);
    }
    if bytes.starts_with(b"GIF87a") || bytes.starts_with(b"GIF89a") {
        return Some(well_known::GIF);
    }
    if bytes.starts_with(&[0xFF, 0xD8]) {
        return Some(well_known::JPEG);
    }
    if bytes.starts_with(JP2_SIGNATURE) {
        return Some(well_known::JP2);
    }
    if is_bmp(bytes) {
        return Some(well_known::BMP);
    }
    let text = &bytes[bytes.iter().take_while(|b| b.is_ascii_whitespace()).count()..];
    if text.starts_with(b"#define") {
        return Some(well_known::XBM);
    }
    None
}

// "BM" alone matches plenty of text, so also require a known DIB header size.
fn is_bmp(bytes: &[u8]) -> bool {
    bytes.len() >= 18
        && bytes.starts_with(b"BM")
        && BMP_HEADER_SIZES.contains(&u32::from_le_bytes([bytes[14], bytes[15], bytes[16], bytes[17]]))
}
