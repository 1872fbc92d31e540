//! Windows bitmap: 24-bit BITMAPINFOHEADER output, bottom-up, rows padded to
//! four bytes. Uncompressed 24/32-bit input is read here; palette and
//! bitfield variants go through the `image` crate.

use super::{decode_with_image, CodecError, RasterImage};

const FORMAT: &str = "BMP";
const FILE_HEADER_LEN: usize = 14;
const INFO_HEADER_LEN: usize = 40;
const PIXELS_PER_METER: i32 = 2835;

fn stride(width: usize, bytes_per_pixel: usize) -> usize {
    (width * bytes_per_pixel).div_ceil(4) * 4
}

pub(super) fn encode(img: &RasterImage) -> Result<Vec<u8>, CodecError> {
    if !img.is_opaque() {
        return Err(CodecError::Precondition(
            "BMP output has no alpha channel; flatten the image first".into(),
        ));
    }
    let width = img.width() as usize;
    let height = img.height() as usize;
    let row_len = stride(width, 3);
    let image_size = row_len
        .checked_mul(height)
        .filter(|n| *n <= u32::MAX as usize - FILE_HEADER_LEN - INFO_HEADER_LEN)
        .ok_or_else(|| CodecError::Encode {
            format: FORMAT,
            reason: "image too large".into(),
        })?;
    let data_offset = FILE_HEADER_LEN + INFO_HEADER_LEN;
    let file_size = data_offset + image_size;

    let mut out = Vec::with_capacity(file_size);
    out.extend_from_slice(b"BM");
    out.extend_from_slice(&(file_size as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&(data_offset as u32).to_le_bytes());

    out.extend_from_slice(&(INFO_HEADER_LEN as u32).to_le_bytes());
    out.extend_from_slice(&(width as i32).to_le_bytes());
    out.extend_from_slice(&(height as i32).to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&24u16.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes()); // BI_RGB
    out.extend_from_slice(&(image_size as u32).to_le_bytes());
    out.extend_from_slice(&PIXELS_PER_METER.to_le_bytes());
    out.extend_from_slice(&PIXELS_PER_METER.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());

    let padding = row_len - width * 3;
    for row in img.pixels().chunks(width).rev() {
        for &[r, g, b, _] in row {
            out.extend_from_slice(&[b, g, r]);
        }
        out.extend(std::iter::repeat_n(0, padding));
    }
    Ok(out)
}

fn u16_at(bytes: &[u8], at: usize) -> Result<u16, CodecError> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| CodecError::decode(FORMAT, at, "truncated header"))
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32, CodecError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| CodecError::decode(FORMAT, at, "truncated header"))
}

pub(super) fn decode(bytes: &[u8]) -> Result<RasterImage, CodecError> {
    if !bytes.starts_with(b"BM") {
        return Err(CodecError::decode(FORMAT, 0, "missing BM signature"));
    }
    let data_offset = u32_at(bytes, 10)? as usize;
    let header_len = u32_at(bytes, 14)? as usize;
    if header_len < INFO_HEADER_LEN {
        // OS/2 core headers and friends.
        return decode_with_image(bytes, image::ImageFormat::Bmp, FORMAT);
    }
    let width = u32_at(bytes, 18)? as i32;
    let raw_height = u32_at(bytes, 22)? as i32;
    let bits = u16_at(bytes, 28)?;
    let compression = u32_at(bytes, 30)?;
    if compression != 0 || !(bits == 24 || bits == 32) {
        return decode_with_image(bytes, image::ImageFormat::Bmp, FORMAT);
    }
    if width <= 0 || raw_height == 0 || raw_height == i32::MIN {
        return Err(CodecError::decode(FORMAT, 18, format!("bad dimensions {width}x{raw_height}")));
    }
    let width = width as usize;
    let top_down = raw_height < 0;
    let height = raw_height.unsigned_abs() as usize;
    let bpp = bits as usize / 8;
    let row_len = stride(width, bpp);
    let needed = row_len
        .checked_mul(height)
        .and_then(|n| n.checked_add(data_offset))
        .ok_or_else(|| CodecError::decode(FORMAT, 18, "dimensions overflow"))?;
    if bytes.len() < needed {
        return Err(CodecError::decode(
            FORMAT,
            bytes.len(),
            format!("pixel data truncated, need {needed} bytes"),
        ));
    }

    let mut pixels = vec![[0u8; 4]; width * height];
    for (i, row) in bytes[data_offset..needed].chunks_exact(row_len).enumerate() {
        let y = if top_down { i } else { height - 1 - i };
        let dest = &mut pixels[y * width..(y + 1) * width];
        for (px, src) in dest.iter_mut().zip(row.chunks_exact(bpp)) {
            *px = [src[2], src[1], src[0], 255];
        }
    }
    RasterImage::new(width as u32, height as u32, pixels)
}
