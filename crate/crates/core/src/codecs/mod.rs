//! In-process image translation: decoders and encoders sharing an RGBA8 pixel
//! model, alpha flattening over a matte color, and the top-left watermark.

mod bmp;
mod font;
mod gif;
mod xbm;

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use thiserror::Error;

use crate::media::{well_known, MediaType};

pub use font::{apply_watermark, glyph_rows, CELL_HEIGHT, CELL_WIDTH, GLYPH_HEIGHT, GLYPH_WIDTH};
pub use gif::median_cut_palette;

pub const JPEG_QUALITY: u8 = 90;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unsupported format {0}")]
    UnsupportedFormat(MediaType),
    #[error("cannot decode {format}{}: {reason}", .offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Decode {
        format: &'static str,
        offset: Option<usize>,
        reason: String,
    },
    #[error("cannot encode {format}: {reason}")]
    Encode { format: &'static str, reason: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

impl CodecError {
    pub(crate) fn decode(format: &'static str, offset: impl Into<Option<usize>>, reason: impl Into<String>) -> Self {
        CodecError::Decode {
            format,
            offset: offset.into(),
            reason: reason.into(),
        }
    }
}

pub type Rgba = [u8; 4];

/// Decoded pixels, row-major, one RGBA8 sample per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<Rgba>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<Rgba>) -> Result<Self, CodecError> {
        if width == 0 || height == 0 {
            return Err(CodecError::InvalidImage(format!("{width}x{height} has no pixels")));
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(CodecError::InvalidImage(format!(
                "{width}x{height} needs {expected} pixels, got {}",
                pixels.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, pixel: Rgba) -> Result<Self, CodecError> {
        Self::new(width, height, vec![pixel; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[Rgba] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<Rgba> {
        self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgba {
        self.pixels[self.offset(x, y)]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, value: Rgba) {
        let i = self.offset(x, y);
        self.pixels[i] = value;
    }

    pub fn is_opaque(&self) -> bool {
        self.pixels.iter().all(|p| p[3] == 255)
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        assert!(x < self.width && y < self.height, "({x},{y}) outside {}x{}", self.width, self.height);
        y as usize * self.width as usize + x as usize
    }

    fn rgba_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flatten().copied().collect()
    }

    fn rgb_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| [p[0], p[1], p[2]]).collect()
    }
}

impl fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("pixels", &format_args!("[{} pixels]", self.pixels.len()))
            .finish()
    }
}

/// An opaque color, written `RRGGBB` in configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rgb {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Rgb {
    pub const WHITE: Rgb = Rgb::new(255, 255, 255);
    pub const BLACK: Rgb = Rgb::new(0, 0, 0);

    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Rgb { r, g, b }
    }
}

impl fmt::Display for Rgb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02x}{:02x}{:02x}", self.r, self.g, self.b)
    }
}

impl FromStr for Rgb {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let hex = s.strip_prefix('#').unwrap_or(s);
        if hex.len() != 6 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(format!("expected RRGGBB, got {s:?}"));
        }
        let channel = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).map_err(|e| e.to_string());
        Ok(Rgb::new(channel(0)?, channel(2)?, channel(4)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConvertOptions {
    pub matte_color: Rgb,
    pub watermark: bool,
    pub watermark_text: String,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            matte_color: Rgb::WHITE,
            watermark: true,
            watermark_text: "GRACE".to_string(),
        }
    }
}

impl ConvertOptions {
    pub fn without_watermark(&self) -> Self {
        ConvertOptions {
            watermark: false,
            ..self.clone()
        }
    }

    /// Stable text form of every field that can change converted output.
    pub fn fingerprint(&self) -> String {
        format!(
            "matte={};wm={};text={}:{}",
            self.matte_color,
            u8::from(self.watermark),
            self.watermark_text.len(),
            self.watermark_text
        )
    }
}

/// Raster formats with a native codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImageFormat {
    Xbm,
    Png,
    Bmp,
    Gif,
    Jpeg,
}

impl ImageFormat {
    pub const ALL: [ImageFormat; 5] = [
        ImageFormat::Xbm,
        ImageFormat::Png,
        ImageFormat::Bmp,
        ImageFormat::Gif,
        ImageFormat::Jpeg,
    ];

    pub fn from_media_type(mime: &MediaType) -> Option<Self> {
        Some(match mime.as_str() {
            well_known::XBM | "image/xbm" | "image/x-xbm" => ImageFormat::Xbm,
            well_known::PNG => ImageFormat::Png,
            well_known::BMP | "image/x-bmp" | "image/x-ms-bmp" => ImageFormat::Bmp,
            well_known::GIF => ImageFormat::Gif,
            well_known::JPEG | "image/jpg" | "image/pjpeg" => ImageFormat::Jpeg,
            _ => return None,
        })
    }

    pub fn media_type(self) -> MediaType {
        let s = match self {
            ImageFormat::Xbm => well_known::XBM,
            ImageFormat::Png => well_known::PNG,
            ImageFormat::Bmp => well_known::BMP,
            ImageFormat::Gif => well_known::GIF,
            ImageFormat::Jpeg => well_known::JPEG,
        };
        MediaType::parse(s).expect("well-known media type")
    }

    pub fn can_decode(self) -> bool {
        true
    }

    pub fn can_encode(self) -> bool {
        self != ImageFormat::Xbm
    }

    /// Whether the encoded form keeps per-pixel alpha. Anything else is flattened
    /// onto the matte before encoding.
    pub fn keeps_alpha(self) -> bool {
        self == ImageFormat::Png
    }

    fn name(self) -> &'static str {
        match self {
            ImageFormat::Xbm => "XBM",
            ImageFormat::Png => "PNG",
            ImageFormat::Bmp => "BMP",
            ImageFormat::Gif => "GIF",
            ImageFormat::Jpeg => "JPEG",
        }
    }
}

fn format_for(mime: &MediaType) -> Result<ImageFormat, CodecError> {
    ImageFormat::from_media_type(mime).ok_or_else(|| CodecError::UnsupportedFormat(mime.clone()))
}

pub fn decode(bytes: &[u8], mime: &MediaType) -> Result<RasterImage, CodecError> {
    let format = format_for(mime)?;
    if bytes.is_empty() {
        return Err(CodecError::decode(format.name(), 0, "empty input"));
    }
    match format {
        ImageFormat::Xbm => xbm::decode(bytes),
        ImageFormat::Bmp => bmp::decode(bytes),
        ImageFormat::Png => decode_with_image(bytes, image::ImageFormat::Png, "PNG"),
        ImageFormat::Gif => decode_with_image(bytes, image::ImageFormat::Gif, "GIF"),
        ImageFormat::Jpeg => decode_with_image(bytes, image::ImageFormat::Jpeg, "JPEG"),
    }
}

pub(crate) fn decode_with_image(
    bytes: &[u8],
    format: image::ImageFormat,
    name: &'static str,
) -> Result<RasterImage, CodecError> {
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| CodecError::decode(name, None, e.to_string()))?
        .into_rgba8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| p.0).collect();
    RasterImage::new(w, h, pixels).map_err(|e| CodecError::decode(name, None, e.to_string()))
}

pub fn encode(img: &RasterImage, mime: &MediaType, _opts: &ConvertOptions) -> Result<Vec<u8>, CodecError> {
    match format_for(mime)? {
        ImageFormat::Png => encode_png(img),
        ImageFormat::Bmp => bmp::encode(img),
        ImageFormat::Gif => gif::encode(img),
        ImageFormat::Jpeg => encode_jpeg(img),
        ImageFormat::Xbm => Err(CodecError::UnsupportedFormat(mime.clone())),
    }
}

fn encode_png(img: &RasterImage) -> Result<Vec<u8>, CodecError> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(Cursor::new(&mut out))
        .write_image(&img.rgba_bytes(), img.width, img.height, image::ExtendedColorType::Rgba8)
        .map_err(|e| CodecError::Encode {
            format: "PNG",
            reason: e.to_string(),
        })?;
    Ok(out)
}

fn encode_jpeg(img: &RasterImage) -> Result<Vec<u8>, CodecError> {
    let err = |reason: String| CodecError::Encode {
        format: "JPEG",
        reason,
    };
    let width = u16::try_from(img.width).map_err(|_| err("width exceeds 65535".into()))?;
    let height = u16::try_from(img.height).map_err(|_| err("height exceeds 65535".into()))?;
    let mut out = Vec::new();
    let mut encoder = jpeg_encoder::Encoder::new(&mut out, JPEG_QUALITY);
    encoder.set_sampling_factor(jpeg_encoder::SamplingFactor::R_4_2_0);
    encoder
        .encode(&img.rgb_bytes(), width, height, jpeg_encoder::ColorType::Rgb)
        .map_err(|e| err(e.to_string()))?;
    Ok(out)
}

/// Composites every pixel over `matte`, leaving a fully opaque image.
pub fn flatten_alpha(img: &RasterImage, matte: Rgb) -> RasterImage {
    let pixels = img
        .pixels
        .iter()
        .map(|&[r, g, b, a]| {
            [
                composite(r, matte.r, a),
                composite(g, matte.g, a),
                composite(b, matte.b, a),
                255,
            ]
        })
        .collect();
    RasterImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}

// round(c*a/255 + m*(255-a)/255), halves rounding up.
fn composite(c: u8, m: u8, a: u8) -> u8 {
    let (c, m, a) = (c as u32, m as u32, a as u32);
    let numerator = c * a + m * (255 - a);
    ((2 * numerator + 255) / 510) as u8
}

/// Decode, optionally watermark, flatten if the target has no alpha, encode.
pub fn convert(
    bytes: &[u8],
    src: &MediaType,
    dst: &MediaType,
    opts: &ConvertOptions,
) -> Result<Vec<u8>, CodecError> {
    let target = format_for(dst)?;
    if !target.can_encode() {
        return Err(CodecError::UnsupportedFormat(dst.clone()));
    }
    let mut img = decode(bytes, src)?;
    if opts.watermark {
        img = apply_watermark(&img, &opts.watermark_text);
    }
    if !target.keeps_alpha() {
        img = flatten_alpha(&img, opts.matte_color);
    }
    encode(&img, dst, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mt(s: &str) -> MediaType {
        MediaType::parse(s).unwrap()
    }

    // 1x1 opaque red PNG written by Python's zlib/struct, independent of any Rust encoder.
    const RED_PIXEL_PNG: &str = "89504e470d0a1a0a0000000d49484452000000010000000108060000001f15c4890000000d49444154789c63f8cfc0f01f00050001ff89993d1d0000000049454e44ae426082";

    #[test]
    fn decodes_reference_png() {
        let bytes = hex::decode(RED_PIXEL_PNG).unwrap();
        let img = decode(&bytes, &mt("image/png")).unwrap();
        assert_eq!((img.width(), img.height()), (1, 1));
        assert_eq!(img.pixels(), &[[255, 0, 0, 255]]);
    }

    #[test]
    fn empty_input_is_decode_error() {
        for m in ["image/png", "image/bmp", "image/gif", "image/jpeg", "image/x-xbitmap"] {
            assert!(matches!(decode(&[], &mt(m)), Err(CodecError::Decode { .. })), "{m}");
        }
    }

    #[test]
    fn unsupported_formats() {
        assert!(matches!(decode(b"xx", &mt("image/jp2")), Err(CodecError::UnsupportedFormat(_))));
        let img = RasterImage::filled(1, 1, [0, 0, 0, 255]).unwrap();
        let opts = ConvertOptions::default();
        assert!(matches!(encode(&img, &mt("image/tiff"), &opts), Err(CodecError::UnsupportedFormat(_))));
        assert!(matches!(encode(&img, &mt("image/x-xbitmap"), &opts), Err(CodecError::UnsupportedFormat(_))));
    }

    #[test]
    fn raster_rejects_bad_dimensions() {
        assert!(RasterImage::new(0, 1, vec![]).is_err());
        assert!(RasterImage::new(2, 2, vec![[0; 4]; 3]).is_err());
    }

    #[test]
    fn flatten_examples() {
        let px = |p: Rgba, m: Rgb| flatten_alpha(&RasterImage::new(1, 1, vec![p]).unwrap(), m).pixels()[0];
        assert_eq!(px([30, 60, 90, 255], Rgb::new(1, 2, 3)), [30, 60, 90, 255]);
        assert_eq!(px([10, 20, 30, 0], Rgb::WHITE), [255, 255, 255, 255]);
        assert_eq!(px([255, 0, 0, 128], Rgb::WHITE), [255, 127, 127, 255]);
    }

    #[test]
    fn composite_matches_float_rounding() {
        for a in 0..=255u8 {
            for c in (0..=255u8).step_by(17) {
                for m in [0u8, 77, 255] {
                    let exact = c as f64 * a as f64 / 255.0 + m as f64 * (1.0 - a as f64 / 255.0);
                    let expected = (exact + 0.5).floor() as u8;
                    assert_eq!(composite(c, m, a), expected, "c={c} m={m} a={a}");
                }
            }
        }
    }

    #[test]
    fn matte_parses_hex() {
        assert_eq!("ff8000".parse::<Rgb>().unwrap(), Rgb::new(255, 128, 0));
        assert_eq!("#FFFFFF".parse::<Rgb>().unwrap(), Rgb::WHITE);
        assert!("fff".parse::<Rgb>().is_err());
        assert_eq!(Rgb::new(1, 2, 255).to_string(), "0102ff");
    }

    #[test]
    fn jpeg_output_has_soi_and_decodes() {
        let img = RasterImage::filled(16, 16, [200, 30, 30, 255]).unwrap();
        let bytes = encode(&img, &mt("image/jpeg"), &ConvertOptions::default()).unwrap();
        assert_eq!(&bytes[..2], &[0xFF, 0xD8]);
        let back = decode(&bytes, &mt("image/jpeg")).unwrap();
        assert_eq!((back.width(), back.height()), (16, 16));
        let p = back.pixel(8, 8);
        assert!(p[0].abs_diff(200) <= 4 && p[1].abs_diff(30) <= 4, "{p:?}");
    }

    #[test]
    fn convert_png_to_png_keeps_pixels() {
        let img = RasterImage::new(2, 1, vec![[1, 2, 3, 4], [250, 251, 252, 253]]).unwrap();
        let png = encode(&img, &mt("image/png"), &ConvertOptions::default()).unwrap();
        let opts = ConvertOptions::default().without_watermark();
        let out = convert(&png, &mt("image/png"), &mt("image/png"), &opts).unwrap();
        assert_eq!(decode(&out, &mt("image/png")).unwrap(), img);
    }

    #[test]
    fn convert_png_alpha_to_bmp_flattens() {
        let img = RasterImage::new(3, 1, vec![[255, 0, 0, 0], [255, 0, 0, 128], [0, 0, 255, 255]]).unwrap();
        let png = encode(&img, &mt("image/png"), &ConvertOptions::default()).unwrap();
        let opts = ConvertOptions::default().without_watermark();
        let bmp = convert(&png, &mt("image/png"), &mt("image/bmp"), &opts).unwrap();
        let back = decode(&bmp, &mt("image/bmp")).unwrap();
        assert_eq!(back.pixels(), &[[255, 255, 255, 255], [255, 127, 127, 255], [0, 0, 255, 255]]);
    }

    #[test]
    fn convert_is_byte_deterministic() {
        let img = RasterImage::new(2, 2, vec![[9, 8, 7, 255], [0, 0, 0, 255], [1, 1, 1, 10], [200, 100, 0, 255]]).unwrap();
        let png = encode(&img, &mt("image/png"), &ConvertOptions::default()).unwrap();
        let opts = ConvertOptions::default().without_watermark();
        for dst in ["image/png", "image/bmp", "image/gif", "image/jpeg"] {
            let a = convert(&png, &mt("image/png"), &mt(dst), &opts).unwrap();
            let b = convert(&png, &mt("image/png"), &mt(dst), &opts).unwrap();
            assert_eq!(a, b, "{dst}");
        }
    }

    #[test]
    fn fingerprint_distinguishes_options() {
        let a = ConvertOptions::default();
        let b = a.without_watermark();
        let c = ConvertOptions {
            matte_color: Rgb::BLACK,
            ..a.clone()
        };
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
