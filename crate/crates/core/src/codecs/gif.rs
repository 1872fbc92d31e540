use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::{CodecError, RasterImage, Rgba};

const FORMAT: &str = "GIF";
const MAX_COLORS: usize = 256;

pub(super) fn encode(img: &RasterImage) -> Result<Vec<u8>, CodecError> {
    let err = |reason: String| CodecError::Encode {
        format: FORMAT,
        reason,
    };
    let width = u16::try_from(img.width()).map_err(|_| err("width exceeds 65535".into()))?;
    let height = u16::try_from(img.height()).map_err(|_| err("height exceeds 65535".into()))?;

    let (palette, indices) = median_cut_palette(img.pixels(), MAX_COLORS);
    let flat: Vec<u8> = palette.iter().flatten().copied().collect();

    let mut out = Vec::new();
    {
        let mut encoder =
            gif::Encoder::new(&mut out, width, height, &flat).map_err(|e| err(e.to_string()))?;
        let frame = gif::Frame {
            width,
            height,
            buffer: Cow::Owned(indices),
            ..gif::Frame::default()
        };
        encoder.write_frame(&frame).map_err(|e| err(e.to_string()))?;
    }
    Ok(out)
}

/// Reduces the RGB values of `pixels` to at most `max_colors` palette entries
/// by median cut, returning the palette and one palette index per pixel.
///
/// Alpha is ignored. Images that already fit are mapped exactly. Otherwise
/// the box with the widest channel range is split at its population median
/// until the palette is full; each entry is the population-weighted mean of
/// its box. No dithering, and every ordering decision is on color values, so
/// output is a pure function of the input.
pub fn median_cut_palette(pixels: &[Rgba], max_colors: usize) -> (Vec<[u8; 3]>, Vec<u8>) {
    let max_colors = max_colors.clamp(1, MAX_COLORS);
    let mut histogram: BTreeMap<[u8; 3], u64> = BTreeMap::new();
    for p in pixels {
        *histogram.entry([p[0], p[1], p[2]]).or_default() += 1;
    }

    let mut boxes: Vec<Vec<([u8; 3], u64)>> = vec![histogram.into_iter().collect()];
    if boxes[0].len() > max_colors {
        while boxes.len() < max_colors {
            let Some((index, channel)) = widest_box(&boxes) else {
                break;
            };
            let mut colors = boxes.swap_remove(index);
            colors.sort_by_key(|(c, _)| (c[channel], *c));
            let split = median_split(&colors);
            let upper = colors.split_off(split);
            boxes.push(colors);
            boxes.push(upper);
            boxes.sort_by_key(|b| b[0].0);
        }
    }

    let mut palette = Vec::with_capacity(boxes.len());
    let mut lookup = HashMap::new();
    if boxes.len() == 1 && boxes[0].len() <= max_colors {
        for (i, (color, _)) in boxes[0].iter().enumerate() {
            palette.push(*color);
            lookup.insert(*color, i as u8);
        }
    } else {
        for (i, colors) in boxes.iter().enumerate() {
            palette.push(weighted_mean(colors));
            for (color, _) in colors {
                lookup.insert(*color, i as u8);
            }
        }
    }

    let indices = pixels.iter().map(|p| lookup[&[p[0], p[1], p[2]]]).collect();
    (palette, indices)
}

fn channel_range(colors: &[([u8; 3], u64)], channel: usize) -> u8 {
    let (lo, hi) = colors.iter().fold((u8::MAX, u8::MIN), |(lo, hi), (c, _)| {
        (lo.min(c[channel]), hi.max(c[channel]))
    });
    hi.saturating_sub(lo)
}

fn widest_box(boxes: &[Vec<([u8; 3], u64)>]) -> Option<(usize, usize)> {
    let mut best: Option<(u8, usize, usize)> = None;
    for (i, colors) in boxes.iter().enumerate() {
        if colors.len() < 2 {
            continue;
        }
        for channel in 0..3 {
            let range = channel_range(colors, channel);
            if best.is_none_or(|(r, _, _)| range > r) {
                best = Some((range, i, channel));
            }
        }
    }
    best.map(|(_, i, c)| (i, c))
}

// First index at which the running population reaches half the total, kept
// inside 1..len so both halves are nonempty.
fn median_split(colors: &[([u8; 3], u64)]) -> usize {
    let total: u64 = colors.iter().map(|(_, n)| n).sum();
    let mut running = 0;
    for (i, (_, n)) in colors.iter().enumerate() {
        running += n;
        if running * 2 >= total {
            return (i + 1).clamp(1, colors.len() - 1);
        }
    }
    colors.len() - 1
}

fn weighted_mean(colors: &[([u8; 3], u64)]) -> [u8; 3] {
    let total: u64 = colors.iter().map(|(_, n)| n).sum();
    let mut sums = [0u64; 3];
    for (c, n) in colors {
        for ch in 0..3 {
            sums[ch] += c[ch] as u64 * n;
        }
    }
    sums.map(|s| ((2 * s + total) / (2 * total)) as u8)
}
