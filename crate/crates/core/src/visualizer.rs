//! Draws device and landmark annotations onto the scene image.

use std::collections::{BTreeMap, BTreeSet};

use base64::Engine as _;
use font8x8::UnicodeFonts;
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, Rgba, RgbaImage};
use thiserror::Error;

use crate::model::{BBox, DeviceRecord, Landmark};

#[derive(Debug, Error)]
pub enum VisualizerError {
    #[error("cannot decode image: {0}")]
    ImageDecodeError(String),
    #[error("box {0} lies outside the {1}x{2} image")]
    BoxOutOfBounds(BBox, u32, u32),
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error("payload is empty")]
    EmptyPayload,
}

pub type Rgb = [u8; 3];

/// Fixed palette; order is part of the output contract.
pub const PALETTE: [Rgb; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [255, 225, 25],
    [0, 128, 128],
    [170, 110, 40],
    [128, 0, 0],
];

/// Reserved for landmarks; not part of [`PALETTE`].
pub const LANDMARK_COLOR: Rgb = [160, 160, 160];

pub const BOX_THICKNESS: u32 = 2;
const GLYPH: u32 = 8;
const LABEL_PAD: u32 = 2;
pub const LABEL_HEIGHT: u32 = GLYPH + 2 * LABEL_PAD;

/// Sorted types take palette entries in order; past the end of the palette
/// the cycle repeats at a darker shade.
pub fn assign_colors<'a>(types: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, Rgb> {
    let sorted: BTreeSet<&str> = types.into_iter().collect();
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let base = PALETTE[i % PALETTE.len()];
            let round = (i / PALETTE.len()) % 4;
            let factor = 1.0 - 0.2 * round as f64;
            let shade = base.map(|c| (f64::from(c) * factor).round() as u8);
            (t.to_string(), shade)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    fn overlaps(&self, o: &PixelRect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Debug, Clone, Default)]
pub struct RenderOptions {
    /// Append confidence scores to device labels.
    pub show_scores: bool,
}

/// Rendered PNG plus the rectangles every primitive was confined to.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub png: Vec<u8>,
    pub outlines: Vec<PixelRect>,
    pub labels: Vec<PixelRect>,
}

struct Canvas {
    img: RgbaImage,
    placed: Vec<PixelRect>,
    outlines: Vec<PixelRect>,
}

impl Canvas {
    fn fill(&mut self, r: PixelRect, color: Rgb) {
        for y in r.y..(r.y + r.h).min(self.img.height()) {
            for x in r.x..(r.x + r.w).min(self.img.width()) {
                self.img.put_pixel(x, y, Rgba([color[0], color[1], color[2], 255]));
            }
        }
    }

    fn outline(&mut self, b: &BBox, color: Rgb) {
        let (w, h) = self.img.dimensions();
        let x0 = (b.x1().floor() as u32).min(w - 1);
        let y0 = (b.y1().floor() as u32).min(h - 1);
        let x1 = (b.x2().ceil() as u32).clamp(x0 + 1, w);
        let y1 = (b.y2().ceil() as u32).clamp(y0 + 1, h);
        let bw = x1 - x0;
        let bh = y1 - y0;
        let t = BOX_THICKNESS;
        let rect = PixelRect { x: x0, y: y0, w: bw, h: bh };
        self.fill(PixelRect { x: x0, y: y0, w: bw, h: t.min(bh) }, color);
        self.fill(PixelRect { x: x0, y: y1.saturating_sub(t).max(y0), w: bw, h: t.min(bh) }, color);
        self.fill(PixelRect { x: x0, y: y0, w: t.min(bw), h: bh }, color);
        self.fill(PixelRect { x: x1.saturating_sub(t).max(x0), y: y0, w: t.min(bw), h: bh }, color);
        self.outlines.push(rect);
    }

    /// Places a label near the box's top-left corner, nudging it downward
    /// until it clears every previously placed label.
    fn label(&mut self, b: &BBox, text: &str, color: Rgb) {
        let (w, h) = self.img.dimensions();
        let lw = (text.chars().count() as u32 * GLYPH + 2 * LABEL_PAD).min(w);
        let lh = LABEL_HEIGHT.min(h);
        let x = (b.x1().floor() as u32).min(w - lw);
        let top = b.y1().floor() as u32;
        let mut y = if top >= lh { top - lh } else { top.min(h - lh) };
        let mut rect = PixelRect { x, y, w: lw, h: lh };
        while self.placed.iter().any(|p| p.overlaps(&rect)) && y + lh < h {
            y = (y + lh).min(h - lh);
            rect.y = y;
        }
        self.fill(rect, color);
        let luminance = 0.299 * f64::from(color[0]) + 0.587 * f64::from(color[1]) + 0.114 * f64::from(color[2]);
        let ink = if luminance > 140.0 { [0, 0, 0] } else { [255, 255, 255] };
        let mut cx = rect.x + LABEL_PAD;
        for ch in text.chars() {
            if cx + GLYPH > rect.x + rect.w {
                break;
            }
            let glyph = font8x8::BASIC_FONTS.get(ch).unwrap_or([0; 8]);
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..GLYPH {
                    if bits & (1 << col) != 0 {
                        let px = cx + col;
                        let py = rect.y + LABEL_PAD + row as u32;
                        if px < w && py < h {
                            self.img.put_pixel(px, py, Rgba([ink[0], ink[1], ink[2], 255]));
                        }
                    }
                }
            }
            cx += GLYPH;
        }
        self.placed.push(rect);
    }
}

fn decode(image: &[u8]) -> Result<DynamicImage, VisualizerError> {
    image::load_from_memory(image).map_err(|e| VisualizerError::ImageDecodeError(e.to_string()))
}

/// Encodes with fixed settings so identical pixels give identical bytes.
pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>, VisualizerError> {
    let mut out = Vec::new();
    let encoder = PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive);
    let (color, bytes): (ExtendedColorType, Vec<u8>) = if img.color().has_alpha() {
        (ExtendedColorType::Rgba8, img.to_rgba8().into_raw())
    } else {
        (ExtendedColorType::Rgb8, img.to_rgb8().into_raw())
    };
    encoder
        .write_image(&bytes, img.width(), img.height(), color)
        .map_err(|e| VisualizerError::Encode(e.to_string()))?;
    Ok(out)
}

pub fn render_annotations(
    image: &[u8],
    records: &[DeviceRecord],
    landmarks: &[Landmark],
    colors: &BTreeMap<String, Rgb>,
    options: &RenderOptions,
) -> Result<Rendered, VisualizerError> {
    let source = decode(image)?;
    let (w, h) = (source.width(), source.height());
    for b in records.iter().map(|r| &r.bbox).chain(landmarks.iter().map(|l| &l.bbox)) {
        if !b.within(w, h) {
            return Err(VisualizerError::BoxOutOfBounds(*b, w, h));
        }
    }
    let had_alpha = source.color().has_alpha();
    let mut canvas = Canvas {
        img: source.to_rgba8(),
        placed: Vec::new(),
        outlines: Vec::new(),
    };

    for l in landmarks {
        canvas.outline(&l.bbox, LANDMARK_COLOR);
    }
    for r in records {
        let color = colors.get(&r.label).copied().unwrap_or(PALETTE[0]);
        canvas.outline(&r.bbox, color);
    }
    // Labels go on last so outlines never paint over them.
    for l in landmarks {
        canvas.label(&l.bbox, &l.name, LANDMARK_COLOR);
    }
    for r in records {
        let color = colors.get(&r.label).copied().unwrap_or(PALETTE[0]);
        let text = if options.show_scores {
            format!("{} {:.2}", r.name, r.score)
        } else {
            r.name.clone()
        };
        canvas.label(&r.bbox, &text, color);
    }

    let Canvas { img, placed, outlines } = canvas;
    let out = if had_alpha {
        DynamicImage::ImageRgba8(img)
    } else {
        DynamicImage::ImageRgb8(DynamicImage::ImageRgba8(img).to_rgb8())
    };
    Ok(Rendered {
        png: encode_png(&out)?,
        outlines,
        labels: placed,
    })
}

/// Standard base64 with padding.
pub fn encode_base64(bytes: &[u8]) -> Result<String, VisualizerError> {
    if bytes.is_empty() {
        return Err(VisualizerError::EmptyPayload);
    }
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

pub fn decode_base64(text: &str) -> Result<Vec<u8>, VisualizerError> {
    base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| VisualizerError::ImageDecodeError(e.to_string()))
}
