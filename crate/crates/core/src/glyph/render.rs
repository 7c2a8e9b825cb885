//! Offline rasterization of a charset into a [`GlyphAtlas`].

use std::collections::BTreeSet;
use std::path::Path;

use ab_glyph::{point, Font, FontVec, PxScale, ScaleFont};

use super::{GlyphAtlas, GlyphBitmap, GlyphError, MAX_JITTER};

pub const MIN_RESOLUTION: usize = 16;

/// Empty pixels kept between the glyph and every border, wide enough that a
/// maximal jitter still leaves `MAX_JITTER` pixels free.
pub const RENDER_MARGIN: usize = 2 * MAX_JITTER as usize;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RenderReport {
    pub rendered: usize,
    /// Characters the font has no glyph for; stored as blank bitmaps.
    pub missing: Vec<char>,
}

impl RenderReport {
    pub fn warnings(&self) -> Vec<String> {
        self.missing.iter().map(|c| format!("font has no glyph for {c:?} (U+{:04X}); using blank bitmap", *c as u32)).collect()
    }
}

/// Top of the ideographic em box above the baseline, in ems.
const IDEOGRAPHIC_ASCENT: f32 = 0.88;

fn em_px(font: &FontVec, scale: PxScale) -> f32 {
    let upem = font.units_per_em().unwrap_or(1000.0);
    scale.y * upem / (font.ascent_unscaled() - font.descent_unscaled())
}

/// Rasterizer for one font at one resolution.
pub struct GlyphRenderer {
    font: FontVec,
    font_name: String,
    resolution: usize,
}

impl GlyphRenderer {
    pub fn from_bytes(bytes: Vec<u8>, font_name: impl Into<String>, resolution: usize) -> Result<Self, GlyphError> {
        if resolution < MIN_RESOLUTION {
            return Err(GlyphError::Font(format!("resolution {resolution} is below the minimum of {MIN_RESOLUTION}")));
        }
        let font = FontVec::try_from_vec(bytes).map_err(|e| GlyphError::Font(e.to_string()))?;
        Ok(Self { font, font_name: font_name.into(), resolution })
    }

    pub fn from_file(path: impl AsRef<Path>, resolution: usize) -> Result<Self, GlyphError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| GlyphError::Font(format!("{}: {e}", path.display())))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_bytes(bytes, name, resolution)
    }

    /// Scale at which one em spans `px` pixels.
    fn em_scale(&self, px: f32) -> PxScale {
        let upem = self.font.units_per_em().unwrap_or(1000.0);
        let extent = self.font.ascent_unscaled() - self.font.descent_unscaled();
        PxScale::from(px * extent / upem)
    }

    pub fn has_glyph(&self, c: char) -> bool {
        self.font.glyph_id(c).0 != 0
    }

    /// Rasterizes `c` anti-aliased with its em box filling the area inside
    /// the margin, horizontally centered on its advance. Outlines that poke
    /// out of the em box are shifted or shrunk to keep [`RENDER_MARGIN`]
    /// clear on every side. Returns `None` when the font lacks the character.
    pub fn render(&self, c: char) -> Option<GlyphBitmap> {
        let id = self.font.glyph_id(c);
        if id.0 == 0 {
            return None;
        }
        let r = self.resolution;
        let margin = RENDER_MARGIN as f32;
        let avail = (r - 2 * RENDER_MARGIN) as f32;
        let mut bitmap = GlyphBitmap::blank(r);

        let mut scale = self.em_scale(avail);
        let layout = |scale: PxScale| {
            let scaled = self.font.as_scaled(scale);
            let em = em_px(&self.font, scale);
            let x = margin + (avail - scaled.h_advance(id)) / 2.0;
            let y = margin + (avail - em) / 2.0 + IDEOGRAPHIC_ASCENT * em;
            id.with_scale_and_position(scale, point(x, y))
        };
        let Some(mut outline) = self.font.outline_glyph(layout(scale)) else {
            // whitespace and other outline-free glyphs render blank
            return Some(bitmap);
        };
        let b = outline.px_bounds();
        let (w, h) = (b.width(), b.height());
        if w > avail || h > avail {
            let shrink = avail / w.max(h);
            scale = PxScale::from(scale.y * shrink);
            outline = self.font.outline_glyph(layout(scale))?;
        }
        let b = outline.px_bounds();
        let lo = margin;
        let hi = r as f32 - margin;
        let shift = |min: f32, max: f32| -> i32 {
            if min < lo {
                (lo - min).ceil() as i32
            } else if max > hi {
                -((max - hi).ceil() as i32)
            } else {
                0
            }
        };
        let (sx, sy) = (shift(b.min.x, b.max.x), shift(b.min.y, b.max.y));
        let (ox, oy) = (b.min.x as i32 + sx, b.min.y as i32 + sy);
        outline.draw(|x, y, coverage| {
            let (px, py) = (ox + x as i32, oy + y as i32);
            if px >= 0 && py >= 0 && (px as usize) < r && (py as usize) < r {
                let v = (coverage.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                let cur = bitmap.get(px as usize, py as usize);
                bitmap.set(px as usize, py as usize, cur.max(v));
            }
        });
        Some(bitmap)
    }

    /// Renders every distinct character of `charset` into a new atlas.
    pub fn build_atlas(&self, charset: &[char]) -> Result<(GlyphAtlas, RenderReport), GlyphError> {
        let distinct: BTreeSet<char> = charset.iter().copied().collect();
        if distinct.is_empty() {
            return Err(GlyphError::EmptyCharset);
        }
        let mut atlas = GlyphAtlas::new(self.resolution, self.font_name.clone());
        let mut report = RenderReport::default();
        for c in distinct {
            match self.render(c) {
                Some(bitmap) => {
                    atlas.insert(c, &bitmap)?;
                    report.rendered += 1;
                }
                None => {
                    atlas.insert(c, &GlyphBitmap::blank(self.resolution))?;
                    report.missing.push(c);
                }
            }
        }
        Ok((atlas, report))
    }
}

/// Builds an atlas for `charset` from the font file at `font_path`.
pub fn build_atlas(charset: &[char], font_path: impl AsRef<Path>, resolution: usize) -> Result<(GlyphAtlas, RenderReport), GlyphError> {
    if charset.is_empty() {
        return Err(GlyphError::EmptyCharset);
    }
    GlyphRenderer::from_file(font_path, resolution)?.build_atlas(charset)
}
