use rand::Rng;

use super::GlyphError;

/// Largest translation, in pixels, that training-time jitter may apply on each axis.
pub const MAX_JITTER: i32 = 2;

/// Square grayscale raster of one glyph, intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphBitmap {
    resolution: usize,
    pixels: Vec<f32>,
}

impl GlyphBitmap {
    pub fn blank(resolution: usize) -> Self {
        Self { resolution, pixels: vec![0.0; resolution * resolution] }
    }

    pub fn from_pixels(resolution: usize, pixels: Vec<f32>) -> Result<Self, GlyphError> {
        if pixels.len() != resolution * resolution {
            return Err(GlyphError::Resolution { expected: resolution * resolution, got: pixels.len() });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(GlyphError::Format(format!("pixel intensity {p} outside [0, 1]")));
        }
        Ok(Self { resolution, pixels })
    }

    /// Decodes 8-bit intensities (`byte / 255`).
    pub fn from_bytes(resolution: usize, bytes: &[u8]) -> Result<Self, GlyphError> {
        if bytes.len() != resolution * resolution {
            return Err(GlyphError::Resolution { expected: resolution * resolution, got: bytes.len() });
        }
        Ok(Self { resolution, pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect() })
    }

    /// Inverse of [`GlyphBitmap::from_bytes`]; exact for bitmaps decoded from bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.resolution + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.resolution + x] = v.clamp(0.0, 1.0);
    }

    pub fn is_blank(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0.0)
    }

    /// Distance in pixels from the lit content to the nearest border, or
    /// `None` for a blank bitmap.
    pub fn content_margin(&self) -> Option<usize> {
        let r = self.resolution;
        let mut margin: Option<usize> = None;
        for y in 0..r {
            for x in 0..r {
                if self.get(x, y) > 0.0 {
                    let m = x.min(y).min(r - 1 - x).min(r - 1 - y);
                    margin = Some(margin.map_or(m, |cur| cur.min(m)));
                }
            }
        }
        margin
    }
}

/// A 2-D pixel translation with both offsets in `-2..=2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct JitterSpec {
    dx: i8,
    dy: i8,
}

impl JitterSpec {
    pub const IDENTITY: JitterSpec = JitterSpec { dx: 0, dy: 0 };

    pub fn new(dx: i32, dy: i32) -> Result<Self, GlyphError> {
        if dx.abs() > MAX_JITTER || dy.abs() > MAX_JITTER {
            return Err(GlyphError::JitterOutOfRange { dx, dy });
        }
        Ok(Self { dx: dx as i8, dy: dy as i8 })
    }

    pub fn dx(self) -> i32 {
        self.dx as i32
    }

    pub fn dy(self) -> i32 {
        self.dy as i32
    }

    pub fn inverse(self) -> Self {
        Self { dx: -self.dx, dy: -self.dy }
    }

    /// The full support, 25 offset pairs in row-major order.
    pub fn all() -> Vec<JitterSpec> {
        (-MAX_JITTER..=MAX_JITTER)
            .flat_map(|dy| (-MAX_JITTER..=MAX_JITTER).map(move |dx| JitterSpec { dx: dx as i8, dy: dy as i8 }))
            .collect()
    }
}

/// Translates the content by `(dx, dy)`; vacated pixels become zero and
/// content pushed past the border is dropped.
pub fn jitter(bitmap: &GlyphBitmap, spec: JitterSpec) -> GlyphBitmap {
    if spec == JitterSpec::IDENTITY {
        return bitmap.clone();
    }
    let r = bitmap.resolution as i32;
    let mut out = GlyphBitmap::blank(bitmap.resolution);
    for y in 0..r {
        let sy = y - spec.dy();
        if !(0..r).contains(&sy) {
            continue;
        }
        for x in 0..r {
            let sx = x - spec.dx();
            if (0..r).contains(&sx) {
                out.pixels[(y * r + x) as usize] = bitmap.pixels[(sy * r + sx) as usize];
            }
        }
    }
    out
}

/// Uniform draw from the 25 allowed offsets.
pub fn sample_jitter<R: Rng + ?Sized>(rng: &mut R) -> JitterSpec {
    let span = 2 * MAX_JITTER + 1;
    let k = rng.gen_range(0..span * span);
    JitterSpec { dx: (k % span - MAX_JITTER) as i8, dy: (k / span - MAX_JITTER) as i8 }
}
