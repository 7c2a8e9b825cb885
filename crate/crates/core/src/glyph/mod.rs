//! Character glyphs as fixed-size grayscale bitmaps: rendering, the persisted
//! atlas, and training-time translation jitter.

mod atlas;
mod bitmap;
mod render;

use thiserror::Error;

pub use atlas::{GlyphAtlas, ATLAS_MAGIC, ATLAS_VERSION};
pub use bitmap::{jitter, sample_jitter, GlyphBitmap, JitterSpec, MAX_JITTER};
pub use render::{build_atlas, GlyphRenderer, RenderReport, MIN_RESOLUTION, RENDER_MARGIN};

/// Default glyph resolution: two stride-2 convolutions reduce 36 → 18 → 9.
pub const DEFAULT_RESOLUTION: usize = 36;

#[derive(Debug, Error)]
pub enum GlyphError {
    #[error("jitter offset ({dx}, {dy}) outside -2..=2")]
    JitterOutOfRange { dx: i32, dy: i32 },
    #[error("expected {expected} pixels, got {got}")]
    Resolution { expected: usize, got: usize },
    #[error("font: {0}")]
    Font(String),
    #[error("charset is empty")]
    EmptyCharset,
    #[error("atlas format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
