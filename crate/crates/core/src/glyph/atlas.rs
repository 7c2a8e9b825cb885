//! Persisted character → bitmap table with a memoized decode path.
//!
//! File layout (integers little-endian `u32` unless noted):
//!
//! ```text
//! magic      8 bytes  "GLYATLS\0"
//! version    u32      1
//! resolution u32      R
//! count      u32
//! font_len   u32, font name UTF-8
//! count × { char_len u8, char UTF-8, R·R intensity bytes }   (sorted by code point)
//! ```
//!
//! Intensities are 8-bit and map to `[0, 1]` by `/255` on load.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use super::{GlyphBitmap, GlyphError};

pub const ATLAS_MAGIC: &[u8; 8] = b"GLYATLS\0";
pub const ATLAS_VERSION: u32 = 1;

#[derive(Debug)]
pub struct GlyphAtlas {
    resolution: usize,
    font_name: String,
    entries: BTreeMap<char, Vec<u8>>,
    blank: Arc<GlyphBitmap>,
    cache: RwLock<HashMap<char, Arc<GlyphBitmap>>>,
    decodes: AtomicUsize,
}

impl Clone for GlyphAtlas {
    fn clone(&self) -> Self {
        // the clone starts with a cold cache and its own counter
        Self::from_raw(self.resolution, self.font_name.clone(), self.entries.clone())
    }
}

impl PartialEq for GlyphAtlas {
    fn eq(&self, other: &Self) -> bool {
        self.resolution == other.resolution && self.font_name == other.font_name && self.entries == other.entries
    }
}

impl GlyphAtlas {
    fn from_raw(resolution: usize, font_name: String, entries: BTreeMap<char, Vec<u8>>) -> Self {
        Self {
            resolution,
            font_name,
            entries,
            blank: Arc::new(GlyphBitmap::blank(resolution)),
            cache: RwLock::new(HashMap::new()),
            decodes: AtomicUsize::new(0),
        }
    }

    pub fn new(resolution: usize, font_name: impl Into<String>) -> Self {
        Self::from_raw(resolution, font_name.into(), BTreeMap::new())
    }

    /// Adds or replaces the bitmap for `c`.
    pub fn insert(&mut self, c: char, bitmap: &GlyphBitmap) -> Result<(), GlyphError> {
        if bitmap.resolution() != self.resolution {
            return Err(GlyphError::Resolution { expected: self.resolution, got: bitmap.resolution() });
        }
        self.entries.insert(c, bitmap.to_bytes());
        self.cache.get_mut().expect("atlas cache poisoned").remove(&c);
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn font_name(&self) -> &str {
        &self.font_name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, c: char) -> bool {
        self.entries.contains_key(&c)
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.entries.keys().copied()
    }

    /// The all-zero bitmap used for UNK and characters without an entry.
    pub fn blank(&self) -> Arc<GlyphBitmap> {
        Arc::clone(&self.blank)
    }

    /// Bitmap for `c`, decoded at most once per atlas instance. Characters
    /// without an entry get the blank bitmap.
    pub fn get_glyph(&self, c: char) -> Arc<GlyphBitmap> {
        if let Some(hit) = self.cache.read().expect("atlas cache poisoned").get(&c) {
            return Arc::clone(hit);
        }
        let Some(raw) = self.entries.get(&c) else {
            return self.blank();
        };
        let mut cache = self.cache.write().expect("atlas cache poisoned");
        // another reader may have decoded it while we waited for the lock
        if let Some(hit) = cache.get(&c) {
            return Arc::clone(hit);
        }
        self.decodes.fetch_add(1, Ordering::Relaxed);
        let bitmap = Arc::new(GlyphBitmap::from_bytes(self.resolution, raw).expect("entries hold R·R bytes"));
        cache.insert(c, Arc::clone(&bitmap));
        bitmap
    }

    /// Number of decodes performed by [`GlyphAtlas::get_glyph`] so far.
    pub fn render_count(&self) -> usize {
        self.decodes.load(Ordering::Relaxed)
    }

    /// Raw stored intensities for `c`.
    pub fn raw(&self, c: char) -> Option<&[u8]> {
        self.entries.get(&c).map(Vec::as_slice)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), GlyphError> {
        w.write_all(ATLAS_MAGIC)?;
        w.write_all(&ATLAS_VERSION.to_le_bytes())?;
        w.write_all(&(self.resolution as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        w.write_all(&(self.font_name.len() as u32).to_le_bytes())?;
        w.write_all(self.font_name.as_bytes())?;
        let mut buf = [0u8; 4];
        for (c, px) in &self.entries {
            let enc = c.encode_utf8(&mut buf);
            w.write_all(&[enc.len() as u8])?;
            w.write_all(enc.as_bytes())?;
            w.write_all(px)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, GlyphError> {
        fn u32_of(r: &mut impl Read) -> Result<usize, GlyphError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ATLAS_MAGIC {
            return Err(GlyphError::Format("not an atlas file (bad magic)".into()));
        }
        let version = u32_of(r)?;
        if version != ATLAS_VERSION as usize {
            return Err(GlyphError::Format(format!("unsupported atlas version {version}")));
        }
        let resolution = u32_of(r)?;
        if resolution == 0 {
            return Err(GlyphError::Format("zero resolution".into()));
        }
        let count = u32_of(r)?;
        let mut name = vec![0u8; u32_of(r)?];
        r.read_exact(&mut name)?;
        let font_name = String::from_utf8(name).map_err(|_| GlyphError::Format("font name is not UTF-8".into()))?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let mut len = [0u8; 1];
            r.read_exact(&mut len)?;
            let mut cbuf = vec![0u8; len[0] as usize];
            r.read_exact(&mut cbuf)?;
            let s = std::str::from_utf8(&cbuf).map_err(|_| GlyphError::Format("entry key is not UTF-8".into()))?;
            let mut it = s.chars();
            let (Some(c), None) = (it.next(), it.next()) else {
                return Err(GlyphError::Format(format!("entry key {s:?} is not one character")));
            };
            let mut px = vec![0u8; resolution * resolution];
            r.read_exact(&mut px)?;
            if entries.insert(c, px).is_some() {
                return Err(GlyphError::Format(format!("duplicate entry for {c:?}")));
            }
        }
        Ok(Self::from_raw(resolution, font_name, entries))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GlyphError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GlyphError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_atlas() -> GlyphAtlas {
        let mut atlas = GlyphAtlas::new(8, "test");
        for (i, c) in ['雨', '一', 'a'].into_iter().enumerate() {
            let bytes: Vec<u8> = (0..64).map(|k| ((k * 7 + i * 31) % 256) as u8).collect();
            atlas.insert(c, &GlyphBitmap::from_bytes(8, &bytes).unwrap()).unwrap();
        }
        atlas
    }

    #[test]
    fn memoizes_decodes() {
        let atlas = sample_atlas();
        let a = atlas.get_glyph('雨');
        let b = atlas.get_glyph('雨');
        assert_eq!(a, b);
        assert_eq!(atlas.render_count(), 1);
        for _ in 0..1000 {
            atlas.get_glyph('一');
        }
        assert_eq!(atlas.render_count(), 2);
    }

    #[test]
    fn unknown_character_gets_blank() {
        let atlas = sample_atlas();
        assert!(atlas.get_glyph('雪').is_blank());
        assert!(atlas.blank().is_blank());
        assert_eq!(atlas.render_count(), 0);
    }

    #[test]
    fn file_round_trip_is_byte_exact() {
        let atlas = sample_atlas();
        let mut bytes = Vec::new();
        atlas.write_to(&mut bytes).unwrap();
        let back = GlyphAtlas::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, atlas);
        for c in atlas.chars() {
            assert_eq!(back.raw(c), atlas.raw(c));
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn rejects_wrong_resolution() {
        let mut atlas = GlyphAtlas::new(8, "test");
        assert!(atlas.insert('x', &GlyphBitmap::blank(9)).is_err());
    }

    #[test]
    fn concurrent_first_access_decodes_once() {
        let atlas = Arc::new(sample_atlas());
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let a = Arc::clone(&atlas);
                std::thread::spawn(move || a.get_glyph('a'))
            })
            .collect();
        let first = handles.into_iter().map(|h| h.join().unwrap()).collect::<Vec<_>>();
        assert!(first.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(atlas.render_count(), 1);
    }
}
