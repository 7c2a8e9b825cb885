//! Character embedders: ID lookup, linear-on-pixels, CNN-on-pixels, and the
//! mixed embedder that adds the ID and CNN vectors.
//!
//! Parameters are stored under `embedder/`:
//! `id_table` (N×K), `conv{i}/filters` (k×k×Cin×Cout), `conv{i}/bias`,
//! `dense/W`, `dense/b`. Conv layers are numbered from 1.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::corpus::{RESERVED, UNK};
use crate::glyph::{jitter, GlyphAtlas, GlyphBitmap, JitterSpec};
use crate::tensor::{conv_output_len, BoundParams, Initializer, Padding, ParamStore, Real, Result, Tape, Tensor, TensorError, Var};

pub const ID_TABLE: &str = "embedder/id_table";
pub const DENSE_W: &str = "embedder/dense/W";
pub const DENSE_B: &str = "embedder/dense/b";

pub fn conv_filters_name(layer: usize) -> String {
    format!("embedder/conv{layer}/filters")
}

pub fn conv_bias_name(layer: usize) -> String {
    format!("embedder/conv{layer}/bias")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbedderKind {
    Id,
    Linear,
    Cnn,
    Mixed,
}

impl EmbedderKind {
    pub const ALL: [EmbedderKind; 4] = [EmbedderKind::Id, EmbedderKind::Linear, EmbedderKind::Cnn, EmbedderKind::Mixed];

    pub fn uses_ids(self) -> bool {
        matches!(self, EmbedderKind::Id | EmbedderKind::Mixed)
    }

    pub fn uses_glyphs(self) -> bool {
        !matches!(self, EmbedderKind::Id)
    }

    pub fn uses_conv(self) -> bool {
        matches!(self, EmbedderKind::Cnn | EmbedderKind::Mixed)
    }
}

impl fmt::Display for EmbedderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedderKind::Id => "id",
            EmbedderKind::Linear => "linear",
            EmbedderKind::Cnn => "cnn",
            EmbedderKind::Mixed => "mixed",
        })
    }
}

impl FromStr for EmbedderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "id" => Ok(EmbedderKind::Id),
            "linear" => Ok(EmbedderKind::Linear),
            "cnn" => Ok(EmbedderKind::Cnn),
            "mixed" | "id+cnn" => Ok(EmbedderKind::Mixed),
            other => Err(format!("unknown embedder `{other}` (expected id, linear, cnn or mixed)")),
        }
    }
}

/// One same-padded convolution: `filters` square kernels of side `kernel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayerSpec {
    pub const fn new(filters: usize, kernel: usize, stride: usize) -> Self {
        Self { filters, kernel, stride }
    }
}

impl fmt::Display for ConvLayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}/{}", self.filters, self.kernel, self.stride)
    }
}

impl FromStr for ConvLayerSpec {
    type Err = String;

    /// `filters x kernel / stride`, e.g. `32x7/2`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let err = || format!("bad conv layer `{s}` (expected FILTERSxKERNEL/STRIDE)");
        let (f, rest) = s.split_once('x').ok_or_else(err)?;
        let (k, st) = rest.split_once('/').ok_or_else(err)?;
        let p = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(err);
        Ok(Self { filters: p(f)?, kernel: p(k)?, stride: p(st)? })
    }
}

/// Comma-separated layer list, e.g. `32x7/2,16x5/2`.
pub fn format_conv(layers: &[ConvLayerSpec]) -> String {
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_conv(s: &str) -> std::result::Result<Vec<ConvLayerSpec>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|l| l.trim().parse()).collect()
}

/// Two-layer stack used for language modeling: 32 7×7 then 16 5×5, stride 2.
pub const LM_CONV: [ConvLayerSpec; 2] = [ConvLayerSpec::new(32, 7, 2), ConvLayerSpec::new(16, 5, 2)];
/// Single layer used for segmentation: 16 5×5, stride 2.
pub const SEG_CONV: [ConvLayerSpec; 1] = [ConvLayerSpec::new(16, 5, 2)];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    /// Output width K.
    pub dim: usize,
    /// Glyph side length R.
    pub resolution: usize,
    pub conv: Vec<ConvLayerSpec>,
    /// Give UNK tokens their true glyph on the glyph path instead of the blank bitmap.
    pub oov_glyphs: bool,
}

impl EmbedderConfig {
    pub fn lm(kind: EmbedderKind) -> Self {
        Self { kind, dim: 300, resolution: crate::glyph::DEFAULT_RESOLUTION, conv: LM_CONV.to_vec(), oov_glyphs: false }
    }

    pub fn seg(kind: EmbedderKind) -> Self {
        Self { kind, dim: 100, resolution: crate::glyph::DEFAULT_RESOLUTION, conv: SEG_CONV.to_vec(), oov_glyphs: false }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.dim == 0 {
            return Err("embedding dim must be positive".into());
        }
        if self.kind.uses_glyphs() && self.resolution == 0 {
            return Err("glyph resolution must be positive".into());
        }
        if self.kind.uses_conv() {
            if self.conv.is_empty() {
                return Err(format!("{} embedder needs at least one conv layer", self.kind));
            }
            self.conv_shapes().map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// Stores the config under `embedder.*` keys of a checkpoint.
    pub fn write_meta(&self, meta: &mut BTreeMap<String, String>) {
        meta.insert("embedder.kind".into(), self.kind.to_string());
        meta.insert("embedder.dim".into(), self.dim.to_string());
        meta.insert("embedder.resolution".into(), self.resolution.to_string());
        meta.insert("embedder.conv".into(), format_conv(&self.conv));
        meta.insert("embedder.oov_glyphs".into(), self.oov_glyphs.to_string());
    }

    pub fn read_meta(meta: &BTreeMap<String, String>) -> std::result::Result<Self, String> {
        let get = |k: &str| meta.get(k).ok_or_else(|| format!("checkpoint is missing `{k}`"));
        let num = |k: &str| get(k)?.parse::<usize>().map_err(|e| format!("`{k}`: {e}"));
        let cfg = Self {
            kind: get("embedder.kind")?.parse()?,
            dim: num("embedder.dim")?,
            resolution: num("embedder.resolution")?,
            conv: parse_conv(get("embedder.conv")?)?,
            oov_glyphs: get("embedder.oov_glyphs")?.parse().map_err(|e| format!("`embedder.oov_glyphs`: {e}"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Spatial size and channels after each conv layer.
    pub fn conv_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let mut side = self.resolution;
        let mut out = Vec::with_capacity(self.conv.len());
        for l in &self.conv {
            let (next, _) = conv_output_len(side, l.kernel, l.stride, Padding::Same)
                .ok_or(TensorError::KernelTooLarge { kernel: (l.kernel, l.kernel), input: (side, side) })?;
            side = next;
            out.push((side, l.filters));
        }
        Ok(out)
    }

    /// Width of the vector entering the final dense layer.
    pub fn glyph_feature_dim(&self) -> Result<usize> {
        match self.kind {
            EmbedderKind::Id => Ok(0),
            EmbedderKind::Linear => Ok(self.resolution * self.resolution),
            EmbedderKind::Cnn | EmbedderKind::Mixed => {
                let &(side, ch) = self.conv_shapes()?.last().expect("validated nonempty conv stack");
                Ok(side * side * ch)
            }
        }
    }
}

/// Which bitmap a position feeds to the glyph path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GlyphKey {
    /// `None` selects the blank bitmap.
    pub ch: Option<char>,
    pub jitter: JitterSpec,
}

impl GlyphKey {
    pub const BLANK: GlyphKey = GlyphKey { ch: None, jitter: JitterSpec::IDENTITY };
}

/// Ids and glyph keys for a flat list of positions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EmbedBatch {
    pub ids: Vec<usize>,
    pub glyphs: Vec<GlyphKey>,
}

impl EmbedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: usize, glyph: GlyphKey) {
        self.ids.push(id);
        self.glyphs.push(glyph);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    /// Rendered glyph pixels the embedder reads but never trains.
    pub non_trainable: usize,
}

/// Embedding vectors split by branch. `total` is what the model consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParts<T> {
    pub id: Option<Vec<T>>,
    pub glyph: Option<Vec<T>>,
    pub total: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Embedder {
    pub config: EmbedderConfig,
    /// Rows of the ID table (vocabulary size including reserved ids).
    pub num_ids: usize,
}

impl Embedder {
    pub fn new(config: EmbedderConfig, num_ids: usize) -> std::result::Result<Self, String> {
        config.validate()?;
        if config.kind.uses_ids() && num_ids == 0 {
            return Err("ID embedder needs a nonempty vocabulary".into());
        }
        Ok(Self { config, num_ids })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn init_params<T: Real>(&self, init: &mut Initializer, store: &mut ParamStore<T>) {
        let k = self.config.dim;
        if self.config.kind.uses_ids() {
            store.insert(ID_TABLE, init.matrix(self.num_ids, k));
        }
        if self.config.kind.uses_conv() {
            let mut cin = 1;
            for (i, l) in self.config.conv.iter().enumerate() {
                store.insert(conv_filters_name(i + 1), init.filters(l.kernel, l.kernel, cin, l.filters));
                store.insert(conv_bias_name(i + 1), init.zeros(&[l.filters]));
                cin = l.filters;
            }
        }
        if self.config.kind.uses_glyphs() {
            let flat = self.config.glyph_feature_dim().expect("validated config");
            store.insert(DENSE_W, init.matrix(flat, k));
            store.insert(DENSE_B, init.zeros(&[k]));
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let k = self.config.dim;
        let mut trainable = 0;
        if self.config.kind.uses_ids() {
            trainable += self.num_ids * k;
        }
        if self.config.kind.uses_conv() {
            let mut cin = 1;
            for l in &self.config.conv {
                trainable += l.kernel * l.kernel * cin * l.filters + l.filters;
                cin = l.filters;
            }
        }
        let mut non_trainable = 0;
        if self.config.kind.uses_glyphs() {
            trainable += (self.config.glyph_feature_dim().expect("validated config") + 1) * k;
            non_trainable = self.num_ids * self.config.resolution * self.config.resolution;
        }
        ParamCount { trainable, non_trainable }
    }

    /// Glyph key for vocabulary id `id` whose source character is `ch`.
    /// Reserved ids and (unless `oov_glyphs`) UNK read the blank bitmap.
    pub fn glyph_key(&self, id: usize, ch: Option<char>, jitter: JitterSpec) -> GlyphKey {
        let ch = if id == UNK {
            ch.filter(|_| self.config.oov_glyphs)
        } else if id < RESERVED {
            None
        } else {
            ch
        };
        GlyphKey { ch, jitter }
    }

    /// The bitmap the glyph path reads for `key`: the atlas entry, translated by its jitter.
    pub fn glyph_input(&self, atlas: Option<&GlyphAtlas>, key: GlyphKey) -> std::result::Result<Arc<GlyphBitmap>, TensorError> {
        let r = self.config.resolution;
        let base = match (key.ch, atlas) {
            (None, _) => Arc::new(GlyphBitmap::blank(r)),
            (Some(c), Some(a)) => a.get_glyph(c),
            (Some(_), None) => {
                return Err(TensorError::Shape { op: "embed", detail: "glyph embedder needs an atlas".into() });
            }
        };
        if base.resolution() != r {
            return Err(TensorError::Shape {
                op: "embed",
                detail: format!("atlas resolution {} but embedder expects {r}", base.resolution()),
            });
        }
        Ok(if key.jitter == JitterSpec::IDENTITY { base } else { Arc::new(jitter(&base, key.jitter)) })
    }

    /// Glyph-path vectors for distinct keys, then gathered per position.
    fn glyph_path<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, batch: &EmbedBatch, atlas: Option<&GlyphAtlas>) -> Result<Var> {
        let mut slot: HashMap<GlyphKey, usize> = HashMap::new();
        let mut order: Vec<GlyphKey> = Vec::new();
        let rows: Vec<usize> = batch
            .glyphs
            .iter()
            .map(|&k| {
                *slot.entry(k).or_insert_with(|| {
                    order.push(k);
                    order.len() - 1
                })
            })
            .collect();
        let r = self.config.resolution;
        let mut pixels = Vec::with_capacity(order.len() * r * r);
        for &k in &order {
            pixels.extend(self.glyph_input(atlas, k)?.pixels().iter().map(|&v| T::of(v as f64)));
        }
        let u = order.len();
        let features = match self.config.kind {
            EmbedderKind::Linear => tape.constant(vec![u, r * r], pixels)?,
            _ => {
                let mut x = tape.constant(vec![u, r, r, 1], pixels)?;
                for (i, l) in self.config.conv.iter().enumerate() {
                    let f = p.get(&conv_filters_name(i + 1))?;
                    let b = p.get(&conv_bias_name(i + 1))?;
                    let c = tape.conv2d(x, f, (l.stride, l.stride), Padding::Same)?;
                    let c = tape.add_bias(c, b)?;
                    x = tape.relu(c)?;
                }
                let flat = self.config.glyph_feature_dim()?;
                tape.reshape(x, vec![u, flat])?
            }
        };
        let w = p.get(DENSE_W)?;
        let b = p.get(DENSE_B)?;
        let out = tape.dense(features, w, b)?;
        tape.gather_rows(out, &rows)
    }

    fn id_path<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, batch: &EmbedBatch) -> Result<Var> {
        let table = p.get(ID_TABLE)?;
        tape.gather_rows(table, &batch.ids)
    }

    /// `n×K` embeddings for the `n` positions of `batch`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, batch: &EmbedBatch, atlas: Option<&GlyphAtlas>) -> Result<Var> {
        let (id, glyph) = self.forward_parts(tape, p, batch, atlas)?;
        match (id, glyph) {
            (Some(a), Some(b)) => tape.add(a, b),
            (Some(v), None) | (None, Some(v)) => Ok(v),
            (None, None) => unreachable!("every embedder kind has a branch"),
        }
    }

    /// The ID-branch and glyph-branch outputs before they are combined.
    pub fn forward_parts<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        batch: &EmbedBatch,
        atlas: Option<&GlyphAtlas>,
    ) -> Result<(Option<Var>, Option<Var>)> {
        if batch.is_empty() || batch.ids.len() != batch.glyphs.len() {
            return Err(TensorError::Shape {
                op: "embed",
                detail: format!("{} ids, {} glyph keys", batch.ids.len(), batch.glyphs.len()),
            });
        }
        let id = if self.config.kind.uses_ids() { Some(self.id_path(tape, p, batch)?) } else { None };
        let glyph = if self.config.kind.uses_glyphs() { Some(self.glyph_path(tape, p, batch, atlas)?) } else { None };
        Ok((id, glyph))
    }

    /// Evaluates one position outside of training and returns every branch.
    pub fn embed_parts<T: Real>(
        &self,
        params: &ParamStore<T>,
        id: usize,
        glyph: GlyphKey,
        atlas: Option<&GlyphAtlas>,
    ) -> Result<EmbeddingParts<T>> {
        let mut tape = Tape::new();
        let p = self.bind_own(params, &mut tape)?;
        let batch = EmbedBatch { ids: vec![id], glyphs: vec![glyph] };
        let (a, b) = self.forward_parts(&mut tape, &p, &batch, atlas)?;
        let id_vec = a.map(|v| tape.value(v).to_vec());
        let glyph_vec = b.map(|v| tape.value(v).to_vec());
        let total = match (&id_vec, &glyph_vec) {
            (Some(x), Some(y)) => {
                let (xa, ya) = (tape.leaf(&Tensor::new(vec![1, x.len()], x.clone())?), tape.leaf(&Tensor::new(vec![1, y.len()], y.clone())?));
                let s = tape.add(xa, ya)?;
                tape.value(s).to_vec()
            }
            (Some(x), None) => x.clone(),
            (None, Some(y)) => y.clone(),
            (None, None) => unreachable!("every embedder kind has a branch"),
        };
        Ok(EmbeddingParts { id: id_vec, glyph: glyph_vec, total })
    }

    /// Names of the parameters this embedder reads.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.config.kind.uses_ids() {
            names.push(ID_TABLE.to_string());
        }
        if self.config.kind.uses_conv() {
            for i in 1..=self.config.conv.len() {
                names.push(conv_filters_name(i));
                names.push(conv_bias_name(i));
            }
        }
        if self.config.kind.uses_glyphs() {
            names.push(DENSE_W.to_string());
            names.push(DENSE_B.to_string());
        }
        names
    }

    fn bind_own<T: Real>(&self, params: &ParamStore<T>, tape: &mut Tape<T>) -> Result<BoundParams> {
        let mut own = ParamStore::new();
        for name in self.param_names() {
            own.insert(name.clone(), params.get(&name)?.clone());
        }
        Ok(own.bind(tape))
    }
}
