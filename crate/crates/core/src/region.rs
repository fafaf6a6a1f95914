//! Region-annotated image records: domain types, balanced region sampling,
//! and the deterministic tokenizer.

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use rand::seq::index;
use rand::Rng;
use std::collections::HashMap;

/// Reserved token id for unknown segments.
pub const UNK_ID: usize = 0;

/// Default cap on OCR token labels per region.
pub const DEFAULT_MAX_OCR_TOKENS: usize = 10;

/// Axis-aligned pixel rectangle, inclusive-exclusive: `x0 <= x < x1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    /// Containment of a continuous point under inclusive-exclusive bounds.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }

    /// Overlap area with another rectangle in square pixels.
    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = (self.x1.min(other.x1) as i64 - self.x0.max(other.x0) as i64).max(0);
        let h = (self.y1.min(other.y1) as i64 - self.y0.max(other.y0) as i64).max(0);
        (w * h) as u64
    }

    fn validate(&self, image_w: u32, image_h: u32) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::validation(format!(
                "bbox [{},{},{},{}] is empty or inverted",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        if self.x1 > image_w || self.y1 > image_h {
            return Err(Error::validation(format!(
                "bbox [{},{},{},{}] exceeds image {}x{}",
                self.x0, self.y0, self.x1, self.y1, image_w, image_h
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionKind {
    Object,
    Ocr,
}

/// A labeled image region: an object pseudo-class or an OCR token set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub bbox: BBox,
    pub kind: RegionKind,
    pub object_label: Option<usize>,
    pub ocr_labels: Option<Vec<usize>>,
}

impl Region {
    pub fn object(bbox: BBox, label: usize) -> Self {
        Region {
            bbox,
            kind: RegionKind::Object,
            object_label: Some(label),
            ocr_labels: None,
        }
    }

    pub fn ocr(bbox: BBox, tokens: Vec<usize>) -> Self {
        Region {
            bbox,
            kind: RegionKind::Ocr,
            object_label: None,
            ocr_labels: Some(tokens),
        }
    }

    /// Checks the kind/label pairing and bbox bounds against the image size.
    pub fn validate(&self, image_w: u32, image_h: u32, max_ocr_tokens: usize) -> Result<()> {
        self.bbox.validate(image_w, image_h)?;
        match self.kind {
            RegionKind::Object => {
                if self.object_label.is_none() {
                    return Err(Error::validation("object region without object_label"));
                }
                if self.ocr_labels.is_some() {
                    return Err(Error::validation("object region carries ocr_labels"));
                }
            }
            RegionKind::Ocr => {
                let tokens = self
                    .ocr_labels
                    .as_ref()
                    .ok_or_else(|| Error::validation("ocr region without ocr_labels"))?;
                if tokens.is_empty() {
                    return Err(Error::validation("ocr region with empty ocr_labels"));
                }
                if tokens.len() > max_ocr_tokens {
                    return Err(Error::validation(format!(
                        "ocr region carries {} tokens, max is {max_ocr_tokens}",
                        tokens.len()
                    )));
                }
                if self.object_label.is_some() {
                    return Err(Error::validation("ocr region carries object_label"));
                }
            }
        }
        Ok(())
    }
}

/// One image worth of annotations. Pixels are not stored; records produced by
/// the synthetic generator encode their render seed in `image_id` and are
/// materialized on demand (see `synth::render_record`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub h: u32,
    pub w: u32,
    pub regions: Vec<Region>,
}

impl ImageRecord {
    pub fn validate(&self, max_ocr_tokens: usize) -> Result<()> {
        for region in &self.regions {
            region.validate(self.w, self.h, max_ocr_tokens)?;
        }
        Ok(())
    }
}

/// Result of `balanced_sample`: exactly N regions, with resampled duplicates
/// flagged so the loss may optionally deduplicate their gradients.
#[derive(Debug, Clone)]
pub struct SampledRegions {
    pub regions: Vec<Region>,
    /// `true` for entries that are with-replacement resamples of an original.
    pub duplicate: Vec<bool>,
}

/// A batch of records with their fixed-size region samples.
#[derive(Debug, Clone)]
pub struct RegionBatch {
    pub records: Vec<ImageRecord>,
    pub sampled: Vec<SampledRegions>,
    pub seed: u64,
}

impl RegionBatch {
    /// Samples every record down to exactly `n` regions.
    pub fn assemble(records: Vec<ImageRecord>, n: usize, seed: u64) -> Result<Self> {
        let sampled = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                balanced_sample(&r.regions, n, crate::rng::derive_seed(seed, &[i as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RegionBatch {
            records,
            sampled,
            seed,
        })
    }
}

/// Standardizes a region list to exactly `n` entries: a uniform
/// without-replacement draw when there are enough regions, otherwise every
/// original once plus uniform with-replacement resamples.
pub fn balanced_sample(regions: &[Region], n: usize, seed: u64) -> Result<SampledRegions> {
    if n == 0 {
        return Err(Error::config("sample count N must be >= 1"));
    }
    if regions.is_empty() {
        return Err(Error::validation("no regions"));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(n);
    let mut duplicate = Vec::with_capacity(n);
    if regions.len() >= n {
        for idx in index::sample(&mut rng, regions.len(), n) {
            out.push(regions[idx].clone());
            duplicate.push(false);
        }
    } else {
        for region in regions {
            out.push(region.clone());
            duplicate.push(false);
        }
        for _ in regions.len()..n {
            let idx = rng.random_range(0..regions.len());
            out.push(regions[idx].clone());
            duplicate.push(true);
        }
    }
    Ok(SampledRegions {
        regions: out,
        duplicate,
    })
}

/// Token-string-to-id mapping, bijective onto `[0, V)`. Id 0 doubles as the
/// reserved UNK id.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens listed in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::config("vocabulary must be non-empty"));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if token_to_id.insert(token.clone(), id).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token {token:?}")));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token: tokens,
        })
    }

    /// Builds a vocabulary from explicit (token, id) pairs that must cover
    /// `[0, V)` exactly once each.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, usize)>) -> Result<Self> {
        let pairs: Vec<(String, usize)> = pairs.into_iter().collect();
        let v = pairs.len();
        let mut id_to_token = vec![None; v];
        for (token, id) in pairs {
            if id >= v {
                return Err(Error::config(format!(
                    "token id {id} out of range for vocabulary of size {v}"
                )));
            }
            if id_to_token[id].replace(token).is_some() {
                return Err(Error::config(format!("duplicate token id {id}")));
            }
        }
        Self::from_tokens(id_to_token.into_iter().map(Option::unwrap).collect())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }
}

/// Deterministic whitespace segmentation with per-character fallback; unknown
/// segments map to [`UNK_ID`]. Empty text is an error because OCR regions must
/// carry text.
pub fn tokenize_text(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    if vocab.is_empty() {
        return Err(Error::config("vocabulary must be non-empty"));
    }
    if text.split_whitespace().next().is_none() {
        return Err(Error::validation("empty text"));
    }
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        if let Some(id) = vocab.id_of(word) {
            ids.push(id);
        } else {
            for ch in word.chars() {
                let mut buf = [0u8; 4];
                let s: &str = ch.encode_utf8(&mut buf);
                ids.push(vocab.id_of(s).unwrap_or(UNK_ID));
            }
        }
    }
    Ok(ids)
}
