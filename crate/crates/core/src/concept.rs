//! Concept masks: manifest ingestion, RLE decoding and background completion.
//!
//! Masks arrive as COCO-style uncompressed RLE: run lengths over the
//! column-major pixel order, the first run counting zeros. Overlapping masks
//! are kept as-is; visibility under overlap is decided by [`crate::masking`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EacError, Result};

/// Row-major boolean pixel grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Bitmap {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Row-major bits.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn or_assign(&mut self, other: &Bitmap) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn complement(&self) -> Bitmap {
        Bitmap {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

/// Expands uncompressed column-major RLE counts into a bitmap.
pub fn decode_rle(counts: &[i64], height: usize, width: usize) -> Result<Bitmap> {
    let mut total: u128 = 0;
    for (index, &value) in counts.iter().enumerate() {
        if value < 0 {
            return Err(EacError::NegativeRun { index, value });
        }
        total += value as u128;
    }
    let expected = height * width;
    if total != expected as u128 {
        return Err(EacError::RleLengthMismatch {
            expected,
            got: total,
        });
    }
    let mut bitmap = Bitmap::new(width, height);
    let mut pos = 0usize;
    for (run, &len) in counts.iter().enumerate() {
        let on = run % 2 == 1;
        for p in pos..pos + len as usize {
            if on {
                let (x, y) = (p / height, p % height);
                bitmap.set(x, y, true);
            }
        }
        pos += len as usize;
    }
    Ok(bitmap)
}

/// Inverse of [`decode_rle`]; always starts with a (possibly empty) zero run.
pub fn encode_rle(bitmap: &Bitmap) -> Vec<i64> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0i64;
    for x in 0..bitmap.width {
        for y in 0..bitmap.height {
            let v = bitmap.get(x, y);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptMask {
    pub id: usize,
    pub name: Option<String>,
    pub bitmap: Bitmap,
    pub area: usize,
}

/// Ordered concepts over one image. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptSet {
    width: usize,
    height: usize,
    concepts: Vec<ConceptMask>,
    has_background: bool,
}

impl ConceptSet {
    /// Builds a set from bitmaps, assigning ids `0..n` in order.
    pub fn from_bitmaps(
        width: usize,
        height: usize,
        masks: impl IntoIterator<Item = (Option<String>, Bitmap)>,
    ) -> Result<Self> {
        let mut concepts = Vec::new();
        for (id, (name, bitmap)) in masks.into_iter().enumerate() {
            if bitmap.width != width || bitmap.height != height {
                return Err(EacError::DimensionMismatch {
                    id,
                    mask_height: bitmap.height,
                    mask_width: bitmap.width,
                    height,
                    width,
                });
            }
            let area = bitmap.count();
            if area == 0 {
                return Err(EacError::MalformedManifest(format!(
                    "concept {id} covers no pixels"
                )));
            }
            concepts.push(ConceptMask {
                id,
                name,
                bitmap,
                area,
            });
        }
        if concepts.is_empty() {
            return Err(EacError::EmptyConceptSet);
        }
        Ok(Self {
            width,
            height,
            concepts,
            has_background: false,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[ConceptMask] {
        &self.concepts
    }

    pub fn get(&self, id: usize) -> Option<&ConceptMask> {
        self.concepts.get(id)
    }

    pub fn has_background(&self) -> bool {
        self.has_background
    }

    pub fn union(&self) -> Bitmap {
        let mut acc = Bitmap::new(self.width, self.height);
        for c in &self.concepts {
            acc.or_assign(&c.bitmap);
        }
        acc
    }

    /// Appends the complement of the union as a final "background" concept
    /// when some pixels are uncovered; always marks the set as completed.
    pub fn complete_with_background(mut self) -> Self {
        let uncovered = self.union().complement();
        let area = uncovered.count();
        if area > 0 {
            self.concepts.push(ConceptMask {
                id: self.concepts.len(),
                name: Some("background".to_string()),
                bitmap: uncovered,
                area,
            });
        }
        self.has_background = true;
        self
    }

    pub fn to_manifest(&self) -> Manifest {
        Manifest {
            image: ManifestImage {
                width: self.width,
                height: self.height,
                path: None,
            },
            concepts: self
                .concepts
                .iter()
                .map(|c| ManifestConcept {
                    id: c.id as i64,
                    name: c.name.clone(),
                    rle: Rle {
                        size: [self.height, self.width],
                        counts: encode_rle(&c.bitmap),
                    },
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub image: ManifestImage,
    pub concepts: Vec<ManifestConcept>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConcept {
    pub id: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub rle: Rle,
}

/// `size` is `[height, width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: Vec<i64>,
}

impl Manifest {
    pub fn into_concept_set(self) -> Result<ConceptSet> {
        let (width, height) = (self.image.width, self.image.height);
        if width == 0 || height == 0 {
            return Err(EacError::MalformedManifest("image has zero area".into()));
        }
        if self.concepts.is_empty() {
            return Err(EacError::EmptyConceptSet);
        }
        let mut masks = Vec::with_capacity(self.concepts.len());
        for (position, concept) in self.concepts.into_iter().enumerate() {
            if concept.id != position as i64 {
                return Err(EacError::MalformedManifest(format!(
                    "concept at position {position} has id {}; ids must be 0..n-1 in order",
                    concept.id
                )));
            }
            let [mask_height, mask_width] = concept.rle.size;
            if mask_height != height || mask_width != width {
                return Err(EacError::DimensionMismatch {
                    id: position,
                    mask_height,
                    mask_width,
                    height,
                    width,
                });
            }
            let bitmap = decode_rle(&concept.rle.counts, height, width).map_err(|e| {
                EacError::MalformedManifest(format!("concept {position}: {e}"))
            })?;
            masks.push((concept.name, bitmap));
        }
        ConceptSet::from_bitmaps(width, height, masks)
    }
}

pub fn load_concepts(manifest_path: &Path) -> Result<ConceptSet> {
    let bytes = std::fs::read(manifest_path).map_err(|e| EacError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| EacError::MalformedManifest(format!("{}: {e}", manifest_path.display())))?;
    manifest.into_concept_set()
}
