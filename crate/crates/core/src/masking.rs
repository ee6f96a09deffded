//! Coalitions of visible concepts and the masked-image operator.
//!
//! A pixel stays visible iff at least one concept in the coalition covers it;
//! every other pixel takes the baseline fill.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::concept::{Bitmap, ConceptSet};
use crate::error::{EacError, Result};
use crate::model::{ModelBundle, ProbVec};
use crate::raster::Image;
use crate::shapley::UtilityKind;

/// Subset of concept indices as an `n`-bit indicator.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coalition {
    n: usize,
    words: Vec<u64>,
}

impl Coalition {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn full(n: usize) -> Self {
        let mut c = Self::empty(n);
        for (w, word) in c.words.iter_mut().enumerate() {
            let bits = (n - w * 64).min(64);
            *word = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
        }
        c
    }

    pub fn from_indices(n: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut c = Self::empty(n);
        for i in indices {
            c.insert(i);
        }
        c
    }

    /// Low `n` bits of `bits`; `n` must be at most 64.
    pub fn from_u64(n: usize, bits: u64) -> Self {
        assert!(n <= 64, "from_u64 needs n <= 64");
        let mut c = Self::empty(n);
        if n > 0 {
            c.words[0] = if n == 64 { bits } else { bits & ((1u64 << n) - 1) };
        }
        c
    }

    /// Builds from raw words, clearing any bits at or above `n`.
    pub fn from_words(n: usize, mut words: Vec<u64>) -> Self {
        words.resize(n.div_ceil(64), 0);
        if n % 64 != 0 {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << (n % 64)) - 1;
            }
        }
        Self { n, words }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match self.words.len() {
            0 => Some(0),
            1 => Some(self.words[0]),
            _ => None,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.n && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.n, "concept {i} out of range for n={}", self.n);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn remove(&mut self, i: usize) {
        assert!(i < self.n, "concept {i} out of range for n={}", self.n);
        self.words[i / 64] &= !(1 << (i % 64));
    }

    pub fn with(&self, i: usize) -> Self {
        let mut c = self.clone();
        c.insert(i);
        c
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&i| self.contains(i))
    }

    /// 0/1 vector of length `n`.
    pub fn indicator(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| if self.contains(i) { 1.0 } else { 0.0 })
            .collect()
    }
}

impl fmt::Debug for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Coalition(n={}, ", self.n)?;
        f.debug_set().entries(self.iter()).finish()?;
        write!(f, ")")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BaselineFill {
    Zero,
    /// Per-channel mean of the input image.
    ChannelMean,
    /// Box blur of the input image.
    Blur { radius: usize },
}

impl Default for BaselineFill {
    fn default() -> Self {
        BaselineFill::ChannelMean
    }
}

impl BaselineFill {
    pub fn validate(&self) -> Result<()> {
        match self {
            BaselineFill::Blur { radius: 0 } => Err(EacError::InvalidConfig(
                "blur fill needs radius >= 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// The image every masked pixel is copied from.
    pub fn fill_image(&self, image: &Image) -> Image {
        match *self {
            BaselineFill::Zero => {
                Image::new(image.width(), image.height(), image.channels(), vec![0.0; image.data().len()])
                    .expect("same shape")
            }
            BaselineFill::ChannelMean => {
                let means = image.channel_means();
                let data = (0..image.width() * image.height())
                    .flat_map(|_| means.iter().copied())
                    .collect();
                Image::new(image.width(), image.height(), image.channels(), data).expect("same shape")
            }
            BaselineFill::Blur { radius } => image.box_blur(radius),
        }
    }
}

/// An image, its concepts and a precomputed fill, ready for repeated masking.
#[derive(Debug, Clone)]
pub struct Scene {
    image: Image,
    concepts: ConceptSet,
    fill: BaselineFill,
    fill_image: Image,
}

impl Scene {
    pub fn new(image: Image, concepts: ConceptSet, fill: BaselineFill) -> Result<Self> {
        fill.validate()?;
        if image.width() != concepts.width() || image.height() != concepts.height() {
            return Err(EacError::DimensionMismatch {
                id: 0,
                mask_height: concepts.height(),
                mask_width: concepts.width(),
                height: image.height(),
                width: image.width(),
            });
        }
        let fill_image = fill.fill_image(&image);
        Ok(Self {
            image,
            concepts,
            fill,
            fill_image,
        })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn concepts(&self) -> &ConceptSet {
        &self.concepts
    }

    pub fn fill(&self) -> BaselineFill {
        self.fill
    }

    pub fn n(&self) -> usize {
        self.concepts.len()
    }

    pub fn visibility(&self, s: &Coalition) -> Result<Bitmap> {
        check_size(s, self.n())?;
        let mut visible = Bitmap::new(self.image.width(), self.image.height());
        for i in s.iter() {
            visible.or_assign(&self.concepts.concepts()[i].bitmap);
        }
        Ok(visible)
    }

    pub fn apply(&self, s: &Coalition) -> Result<Image> {
        let visible = self.visibility(s)?;
        let mut out = self.image.clone();
        let c = out.channels();
        let fill = self.fill_image.data();
        for (p, &keep) in visible.bits().iter().enumerate() {
            if !keep {
                out.data_mut()[p * c..(p + 1) * c].copy_from_slice(&fill[p * c..(p + 1) * c]);
            }
        }
        Ok(out)
    }
}

pub(crate) fn check_size(s: &Coalition, n: usize) -> Result<()> {
    if s.n() != n {
        return Err(EacError::CoalitionSizeMismatch {
            expected: n,
            got: s.n(),
        });
    }
    Ok(())
}

pub fn apply_coalition(
    image: &Image,
    concepts: &ConceptSet,
    s: &Coalition,
    fill: BaselineFill,
) -> Result<Image> {
    Scene::new(image.clone(), concepts.clone(), fill)?.apply(s)
}

/// Anything that maps a coalition of one scene to class probabilities.
pub trait CoalitionModel: Sync {
    fn n(&self) -> usize;

    fn predict(&self, s: &Coalition) -> Result<ProbVec>;

    fn kind(&self) -> UtilityKind;
}

impl<M: CoalitionModel + ?Sized> CoalitionModel for &M {
    fn n(&self) -> usize {
        (**self).n()
    }

    fn predict(&self, s: &Coalition) -> Result<ProbVec> {
        (**self).predict(s)
    }

    fn kind(&self) -> UtilityKind {
        (**self).kind()
    }
}

/// The target model evaluated on coalition-masked versions of one scene.
#[derive(Debug, Clone, Copy)]
pub struct DirectModel<'a> {
    pub bundle: &'a ModelBundle,
    pub scene: &'a Scene,
}

impl CoalitionModel for DirectModel<'_> {
    fn n(&self) -> usize {
        self.scene.n()
    }

    fn predict(&self, s: &Coalition) -> Result<ProbVec> {
        self.bundle.predict(&self.scene.apply(s)?)
    }

    fn kind(&self) -> UtilityKind {
        UtilityKind::Direct
    }
}

impl DirectModel<'_> {

    pub fn utility(&self, s: &Coalition, target_class: usize) -> Result<f64> {
        if target_class >= self.bundle.num_classes() {
            return Err(EacError::InvalidConfig(format!(
                "target class {target_class} out of range for {} classes",
                self.bundle.num_classes()
            )));
        }
        Ok(self.predict(s)?.get(target_class))
    }
}

pub fn utility_direct(
    bundle: &ModelBundle,
    image: &Image,
    concepts: &ConceptSet,
    s: &Coalition,
    target_class: usize,
    fill: BaselineFill,
) -> Result<f64> {
    let scene = Scene::new(image.clone(), concepts.clone(), fill)?;
    DirectModel {
        bundle,
        scene: &scene,
    }
    .utility(s, target_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn overlapping_scene() -> Scene {
        let image = Image::from_fn(8, 6, |x, y| [x as f32 / 8.0, y as f32 / 6.0, 0.9]);
        let a = Bitmap::from_fn(8, 6, |x, _| x < 5);
        let b = Bitmap::from_fn(8, 6, |x, _| x >= 3);
        let cs = ConceptSet::from_bitmaps(8, 6, [(None, a), (None, b)]).unwrap();
        Scene::new(image, cs, BaselineFill::Zero).unwrap()
    }

    #[test]
    fn coalition_basics() {
        let mut c = Coalition::empty(70);
        c.insert(0);
        c.insert(69);
        assert_eq!(c.len(), 2);
        assert!(c.contains(69) && !c.contains(68));
        assert_eq!(Coalition::full(70).len(), 70);
        assert_eq!(Coalition::full(64).as_u64(), Some(u64::MAX));
        assert_eq!(c.iter().collect::<Vec<_>>(), vec![0, 69]);
        c.remove(0);
        assert_eq!(c.iter().collect::<Vec<_>>(), vec![69]);
        assert_eq!(Coalition::from_u64(3, 0b1101), Coalition::from_indices(3, [0, 2]));
    }

    #[test]
    fn full_coalition_is_identity() {
        let scene = overlapping_scene();
        assert_eq!(&scene.apply(&Coalition::full(2)).unwrap(), scene.image());
    }

    #[test]
    fn empty_coalition_is_all_fill() {
        let scene = overlapping_scene();
        let out = scene.apply(&Coalition::empty(2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overlap_stays_visible() {
        let scene = overlapping_scene();
        let out = scene.apply(&Coalition::from_indices(2, [0])).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                // Oracle: pixel visible iff some kept mask (only mask a) covers it.
                let expected = if x < 5 { scene.image().pixel(x, y) } else { &[0.0, 0.0, 0.0][..] };
                assert_eq!(out.pixel(x, y), expected, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn size_mismatch() {
        let scene = overlapping_scene();
        assert!(matches!(
            scene.apply(&Coalition::full(3)),
            Err(EacError::CoalitionSizeMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn channel_mean_fill() {
        let image = Image::from_fn(4, 2, |x, _| [x as f32 / 4.0, 0.5, 1.0]);
        let fill = BaselineFill::ChannelMean.fill_image(&image);
        assert!(fill.data().chunks(3).all(|px| (px[0] - 0.375).abs() < 1e-6 && px[1] == 0.5 && px[2] == 1.0));
        assert!(BaselineFill::Blur { radius: 0 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn visibility_is_monotone(bits in any::<u8>(), extra in 0usize..2) {
            let scene = overlapping_scene();
            let small = Coalition::from_u64(2, bits as u64);
            let big = small.with(extra);
            let v_small = scene.visibility(&small).unwrap();
            let v_big = scene.visibility(&big).unwrap();
            for (a, b) in v_small.bits().iter().zip(v_big.bits()) {
                prop_assert!(!a || *b);
            }
        }

        #[test]
        fn words_round_trip(words in proptest::collection::vec(any::<u64>(), 2), n in 65usize..128) {
            let c = Coalition::from_words(n, words);
            let again = Coalition::from_indices(n, c.iter());
            prop_assert_eq!(c, again);
        }
    }
}
