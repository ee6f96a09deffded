//! Shapley values of concepts: exact enumeration for small games and the
//! per-concept Monte-Carlo estimator for everything else.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EacError, Result};
use crate::masking::{check_size, Coalition, CoalitionModel};
use crate::rng::chacha;

/// Hard ceiling for exact enumeration (2^n utility evaluations).
pub const EXACT_LIMIT: usize = 20;
/// Exact-mode ceiling when every evaluation is a full forward pass.
pub const EXACT_LIMIT_DIRECT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    Direct,
    Pie,
    PieNoSharing,
    Linear,
    Synthetic,
}

impl UtilityKind {
    pub fn exact_limit(self) -> usize {
        match self {
            UtilityKind::Direct => EXACT_LIMIT_DIRECT,
            _ => EXACT_LIMIT,
        }
    }
}

/// A cooperative game over `n` concepts. Must be deterministic.
pub trait Utility: Sync {
    fn n(&self) -> usize;

    fn value(&self, s: &Coalition) -> Result<f64>;

    fn kind(&self) -> UtilityKind {
        UtilityKind::Synthetic
    }
}

impl<U: Utility + ?Sized> Utility for &U {
    fn n(&self) -> usize {
        (**self).n()
    }

    fn value(&self, s: &Coalition) -> Result<f64> {
        (**self).value(s)
    }

    fn kind(&self) -> UtilityKind {
        (**self).kind()
    }
}

/// Probability of one class under a coalition model: `u(S) = model(S)[class]`.
pub struct ClassUtility<M> {
    pub model: M,
    pub class: usize,
}

impl<M: CoalitionModel> Utility for ClassUtility<M> {
    fn n(&self) -> usize {
        self.model.n()
    }

    fn value(&self, s: &Coalition) -> Result<f64> {
        Ok(self.model.predict(s)?.get(self.class))
    }

    fn kind(&self) -> UtilityKind {
        self.model.kind()
    }
}

/// Closure-backed game.
pub struct FnUtility<F> {
    n: usize,
    f: F,
}

impl<F: Fn(&Coalition) -> f64 + Sync> FnUtility<F> {
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F: Fn(&Coalition) -> f64 + Sync> Utility for FnUtility<F> {
    fn n(&self) -> usize {
        self.n
    }

    fn value(&self, s: &Coalition) -> Result<f64> {
        check_size(s, self.n)?;
        Ok((self.f)(s))
    }
}

/// Explicit utility table: entry `mask` is `u(S)` with bit `i` of `mask` set iff concept `i` is in `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableGame {
    pub n: usize,
    pub utilities: Vec<f64>,
}

impl TableGame {
    pub fn new(n: usize, utilities: Vec<f64>) -> Result<Self> {
        let game = Self { n, utilities };
        game.validate()?;
        Ok(game)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > 30 {
            return Err(EacError::InvalidConfig(format!(
                "utility table needs 1 <= n <= 30, got {}",
                self.n
            )));
        }
        if self.utilities.len() != 1usize << self.n {
            return Err(EacError::InvalidConfig(format!(
                "utility table for n={} needs {} entries, got {}",
                self.n,
                1usize << self.n,
                self.utilities.len()
            )));
        }
        if self.utilities.iter().any(|u| !u.is_finite()) {
            return Err(EacError::InvalidConfig("utility table has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EacError::io(path, e))?;
        let game: TableGame = serde_json::from_slice(&bytes).map_err(|source| EacError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        game.validate()?;
        Ok(game)
    }

    /// Tabulates any game with `n <= 30`.
    pub fn tabulate(u: &dyn Utility) -> Result<Self> {
        let n = u.n();
        let utilities = (0..1u64 << n)
            .into_par_iter()
            .map(|mask| u.value(&Coalition::from_u64(n, mask)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(n, utilities)
    }
}

impl Utility for TableGame {
    fn n(&self) -> usize {
        self.n
    }

    fn value(&self, s: &Coalition) -> Result<f64> {
        check_size(s, self.n)?;
        let mask = s.as_u64().expect("n <= 30");
        Ok(self.utilities[mask as usize])
    }
}

/// Per-run cache of utility values, keyed by coalition.
pub struct Memoized<U> {
    inner: U,
    cache: Mutex<HashMap<Coalition, f64>>,
    misses: AtomicUsize,
}

impl<U: Utility> Memoized<U> {
    pub fn new(inner: U) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
            misses: AtomicUsize::new(0),
        }
    }

    /// Number of evaluations forwarded to the wrapped utility.
    pub fn evaluations(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

impl<U: Utility> Utility for Memoized<U> {
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn value(&self, s: &Coalition) -> Result<f64> {
        if let Some(&v) = self.cache.lock().expect("memo lock").get(s) {
            return Ok(v);
        }
        let v = self.inner.value(s)?;
        self.misses.fetch_add(1, Ordering::Relaxed);
        self.cache.lock().expect("memo lock").insert(s.clone(), v);
        Ok(v)
    }

    fn kind(&self) -> UtilityKind {
        self.inner.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMode {
    Exact,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Uniform coalition size, then a uniform subset of that size.
    #[default]
    TwoStage,
    /// Predecessors of the concept in a uniform random permutation.
    Permutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyResult {
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `K`; zero in exact mode.
    pub samples_per_concept: usize,
    pub seed: Option<u64>,
    pub mode: EstimationMode,
    pub utility_kind: UtilityKind,
    /// Distinct coalitions the utility was evaluated on.
    pub utility_evaluations: usize,
}

impl ShapleyResult {
    pub fn n(&self) -> usize {
        self.values.len()
    }
}

pub fn marginal_contribution(u: &dyn Utility, i: usize, s: &Coalition) -> Result<f64> {
    check_size(s, u.n())?;
    if s.contains(i) {
        return Err(EacError::ConceptAlreadyInCoalition(i));
    }
    Ok(u.value(&s.with(i))? - u.value(s)?)
}

/// `1 / (n * C(n-1, s))` for every coalition size `s` in `0..n`.
fn size_weights(n: usize) -> Vec<f64> {
    let mut binom = vec![1f64; n];
    for s in 1..n {
        binom[s] = binom[s - 1] * (n - s) as f64 / s as f64;
    }
    binom.into_iter().map(|b| 1.0 / (n as f64 * b)).collect()
}

/// Exact values by enumerating all `2^n` coalitions once.
pub fn exact_shapley(u: &dyn Utility) -> Result<ShapleyResult> {
    exact_shapley_with_limit(u, EXACT_LIMIT)
}

pub fn exact_shapley_with_limit(u: &dyn Utility, limit: usize) -> Result<ShapleyResult> {
    let n = u.n();
    let limit = limit.min(EXACT_LIMIT);
    if n > limit {
        return Err(EacError::TooManyConcepts { n, limit });
    }
    let table = TableGame::tabulate(u)?;
    let weights = size_weights(n);
    let values = (0..n)
        .into_par_iter()
        .map(|i| {
            let bit = 1usize << i;
            let mut acc = 0f64;
            for mask in 0..1usize << n {
                if mask & bit == 0 {
                    let size = mask.count_ones() as usize;
                    acc += weights[size] * (table.utilities[mask | bit] - table.utilities[mask]);
                }
            }
            acc
        })
        .collect();
    Ok(ShapleyResult {
        values,
        stderr: vec![0.0; n],
        samples_per_concept: 0,
        seed: None,
        mode: EstimationMode::Exact,
        utility_kind: u.kind(),
        utility_evaluations: 1 << n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub samples_per_concept: usize,
    pub seed: u64,
    #[serde(default)]
    pub sampler: Sampler,
}

/// Draws a coalition excluding `i` for the chosen sampler.
fn draw_coalition(rng: &mut impl Rng, n: usize, i: usize, sampler: Sampler) -> Coalition {
    match sampler {
        Sampler::TwoStage => {
            let size = rng.random_range(0..n);
            let picked = rand::seq::index::sample(rng, n - 1, size);
            Coalition::from_indices(n, picked.into_iter().map(|j| if j < i { j } else { j + 1 }))
        }
        Sampler::Permutation => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let at = order.iter().position(|&j| j == i).expect("i in range");
            Coalition::from_indices(n, order[..at].iter().copied())
        }
    }
}

/// Monte-Carlo estimate with `K` coalition draws per concept.
///
/// Concept `i` draws from its own ChaCha8 stream (`seed`, stream `i`), so the
/// result does not depend on how the per-concept loops are scheduled.
/// Utility values are memoized for the duration of the call.
pub fn mc_shapley(u: &dyn Utility, config: McConfig) -> Result<ShapleyResult> {
    let n = u.n();
    let k = config.samples_per_concept;
    if k < 2 {
        return Err(EacError::InvalidConfig(format!(
            "need at least 2 samples per concept, got {k}"
        )));
    }
    if n == 0 {
        return Err(EacError::EmptyConceptSet);
    }
    let memo = Memoized::new(u);
    let per_concept = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = chacha(config.seed, i as u64);
            // Welford running mean / sum of squared deviations.
            let mut mean = 0f64;
            let mut m2 = 0f64;
            for draw in 1..=k {
                let s = draw_coalition(&mut rng, n, i, config.sampler);
                let delta = memo.value(&s.with(i))? - memo.value(&s)?;
                let step = delta - mean;
                mean += step / draw as f64;
                m2 += step * (delta - mean);
            }
            let var = m2 / (k as f64 - 1.0);
            Ok((mean, (var / k as f64).sqrt()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (values, stderr) = per_concept.into_iter().unzip();
    Ok(ShapleyResult {
        values,
        stderr,
        samples_per_concept: k,
        seed: Some(config.seed),
        mode: EstimationMode::Mc,
        utility_kind: u.kind(),
        utility_evaluations: memo.evaluations(),
    })
}
