//! Synthetic draft and target models with exact next-token distributions.

use serde::{Deserialize, Serialize};

use crate::error::{DsdError, Result};
use crate::rng::UniformStream;

/// Tolerance on the total mass of a [`Distribution`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

pub type TokenId = usize;

/// A probability vector over a finite vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates `probs`: at least two entries, all finite and non-negative,
    /// summing to 1 within [`NORMALIZATION_TOL`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(DsdError::InvalidDistribution(format!(
                "vocabulary size {} < 2",
                probs.len()
            )));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(DsdError::InvalidDistribution(format!(
                "entry {i} is {p}, expected a finite non-negative probability"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(DsdError::InvalidDistribution(format!(
                "entries sum to {total}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights. Returns `None` when the total is zero
    /// or not finite.
    pub fn from_weights(weights: Vec<f64>) -> Option<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() || weights.len() < 2 {
            return None;
        }
        let probs = weights.into_iter().map(|w| w / total).collect();
        Some(Self { probs })
    }

    pub fn one_hot(vocab: usize, token: TokenId) -> Self {
        assert!(vocab >= 2 && token < vocab);
        let mut probs = vec![0.0; vocab];
        probs[token] = 1.0;
        Self { probs }
    }

    pub fn uniform(vocab: usize) -> Self {
        assert!(vocab >= 2);
        Self {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token]
    }

    /// Highest-probability token, ties to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Token ids ordered by descending probability, ties by ascending id.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.probs.len()).collect();
        ids.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        ids
    }

    /// Tokens with nonzero probability, ascending.
    pub fn support(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.probs
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, p)| p > 0.0)
    }
}

impl<'de> Deserialize<'de> for Distribution {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(de)?;
        Distribution::new(probs).map_err(serde::de::Error::custom)
    }
}

/// Total variation distance: half the L1 distance.
pub fn total_variation(a: &Distribution, b: &Distribution) -> f64 {
    assert_eq!(a.vocab_size(), b.vocab_size(), "vocabulary mismatch");
    0.5 * a
        .probs
        .iter()
        .zip(&b.probs)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
}

/// Rescales `d` by temperature `t`.
///
/// `t == 1` is the identity, `t == 0` collapses onto the argmax (lowest id on
/// ties), anything else raises each entry to `1/t` and renormalizes.
pub fn temperature_scale(d: &Distribution, t: f64) -> Result<Distribution> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(crate::error::invalid_param(
            "temperature",
            format!("{t} is not a finite non-negative number"),
        ));
    }
    if t == 1.0 {
        return Ok(d.clone());
    }
    if t == 0.0 {
        return Ok(Distribution::one_hot(d.vocab_size(), d.argmax()));
    }
    // Work relative to the largest entry so 1/t powers cannot underflow to all zeros.
    let max = d.probs[d.argmax()];
    let weights = d
        .probs
        .iter()
        .map(|&p| {
            if p > 0.0 {
                (p / max).powf(1.0 / t)
            } else {
                0.0
            }
        })
        .collect();
    Ok(Distribution::from_weights(weights).expect("argmax entry has weight 1"))
}

/// Inverse-CDF sampling over ascending token ids. Consumes exactly one draw.
pub fn sample<R: UniformStream + ?Sized>(d: &Distribution, rng: &mut R) -> TokenId {
    let u = rng.next_uniform();
    sample_with(d, u)
}

/// The inverse-CDF map used by [`sample`], for a given uniform draw.
pub fn sample_with(d: &Distribution, u: f64) -> TokenId {
    let mut cumulative = 0.0;
    let mut last_supported = 0;
    for (i, &p) in d.probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last_supported = i;
        if u < cumulative {
            return i;
        }
    }
    // Rounding left the CDF just short of 1.
    last_supported
}

/// A sequence of committed token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context {
    pub tokens: Vec<TokenId>,
}

impl Context {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        match self.tokens.iter().find(|&&t| t >= vocab) {
            Some(&token) => Err(DsdError::InvalidContext { token, vocab }),
            None => Ok(()),
        }
    }

    pub fn last(&self) -> Option<TokenId> {
        self.tokens.last().copied()
    }

    pub fn extended(&self, more: &[TokenId]) -> Context {
        let mut tokens = Vec::with_capacity(self.tokens.len() + more.len());
        tokens.extend_from_slice(&self.tokens);
        tokens.extend_from_slice(more);
        Context { tokens }
    }
}

impl From<Vec<TokenId>> for Context {
    fn from(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    /// Same distribution at every position.
    CategoricalIid { probs: Distribution },
    /// Next token depends on the last context token only.
    MarkovOrder1 {
        initial: Distribution,
        transitions: Vec<Distribution>,
    },
}

/// A synthetic language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpec", into = "ModelSpec")]
pub struct TokenModel {
    pub kind: ModelKind,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum KindTag {
    CategoricalIid,
    #[serde(rename = "markov-order-1")]
    MarkovOrder1,
}

/// On-disk form of a [`TokenModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpec {
    kind: KindTag,
    vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<Distribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial: Option<Distribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transitions: Option<Vec<Distribution>>,
    #[serde(default = "default_temperature")]
    temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

impl TryFrom<ModelSpec> for TokenModel {
    type Error = DsdError;

    fn try_from(spec: ModelSpec) -> Result<Self> {
        let model = match spec.kind {
            KindTag::CategoricalIid => {
                if spec.initial.is_some() || spec.transitions.is_some() {
                    return Err(DsdError::InvalidModel(
                        "categorical-iid takes `probs` only".into(),
                    ));
                }
                let probs = spec.probs.ok_or_else(|| {
                    DsdError::InvalidModel("categorical-iid requires `probs`".into())
                })?;
                TokenModel::categorical(probs, spec.temperature)?
            }
            KindTag::MarkovOrder1 => {
                if spec.probs.is_some() {
                    return Err(DsdError::InvalidModel(
                        "markov-order-1 takes `initial` and `transitions`, not `probs`".into(),
                    ));
                }
                let (Some(initial), Some(transitions)) = (spec.initial, spec.transitions) else {
                    return Err(DsdError::InvalidModel(
                        "markov-order-1 requires `initial` and `transitions`".into(),
                    ));
                };
                TokenModel::markov(initial, transitions, spec.temperature)?
            }
        };
        if model.vocab_size() != spec.vocab_size {
            return Err(DsdError::InvalidModel(format!(
                "vocab_size is {} but the probability tables have {} entries",
                spec.vocab_size,
                model.vocab_size()
            )));
        }
        Ok(model)
    }
}

impl From<TokenModel> for ModelSpec {
    fn from(m: TokenModel) -> Self {
        let vocab_size = m.vocab_size();
        match m.kind {
            ModelKind::CategoricalIid { probs } => ModelSpec {
                kind: KindTag::CategoricalIid,
                vocab_size,
                probs: Some(probs),
                initial: None,
                transitions: None,
                temperature: m.temperature,
            },
            ModelKind::MarkovOrder1 {
                initial,
                transitions,
            } => ModelSpec {
                kind: KindTag::MarkovOrder1,
                vocab_size,
                probs: None,
                initial: Some(initial),
                transitions: Some(transitions),
                temperature: m.temperature,
            },
        }
    }
}

impl TokenModel {
    pub fn categorical(probs: Distribution, temperature: f64) -> Result<Self> {
        let m = Self {
            kind: ModelKind::CategoricalIid { probs },
            temperature,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn markov(
        initial: Distribution,
        transitions: Vec<Distribution>,
        temperature: f64,
    ) -> Result<Self> {
        let m = Self {
            kind: ModelKind::MarkovOrder1 {
                initial,
                transitions,
            },
            temperature,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn vocab_size(&self) -> usize {
        match &self.kind {
            ModelKind::CategoricalIid { probs } => probs.vocab_size(),
            ModelKind::MarkovOrder1 { initial, .. } => initial.vocab_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(DsdError::InvalidModel(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if let ModelKind::MarkovOrder1 {
            initial,
            transitions,
        } = &self.kind
        {
            let v = initial.vocab_size();
            if transitions.len() != v {
                return Err(DsdError::InvalidModel(format!(
                    "markov matrix has {} rows, expected {v}",
                    transitions.len()
                )));
            }
            if let Some(i) = transitions.iter().position(|r| r.vocab_size() != v) {
                return Err(DsdError::InvalidModel(format!(
                    "markov row {i} has {} columns, expected {v}",
                    transitions[i].vocab_size()
                )));
            }
        }
        Ok(())
    }

    /// Exact next-token distribution after temperature scaling.
    pub fn next_distribution(&self, ctx: &Context) -> Result<Distribution> {
        ctx.validate(self.vocab_size())?;
        let raw = match &self.kind {
            ModelKind::CategoricalIid { probs } => probs,
            ModelKind::MarkovOrder1 {
                initial,
                transitions,
            } => match ctx.last() {
                Some(t) => &transitions[t],
                None => initial,
            },
        };
        temperature_scale(raw, self.temperature)
    }
}

/// Free-function form of [`TokenModel::next_distribution`].
pub fn next_distribution(model: &TokenModel, ctx: &Context) -> Result<Distribution> {
    model.next_distribution(ctx)
}
