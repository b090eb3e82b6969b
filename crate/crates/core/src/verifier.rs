//! Draft/verify rounds with adaptive acceptance.
//!
//! A round drafts `gamma` tokens from the draft model, then walks them in
//! order against the target model. Each drafted token is classified as *key*
//! or not. Key tokens are checked against the target distribution itself;
//! the rest are checked against a geometric blend of target and draft
//! weighted by `tau`. Acceptance follows the usual speculative sampling rule:
//! keep the token with probability `min(1, p_eff(y) / p_d(y))`, otherwise
//! resample from the positive part of `p_eff - p_d` and end the round. When
//! every drafted token survives, one bonus token is sampled from the target.
//!
//! With `tau = 0` (or every token key) the committed sequence is distributed
//! exactly as the target model's own autoregressive output.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, DsdError, Result};
use crate::rng::UniformStream;
use crate::token_model::{sample, Context, Distribution, TokenId, TokenModel};

/// Below this target surprisal the cross-entropy ratio is not computed.
pub const TARGET_CERTAIN_EPS: f64 = 1e-12;

/// Default NormMatch support size, clamped to the vocabulary.
pub const DEFAULT_TOP_M: usize = 10;

/// Default relaxation coefficient.
pub const DEFAULT_TAU: f64 = 0.2;

/// Thresholds deciding which drafted tokens are verified strictly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyCriteria {
    /// Draft/target surprisal ratio threshold. `+inf` disables the clause.
    #[serde(with = "extended_f64")]
    pub lambda1: f64,
    /// Absolute probability gap threshold at the drafted token.
    pub lambda2: f64,
    /// NormMatch threshold; overlap below it marks the token key.
    pub lambda3: f64,
    #[serde(default = "default_top_m")]
    pub top_m: usize,
}

fn default_top_m() -> usize {
    DEFAULT_TOP_M
}

impl KeyCriteria {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, top_m: usize) -> Result<Self> {
        let c = Self {
            lambda1,
            lambda2,
            lambda3,
            top_m,
        };
        c.validate()?;
        Ok(c)
    }

    /// Criteria under which no token is ever key.
    pub fn never_key() -> Self {
        Self {
            lambda1: f64::INFINITY,
            lambda2: 1.0,
            lambda3: 0.0,
            top_m: DEFAULT_TOP_M,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0) {
            return Err(invalid_param(
                "criteria.lambda1",
                format!("{} must be > 0", self.lambda1),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda2) {
            return Err(invalid_param(
                "criteria.lambda2",
                format!("{} not in [0, 1]", self.lambda2),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda3) {
            return Err(invalid_param(
                "criteria.lambda3",
                format!("{} not in [0, 1]", self.lambda3),
            ));
        }
        if self.top_m == 0 {
            return Err(invalid_param("criteria.top_m", "must be >= 1"));
        }
        Ok(())
    }
}

impl Default for KeyCriteria {
    fn default() -> Self {
        Self {
            lambda1: 1.5,
            lambda2: 0.2,
            lambda3: 0.3,
            top_m: DEFAULT_TOP_M,
        }
    }
}

/// Serde helper for reals that may be `+inf`, written as the string `"inf"`.
pub(crate) mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" || s == "+inf" || s == "infinity" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!(
                "expected a number or \"inf\", found \"{s}\""
            ))),
        }
    }
}

/// Knobs for one verification round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyParams {
    pub gamma: usize,
    pub tau: f64,
    pub criteria: KeyCriteria,
}

impl VerifyParams {
    pub fn strict(gamma: usize) -> Self {
        Self {
            gamma,
            tau: 0.0,
            criteria: KeyCriteria::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(invalid_param("gamma", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(invalid_param("tau", format!("{} not in [0, 1]", self.tau)));
        }
        self.criteria.validate()
    }
}

/// Drafted tokens plus the distributions they were sampled from.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftWindow {
    pub tokens: Vec<TokenId>,
    pub draft_dists: Vec<Distribution>,
}

impl DraftWindow {
    pub fn gamma(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TokenDecision {
    pub token: TokenId,
    pub is_key: bool,
    pub tau_used: f64,
    pub accept_prob: f64,
    pub accepted: bool,
    pub replacement: Option<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtraSource {
    BonusFromTarget,
    ResidualResample,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationResult {
    pub decisions: Vec<TokenDecision>,
    pub accepted_count: usize,
    pub extra_token: TokenId,
    pub extra_source: ExtraSource,
}

impl VerificationResult {
    /// Accepted tokens followed by the extra token.
    pub fn committed(&self) -> Vec<TokenId> {
        self.decisions
            .iter()
            .filter(|d| d.accepted)
            .map(|d| d.token)
            .chain(std::iter::once(self.extra_token))
            .collect()
    }

    pub fn tokens_committed(&self) -> usize {
        self.accepted_count + 1
    }

    pub fn key_count(&self) -> usize {
        self.decisions.iter().filter(|d| d.is_key).count()
    }
}

/// Samples `gamma` tokens autoregressively from the draft model.
pub fn draft_window<R: UniformStream + ?Sized>(
    draft: &TokenModel,
    ctx: &Context,
    gamma: usize,
    rng: &mut R,
) -> Result<DraftWindow> {
    if gamma == 0 {
        return Err(invalid_param("gamma", "must be >= 1"));
    }
    let mut prefix = ctx.clone();
    let mut tokens = Vec::with_capacity(gamma);
    let mut draft_dists = Vec::with_capacity(gamma);
    for _ in 0..gamma {
        let d = draft.next_distribution(&prefix)?;
        let y = sample(&d, rng);
        prefix.tokens.push(y);
        tokens.push(y);
        draft_dists.push(d);
    }
    Ok(DraftWindow {
        tokens,
        draft_dists,
    })
}

/// Surprisal `-ln d(y)`; `+inf` when `d(y) = 0`.
pub fn token_cross_entropy(d: &Distribution, y: TokenId) -> f64 {
    let p = d.prob(y);
    if p <= 0.0 {
        f64::INFINITY
    } else {
        // -ln(1) is -0.0; report a clean zero.
        (-p.ln()).max(0.0)
    }
}

/// Fraction of the `top_m` most likely target tokens that are also among the
/// `top_m` most likely draft tokens. `top_m` is clamped to the vocabulary.
pub fn norm_match(p_t: &Distribution, p_d: &Distribution, top_m: usize) -> f64 {
    let m = top_m.min(p_t.vocab_size()).max(1);
    let top_t = &p_t.ranked()[..m];
    let top_d = &p_d.ranked()[..m];
    let overlap = top_t.iter().filter(|t| top_d.contains(t)).count();
    overlap as f64 / m as f64
}

/// Whether drafted token `y` must be verified strictly.
pub fn is_key(p_t: &Distribution, p_d: &Distribution, y: TokenId, c: &KeyCriteria) -> bool {
    let h_d = token_cross_entropy(p_d, y);
    let h_t = token_cross_entropy(p_t, y);
    let ratio_clause = if h_t < TARGET_CERTAIN_EPS {
        // Ratio is +inf when the draft is less than certain, undefined (0/0) otherwise.
        h_d > 0.0 && f64::INFINITY > c.lambda1
    } else {
        h_d / h_t > c.lambda1
    };
    let gap_clause = (p_t.prob(y) - p_d.prob(y)).abs() > c.lambda2;
    let overlap_clause = norm_match(p_t, p_d, c.top_m) < c.lambda3;
    ratio_clause || gap_clause || overlap_clause
}

/// Geometric blend `p_t^(1-tau) * p_d^tau`, renormalized.
pub fn soften(p_t: &Distribution, p_d: &Distribution, tau: f64) -> Result<Distribution> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid_param("tau", format!("{tau} not in [0, 1]")));
    }
    if tau == 0.0 {
        return Ok(p_t.clone());
    }
    if tau == 1.0 {
        return Ok(p_d.clone());
    }
    let weights = p_t
        .probs()
        .iter()
        .zip(p_d.probs())
        .map(|(&t, &d)| {
            if t > 0.0 && d > 0.0 {
                ((1.0 - tau) * t.ln() + tau * d.ln()).exp()
            } else {
                0.0
            }
        })
        .collect();
    Distribution::from_weights(weights).ok_or(DsdError::DegenerateMixture { tau })
}

/// `min(1, p_eff(y) / p_d(y))`.
pub fn accept_prob(p_eff: &Distribution, p_d: &Distribution, y: TokenId) -> Result<f64> {
    let d = p_d.prob(y);
    if d <= 0.0 {
        return Err(DsdError::DraftingContract { token: y });
    }
    Ok((p_eff.prob(y) / d).min(1.0))
}

/// Normalized positive part of `p_eff - p_d`.
pub fn residual_distribution(p_eff: &Distribution, p_d: &Distribution) -> Result<Distribution> {
    let weights = p_eff
        .probs()
        .iter()
        .zip(p_d.probs())
        .map(|(&e, &d)| (e - d).max(0.0))
        .collect();
    Distribution::from_weights(weights).ok_or(DsdError::EmptyResidual)
}

/// Residual for a rejection, or `None` when rejection only arose from
/// rounding (the effective and draft distributions agree, so the true
/// rejection probability is zero and the token counts as accepted).
pub(crate) fn rejection_residual(
    p_eff: &Distribution,
    p_d: &Distribution,
) -> Result<Option<Distribution>> {
    match residual_distribution(p_eff, p_d) {
        Ok(r) => Ok(Some(r)),
        Err(DsdError::EmptyResidual) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Outcome of classifying one drafted position, before the accept draw.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PositionCheck {
    pub is_key: bool,
    pub tau_used: f64,
    pub p_eff: Distribution,
    pub accept_prob: f64,
}

pub(crate) fn check_position(
    p_t: &Distribution,
    p_d: &Distribution,
    y: TokenId,
    tau: f64,
    criteria: &KeyCriteria,
) -> Result<PositionCheck> {
    let key = is_key(p_t, p_d, y, criteria);
    let tau_used = if key { 0.0 } else { tau };
    let p_eff = soften(p_t, p_d, tau_used)?;
    let a = accept_prob(&p_eff, p_d, y)?;
    Ok(PositionCheck {
        is_key: key,
        tau_used,
        p_eff,
        accept_prob: a,
    })
}

pub(crate) fn check_vocab(draft: &TokenModel, target: &TokenModel) -> Result<()> {
    if draft.vocab_size() != target.vocab_size() {
        return Err(invalid_param(
            "models",
            format!(
                "draft vocabulary {} differs from target vocabulary {}",
                draft.vocab_size(),
                target.vocab_size()
            ),
        ));
    }
    Ok(())
}

/// One draft/verify round starting from `ctx`.
///
/// Draws: `gamma` for the draft, one per verified position, one for the extra
/// token.
pub fn verify_round<R: UniformStream + ?Sized>(
    draft: &TokenModel,
    target: &TokenModel,
    ctx: &Context,
    params: &VerifyParams,
    rng: &mut R,
) -> Result<VerificationResult> {
    params.validate()?;
    check_vocab(draft, target)?;
    let window = draft_window(draft, ctx, params.gamma, rng)?;
    let mut prefix = ctx.clone();
    let mut decisions = Vec::with_capacity(params.gamma);
    for (&y, p_d) in window.tokens.iter().zip(&window.draft_dists) {
        let p_t = target.next_distribution(&prefix)?;
        let check = check_position(&p_t, p_d, y, params.tau, &params.criteria)?;
        let u = rng.next_uniform();
        let residual = if u < check.accept_prob {
            None
        } else {
            rejection_residual(&check.p_eff, p_d)?
        };
        let Some(residual) = residual else {
            decisions.push(TokenDecision {
                token: y,
                is_key: check.is_key,
                tau_used: check.tau_used,
                accept_prob: check.accept_prob,
                accepted: true,
                replacement: None,
            });
            prefix.tokens.push(y);
            continue;
        };
        let extra = sample(&residual, rng);
        decisions.push(TokenDecision {
            token: y,
            is_key: check.is_key,
            tau_used: check.tau_used,
            accept_prob: check.accept_prob,
            accepted: false,
            replacement: Some(extra),
        });
        let accepted_count = decisions.len() - 1;
        return Ok(VerificationResult {
            decisions,
            accepted_count,
            extra_token: extra,
            extra_source: ExtraSource::ResidualResample,
        });
    }
    let bonus = sample(&target.next_distribution(&prefix)?, rng);
    Ok(VerificationResult {
        accepted_count: decisions.len(),
        decisions,
        extra_token: bonus,
        extra_source: ExtraSource::BonusFromTarget,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub rounds: Vec<VerificationResult>,
}

/// Runs rounds until at least `max_new` tokens are committed, then truncates
/// to exactly `max_new`.
pub fn generate<R: UniformStream + ?Sized>(
    draft: &TokenModel,
    target: &TokenModel,
    prompt: &Context,
    max_new: usize,
    params: &VerifyParams,
    rng: &mut R,
) -> Result<Generation> {
    if max_new == 0 {
        return Err(invalid_param("max_new", "must be >= 1"));
    }
    prompt.validate(target.vocab_size())?;
    let mut ctx = prompt.clone();
    let mut tokens = Vec::with_capacity(max_new + params.gamma);
    let mut rounds = Vec::new();
    while tokens.len() < max_new {
        let round = verify_round(draft, target, &ctx, params, rng)?;
        let committed = round.committed();
        ctx.tokens.extend_from_slice(&committed);
        tokens.extend_from_slice(&committed);
        rounds.push(round);
    }
    tokens.truncate(max_new);
    Ok(Generation { tokens, rounds })
}
