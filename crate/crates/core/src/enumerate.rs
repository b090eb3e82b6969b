//! Exact probability-tree expansion of generation, for desk-scale models.
//!
//! Every stochastic branch of a round (draft sample, accept/reject outcome,
//! residual or bonus sample) is expanded with its probability. Drafted tokens
//! are expanded lazily: the draft at position `j` only matters when the first
//! `j` drafts were accepted, in which case its prefix is the accepted prefix.

use std::collections::BTreeMap;

use crate::error::{DsdError, Result};
use crate::token_model::{Context, TokenId, TokenModel};
use crate::verifier::{check_position, check_vocab, rejection_residual, VerifyParams};

pub const MAX_VOCAB: usize = 8;
pub const MAX_HORIZON: usize = 4;
pub const MAX_GAMMA: usize = 4;

/// Exact distribution over token sequences.
pub type SequenceDistribution = BTreeMap<Vec<TokenId>, f64>;

fn guard(vocab: usize, horizon: usize, gamma: usize) -> Result<()> {
    if vocab > MAX_VOCAB || horizon > MAX_HORIZON || gamma > MAX_GAMMA {
        return Err(DsdError::EnumerationTooLarge(format!(
            "V={vocab}, horizon={horizon}, gamma={gamma}; limits are V<={MAX_VOCAB}, horizon<={MAX_HORIZON}, gamma<={MAX_GAMMA}"
        )));
    }
    if horizon == 0 {
        return Err(crate::error::invalid_param("horizon", "must be >= 1"));
    }
    Ok(())
}

/// Distribution of the first `horizon` tokens committed by repeated rounds.
pub fn enumerate_output_distribution(
    draft: &TokenModel,
    target: &TokenModel,
    prompt: &Context,
    horizon: usize,
    params: &VerifyParams,
) -> Result<SequenceDistribution> {
    params.validate()?;
    check_vocab(draft, target)?;
    guard(target.vocab_size(), horizon, params.gamma)?;
    prompt.validate(target.vocab_size())?;
    let mut out = SequenceDistribution::new();
    expand_generation(
        draft,
        target,
        prompt,
        &mut Vec::new(),
        1.0,
        horizon,
        params,
        &mut out,
    )?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn expand_generation(
    draft: &TokenModel,
    target: &TokenModel,
    prompt: &Context,
    produced: &mut Vec<TokenId>,
    prob: f64,
    horizon: usize,
    params: &VerifyParams,
    out: &mut SequenceDistribution,
) -> Result<()> {
    if produced.len() >= horizon {
        *out.entry(produced[..horizon].to_vec()).or_insert(0.0) += prob;
        return Ok(());
    }
    let ctx = prompt.extended(produced);
    let cap = horizon - produced.len();
    for (committed, p) in round_outcomes(draft, target, &ctx, params, cap)? {
        let mark = produced.len();
        produced.extend_from_slice(&committed);
        expand_generation(
            draft,
            target,
            prompt,
            produced,
            prob * p,
            horizon,
            params,
            out,
        )?;
        produced.truncate(mark);
    }
    Ok(())
}

/// Leaves of one round, each a committed token list with its probability.
/// Branches are cut once `cap` tokens are committed, since later outcomes in
/// the round cannot change the first `cap` tokens.
fn round_outcomes(
    draft: &TokenModel,
    target: &TokenModel,
    ctx: &Context,
    params: &VerifyParams,
    cap: usize,
) -> Result<Vec<(Vec<TokenId>, f64)>> {
    let mut leaves = Vec::new();
    walk_round(
        draft,
        target,
        ctx,
        params,
        cap,
        &mut Vec::new(),
        1.0,
        &mut leaves,
    )?;
    Ok(leaves)
}

#[allow(clippy::too_many_arguments)]
fn walk_round(
    draft: &TokenModel,
    target: &TokenModel,
    ctx: &Context,
    params: &VerifyParams,
    cap: usize,
    accepted: &mut Vec<TokenId>,
    prob: f64,
    leaves: &mut Vec<(Vec<TokenId>, f64)>,
) -> Result<()> {
    if accepted.len() >= cap {
        leaves.push((accepted.clone(), prob));
        return Ok(());
    }
    let prefix = ctx.extended(accepted);
    let p_t = target.next_distribution(&prefix)?;
    if accepted.len() == params.gamma {
        for (t, p) in p_t.support() {
            let mut seq = accepted.clone();
            seq.push(t);
            leaves.push((seq, prob * p));
        }
        return Ok(());
    }
    let p_d = draft.next_distribution(&prefix)?;
    for (y, q) in p_d.support() {
        let check = check_position(&p_t, &p_d, y, params.tau, &params.criteria)?;
        let mut a = check.accept_prob;
        let residual = if a < 1.0 {
            rejection_residual(&check.p_eff, &p_d)?
        } else {
            None
        };
        if residual.is_none() {
            a = 1.0;
        }
        if a > 0.0 {
            accepted.push(y);
            walk_round(
                draft,
                target,
                ctx,
                params,
                cap,
                accepted,
                prob * q * a,
                leaves,
            )?;
            accepted.pop();
        }
        if let Some(residual) = residual {
            for (r, pr) in residual.support() {
                let mut seq = accepted.clone();
                seq.push(r);
                leaves.push((seq, prob * q * (1.0 - a) * pr));
            }
        }
    }
    Ok(())
}

/// Exact expected number of tokens committed by one round from `ctx`
/// (accepted tokens plus the extra token).
pub fn expected_round_length(
    draft: &TokenModel,
    target: &TokenModel,
    ctx: &Context,
    params: &VerifyParams,
) -> Result<f64> {
    params.validate()?;
    check_vocab(draft, target)?;
    guard(target.vocab_size(), 1, params.gamma)?;
    ctx.validate(target.vocab_size())?;
    let leaves = round_outcomes(draft, target, ctx, params, usize::MAX)?;
    Ok(leaves.iter().map(|(seq, p)| seq.len() as f64 * p).sum())
}

/// The target model's own autoregressive distribution over `horizon` tokens.
pub fn target_sequence_distribution(
    target: &TokenModel,
    prompt: &Context,
    horizon: usize,
) -> Result<SequenceDistribution> {
    guard(target.vocab_size(), horizon, 1)?;
    prompt.validate(target.vocab_size())?;
    let mut out = SequenceDistribution::new();
    let mut frontier = vec![(Vec::new(), 1.0)];
    for _ in 0..horizon {
        let mut next = Vec::new();
        for (seq, p) in frontier {
            let d = target.next_distribution(&prompt.extended(&seq))?;
            for (t, q) in d.support() {
                let mut s: Vec<TokenId> = seq.clone();
                s.push(t);
                next.push((s, p * q));
            }
        }
        frontier = next;
    }
    for (seq, p) in frontier {
        *out.entry(seq).or_insert(0.0) += p;
    }
    Ok(out)
}

/// Total variation between two sequence distributions (missing keys are 0).
pub fn sequence_tv(a: &SequenceDistribution, b: &SequenceDistribution) -> f64 {
    let mut l1 = 0.0;
    for (k, pa) in a {
        l1 += (pa - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, pb) in b {
        if !a.contains_key(k) {
            l1 += pb.abs();
        }
    }
    0.5 * l1
}
