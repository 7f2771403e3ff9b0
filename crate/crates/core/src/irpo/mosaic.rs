//! Sample-and-select baseline: draw candidates from the pretrained generator
//! and keep the one the reward model scores highest.

use rand::Rng;

use crate::ctr_model::ClickModel;
use crate::domain::{AuctionContext, ResponseOutcome, ResponseSpace};
use crate::error::{invalid, Result};
use crate::mechanism::{generate, response_reward, BasePolicy, RewardConfig};

/// Draw `m` candidates from `base` (format errors included) and return the
/// highest-reward one, keeping the earliest on ties.
pub fn mosaic_select<R: Rng + ?Sized>(
    base: &BasePolicy,
    context: &AuctionContext,
    space: &ResponseSpace,
    model: &impl ClickModel,
    reward_cfg: &RewardConfig,
    m: usize,
    rng: &mut R,
) -> Result<ResponseOutcome> {
    if m == 0 {
        return invalid("MOSAIC needs at least one candidate");
    }
    let mut best: Option<(f64, ResponseOutcome)> = None;
    for _ in 0..m {
        let (_, candidate) = generate(rng, space, base.distribution(), base.format_error_rate);
        let r = response_reward(context, &candidate, model, reward_cfg)?;
        if best.as_ref().map_or(true, |(b, _)| r > *b) {
            best = Some((r, candidate));
        }
    }
    Ok(best.expect("m >= 1").1)
}
