//! Seeded autoregressive sampling of trajectory groups.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::GroupBatch;
use crate::error::{CreditError, Result};
use crate::synth::policy::TabularPolicy;

/// Sample `group_size` full-horizon trajectories for `query`.
pub fn rollout_group(
    policy: &TabularPolicy,
    query: usize,
    group_size: usize,
    seed: u64,
) -> Result<GroupBatch> {
    let env = policy.env();
    if group_size < 2 {
        return Err(CreditError::Domain(format!(
            "group size must be >= 2, got {group_size}"
        )));
    }
    if query >= env.num_queries {
        return Err(CreditError::Domain(format!("unknown query {query}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = &policy.layout;
    let mut tokens = Vec::with_capacity(group_size);
    let mut rewards = Vec::with_capacity(group_size);
    let mut old_logp = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let mut code = layout.empty_window();
        let mut acc = 0;
        let mut traj = Vec::with_capacity(env.horizon);
        let mut lps = Vec::with_capacity(env.horizon);
        for t in 0..env.horizon {
            let lp = policy.row_log_probs(layout.context(query, code, acc, t), None);
            let dist = WeightedIndex::new(lp.iter().map(|x| x.exp()))
                .map_err(|e| CreditError::Scoring(format!("cannot sample: {e}")))?;
            let tok = dist.sample(&mut rng);
            traj.push(tok);
            lps.push(lp[tok]);
            code = layout.push_window(code, tok);
            acc = env.step_acc(acc, t, tok);
        }
        rewards.push(u8::from(acc == env.answer(query)));
        tokens.push(traj);
        old_logp.push(lps);
    }
    Ok(GroupBatch::new(query, env.answer(query), tokens, rewards, old_logp))
}
