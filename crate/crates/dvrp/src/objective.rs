//! Optimization mathematics: exact-match rewards, group-normalized
//! advantages, the clipped surrogate, the group-relative objective, and the
//! differential triplet objective that adds view-KL constraints and an
//! entropy penalty on the perturbed views.
//!
//! Objectives are built as expression graphs once per rollout group and
//! re-evaluated across inner update steps. Conventions: KL terms sum over
//! token steps and average over the group; entropy terms average over both
//! steps and group (keeping the entropy weight length-independent); the
//! surrogate is token-level within trajectories, averaged over the group.

use crate::autodiff::{Algebra, GraphBuilder, NodeId, ParamVector, ScalarExpr};
use crate::error::{DvrpError, Result};
use crate::policy::{self, Distribution, PolicyLayout, PolicySpec, TokenId, Trajectory};
use crate::views::ViewTriplet;
use serde::{Deserialize, Serialize};

/// Which optimization recipe a run uses. The differential variants add the
/// triplet constraints; the `*D` variants additionally drop zero-variance
/// groups and default to an asymmetric clip range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Grpo,
    Dapo,
    DvrpG,
    DvrpD,
}

impl Algo {
    /// Whether rollout groups with all-identical rewards are dropped before
    /// the update (dynamic-sampling style filtering).
    pub fn filters_degenerate_groups(&self) -> bool {
        matches!(self, Algo::Dapo | Algo::DvrpD)
    }
}

/// All objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvrpConfig {
    /// Weight of the sensitivity term (maximized divergence from the
    /// masked view).
    pub lambda_nec: f64,
    /// Weight of the robustness term (minimized divergence from the noised
    /// view).
    pub lambda_rob: f64,
    /// Weight of the entropy penalty on the perturbed views.
    pub lambda_ent: f64,
    /// Stabilizer added to the reward standard deviation in the advantage.
    pub eps_adv: f64,
    /// Clip range is [1 - clip_low, 1 + clip_high].
    pub clip_low: f64,
    pub clip_high: f64,
    /// Rollouts per task.
    pub group_size: usize,
    /// Stop gradients through the original-view factor inside KL terms.
    pub stop_grad_ori: bool,
    /// Optional per-trajectory cap on the mask-KL term before weighting.
    pub kl_cap: Option<f64>,
    pub algo: Algo,
}

impl DvrpConfig {
    pub fn grpo() -> Self {
        Self {
            lambda_nec: 0.0,
            lambda_rob: 0.0,
            lambda_ent: 0.0,
            eps_adv: 1e-8,
            clip_low: 0.2,
            clip_high: 0.2,
            group_size: 5,
            stop_grad_ori: false,
            kl_cap: None,
            algo: Algo::Grpo,
        }
    }

    pub fn dapo() -> Self {
        Self { clip_high: 0.28, algo: Algo::Dapo, ..Self::grpo() }
    }

    pub fn dvrp_g() -> Self {
        Self {
            lambda_nec: 0.01,
            lambda_rob: 0.01,
            lambda_ent: 0.05,
            algo: Algo::DvrpG,
            ..Self::grpo()
        }
    }

    pub fn dvrp_d() -> Self {
        Self { clip_high: 0.28, algo: Algo::DvrpD, ..Self::dvrp_g() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_nec < 0.0 || self.lambda_rob < 0.0 || self.lambda_ent < 0.0 {
            return Err(DvrpError::Config("lambda weights must be non-negative".into()));
        }
        if !(self.eps_adv >= 0.0) {
            return Err(DvrpError::Config("eps_adv must be non-negative".into()));
        }
        if !(self.clip_low > 0.0 && self.clip_low < 1.0)
            || !(self.clip_high > 0.0 && self.clip_high < 1.0)
        {
            return Err(DvrpError::Config("clip bounds must lie in (0, 1)".into()));
        }
        if self.group_size == 0 {
            return Err(DvrpError::Config("group_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Components of one objective evaluation. `total` is the maximized value,
/// composed exactly as
/// `j_grpo + lambda_nec * kl_mask - lambda_rob * kl_noise
///  - lambda_ent * (entropy_mask + entropy_noise)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub j_grpo: f64,
    pub kl_mask: f64,
    pub kl_noise: f64,
    pub entropy_mask: f64,
    pub entropy_noise: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        Self {
            j_grpo: 0.0,
            kl_mask: 0.0,
            kl_noise: 0.0,
            entropy_mask: 0.0,
            entropy_noise: 0.0,
            total: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.j_grpo.is_finite()
            && self.kl_mask.is_finite()
            && self.kl_noise.is_finite()
            && self.entropy_mask.is_finite()
            && self.entropy_noise.is_finite()
            && self.total.is_finite()
    }
}

/// Binary exact-match reward. The answer segment is everything after the
/// last separator token (after stripping one trailing end-of-sequence
/// token), or the whole stripped sequence when no separator occurs.
pub fn accuracy_reward(
    output: &[TokenId],
    ground_truth: &[TokenId],
    sep: TokenId,
    eos: TokenId,
) -> f64 {
    let stripped = match output.split_last() {
        Some((&last, rest)) if last == eos => rest,
        _ => output,
    };
    let answer = match stripped.iter().rposition(|&t| t == sep) {
        Some(i) => &stripped[i + 1..],
        None => stripped,
    };
    if answer == ground_truth {
        1.0
    } else {
        0.0
    }
}

/// Group-normalized advantages: `(r - mean) / (population std + eps_adv)`.
/// All-identical rewards (including the single-rollout group) yield exactly
/// zero advantages.
pub fn group_advantages(rewards: &[f64], eps_adv: f64) -> Vec<f64> {
    assert!(!rewards.is_empty(), "group must be non-empty");
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + eps_adv;
    rewards.iter().map(|&r| (r - mean) / denom).collect()
}

/// PPO clipped surrogate for one token:
/// `min(rho * adv, clip(rho, 1 - clip_low, 1 + clip_high) * adv)`.
pub fn clipped_surrogate(rho: f64, adv: f64, clip_low: f64, clip_high: f64) -> f64 {
    debug_assert!(rho > 0.0);
    let clipped = rho.clamp(1.0 - clip_low, 1.0 + clip_high);
    (rho * adv).min(clipped * adv)
}

/// Sum over steps of the vocabulary KL `sum_v a_v ln(a_v / b_v)`.
pub fn token_kl(seq_a: &[Distribution], seq_b: &[Distribution]) -> Result<f64> {
    if seq_a.len() != seq_b.len() {
        return Err(DvrpError::LengthMismatch { left: seq_a.len(), right: seq_b.len() });
    }
    let mut total = 0.0;
    for (a, b) in seq_a.iter().zip(seq_b) {
        if a.vocab_size() != b.vocab_size() {
            return Err(DvrpError::LengthMismatch { left: a.vocab_size(), right: b.vocab_size() });
        }
        for (&pa, &pb) in a.probs.iter().zip(&b.probs) {
            total += pa * (pa / pb).ln();
        }
    }
    Ok(total)
}

/// Mean over steps of the Shannon entropy `-sum_v p_v ln p_v`.
/// The empty sequence has entropy 0.
pub fn token_entropy(seq: &[Distribution]) -> f64 {
    if seq.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for d in seq {
        for &p in &d.probs {
            total -= p * p.ln();
        }
    }
    total / seq.len() as f64
}

/// Drop groups whose rewards are all identical: they carry zero advantage
/// signal. Groups must be scored before filtering.
pub fn dapo_filter_groups(groups: Vec<GroupRollout>) -> Vec<GroupRollout> {
    groups.into_iter().filter(|g| g.has_reward_variance()).collect()
}

/// G trajectories for one task, sampled from the frozen rollout policy on
/// the original view, with their rewards and group-normalized advantages.
#[derive(Debug, Clone)]
pub struct GroupRollout {
    pub task_index: usize,
    pub query: Vec<TokenId>,
    pub triplet: ViewTriplet,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
}

impl GroupRollout {
    /// Compute advantages from the trajectories' rewards. Every trajectory
    /// must already be scored.
    pub fn new(
        task_index: usize,
        query: Vec<TokenId>,
        triplet: ViewTriplet,
        trajectories: Vec<Trajectory>,
        eps_adv: f64,
    ) -> Self {
        assert!(!trajectories.is_empty());
        let rewards: Vec<f64> =
            trajectories.iter().map(|t| t.reward.expect("trajectory not scored")).collect();
        let advantages = group_advantages(&rewards, eps_adv);
        Self { task_index, query, triplet, trajectories, advantages }
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.trajectories[i].reward.expect("trajectory not scored")
    }

    pub fn mean_reward(&self) -> f64 {
        let n = self.trajectories.len() as f64;
        self.trajectories.iter().map(|t| t.reward.unwrap_or(0.0)).sum::<f64>() / n
    }

    /// False when every trajectory got the same reward (no advantage signal).
    pub fn has_reward_variance(&self) -> bool {
        let first = self.reward(0);
        (1..self.trajectories.len()).any(|i| self.reward(i) != first)
    }
}

/// Graph node `min(rho * adv, clip(rho) * adv)` for a constant advantage.
fn surrogate_node(
    gb: &mut GraphBuilder,
    rho: NodeId,
    adv: f64,
    clip_low: f64,
    clip_high: f64,
) -> NodeId {
    let adv_c = gb.constant(adv);
    let lo = gb.constant(1.0 - clip_low);
    let hi = gb.constant(1.0 + clip_high);
    let floored = gb.max(rho, lo);
    let clipped = gb.min(floored, hi);
    let unclipped_term = gb.mul(rho, adv_c);
    let clipped_term = gb.mul(clipped, adv_c);
    gb.min(unclipped_term, clipped_term)
}

/// One-step KL between two distributions given as graph nodes.
fn kl_step_node(gb: &mut GraphBuilder, a: &[NodeId], b: &[NodeId]) -> NodeId {
    assert_eq!(a.len(), b.len());
    let terms: Vec<NodeId> = a
        .iter()
        .zip(b)
        .map(|(&pa, &pb)| {
            let ratio = gb.div(pa, pb);
            let lr = gb.ln(ratio);
            gb.mul(pa, lr)
        })
        .collect();
    gb.sum(&terms)
}

/// Sum of per-step KLs over a trajectory.
fn seq_kl_node(gb: &mut GraphBuilder, a: &[Vec<NodeId>], b: &[Vec<NodeId>]) -> NodeId {
    assert_eq!(a.len(), b.len());
    let steps: Vec<NodeId> = a.iter().zip(b).map(|(sa, sb)| kl_step_node(gb, sa, sb)).collect();
    gb.sum(&steps)
}

/// Mean of per-step entropies over a trajectory.
fn seq_entropy_node(gb: &mut GraphBuilder, seq: &[Vec<NodeId>]) -> NodeId {
    if seq.is_empty() {
        return gb.constant(0.0);
    }
    let steps: Vec<NodeId> = seq
        .iter()
        .map(|dist| {
            let terms: Vec<NodeId> = dist
                .iter()
                .map(|&p| {
                    let lp = gb.ln(p);
                    let plp = gb.mul(p, lp);
                    gb.neg(plp)
                })
                .collect();
            gb.sum(&terms)
        })
        .collect();
    let total = gb.sum(&steps);
    let inv = gb.constant(1.0 / seq.len() as f64);
    gb.mul(total, inv)
}

fn mean_node(gb: &mut GraphBuilder, items: &[NodeId]) -> NodeId {
    let total = gb.sum(items);
    let inv = gb.constant(1.0 / items.len() as f64);
    gb.mul(total, inv)
}

/// Node handles for the loss components inside a built group objective.
struct BreakdownNodes {
    j_grpo: NodeId,
    kl_mask: Option<NodeId>,
    kl_noise: Option<NodeId>,
    entropy_mask: Option<NodeId>,
    entropy_noise: Option<NodeId>,
    total: NodeId,
}

/// A reusable objective graph for one rollout group. Built once per rollout
/// window and re-evaluated as parameters move through inner update steps.
pub struct GroupObjective {
    expr: ScalarExpr,
    nodes: BreakdownNodes,
    param_len: usize,
}

impl GroupObjective {
    pub fn node_count(&self) -> usize {
        self.expr.node_count()
    }

    pub fn expr(&self) -> &ScalarExpr {
        &self.expr
    }

    fn breakdown_from(&self, values: &[f64]) -> LossBreakdown {
        let read = |n: Option<NodeId>| n.map_or(0.0, |id| values[id.0 as usize]);
        LossBreakdown {
            j_grpo: values[self.nodes.j_grpo.0 as usize],
            kl_mask: read(self.nodes.kl_mask),
            kl_noise: read(self.nodes.kl_noise),
            entropy_mask: read(self.nodes.entropy_mask),
            entropy_noise: read(self.nodes.entropy_noise),
            total: values[self.nodes.total.0 as usize],
        }
    }

    pub fn eval(&self, params: &ParamVector) -> Result<LossBreakdown> {
        let values = self.expr.forward(params)?;
        Ok(self.breakdown_from(&values))
    }

    /// Value components plus d(total)/d(params).
    pub fn eval_with_gradient(&self, params: &ParamVector) -> Result<(LossBreakdown, Vec<f64>)> {
        debug_assert_eq!(params.len(), self.param_len);
        let values = self.expr.forward(params)?;
        let grad = self.expr.backward(&values, params.len());
        Ok((self.breakdown_from(&values), grad))
    }
}

/// Build the full differential objective for one group:
///
/// `J = J_group + lambda_nec * KL(ori || mask) - lambda_rob * KL(ori || noise)
///      - lambda_ent * (H(noise) + H(mask))`
///
/// with per-token importance ratios against the stored rollout-time
/// log-probabilities, KL summed over tokens and averaged over the group,
/// and entropies averaged over steps and group. View subgraphs whose
/// weights are zero are not built at all, so the degenerate configuration
/// constructs exactly the plain group-relative objective.
pub fn build_group_objective(
    spec: &PolicySpec,
    group: &GroupRollout,
    cfg: &DvrpConfig,
) -> GroupObjective {
    let layout = PolicyLayout::new(*spec);
    let mut gb = GraphBuilder::new();
    let gb = &mut gb;
    let g = group.trajectories.len() as f64;

    let need_mask = cfg.lambda_nec != 0.0 || cfg.lambda_ent != 0.0;
    let need_noise = cfg.lambda_rob != 0.0 || cfg.lambda_ent != 0.0;
    let need_ori_dists = cfg.lambda_nec != 0.0 || cfg.lambda_rob != 0.0;

    let ctx_ori = policy::build_view_context(gb, &layout, Some(&group.triplet.original), &group.query);
    let ctx_mask = need_mask
        .then(|| policy::build_view_context(gb, &layout, Some(&group.triplet.masked), &group.query));
    let ctx_noise = need_noise
        .then(|| policy::build_view_context(gb, &layout, Some(&group.triplet.noised), &group.query));

    let mut grpo_terms = Vec::with_capacity(group.trajectories.len());
    let mut kl_mask_terms = Vec::new();
    let mut kl_noise_terms = Vec::new();
    let mut ent_mask_terms = Vec::new();
    let mut ent_noise_terms = Vec::new();

    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        let forced_ori = policy::teacher_force(gb, &layout, &ctx_ori, &traj.tokens);

        let token_terms: Vec<NodeId> = forced_ori
            .token_log_probs
            .iter()
            .zip(&traj.log_probs)
            .map(|(&lp, &old_lp)| {
                let old = gb.constant(old_lp);
                let diff = gb.sub(lp, old);
                let rho = gb.exp(diff);
                surrogate_node(gb, rho, adv, cfg.clip_low, cfg.clip_high)
            })
            .collect();
        grpo_terms.push(gb.sum(&token_terms));

        let ori_dists: Option<Vec<Vec<NodeId>>> = need_ori_dists.then(|| {
            if cfg.stop_grad_ori {
                forced_ori
                    .step_dists
                    .iter()
                    .map(|d| d.iter().map(|&p| gb.stop_grad(p)).collect())
                    .collect()
            } else {
                forced_ori.step_dists.clone()
            }
        });

        if let Some(ctx) = &ctx_mask {
            let forced = policy::teacher_force(gb, &layout, ctx, &traj.tokens);
            if cfg.lambda_nec != 0.0 {
                let mut kl = seq_kl_node(gb, ori_dists.as_ref().unwrap(), &forced.step_dists);
                if let Some(cap) = cfg.kl_cap {
                    let cap_c = gb.constant(cap);
                    kl = gb.min(kl, cap_c);
                }
                kl_mask_terms.push(kl);
            }
            if cfg.lambda_ent != 0.0 {
                ent_mask_terms.push(seq_entropy_node(gb, &forced.step_dists));
            }
        }
        if let Some(ctx) = &ctx_noise {
            let forced = policy::teacher_force(gb, &layout, ctx, &traj.tokens);
            if cfg.lambda_rob != 0.0 {
                kl_noise_terms.push(seq_kl_node(gb, ori_dists.as_ref().unwrap(), &forced.step_dists));
            }
            if cfg.lambda_ent != 0.0 {
                ent_noise_terms.push(seq_entropy_node(gb, &forced.step_dists));
            }
        }
    }

    let inv_g = gb.constant(1.0 / g);
    let grpo_sum = gb.sum(&grpo_terms);
    let j_grpo = gb.mul(grpo_sum, inv_g);

    let kl_mask = (!kl_mask_terms.is_empty()).then(|| mean_node(gb, &kl_mask_terms));
    let kl_noise = (!kl_noise_terms.is_empty()).then(|| mean_node(gb, &kl_noise_terms));
    let entropy_mask = (!ent_mask_terms.is_empty()).then(|| mean_node(gb, &ent_mask_terms));
    let entropy_noise = (!ent_noise_terms.is_empty()).then(|| mean_node(gb, &ent_noise_terms));

    // Compose the total exactly as documented on LossBreakdown.
    let mut total = j_grpo;
    if let Some(kl) = kl_mask {
        let w = gb.constant(cfg.lambda_nec);
        let term = gb.mul(w, kl);
        total = gb.add(total, term);
    }
    if let Some(kl) = kl_noise {
        let w = gb.constant(cfg.lambda_rob);
        let term = gb.mul(w, kl);
        total = gb.sub(total, term);
    }
    if entropy_mask.is_some() || entropy_noise.is_some() {
        let zero = gb.constant(0.0);
        let em = entropy_mask.unwrap_or(zero);
        let en = entropy_noise.unwrap_or(zero);
        let sum_h = gb.add(em, en);
        let w = gb.constant(cfg.lambda_ent);
        let term = gb.mul(w, sum_h);
        total = gb.sub(total, term);
    }

    let param_len = layout.param_count();
    let nodes =
        BreakdownNodes { j_grpo, kl_mask, kl_noise, entropy_mask, entropy_noise, total };
    let expr = std::mem::take(gb).finish(total);
    GroupObjective { expr, nodes, param_len }
}

/// The plain group-relative objective (no triplet terms) as an expression.
pub fn grpo_objective(spec: &PolicySpec, group: &GroupRollout, cfg: &DvrpConfig) -> GroupObjective {
    let plain = DvrpConfig { lambda_nec: 0.0, lambda_rob: 0.0, lambda_ent: 0.0, ..cfg.clone() };
    build_group_objective(spec, group, &plain)
}

/// Build and evaluate the full objective at `params`.
pub fn dvrp_objective(
    spec: &PolicySpec,
    group: &GroupRollout,
    params: &ParamVector,
    cfg: &DvrpConfig,
) -> Result<(GroupObjective, LossBreakdown)> {
    cfg.validate()?;
    let obj = build_group_objective(spec, group, cfg);
    let breakdown = obj.eval(params)?;
    Ok((obj, breakdown))
}
