//! Group Relative Policy Optimization on a categorical toy policy.
//!
//! Advantages are rewards standardized within their group (population std,
//! zero when the group has no spread). The objective per group is
//! `mean_i min(rho_i * A_i, clip(rho_i, 1-eps, 1+eps) * A_i) - beta * KL(pi || pi_ref)`.
//!
//! The toy policy is a softmax over a fixed set of query-rewrite templates,
//! which makes the objective's gradient available in closed form.

pub mod env;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Groups whose reward std falls below this get all-zero advantages.
pub const ZERO_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("group must contain at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("probability ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("group size {actual} does not match configured group_size {expected}")]
    GroupSizeMismatch { expected: usize, actual: usize },
    #[error("group sequences have inconsistent lengths")]
    RaggedGroup,
    #[error("distributions have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("not a probability vector: {0}")]
    NotADistribution(String),
    #[error("support violation: q is zero where p is positive (index {0})")]
    SupportViolation(usize),
    #[error("environment needs at least 2 actions, got {0}")]
    TooFewActions(usize),
    #[error("environment has no queries")]
    NoQueries,
    #[error("invalid grpo config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coef: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub sample_temperature: f64,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 5,
            clip_epsilon: 0.2,
            kl_coef: 0.04,
            learning_rate: 0.1,
            steps: 600,
            sample_temperature: 0.7,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be > 0");
        }
        if !(self.kl_coef >= 0.0) || !self.kl_coef.is_finite() {
            return bad("kl_coef must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and > 0");
        }
        if self.steps == 0 {
            return bad("steps must be > 0");
        }
        if !(self.sample_temperature > 0.0) || !self.sample_temperature.is_finite() {
            return bad("sample_temperature must be finite and > 0");
        }
        Ok(())
    }
}

/// Group-standardized advantages.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ZERO_VARIANCE_FLOOR {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

fn clip(rho: f64, epsilon: f64) -> f64 {
    rho.clamp(1.0 - epsilon, 1.0 + epsilon)
}

pub fn clipped_term(rho: f64, advantage: f64, epsilon: f64) -> Result<f64, GrpoError> {
    if !(rho > 0.0) {
        return Err(GrpoError::NonPositiveRatio(rho));
    }
    Ok((rho * advantage).min(clip(rho, epsilon) * advantage))
}

/// d/d(rho) of [`clipped_term`]: `A` while the unclipped branch is active,
/// zero once the clip binds.
pub fn clipped_term_slope(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    let unclipped = rho * advantage;
    let clipped = clip(rho, epsilon) * advantage;
    let inside = (1.0 - epsilon..=1.0 + epsilon).contains(&rho);
    if inside || unclipped <= clipped {
        advantage
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoGroup {
    pub rewards: Vec<f64>,
    pub ratios: Vec<f64>,
    pub advantages: Vec<f64>,
    pub kl_value: f64,
}

impl GrpoGroup {
    /// Group with advantages derived from `rewards`.
    pub fn from_rewards(
        rewards: Vec<f64>,
        ratios: Vec<f64>,
        kl_value: f64,
    ) -> Result<Self, GrpoError> {
        let advantages = compute_advantages(&rewards)?;
        Ok(Self {
            rewards,
            ratios,
            advantages,
            kl_value,
        })
    }

    pub fn size(&self) -> usize {
        self.rewards.len()
    }
}

pub fn grpo_objective(group: &GrpoGroup, cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    let g = group.size();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    if g != cfg.group_size {
        return Err(GrpoError::GroupSizeMismatch {
            expected: cfg.group_size,
            actual: g,
        });
    }
    if group.ratios.len() != g || group.advantages.len() != g {
        return Err(GrpoError::RaggedGroup);
    }
    if !(group.kl_value >= 0.0) {
        return Err(GrpoError::InvalidConfig("kl_value must be >= 0".into()));
    }
    let mut sum = 0.0;
    for (&rho, &adv) in group.ratios.iter().zip(&group.advantages) {
        sum += clipped_term(rho, adv, cfg.clip_epsilon)?;
    }
    Ok(sum / g as f64 - cfg.kl_coef * group.kl_value)
}

const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

fn check_distribution(p: &[f64], name: &str) -> Result<(), GrpoError> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(GrpoError::NotADistribution(format!(
            "{name} has negative or non-finite entries"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(GrpoError::NotADistribution(format!("{name} sums to {s}")));
    }
    Ok(())
}

/// `KL(p || q) = sum p log(p / q)`, with `0 log 0 = 0`.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> Result<f64, GrpoError> {
    if p.len() != q.len() {
        return Err(GrpoError::LengthMismatch(p.len(), q.len()));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(GrpoError::SupportViolation(i));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Categorical policy over named rewrite templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub logits: Vec<f64>,
    pub action_names: Vec<String>,
}

impl ToyPolicy {
    pub fn uniform(action_names: Vec<String>) -> Self {
        Self {
            logits: vec![0.0; action_names.len()],
            action_names,
        }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits, 1.0)
    }

    /// The distribution rollouts are sampled from.
    pub fn sampling_probabilities(&self, temperature: f64) -> Vec<f64> {
        softmax(&self.logits, temperature)
    }

    pub fn argmax(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &z)| {
                if z > best.1 {
                    (i, z)
                } else {
                    best
                }
            })
            .0
    }
}

/// A finite set of rewrite actions evaluated against a fixed query set.
pub trait RewardEnvironment {
    fn action_names(&self) -> Vec<String>;
    fn num_queries(&self) -> usize;
    /// Must be deterministic in `(query, action)`.
    fn reward(&self, query: usize, action: usize) -> f64;
}

/// Environment backed by an explicit `queries x actions` reward table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEnvironment {
    pub action_names: Vec<String>,
    pub rewards: Vec<Vec<f64>>,
}

impl RewardEnvironment for TableEnvironment {
    fn action_names(&self) -> Vec<String> {
        self.action_names.clone()
    }

    fn num_queries(&self) -> usize {
        self.rewards.len()
    }

    fn reward(&self, query: usize, action: usize) -> f64 {
        self.rewards[query][action]
    }
}

/// Sampled actions and their rewards for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGroup {
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepEvaluation {
    pub objective: f64,
    pub kl: f64,
    pub gradient: Vec<f64>,
}

/// Objective and its exact gradient w.r.t. the logits for a batch of groups.
///
/// `old_probs` is the distribution the groups were sampled from and
/// `ref_probs` the KL anchor; both are tempered softmaxes like the current
/// policy `softmax(logits / temperature)`.
pub fn evaluate_step(
    logits: &[f64],
    old_probs: &[f64],
    ref_probs: &[f64],
    groups: &[SampledGroup],
    cfg: &GrpoConfig,
) -> Result<StepEvaluation, GrpoError> {
    let t = cfg.sample_temperature;
    let probs = softmax(logits, t);
    let n = probs.len();
    let kl = categorical_kl(&probs, ref_probs)?;
    let mut grad = vec![0.0; n];
    let mut surrogate = 0.0;
    for group in groups {
        let g = group.actions.len();
        if g != group.rewards.len() {
            return Err(GrpoError::RaggedGroup);
        }
        let adv = compute_advantages(&group.rewards)?;
        let mut ratios = Vec::with_capacity(g);
        for (&a, &adv_i) in group.actions.iter().zip(&adv) {
            let rho = probs[a] / old_probs[a];
            ratios.push(rho);
            let slope = clipped_term_slope(rho, adv_i, cfg.clip_epsilon);
            if slope != 0.0 {
                // d rho / d z = rho * (e_a - pi) / T
                let scale = slope * rho / (g as f64 * t);
                for (j, gj) in grad.iter_mut().enumerate() {
                    let indicator = if j == a { 1.0 } else { 0.0 };
                    *gj += scale * (indicator - probs[j]);
                }
            }
        }
        let group_obj = grpo_objective(
            &GrpoGroup {
                rewards: group.rewards.clone(),
                ratios,
                advantages: adv,
                kl_value: 0.0,
            },
            &GrpoConfig {
                group_size: g,
                ..cfg.clone()
            },
        )?;
        surrogate += group_obj;
    }
    let q = groups.len().max(1) as f64;
    for gj in grad.iter_mut() {
        *gj /= q;
    }
    // d KL / d z_j = pi_j (log(pi_j / ref_j) - KL) / T
    if cfg.kl_coef > 0.0 {
        for j in 0..n {
            if probs[j] > 0.0 {
                grad[j] -= cfg.kl_coef * probs[j] * ((probs[j] / ref_probs[j]).ln() - kl) / t;
            }
        }
    }
    Ok(StepEvaluation {
        objective: surrogate / q - cfg.kl_coef * kl,
        kl,
        gradient: grad,
    })
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_reward: f64,
    pub objective: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutcome {
    pub policy: ToyPolicy,
    pub curve: Vec<CurvePoint>,
}

/// Runs `cfg.steps` GRPO updates. Each step samples `group_size` actions per
/// query from the current tempered policy, then takes one gradient-ascent
/// step on the objective; the KL anchor is the initial (uniform) policy.
pub fn train_toy_policy<E: RewardEnvironment + ?Sized>(
    env: &E,
    cfg: &GrpoConfig,
) -> Result<TrainingOutcome, GrpoError> {
    cfg.validate()?;
    let names = env.action_names();
    if names.len() < 2 {
        return Err(GrpoError::TooFewActions(names.len()));
    }
    if env.num_queries() == 0 {
        return Err(GrpoError::NoQueries);
    }
    let mut policy = ToyPolicy::uniform(names);
    let ref_probs = policy.sampling_probabilities(cfg.sample_temperature);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let old_probs = policy.sampling_probabilities(cfg.sample_temperature);
        let groups: Vec<SampledGroup> = (0..env.num_queries())
            .map(|q| {
                let actions: Vec<usize> = (0..cfg.group_size)
                    .map(|_| sample_index(&old_probs, &mut rng))
                    .collect();
                let rewards = actions.iter().map(|&a| env.reward(q, a)).collect();
                SampledGroup { actions, rewards }
            })
            .collect();
        let eval = evaluate_step(&policy.logits, &old_probs, &ref_probs, &groups, cfg)?;
        let total: f64 = groups.iter().flat_map(|g| g.rewards.iter()).sum();
        let count = groups.len() * cfg.group_size;
        curve.push(CurvePoint {
            step,
            mean_reward: total / count as f64,
            objective: eval.objective,
            kl: eval.kl,
        });
        for (z, g) in policy.logits.iter_mut().zip(&eval.gradient) {
            *z += cfg.learning_rate * g;
        }
    }
    Ok(TrainingOutcome { policy, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn advantages_examples() {
        // population std of (1,2,3) is sqrt(2/3); (3-2)/sqrt(2/3) = sqrt(3/2)
        let a = compute_advantages(&[1.0, 2.0, 3.0]).unwrap();
        let s = (1.5f64).sqrt();
        assert_abs_diff_eq!(a[0], -s, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[2], s, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 1.224744871391589, epsilon = 1e-12);
        assert_eq!(compute_advantages(&[5.0; 4]).unwrap(), vec![0.0; 4]);
        let a = compute_advantages(&[4.5, -6.5]).unwrap();
        assert_abs_diff_eq!(a[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], -1.0, epsilon = 1e-12);
        assert_eq!(compute_advantages(&[1.0]), Err(GrpoError::GroupTooSmall(1)));
    }

    #[test]
    fn clipped_term_examples() {
        assert_abs_diff_eq!(clipped_term(1.5, 1.0, 0.2).unwrap(), 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(clipped_term(0.5, -1.0, 0.2).unwrap(), -0.8, epsilon = 1e-12);
        for a in [-3.0, 0.0, 2.5] {
            for e in [0.01, 0.2, 5.0] {
                assert_eq!(clipped_term(1.0, a, e).unwrap(), a);
            }
        }
        assert_eq!(
            clipped_term(0.0, 1.0, 0.2),
            Err(GrpoError::NonPositiveRatio(0.0))
        );
    }

    #[test]
    fn objective_examples() {
        let cfg = GrpoConfig {
            group_size: 2,
            clip_epsilon: 0.2,
            kl_coef: 0.1,
            ..Default::default()
        };
        let g = GrpoGroup {
            rewards: vec![1.0, 0.0],
            ratios: vec![1.0, 1.0],
            advantages: vec![1.0, -1.0],
            kl_value: 0.0,
        };
        assert_abs_diff_eq!(grpo_objective(&g, &cfg).unwrap(), 0.0, epsilon = 1e-15);
        let g = GrpoGroup {
            rewards: vec![1.0, 0.0],
            ratios: vec![1.5, 0.5],
            advantages: vec![1.0, -1.0],
            kl_value: 0.5,
        };
        assert_abs_diff_eq!(grpo_objective(&g, &cfg).unwrap(), 0.15, epsilon = 1e-12);
        let single = GrpoGroup {
            rewards: vec![1.0],
            ratios: vec![1.0],
            advantages: vec![0.0],
            kl_value: 0.0,
        };
        assert_eq!(
            grpo_objective(&single, &cfg),
            Err(GrpoError::GroupTooSmall(1))
        );
        let three = GrpoGroup::from_rewards(vec![1.0, 2.0, 3.0], vec![1.0; 3], 0.0).unwrap();
        assert!(matches!(
            grpo_objective(&three, &cfg),
            Err(GrpoError::GroupSizeMismatch { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(categorical_kl(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            categorical_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_eq!(
            categorical_kl(&[0.5, 0.5], &[1.0, 0.0]),
            Err(GrpoError::SupportViolation(1))
        );
        assert!(matches!(
            categorical_kl(&[0.5, 0.6], &[0.5, 0.5]),
            Err(GrpoError::NotADistribution(_))
        ));
    }

    fn finite_difference(
        logits: &[f64],
        old: &[f64],
        reference: &[f64],
        groups: &[SampledGroup],
        cfg: &GrpoConfig,
    ) -> Vec<f64> {
        let h = 1e-6;
        (0..logits.len())
            .map(|j| {
                let mut up = logits.to_vec();
                let mut down = logits.to_vec();
                up[j] += h;
                down[j] -= h;
                let fu = evaluate_step(&up, old, reference, groups, cfg).unwrap().objective;
                let fd = evaluate_step(&down, old, reference, groups, cfg).unwrap().objective;
                (fu - fd) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let cfg = GrpoConfig {
            group_size: 4,
            clip_epsilon: 0.3,
            kl_coef: 0.2,
            sample_temperature: 0.7,
            ..Default::default()
        };
        let old_logits = [0.1, -0.4, 0.3];
        let old = softmax(&old_logits, cfg.sample_temperature);
        let reference = softmax(&[0.0, 0.0, 0.0], cfg.sample_temperature);
        // current logits near old so some ratios sit inside the clip band and
        // some outside, but none exactly on its edge
        let logits = [0.25, -0.5, 0.2];
        let groups = vec![
            SampledGroup {
                actions: vec![0, 1, 2, 0],
                rewards: vec![5.0, -1.5, -6.5, 5.0],
            },
            SampledGroup {
                actions: vec![2, 2, 1, 0],
                rewards: vec![0.5, -1.5, 3.0, 1.0],
            },
        ];
        let analytic = evaluate_step(&logits, &old, &reference, &groups, &cfg)
            .unwrap()
            .gradient;
        let numeric = finite_difference(&logits, &old, &reference, &groups, &cfg);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert_abs_diff_eq!(a, n, epsilon = 1e-6);
        }
    }

    #[test]
    fn unclipped_step_is_reinforce_with_baseline() {
        let cfg = GrpoConfig {
            group_size: 5,
            clip_epsilon: 1e9,
            kl_coef: 0.0,
            sample_temperature: 0.7,
            ..Default::default()
        };
        let logits = [0.0; 4];
        let probs = softmax(&logits, cfg.sample_temperature);
        let group = SampledGroup {
            actions: vec![0, 1, 1, 3, 2],
            rewards: vec![5.0, -1.5, -1.5, -6.5, 0.5],
        };
        let grad = evaluate_step(&logits, &probs, &probs, std::slice::from_ref(&group), &cfg)
            .unwrap()
            .gradient;
        let mean = group.rewards.iter().sum::<f64>() / 5.0;
        let mut reinforce = [0.0; 4];
        for (&a, &r) in group.actions.iter().zip(&group.rewards) {
            for j in 0..4 {
                let ind = if j == a { 1.0 } else { 0.0 };
                reinforce[j] += (r - mean) * (ind - probs[j]);
            }
        }
        let dot: f64 = grad.iter().zip(&reinforce).map(|(a, b)| a * b).sum();
        let na = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = reinforce.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_abs_diff_eq!(dot / (na * nb), 1.0, epsilon = 1e-12);
    }

    fn forced_env() -> TableEnvironment {
        TableEnvironment {
            action_names: vec!["plain".into(), "hinted".into(), "decoy".into(), "bare".into()],
            rewards: (0..4)
                .map(|_| vec![-1.5, 5.0, -1.5, -6.5])
                .collect(),
        }
    }

    #[test]
    fn training_prefers_dominant_action() {
        let cfg = GrpoConfig {
            seed: 3,
            ..Default::default()
        };
        let out = train_toy_policy(&forced_env(), &cfg).unwrap();
        assert_eq!(out.policy.argmax(), 1);
        assert_eq!(out.curve.len(), 600);
        let first: f64 = out.curve[..50].iter().map(|c| c.mean_reward).sum::<f64>() / 50.0;
        let last: f64 = out.curve[550..].iter().map(|c| c.mean_reward).sum::<f64>() / 50.0;
        assert!(last > first);
        let again = train_toy_policy(&forced_env(), &cfg).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn training_rejects_degenerate_envs() {
        let env = TableEnvironment {
            action_names: vec!["only".into()],
            rewards: vec![vec![1.0]],
        };
        assert_eq!(
            train_toy_policy(&env, &GrpoConfig::default()),
            Err(GrpoError::TooFewActions(1))
        );
    }

    proptest! {
        #[test]
        fn advantages_standardized(rewards in prop::collection::vec(-10.0f64..10.0, 2..64)) {
            let a = compute_advantages(&rewards).unwrap();
            let n = a.len() as f64;
            let mean = rewards.iter().sum::<f64>() / n;
            let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            if std >= ZERO_VARIANCE_FLOOR {
                let m = a.iter().sum::<f64>() / n;
                let s = (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(m.abs() < 1e-9);
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn clipped_term_is_pessimistic(rho in 0.01f64..3.0, adv in -5.0f64..5.0, eps in 0.01f64..1.0) {
            let v = clipped_term(rho, adv, eps).unwrap();
            prop_assert!(v <= rho * adv + 1e-15);
            prop_assert!(v <= clip(rho, eps) * adv + 1e-15);
        }

        #[test]
        fn objective_decreases_in_kl(k1 in 0.0f64..5.0, dk in 0.001f64..5.0, beta in 0.001f64..1.0) {
            let cfg = GrpoConfig { group_size: 3, kl_coef: beta, ..Default::default() };
            let mut g = GrpoGroup::from_rewards(vec![1.0, -2.0, 0.5], vec![1.1, 0.9, 1.0], k1).unwrap();
            let o1 = grpo_objective(&g, &cfg).unwrap();
            g.kl_value = k1 + dk;
            let o2 = grpo_objective(&g, &cfg).unwrap();
            prop_assert!(o2 < o1);
        }

        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-30.0f64..30.0, 1..12), t in 0.1f64..3.0) {
            let p = softmax(&logits, t);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
