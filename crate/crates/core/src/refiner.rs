//! Refiner rollout parsing and reward computation.
//!
//! A rollout earns a format reward (`+1` when it is a single `<think>` block
//! followed by a single `<answer>` block holding a JSON object with a
//! non-empty `"query"`, `-4` otherwise) plus a retrieval reward looked up
//! from the hit rank of the gold entity among the first 200 distinct
//! retrieved entities.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_REWARD: f64 = 1.0;
pub const FORMAT_PENALTY: f64 = -4.0;
pub const MISS_PENALTY: f64 = -2.5;
/// Number of distinct entities inspected for a hit.
pub const REWARD_DEPTH: usize = 200;

/// `(first_rank, last_rank, reward)`, inclusive bounds.
pub const RETRIEVAL_REWARD_TABLE: [(usize, usize, f64); 6] = [
    (1, 5, 4.0),
    (6, 10, 3.5),
    (11, 20, 3.0),
    (21, 50, 1.0),
    (51, 100, 0.5),
    (101, 200, 0.1),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("hit rank {0} outside [1, {REWARD_DEPTH}]")]
    RankOutOfRange(usize),
    #[error("insufficient records for sampling plan: {}", format_shortfalls(.0))]
    InsufficientBucket(Vec<Shortfall>),
    #[error("unknown hit bucket `{0}`")]
    UnknownBucket(String),
}

fn format_shortfalls(s: &[Shortfall]) -> String {
    s.iter()
        .map(|s| format!("{} needs {} has {}", s.bucket, s.requested, s.available))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RefinerOutput {
    pub raw_text: String,
    pub think: Option<String>,
    pub answer_payload: Option<String>,
    pub refined_query: Option<String>,
    pub well_formed: bool,
}

struct TagSpans {
    think: (usize, usize),
    answer: (usize, usize),
    think_body: (usize, usize),
    answer_body: (usize, usize),
}

fn single(text: &str, tag: &str) -> Option<usize> {
    let mut it = text.match_indices(tag);
    let first = it.next()?.0;
    it.next().is_none().then_some(first)
}

fn locate_tags(text: &str) -> Option<TagSpans> {
    let to = single(text, "<think>")?;
    let tc = single(text, "</think>")?;
    let ao = single(text, "<answer>")?;
    let ac = single(text, "</answer>")?;
    if !(to < tc && tc < ao && ao < ac) {
        return None;
    }
    Some(TagSpans {
        think: (to, tc + "</think>".len()),
        answer: (ao, ac + "</answer>".len()),
        think_body: (to + "<think>".len(), tc),
        answer_body: (ao + "<answer>".len(), ac),
    })
}

fn body_between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let s = text.find(open)? + open.len();
    let e = text[s..].find(close)?;
    Some(&text[s..s + e])
}

fn query_from_payload(payload: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(payload.trim()).ok()?;
    let query = value.as_object()?.get("query")?.as_str()?.trim();
    (!query.is_empty()).then(|| query.to_string())
}

/// Total over arbitrary input; malformation is reported via `well_formed`.
pub fn parse_refiner_output(text: &str) -> RefinerOutput {
    let mut out = RefinerOutput {
        raw_text: text.to_string(),
        think: body_between(text, "<think>", "</think>").map(str::to_string),
        answer_payload: body_between(text, "<answer>", "</answer>").map(str::to_string),
        ..Default::default()
    };
    let Some(spans) = locate_tags(text) else {
        return out;
    };
    let outside_is_blank = text[..spans.think.0].trim().is_empty()
        && text[spans.think.1..spans.answer.0].trim().is_empty()
        && text[spans.answer.1..].trim().is_empty();
    if !outside_is_blank {
        return out;
    }
    out.think = Some(text[spans.think_body.0..spans.think_body.1].to_string());
    let payload = &text[spans.answer_body.0..spans.answer_body.1];
    out.answer_payload = Some(payload.to_string());
    if let Some(query) = query_from_payload(payload) {
        out.refined_query = Some(query);
        out.well_formed = true;
    }
    out
}

pub fn format_reward(output: &RefinerOutput) -> f64 {
    if output.well_formed {
        FORMAT_REWARD
    } else {
        FORMAT_PENALTY
    }
}

/// 1-based rank of `gold_entity` among the first `depth` distinct entities,
/// counting each entity at its first occurrence.
pub fn entity_hit_rank<'a, I>(entities: I, gold_entity: &str, depth: usize) -> Option<usize>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut seen = HashSet::new();
    for entity in entities {
        if seen.len() >= depth {
            break;
        }
        if seen.insert(entity) && entity == gold_entity {
            return Some(seen.len());
        }
    }
    None
}

pub fn retrieval_reward(rank: Option<usize>) -> Result<f64, RewardError> {
    let Some(rank) = rank else {
        return Ok(MISS_PENALTY);
    };
    RETRIEVAL_REWARD_TABLE
        .iter()
        .find(|(lo, hi, _)| (*lo..=*hi).contains(&rank))
        .map(|&(_, _, r)| r)
        .ok_or(RewardError::RankOutOfRange(rank))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub format_reward: f64,
    pub retrieval_reward: f64,
    pub total: f64,
    pub hit_rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardPolicy {
    /// Malformed rollouts get the miss penalty without running retrieval.
    pub skip_retrieval_on_malformed: bool,
    pub depth: usize,
}

impl Default for RewardPolicy {
    fn default() -> Self {
        Self {
            skip_retrieval_on_malformed: true,
            depth: REWARD_DEPTH,
        }
    }
}

pub fn total_reward(
    output: &RefinerOutput,
    rank: Option<usize>,
    policy: &RewardPolicy,
) -> Result<RewardRecord, RewardError> {
    let format = format_reward(output);
    let rank = if !output.well_formed && policy.skip_retrieval_on_malformed {
        None
    } else {
        rank
    };
    let retrieval = retrieval_reward(rank)?;
    Ok(RewardRecord {
        format_reward: format,
        retrieval_reward: retrieval,
        total: format + retrieval,
        hit_rank: rank,
    })
}

/// Parses a rollout and scores it, calling `hit_rank` with the refined query
/// only when retrieval should run.
pub fn score_rollout<E, F>(
    raw_text: &str,
    policy: &RewardPolicy,
    hit_rank: F,
) -> Result<(RefinerOutput, RewardRecord), E>
where
    F: FnOnce(Option<&str>) -> Result<Option<usize>, E>,
    E: From<RewardError>,
{
    let output = parse_refiner_output(raw_text);
    let rank = if output.well_formed || !policy.skip_retrieval_on_malformed {
        hit_rank(output.refined_query.as_deref())?
    } else {
        None
    };
    let record = total_reward(&output, rank, policy)?;
    Ok((output, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HitBucket {
    #[serde(rename = "1-5")]
    Top5,
    #[serde(rename = "6-10")]
    Top10,
    #[serde(rename = "11-20")]
    Top20,
    #[serde(rename = "21-200")]
    Top200,
    #[serde(rename = "miss")]
    Miss,
}

impl HitBucket {
    pub const ALL: [HitBucket; 5] = [
        HitBucket::Top5,
        HitBucket::Top10,
        HitBucket::Top20,
        HitBucket::Top200,
        HitBucket::Miss,
    ];

    pub fn of(rank: Option<usize>) -> HitBucket {
        match rank {
            Some(1..=5) => HitBucket::Top5,
            Some(6..=10) => HitBucket::Top10,
            Some(11..=20) => HitBucket::Top20,
            Some(21..=200) => HitBucket::Top200,
            _ => HitBucket::Miss,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            HitBucket::Top5 => "1-5",
            HitBucket::Top10 => "6-10",
            HitBucket::Top20 => "11-20",
            HitBucket::Top200 => "21-200",
            HitBucket::Miss => "miss",
        }
    }
}

impl fmt::Display for HitBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for HitBucket {
    type Err = RewardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HitBucket::ALL
            .into_iter()
            .find(|b| b.label() == s.trim())
            .ok_or_else(|| RewardError::UnknownBucket(s.to_string()))
    }
}

/// Requested sample count per hit-rank bucket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SamplingPlan {
    pub counts: BTreeMap<HitBucket, usize>,
}

impl SamplingPlan {
    pub fn new(top5: usize, top10: usize, top20: usize, top200: usize, miss: usize) -> Self {
        Self {
            counts: HitBucket::ALL
                .into_iter()
                .zip([top5, top10, top20, top200, miss])
                .collect(),
        }
    }

    pub fn evqa() -> Self {
        Self::new(500, 1000, 1000, 2500, 2000)
    }

    pub fn infoseek() -> Self {
        Self::new(0, 500, 1000, 2500, 3000)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn count(&self, bucket: HitBucket) -> usize {
        self.counts.get(&bucket).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub bucket: HitBucket,
    pub requested: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledQuery<T> {
    pub bucket: HitBucket,
    /// Position in the input record slice.
    pub source_index: usize,
    pub item: T,
}

/// Draws exactly `plan.count(b)` records uniformly without replacement from
/// each bucket. Output is grouped by bucket, ascending source index within.
pub fn sample_training_queries<T: Clone>(
    records: &[(T, Option<usize>)],
    plan: &SamplingPlan,
    seed: u64,
) -> Result<Vec<SampledQuery<T>>, RewardError> {
    let mut pools: BTreeMap<HitBucket, Vec<usize>> = BTreeMap::new();
    for (i, (_, rank)) in records.iter().enumerate() {
        pools.entry(HitBucket::of(*rank)).or_default().push(i);
    }
    let shortfalls: Vec<Shortfall> = HitBucket::ALL
        .into_iter()
        .filter_map(|bucket| {
            let requested = plan.count(bucket);
            let available = pools.get(&bucket).map_or(0, Vec::len);
            (available < requested).then_some(Shortfall {
                bucket,
                requested,
                available,
            })
        })
        .collect();
    if !shortfalls.is_empty() {
        return Err(RewardError::InsufficientBucket(shortfalls));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(plan.total());
    for bucket in HitBucket::ALL {
        let requested = plan.count(bucket);
        if requested == 0 {
            continue;
        }
        let pool = &pools[&bucket];
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), requested)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| SampledQuery {
            bucket,
            source_index: i,
            item: records[i].0.clone(),
        }));
    }
    Ok(out)
}
