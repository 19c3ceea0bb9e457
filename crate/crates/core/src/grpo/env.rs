//! Synthetic query-rewrite environment for the toy GRPO loop.
//!
//! A small knowledge base of invented entities is embedded with the stub
//! gateway. Each action is a rewrite template that turns a query into a
//! refiner rollout; the rollout is parsed, its refined query is retrieved
//! against the synthetic index, and the reward is the refiner's total reward
//! for the gold entity's hit rank. All rewards are computed once up front.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RewardEnvironment;
use crate::fusion::{build_kb_vector, build_query_vector, FusionConfig, FusionError};
use crate::gateway::{GatewayError, ModelGateway, StubGateway};
use crate::index::{IndexError, KbEntry, VectorIndex};
use crate::refiner::{entity_hit_rank, score_rollout, RewardError, RewardPolicy};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// One rewrite action. `rewrite` may use `{question}`, `{hint}` (the gold
/// entity's name) and `{decoy}` (another entity's name).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteTemplate {
    pub name: String,
    pub rewrite: String,
    /// When false the rollout omits the think/answer structure.
    #[serde(default = "default_true")]
    pub well_formed: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewriteEnvSpec {
    pub seed: u64,
    pub num_entities: usize,
    pub sections_per_entity: usize,
    pub num_queries: usize,
    pub d_vis: usize,
    pub d_text: usize,
    pub alpha: f64,
    pub reward_depth: usize,
    pub templates: Vec<RewriteTemplate>,
}

impl Default for RewriteEnvSpec {
    fn default() -> Self {
        let t = |name: &str, rewrite: &str, well_formed| RewriteTemplate {
            name: name.into(),
            rewrite: rewrite.into(),
            well_formed,
        };
        Self {
            seed: 7,
            num_entities: 1000,
            sections_per_entity: 2,
            num_queries: 8,
            d_vis: 32,
            d_text: 256,
            alpha: 0.1,
            reward_depth: 200,
            templates: vec![
                t("verbatim", "{question}", true),
                t("entity_hint", "{hint} {question}", true),
                t("decoy_hint", "{decoy} {question}", true),
                t("unstructured", "{question}", false),
            ],
        }
    }
}

impl RewriteEnvSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidSpec(m.into()));
        if self.num_entities < 2 {
            return bad("num_entities must be >= 2");
        }
        if self.sections_per_entity == 0 {
            return bad("sections_per_entity must be >= 1");
        }
        if self.num_queries == 0 {
            return bad("num_queries must be >= 1");
        }
        if self.d_vis == 0 || self.d_text == 0 {
            return bad("d_vis and d_text must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.reward_depth == 0 {
            return bad("reward_depth must be >= 1");
        }
        if self.templates.len() < 2 {
            return bad("at least 2 templates are required");
        }
        Ok(())
    }
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mir", "tan", "vek", "su", "dra", "pel", "zo", "qui", "ren", "bax", "ol", "fen",
    "tho", "ny",
];

const QUESTIONS: [&str; 4] = [
    "what is shown in this picture",
    "which landmark appears in the photo",
    "what species is this",
    "when was this built",
];

/// Made-up single-token name, unique by its numeric suffix.
fn entity_name(rng: &mut ChaCha8Rng, index: usize) -> String {
    let mut name: String = (0..3)
        .map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())])
        .collect();
    name.push_str(&index.to_string());
    name
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvQuery {
    pub question: String,
    pub image_ref: String,
    pub gold_entity: String,
    pub hint: String,
    pub decoy: String,
}

/// Reward and hit rank of one `(query, action)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardCell {
    pub rollout: String,
    pub reward: f64,
    pub hit_rank: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RewriteEnvironment {
    spec: RewriteEnvSpec,
    queries: Vec<EnvQuery>,
    table: Vec<Vec<RewardCell>>,
}

fn rollout_text(template: &RewriteTemplate, q: &EnvQuery) -> String {
    let rewritten = template
        .rewrite
        .replace("{question}", &q.question)
        .replace("{hint}", &q.hint)
        .replace("{decoy}", &q.decoy);
    if template.well_formed {
        format!(
            "<think>The question needs the entity in the image.</think><answer>{}</answer>",
            serde_json::json!({ "query": rewritten })
        )
    } else {
        rewritten
    }
}

impl RewriteEnvironment {
    pub fn build(spec: RewriteEnvSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let gateway = StubGateway::new(spec.seed, spec.d_vis, spec.d_text);
        let fusion = FusionConfig {
            alpha: spec.alpha,
            d_vis: spec.d_vis,
            d_text: spec.d_text,
            per_modality_normalize: true,
        };

        let names: Vec<String> = (0..spec.num_entities)
            .map(|i| entity_name(&mut rng, i))
            .collect();
        let mut index = VectorIndex::new(fusion.fused_dim())?;
        let mut entries = Vec::with_capacity(spec.num_entities * spec.sections_per_entity);
        for (e, name) in names.iter().enumerate() {
            let image_ref = format!("kb/{name}.jpg");
            let img = gateway.embed_image(&image_ref)?;
            for s in 0..spec.sections_per_entity {
                let text = if s == 0 {
                    format!("{name} overview. {name} archive record {name}")
                } else {
                    format!("{name} part {s}. Catalogued records for {name}")
                };
                let txt = gateway.embed_text(&text)?;
                entries.push(KbEntry {
                    entry_id: (e * spec.sections_per_entity + s) as u64,
                    entity_id: format!("E{e}"),
                    article_id: format!("A{e}"),
                    section_id: format!("S{s}"),
                    vector: build_kb_vector(&img, &txt, &fusion)?,
                    section_text: text,
                    image_ref: image_ref.clone(),
                });
            }
        }
        index.add_entries(entries)?;
        index.seal();

        let mut order: Vec<usize> = (0..spec.num_entities).collect();
        order.shuffle(&mut rng);
        let queries: Vec<EnvQuery> = (0..spec.num_queries)
            .map(|i| {
                let gold = order[i % spec.num_entities];
                let decoy = order[(i + spec.num_queries) % spec.num_entities];
                let decoy = if decoy == gold { (gold + 1) % spec.num_entities } else { decoy };
                EnvQuery {
                    question: QUESTIONS[i % QUESTIONS.len()].to_string(),
                    image_ref: format!("queries/photo{i}.jpg"),
                    gold_entity: format!("E{gold}"),
                    hint: names[gold].clone(),
                    decoy: names[decoy].clone(),
                }
            })
            .collect();

        let policy = RewardPolicy {
            skip_retrieval_on_malformed: true,
            depth: spec.reward_depth,
        };
        // Enough sections to cover `reward_depth` distinct entities.
        let k = (spec.reward_depth * spec.sections_per_entity).min(index.len());
        let mut table = Vec::with_capacity(queries.len());
        for q in &queries {
            let img = gateway.embed_image(&q.image_ref)?;
            let mut row = Vec::with_capacity(spec.templates.len());
            for template in &spec.templates {
                let rollout = rollout_text(template, q);
                let (_, record) = score_rollout(&rollout, &policy, |refined| {
                    let refined = refined.unwrap_or("");
                    let txt = gateway.embed_text(refined)?;
                    let query_vec = build_query_vector(&img, &txt, &fusion)?;
                    let hits = index.search_topk(&query_vec, k)?;
                    let entities = hits.iter().map(|c| {
                        index
                            .entry(c.entry_id)
                            .map(|m| m.entity_id.as_str())
                            .unwrap_or("")
                    });
                    Ok::<_, EnvError>(entity_hit_rank(entities, &q.gold_entity, spec.reward_depth))
                })?;
                row.push(RewardCell {
                    rollout,
                    reward: record.total,
                    hit_rank: record.hit_rank,
                });
            }
            table.push(row);
        }
        Ok(Self {
            spec,
            queries,
            table,
        })
    }

    pub fn spec(&self) -> &RewriteEnvSpec {
        &self.spec
    }

    pub fn queries(&self) -> &[EnvQuery] {
        &self.queries
    }

    pub fn cell(&self, query: usize, action: usize) -> &RewardCell {
        &self.table[query][action]
    }

    /// Mean reward of each action over all queries.
    pub fn expected_rewards(&self) -> Vec<f64> {
        let n = self.table.len() as f64;
        (0..self.spec.templates.len())
            .map(|a| self.table.iter().map(|row| row[a].reward).sum::<f64>() / n)
            .collect()
    }
}

impl RewardEnvironment for RewriteEnvironment {
    fn action_names(&self) -> Vec<String> {
        self.spec.templates.iter().map(|t| t.name.clone()).collect()
    }

    fn num_queries(&self) -> usize {
        self.queries.len()
    }

    fn reward(&self, query: usize, action: usize) -> f64 {
        self.table[query][action].reward
    }
}
