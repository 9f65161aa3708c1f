//! Seeded synthetic corpus with a known relevance oracle.
//!
//! Every query and pin carries a hidden code of five binary facets. Each
//! facet value has a few synonymous surface words, and each pin field family
//! shows exactly one facet:
//!
//! | facet | pin fields                         |
//! |-------|------------------------------------|
//! | 0     | synthetic caption                  |
//! | 1     | title, description                 |
//! | 2     | link title, link description       |
//! | 3     | board titles                       |
//! | 4     | engaged query tokens               |
//!
//! A query's text holds one word per facet. Affinity is the weighted count of
//! facets on which query and pin agree, and the true level is a fixed tier of
//! the affinity. Pairs are drawn by first drawing a level from the tier
//! priors, so observed label frequencies follow the priors exactly in
//! expectation.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    write_jsonl, EmbeddingRecord, EngagementRecord, PinDocument, QueryRecord, RaterAnnotation,
    NUM_LEVELS,
};
use crate::error::{Error, Result};
use crate::neuralcore::seeded_rng;

pub const NUM_FACETS: usize = 5;
const CODES: usize = 1 << NUM_FACETS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_queries: usize,
    pub n_pins: usize,
    pub n_annotations: usize,
    pub n_engagement_pairs: usize,
    /// Surface words per facet value.
    pub synonyms: usize,
    /// Size of the shared filler vocabulary.
    pub n_fillers: usize,
    pub fillers_per_field: usize,
    pub facet_weights: [u32; NUM_FACETS],
    /// Level = 1 + number of cut points the affinity reaches.
    pub tier_cuts: [u32; NUM_LEVELS - 1],
    pub tier_priors: [f64; NUM_LEVELS],
    pub n_raters: usize,
    /// Probability that a rater reports a neighbouring level.
    pub rater_noise: f64,
    pub embedding_dim: usize,
    pub embedding_noise: f64,
    pub missing_pin_embedding: f64,
    pub mean_impressions: f64,
    /// Engagements per impression at each true level.
    pub engagement_rates: [f64; NUM_LEVELS],
    pub n_locales: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            n_queries: 10_000,
            n_pins: 50_000,
            n_annotations: 75_000,
            n_engagement_pairs: 500_000,
            synonyms: 4,
            n_fillers: 30,
            fillers_per_field: 1,
            facet_weights: [4, 3, 2, 2, 1],
            tier_cuts: [5, 7, 9, 11],
            tier_priors: [0.3, 0.25, 0.2, 0.15, 0.1],
            n_raters: 3,
            rater_noise: 0.3,
            embedding_dim: 16,
            embedding_noise: 1.0,
            missing_pin_embedding: 0.05,
            mean_impressions: 20.0,
            engagement_rates: [0.01, 0.03, 0.06, 0.10, 0.15],
            n_locales: 4,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 || self.n_pins == 0 || self.synonyms == 0 || self.n_raters == 0 {
            return Err(Error::Validation(
                "queries, pins, synonyms and raters must be positive".into(),
            ));
        }
        if (self.tier_priors.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || self.tier_priors.iter().any(|p| *p < 0.0)
        {
            return Err(Error::Validation("tier priors must form a distribution".into()));
        }
        if !(0.0..=1.0).contains(&self.rater_noise)
            || !(0.0..=1.0).contains(&self.missing_pin_embedding)
        {
            return Err(Error::Validation("probabilities must lie in [0, 1]".into()));
        }
        for level in 1..=NUM_LEVELS as u8 {
            if self.tier_priors[level as usize - 1] > 0.0 && self.patterns_for(level).is_empty() {
                return Err(Error::Validation(format!(
                    "no facet agreement pattern reaches level {level}"
                )));
            }
        }
        Ok(())
    }

    /// Distinct surface tokens the generator can emit.
    pub fn vocab_size(&self) -> usize {
        NUM_FACETS * 2 * self.synonyms + self.n_fillers
    }

    pub fn affinity(&self, agreement: usize) -> u32 {
        (0..NUM_FACETS)
            .filter(|s| agreement >> s & 1 == 1)
            .map(|s| self.facet_weights[s])
            .sum()
    }

    pub fn tier(&self, affinity: u32) -> u8 {
        1 + self.tier_cuts.iter().filter(|&&c| affinity >= c).count() as u8
    }

    /// True level of a query and pin given their facet codes.
    pub fn oracle_level(&self, query_code: usize, pin_code: usize) -> u8 {
        let agreement = !(query_code ^ pin_code) & (CODES - 1);
        self.tier(self.affinity(agreement))
    }

    fn patterns_for(&self, level: u8) -> Vec<usize> {
        (0..CODES)
            .filter(|&m| self.tier(self.affinity(m)) == level)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub query_id: String,
    pub pin_id: String,
    pub level: u8,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub queries: Vec<QueryRecord>,
    pub pins: Vec<PinDocument>,
    pub annotations: Vec<RaterAnnotation>,
    pub engagement: Vec<EngagementRecord>,
    pub query_embeddings: Vec<EmbeddingRecord>,
    /// Truth for every annotated pair, then every engagement pair.
    pub truth: Vec<TruthRecord>,
    pub query_codes: Vec<usize>,
    pub pin_codes: Vec<usize>,
}

fn facet_word(facet: usize, value: usize, synonym: usize) -> String {
    format!("s{facet}v{value}w{synonym}")
}

fn filler(k: usize) -> String {
    format!("f{k}")
}

pub fn query_id(i: usize) -> String {
    format!("q{i:05}")
}

pub fn pin_id(i: usize) -> String {
    format!("p{i:06}")
}

fn bit(code: usize, facet: usize) -> usize {
    code >> facet & 1
}

struct Gen<'a> {
    cfg: &'a SyntheticConfig,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn word(&mut self, facet: usize, code: usize) -> String {
        let y = self.rng.random_range(0..self.cfg.synonyms);
        facet_word(facet, bit(code, facet), y)
    }

    fn field_text(&mut self, facet: usize, code: usize) -> String {
        let mut words = vec![self.word(facet, code)];
        for _ in 0..self.cfg.fillers_per_field {
            if self.cfg.n_fillers > 0 {
                words.push(filler(self.rng.random_range(0..self.cfg.n_fillers)));
            }
        }
        words.shuffle(&mut self.rng);
        words.join(" ")
    }

    fn embedding(&mut self, projection: &[[f64; NUM_FACETS]], code: usize) -> Vec<f64> {
        let noise = Normal::new(0.0, self.cfg.embedding_noise.max(0.0)).expect("valid sigma");
        projection
            .iter()
            .map(|row| {
                let signal: f64 = (0..NUM_FACETS)
                    .map(|s| row[s] * if bit(code, s) == 1 { 1.0 } else { -1.0 })
                    .sum();
                signal + noise.sample(&mut self.rng)
            })
            .collect()
    }

    fn rate(&mut self, level: u8) -> f64 {
        self.cfg.engagement_rates[level as usize - 1].clamp(0.0, 1.0)
    }

    fn engagement(&mut self, qid: &str, pid: &str, level: u8) -> EngagementRecord {
        let lambda = self.cfg.mean_impressions.max(0.0);
        let impressions = if lambda > 0.0 {
            1 + Poisson::new(lambda).expect("positive mean").sample(&mut self.rng) as u64
        } else {
            1
        };
        let p = self.rate(level);
        let engaged = Binomial::new(impressions, p).expect("p in range").sample(&mut self.rng);
        let repins = Binomial::new(engaged, 0.5).expect("p in range").sample(&mut self.rng);
        EngagementRecord {
            query_id: qid.to_string(),
            pin_id: pid.to_string(),
            repins,
            long_clicks: engaged - repins,
            impressions,
        }
    }

    fn rater(&mut self, level: u8) -> u8 {
        if self.rng.random_bool(self.cfg.rater_noise) {
            let up = self.rng.random_bool(0.5);
            match (level, up) {
                (1, _) => 2,
                (5, _) => 4,
                (l, true) => l + 1,
                (l, false) => l - 1,
            }
        } else {
            level
        }
    }
}

/// Generates a corpus. The same configuration always yields the same corpus.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut g = Gen {
        cfg,
        rng: seeded_rng(cfg.seed),
    };
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let scale = 1.0 / (NUM_FACETS as f64).sqrt();
    let projection: Vec<[f64; NUM_FACETS]> = (0..cfg.embedding_dim)
        .map(|_| std::array::from_fn(|_| std_normal.sample(&mut g.rng) * scale))
        .collect();

    let query_codes: Vec<usize> = (0..cfg.n_queries).map(|_| g.rng.random_range(0..CODES)).collect();
    let pin_codes: Vec<usize> = (0..cfg.n_pins).map(|_| g.rng.random_range(0..CODES)).collect();

    let mut queries = Vec::with_capacity(cfg.n_queries);
    let mut query_embeddings = Vec::with_capacity(cfg.n_queries);
    for (i, &code) in query_codes.iter().enumerate() {
        let mut words: Vec<String> = (0..NUM_FACETS).map(|s| g.word(s, code)).collect();
        words.shuffle(&mut g.rng);
        queries.push(QueryRecord::new(query_id(i), words.join(" ")));
        query_embeddings.push(EmbeddingRecord {
            id: query_id(i),
            vector: g.embedding(&projection, code),
        });
    }

    let mut pins = Vec::with_capacity(cfg.n_pins);
    for (i, &code) in pin_codes.iter().enumerate() {
        let mut pin = PinDocument::new(pin_id(i));
        pin.synthetic_caption = g.field_text(0, code);
        pin.title = g.field_text(1, code);
        pin.description = g.field_text(1, code);
        pin.link_title = g.field_text(2, code);
        pin.link_description = g.field_text(2, code);
        pin.board_titles = vec![g.field_text(3, code)];
        pin.engaged_query_tokens = g.field_text(4, code).split(' ').map(String::from).collect();
        pin.engaged_query_tokens.dedup();
        let emb = g.embedding(&projection, code);
        if !g.rng.random_bool(cfg.missing_pin_embedding) {
            pin.pin_embedding = Some(emb);
        }
        pin.categorical_attrs
            .insert("category".into(), format!("c{}", bit(code, 0)));
        if cfg.n_locales > 0 {
            let l = g.rng.random_range(0..cfg.n_locales);
            pin.categorical_attrs.insert("locale".into(), format!("l{l}"));
        }
        pins.push(pin);
    }

    let mut by_code: Vec<Vec<usize>> = vec![Vec::new(); CODES];
    for (i, &c) in pin_codes.iter().enumerate() {
        by_code[c].push(i);
    }
    let patterns: Vec<Vec<usize>> = (1..=NUM_LEVELS as u8).map(|l| cfg.patterns_for(l)).collect();
    let level_dist = rand_distr::weighted::WeightedIndex::new(cfg.tier_priors)
        .map_err(|e| Error::Validation(format!("tier priors: {e}")))?;

    let draw_pair = |g: &mut Gen<'_>| -> (usize, usize, u8) {
        loop {
            let level = level_dist.sample(&mut g.rng) as u8 + 1;
            let q = g.rng.random_range(0..cfg.n_queries);
            let pats = &patterns[level as usize - 1];
            let agreement = pats[g.rng.random_range(0..pats.len())];
            let code = query_codes[q] ^ (!agreement & (CODES - 1));
            let group = &by_code[code];
            if group.is_empty() {
                continue;
            }
            let p = group[g.rng.random_range(0..group.len())];
            debug_assert_eq!(cfg.oracle_level(query_codes[q], pin_codes[p]), level);
            return (q, p, level);
        }
    };

    let mut annotations = Vec::with_capacity(cfg.n_annotations);
    let mut truth = Vec::with_capacity(cfg.n_annotations + cfg.n_engagement_pairs);
    let mut engagement = Vec::with_capacity(cfg.n_annotations + cfg.n_engagement_pairs);
    for _ in 0..cfg.n_annotations {
        let (q, p, level) = draw_pair(&mut g);
        let ratings = (0..cfg.n_raters).map(|_| g.rater(level)).collect();
        let (qid, pid) = (query_id(q), pin_id(p));
        engagement.push(g.engagement(&qid, &pid, level));
        annotations.push(RaterAnnotation {
            query_id: qid.clone(),
            pin_id: pid.clone(),
            ratings,
        });
        truth.push(TruthRecord {
            query_id: qid,
            pin_id: pid,
            level,
        });
    }
    for _ in 0..cfg.n_engagement_pairs {
        let (q, p, level) = draw_pair(&mut g);
        let (qid, pid) = (query_id(q), pin_id(p));
        engagement.push(g.engagement(&qid, &pid, level));
        truth.push(TruthRecord {
            query_id: qid,
            pin_id: pid,
            level,
        });
    }

    Ok(SyntheticCorpus {
        config: cfg.clone(),
        queries,
        pins,
        annotations,
        engagement,
        query_embeddings,
        truth,
        query_codes,
        pin_codes,
    })
}

pub const QUERIES_FILE: &str = "queries.jsonl";
pub const PINS_FILE: &str = "pins.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const ENGAGEMENT_FILE: &str = "engagement.jsonl";
pub const QUERY_EMBEDDINGS_FILE: &str = "query_embeddings.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";

impl SyntheticCorpus {
    /// Oracle level by ids, for pairs built from this corpus's id scheme.
    pub fn oracle(&self) -> HashMap<(String, String), u8> {
        self.truth
            .iter()
            .map(|t| ((t.query_id.clone(), t.pin_id.clone()), t.level))
            .collect()
    }

    pub fn level_of(&self, query_index: usize, pin_index: usize) -> u8 {
        self.config
            .oracle_level(self.query_codes[query_index], self.pin_codes[pin_index])
    }

    /// Writes the raw corpus files (pins without engagement folded in).
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(dir.join(QUERIES_FILE), &self.queries)?;
        write_jsonl(dir.join(PINS_FILE), &self.pins)?;
        write_jsonl(dir.join(ANNOTATIONS_FILE), &self.annotations)?;
        write_jsonl(dir.join(ENGAGEMENT_FILE), &self.engagement)?;
        write_jsonl(dir.join(QUERY_EMBEDDINGS_FILE), &self.query_embeddings)?;
        write_jsonl(dir.join(TRUTH_FILE), &self.truth)?;
        Ok(())
    }
}
