//! Online scoring: memory-resident artifacts, a request handler that runs the
//! exact offline feature and student path, and request statistics.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_embedding_store, load_pins, PinStore, QueryRecord, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::features::{assemble_features, Bm25Index, FeatureContext};
use crate::student::{load_student, student_forward, StudentModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub listen: String,
    pub student_path: PathBuf,
    pub index_path: PathBuf,
    pub pins_path: PathBuf,
    pub query_embeddings_path: Option<PathBuf>,
    pub max_batch: usize,
    pub request_timeout_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8080".into(),
            student_path: PathBuf::from("student/student.json"),
            index_path: PathBuf::from("index.json"),
            pins_path: PathBuf::from("corpus/pins.jsonl"),
            query_embeddings_path: None,
            max_batch: 1000,
            request_timeout_ms: 5000,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_batch == 0 {
            return Err(Error::Validation("max_batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub query_text: String,
    #[serde(default)]
    pub query_id: Option<String>,
    pub pin_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinScore {
    pub pin_id: String,
    pub probs: [f64; NUM_LEVELS],
    /// Expected gain `Σ p_c · 0.25 (c − 1)`.
    pub relevance_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub results: Vec<PinScore>,
    /// Requested pin ids not found in the store.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub requests: u64,
    pub pins_scored: u64,
    pub errors: u64,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
}

/// Request counters and a bounded window of recent handler latencies.
#[derive(Debug, Default)]
pub struct ServiceStats {
    inner: Mutex<StatsInner>,
}

#[derive(Debug, Default)]
struct StatsInner {
    requests: u64,
    pins_scored: u64,
    errors: u64,
    latencies_ms: Vec<f64>,
    next: usize,
}

const LATENCY_WINDOW: usize = 10_000;

/// Nearest-rank percentile of `sorted`, 0 when empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl ServiceStats {
    pub fn record(&self, pins: usize, elapsed: Duration) {
        let mut s = self.inner.lock().expect("stats lock");
        s.requests += 1;
        s.pins_scored += pins as u64;
        let ms = elapsed.as_secs_f64() * 1e3;
        if s.latencies_ms.len() < LATENCY_WINDOW {
            s.latencies_ms.push(ms);
        } else {
            let i = s.next;
            s.latencies_ms[i] = ms;
        }
        s.next = (s.next + 1) % LATENCY_WINDOW;
    }

    pub fn record_error(&self) {
        self.inner.lock().expect("stats lock").errors += 1;
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let s = self.inner.lock().expect("stats lock");
        let mut sorted = s.latencies_ms.clone();
        sorted.sort_by(f64::total_cmp);
        StatsSnapshot {
            requests: s.requests,
            pins_scored: s.pins_scored,
            errors: s.errors,
            latency_p50_ms: percentile(&sorted, 50.0),
            latency_p99_ms: percentile(&sorted, 99.0),
        }
    }
}

/// Read-only scoring state plus statistics.
#[derive(Debug)]
pub struct OnlineScorer {
    pub model: StudentModel,
    pub ctx: FeatureContext,
    pub pins: PinStore,
    pub max_batch: usize,
    pub stats: ServiceStats,
}

impl OnlineScorer {
    pub fn new(model: StudentModel, ctx: FeatureContext, pins: PinStore, max_batch: usize) -> Result<Self> {
        if ctx.layout_hash != model.layout_hash {
            return Err(Error::LayoutMismatch {
                expected: model.layout_hash,
                actual: ctx.layout_hash,
            });
        }
        if max_batch == 0 {
            return Err(Error::Validation("max_batch must be at least 1".into()));
        }
        Ok(OnlineScorer {
            model,
            ctx,
            pins,
            max_batch,
            stats: ServiceStats::default(),
        })
    }

    /// Loads every artifact named by `config`, failing on the first one that
    /// is missing or inconsistent.
    pub fn load(config: &ServiceConfig) -> Result<Self> {
        config.validate()?;
        let model = load_student(&config.student_path, None)?;
        let index = Bm25Index::load(&config.index_path)?;
        let pins = PinStore::new(load_pins(&config.pins_path)?)?;
        let layout = model.config.layout.clone();
        let query_embeddings = match &config.query_embeddings_path {
            Some(p) => load_embedding_store(p, layout.query_embedding_dim)?,
            None => HashMap::new(),
        };
        let ctx = FeatureContext::new(layout, index, query_embeddings);
        Self::new(model, ctx, pins, config.max_batch)
    }

    /// Scores without touching statistics.
    pub fn score_uncounted(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        if req.pin_ids.len() > self.max_batch {
            return Err(Error::Validation(format!(
                "{} pins exceed the batch limit of {}",
                req.pin_ids.len(),
                self.max_batch
            )));
        }
        let query = QueryRecord {
            query_id: req.query_id.clone().unwrap_or_default(),
            text: req.query_text.clone(),
            query_embedding: None,
        };
        let mut results = Vec::with_capacity(req.pin_ids.len());
        let mut skipped = Vec::new();
        for id in &req.pin_ids {
            let Some(pin) = self.pins.get(id) else {
                skipped.push(id.clone());
                continue;
            };
            let fv = assemble_features(&self.ctx, &query, pin);
            let label = student_forward(&self.model, &fv)?;
            results.push(PinScore {
                pin_id: id.clone(),
                probs: *label.probs(),
                relevance_score: label.expected_gain(),
            });
        }
        Ok(ScoreResponse { results, skipped })
    }

    /// Scores a request and records its handler latency.
    pub fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        let start = Instant::now();
        match self.score_uncounted(req) {
            Ok(r) => {
                self.stats.record(r.results.len(), start.elapsed());
                Ok(r)
            }
            Err(e) => {
                self.stats.record_error();
                Err(e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PinDocument;
    use crate::features::{build_bm25_index, FeatureLayout};
    use crate::student::{StudentConfig, StudentModel};
    use crate::textrep::Field;

    fn scorer() -> OnlineScorer {
        let layout = FeatureLayout {
            query_embedding_dim: 2,
            pin_embedding_dim: 2,
            fields: vec![Field::Title],
            categorical_attrs: vec![],
        };
        let config = StudentConfig {
            layout: layout.clone(),
            d_num: 2,
            d_cat: 2,
            hidden: [4, 4],
        };
        let model = StudentModel::init(config, vec![], 1).unwrap();
        let mut p1 = PinDocument::new("p1");
        p1.title = "red dress".into();
        let mut p2 = PinDocument::new("p2");
        p2.title = "blue sofa".into();
        let pins = vec![p1, p2];
        let ctx = FeatureContext::new(layout, build_bm25_index(&pins).unwrap(), HashMap::new());
        OnlineScorer::new(model, ctx, PinStore::new(pins).unwrap(), 10).unwrap()
    }

    fn req(pins: &[&str]) -> ScoreRequest {
        ScoreRequest {
            query_text: "red dress".into(),
            query_id: None,
            pin_ids: pins.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn empty_unknown_and_order() {
        let s = scorer();
        let r = s.score(&req(&[])).unwrap();
        assert!(r.results.is_empty() && r.skipped.is_empty());
        let r = s.score(&req(&["p2", "nope", "p1"])).unwrap();
        assert_eq!(r.skipped, vec!["nope".to_string()]);
        let ids: Vec<_> = r.results.iter().map(|x| x.pin_id.as_str()).collect();
        assert_eq!(ids, ["p2", "p1"]);
        for x in &r.results {
            assert!((x.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.score(&req(&["p1", "p2"])).unwrap(), s.score(&req(&["p1", "p2"])).unwrap());
        assert!(s.score(&req(&["p1"; 11])).is_err());
        let snap = s.stats.snapshot();
        assert_eq!(snap.requests, 4);
        assert_eq!(snap.errors, 1);
        assert!(snap.latency_p50_ms <= snap.latency_p99_ms);
    }

    #[test]
    fn matches_offline_path() {
        let s = scorer();
        let r = s.score(&req(&["p1"])).unwrap();
        let q = QueryRecord::new("", "red dress");
        let fv = assemble_features(&s.ctx, &q, s.pins.get("p1").unwrap());
        let offline = student_forward(&s.model, &fv).unwrap();
        assert_eq!(&r.results[0].probs, offline.probs());
        assert_eq!(r.results[0].relevance_score, offline.expected_gain());
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[], 99.0), 0.0);
        assert_eq!(percentile(&[3.0], 1.0), 3.0);
    }
}
