//! Offline evaluation: 5-scale accuracy, AUROC at the 3+/4+/5+
//! binarizations, nDCG@K normalized by an all-L5 ideal list, and precision@K
//! over mapped gains.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{level_index, SoftLabel};
use crate::error::{Error, Result};

pub const THRESHOLDS: [u8; 3] = [3, 4, 5];

/// Gain of relevance level `L`: `0.25 (L − 1)`.
pub fn relevance_gain(level: u8) -> Result<f64> {
    Ok(0.25 * level_index(level)? as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub predicted: SoftLabel,
    pub truth: SoftLabel,
}

/// Fraction of examples whose predicted and true argmax levels agree.
pub fn accuracy(scored: &[ScoredExample]) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::Empty("accuracy over no examples".into()));
    }
    let hits = scored
        .iter()
        .filter(|s| s.predicted.argmax_level() == s.truth.argmax_level())
        .count();
    Ok(hits as f64 / scored.len() as f64)
}

/// Probability mass at or above level `t`.
pub fn binarized_score(predicted: &SoftLabel, t: u8) -> Result<f64> {
    let from = level_index(t)?;
    Ok(predicted.probs()[from..].iter().sum())
}

/// Mann–Whitney AUROC through average ranks; ties count one half.
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let p = positives.iter().filter(|&&b| b).count();
    let n = positives.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auroc needs both classes (positives {p}, negatives {n})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; a tie group spanning ranks i+1..=j gets (i+1+j)/2.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if positives[k] {
                pos_rank_sum += avg;
            }
        }
        i = j;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Validation("K must be at least 1".into()));
    }
    Ok(())
}

/// `Σ_k gain(L_k) / log2(1 + k)` over the first `K` ranks, divided by the
/// same sum with gain 1 everywhere. Ranks past the list end have gain 0.
pub fn ndcg_at_k(levels: &[u8], k: usize) -> Result<f64> {
    check_k(k)?;
    let mut dcg = 0.0;
    let mut ideal = 0.0;
    for rank in 1..=k {
        let discount = 1.0 / ((1 + rank) as f64).log2();
        if let Some(&l) = levels.get(rank - 1) {
            dcg += relevance_gain(l)? * discount;
        }
        ideal += discount;
    }
    Ok(dcg / ideal)
}

/// Mean gain over the first `K` ranks, padding with gain 0.
pub fn precision_at_k(levels: &[u8], k: usize) -> Result<f64> {
    check_k(k)?;
    let mut sum = 0.0;
    for &l in levels.iter().take(k) {
        sum += relevance_gain(l)?;
    }
    Ok(sum / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub accuracy: f64,
    pub auroc_3plus: Option<f64>,
    pub auroc_4plus: Option<f64>,
    pub auroc_5plus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg_at_k: Option<BTreeMap<usize, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision_at_k: Option<BTreeMap<usize, f64>>,
}

impl EvalReport {
    pub fn auroc(&self, t: u8) -> Option<f64> {
        match t {
            3 => self.auroc_3plus,
            4 => self.auroc_4plus,
            5 => self.auroc_5plus,
            _ => None,
        }
    }
}

/// AUROC at threshold `t`, or `None` when the truth is single-class.
pub fn auroc_at(scored: &[ScoredExample], t: u8) -> Result<Option<f64>> {
    let mut scores = Vec::with_capacity(scored.len());
    let mut positives = Vec::with_capacity(scored.len());
    for s in scored {
        scores.push(binarized_score(&s.predicted, t)?);
        positives.push(s.truth.argmax_level() >= t);
    }
    match auroc(&scores, &positives) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Aggregates every metric. Ranking metrics are averaged over `ranked`
/// lists and left absent when no list is given.
pub fn build_report(
    scored: &[ScoredExample],
    ranked: &[Vec<u8>],
    ks: &[usize],
) -> Result<EvalReport> {
    let mut report = EvalReport {
        n_examples: scored.len(),
        accuracy: accuracy(scored)?,
        auroc_3plus: auroc_at(scored, 3)?,
        auroc_4plus: auroc_at(scored, 4)?,
        auroc_5plus: auroc_at(scored, 5)?,
        ndcg_at_k: None,
        precision_at_k: None,
    };
    if !ranked.is_empty() && !ks.is_empty() {
        let mut ndcg = BTreeMap::new();
        let mut prec = BTreeMap::new();
        for &k in ks {
            let mut n_sum = 0.0;
            let mut p_sum = 0.0;
            for list in ranked {
                n_sum += ndcg_at_k(list, k)?;
                p_sum += precision_at_k(list, k)?;
            }
            ndcg.insert(k, n_sum / ranked.len() as f64);
            prec.insert(k, p_sum / ranked.len() as f64);
        }
        report.ndcg_at_k = Some(ndcg);
        report.precision_at_k = Some(prec);
    }
    Ok(report)
}

/// One ranked item: the query it belongs to, an identifier for stable
/// ordering, the model's score and the true level.
#[derive(Debug, Clone, PartialEq)]
pub struct RankItem {
    pub query_id: String,
    pub item_id: String,
    pub score: f64,
    pub level: u8,
}

/// Groups items by query and sorts each group by descending score (ties by
/// item id), returning the true levels in ranked order. Queries come out in
/// id order.
pub fn ranked_lists(items: &[RankItem]) -> Vec<Vec<u8>> {
    let mut groups: BTreeMap<&str, Vec<&RankItem>> = BTreeMap::new();
    for it in items {
        groups.entry(it.query_id.as_str()).or_default().push(it);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| a.item_id.cmp(&b.item_id))
            });
            g.into_iter().map(|it| it.level).collect()
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Plain-text table with one row per labelled report.
pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let ks: Vec<usize> = rows
        .iter()
        .filter_map(|(_, r)| r.ndcg_at_k.as_ref())
        .flat_map(|m| m.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = write!(
        out,
        "{:<width$}  {:>8}  {:>8}  {:>10}  {:>10}  {:>10}",
        "model", "n", "accuracy", "auroc 3+", "auroc 4+", "auroc 5+"
    );
    for k in &ks {
        let _ = write!(out, "  {:>9}  {:>7}", format!("ndcg@{k}"), format!("p@{k}"));
    }
    out.push('\n');
    for (name, r) in rows {
        let _ = write!(
            out,
            "{:<width$}  {:>8}  {:>8.4}  {:>10}  {:>10}  {:>10}",
            name,
            r.n_examples,
            r.accuracy,
            cell(r.auroc_3plus),
            cell(r.auroc_4plus),
            cell(r.auroc_5plus)
        );
        for k in &ks {
            let n = r.ndcg_at_k.as_ref().and_then(|m| m.get(k).copied());
            let p = r.precision_at_k.as_ref().and_then(|m| m.get(k).copied());
            let _ = write!(out, "  {:>9}  {:>7}", cell(n), cell(p));
        }
        out.push('\n');
    }
    out
}
