//! Exact cosine top-N search and the retrieval metrics R@K and mAP@K.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureMatrix, Modality};
use crate::error::{Error, Result};
use crate::jointspace::{project, EmbeddingMatrix, ProjectionModel};
use crate::linalg::dot;

/// Recall cut-offs reported for every evaluation.
pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
pub const MAP_K: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub ids: Vec<String>,
    pub embeddings: EmbeddingMatrix,
    pub modality: Modality,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, embeddings: EmbeddingMatrix, modality: Modality) -> Result<Self> {
        if ids.len() != embeddings.n() {
            return Err(Error::shape("index ids", embeddings.n(), ids.len()));
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate index id {id:?}")));
            }
        }
        Ok(Self {
            ids,
            embeddings,
            modality,
        })
    }

    /// Projects `feats` with `model` and indexes the rows under `ids`.
    pub fn build(model: &ProjectionModel, feats: &FeatureMatrix, ids: Vec<String>) -> Result<Self> {
        let e = project(model, feats)?;
        let e = if e.normalized {
            e
        } else {
            EmbeddingMatrix::normalized_from(e.values)
        };
        Self::new(ids, e, feats.modality)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// The `n` best items by cosine score, ties broken by ascending id.
pub fn top_n(query: &[f64], index: &EmbeddingIndex, n: usize) -> Result<Vec<Hit>> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if query.len() != index.embeddings.dim() {
        return Err(Error::shape("top_n query", index.embeddings.dim(), query.len()));
    }
    let mut scored: Vec<(f64, &str)> = index
        .embeddings
        .values
        .iter_rows()
        .zip(&index.ids)
        .map(|(row, id)| (dot(query, row), id.as_str()))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.truncate(n);
    Ok(scored
        .into_iter()
        .map(|(score, id)| Hit {
            id: String::from(id),
            score,
        })
        .collect())
}

pub type RelevanceMap = BTreeMap<String, BTreeSet<String>>;

/// Ranked item ids returned for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub query: String,
    pub items: Vec<String>,
}

fn relevant_for<'a>(r: &Ranking, rel: &'a RelevanceMap) -> Result<&'a BTreeSet<String>> {
    rel.get(&r.query)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::MissingRelevance(r.query.clone()))
}

/// Fraction of queries with at least one relevant item in the top `k`.
pub fn recall_at_k(rankings: &[Ranking], rel: &RelevanceMap, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in rankings {
        let relevant = relevant_for(r, rel)?;
        if r.items.iter().take(k).any(|id| relevant.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Denominator of AP@k.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApNorm {
    /// `min(|rel|, k)`; AP@k stays within [0, 1].
    #[default]
    MinRelK,
    /// `|rel|`
    Rel,
}

impl core::str::FromStr for ApNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min_rel_k" => Ok(ApNorm::MinRelK),
            "rel" => Ok(ApNorm::Rel),
            other => Err(Error::invalid(format!("unknown AP normalization {other:?}"))),
        }
    }
}

/// Average precision of one ranking truncated at `k`.
pub fn average_precision_at_k(items: &[String], relevant: &BTreeSet<String>, k: usize, norm: ApNorm) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in items.iter().take(k).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    let denom = match norm {
        ApNorm::MinRelK => relevant.len().min(k),
        ApNorm::Rel => relevant.len(),
    };
    if denom == 0 {
        0.0
    } else {
        sum / denom as f64
    }
}

pub fn map_at_k(rankings: &[Ranking], rel: &RelevanceMap, k: usize, norm: ApNorm) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in rankings {
        total += average_precision_at_k(&r.items, relevant_for(r, rel)?, k, norm);
    }
    Ok(total / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToAudio,
    AudioToText,
}

impl core::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_to_audio" | "t2a" => Ok(Direction::TextToAudio),
            "audio_to_text" | "a2t" => Ok(Direction::AudioToText),
            other => Err(Error::invalid(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub n_queries: usize,
    pub map_at_10: f64,
    pub recall_at: BTreeMap<usize, f64>,
}

/// Runs every query of `queries` against `database` and scores the rankings.
pub fn report(
    queries: &EmbeddingIndex,
    database: &EmbeddingIndex,
    rel: &RelevanceMap,
    direction: Direction,
    norm: ApNorm,
) -> Result<RetrievalReport> {
    let depth = RECALL_KS.iter().copied().max().unwrap_or(1).max(MAP_K);
    let rankings = queries
        .embeddings
        .values
        .iter_rows()
        .zip(&queries.ids)
        .map(|(q, id)| {
            Ok(Ranking {
                query: id.clone(),
                items: top_n(q, database, depth)?.into_iter().map(|h| h.id).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut recall_at = BTreeMap::new();
    for k in RECALL_KS {
        recall_at.insert(k, recall_at_k(&rankings, rel, k)?);
    }
    Ok(RetrievalReport {
        direction,
        n_queries: rankings.len(),
        map_at_10: map_at_k(&rankings, rel, MAP_K, norm)?,
        recall_at,
    })
}

/// Evaluates both retrieval directions over an audio index (one row per
/// unique recording) and a caption index. `caption_audio[i]` names the
/// recording of caption `i`.
///
/// Caption queries have exactly their source recording as relevant; audio
/// queries have every caption of that recording as relevant.
pub fn evaluate_indexes(
    audio: &EmbeddingIndex,
    captions: &EmbeddingIndex,
    caption_audio: &[String],
    direction: Direction,
    norm: ApNorm,
) -> Result<RetrievalReport> {
    if caption_audio.len() != captions.len() {
        return Err(Error::shape("caption_audio", captions.len(), caption_audio.len()));
    }
    let known: BTreeSet<&str> = audio.ids.iter().map(String::as_str).collect();
    let mut rel = RelevanceMap::new();
    for (cap, aud) in captions.ids.iter().zip(caption_audio) {
        if !known.contains(aud.as_str()) {
            return Err(Error::invalid(format!(
                "caption {cap:?} refers to unknown audio {aud:?}"
            )));
        }
        match direction {
            Direction::TextToAudio => {
                rel.entry(cap.clone()).or_default().insert(aud.clone());
            }
            Direction::AudioToText => {
                rel.entry(aud.clone()).or_default().insert(cap.clone());
            }
        }
    }
    match direction {
        Direction::TextToAudio => report(captions, audio, &rel, direction, norm),
        Direction::AudioToText => report(audio, captions, &rel, direction, norm),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use alloc::vec;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| String::from(*s)).collect()
    }

    fn rel(pairs: &[(&str, &[&str])]) -> RelevanceMap {
        pairs
            .iter()
            .map(|(q, items)| (String::from(*q), items.iter().map(|s| String::from(*s)).collect()))
            .collect()
    }

    fn ranking(q: &str, items: &[&str]) -> Ranking {
        Ranking {
            query: q.into(),
            items: ids(items),
        }
    }

    fn eye_index(n: usize) -> EmbeddingIndex {
        EmbeddingIndex::new(
            (0..n).map(|i| format!("item{i}")).collect(),
            EmbeddingMatrix {
                values: Matrix::identity(n),
                normalized: true,
            },
            Modality::Audio,
        )
        .unwrap()
    }

    #[test]
    fn exact_match_ranks_first() {
        let idx = eye_index(3);
        let hits = top_n(&[0.0, 1.0, 0.0], &idx, 3).unwrap();
        assert_eq!(hits[0].id, "item1");
        assert_eq!(hits[0].score, 1.0);
        assert_eq!(top_n(&[0.0, 1.0, 0.0], &idx, 10).unwrap().len(), 3);
    }

    #[test]
    fn ties_by_ascending_id() {
        let idx = EmbeddingIndex::new(
            ids(&["b", "a", "c"]),
            EmbeddingMatrix {
                values: Matrix::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(),
                normalized: true,
            },
            Modality::Text,
        )
        .unwrap();
        let hits = top_n(&[1.0, 0.0], &idx, 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn empty_index_and_bad_ids() {
        let empty = EmbeddingIndex::new(
            vec![],
            EmbeddingMatrix {
                values: Matrix::zeros(0, 2),
                normalized: true,
            },
            Modality::Audio,
        )
        .unwrap();
        assert_eq!(top_n(&[1.0, 0.0], &empty, 1), Err(Error::EmptyIndex));
        let dup = EmbeddingIndex::new(
            ids(&["x", "x"]),
            EmbeddingMatrix {
                values: Matrix::identity(2),
                normalized: true,
            },
            Modality::Audio,
        );
        assert!(dup.is_err());
    }

    #[test]
    fn recall_rank_arithmetic() {
        let r = [ranking("q", &["x", "y", "rel", "z"])];
        let m = rel(&[("q", &["rel"])]);
        assert_eq!(recall_at_k(&r, &m, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&r, &m, 5).unwrap(), 1.0);
        assert_eq!(map_at_k(&r, &m, 10, ApNorm::MinRelK).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn missing_relevance() {
        let r = [ranking("q", &["x"])];
        assert_eq!(
            recall_at_k(&r, &RelevanceMap::new(), 1),
            Err(Error::MissingRelevance("q".into()))
        );
    }

    #[test]
    fn ap_two_relevant() {
        let items = ids(&["n1", "r1", "n2", "n3", "r2", "n4"]);
        let relevant: BTreeSet<String> = ids(&["r1", "r2"]).into_iter().collect();
        let ap = average_precision_at_k(&items, &relevant, 10, ApNorm::MinRelK);
        assert!((ap - 0.45).abs() < 1e-15);
    }

    #[test]
    fn ap_normalizations_differ_when_rel_exceeds_k() {
        let items = ids(&["a", "b"]);
        let relevant: BTreeSet<String> = ids(&["a", "b", "c", "d"]).into_iter().collect();
        assert_eq!(average_precision_at_k(&items, &relevant, 2, ApNorm::MinRelK), 1.0);
        assert_eq!(average_precision_at_k(&items, &relevant, 2, ApNorm::Rel), 0.5);
    }

    #[test]
    fn single_pair_evaluation_is_not_nan() {
        let a = eye_index(1);
        let t = EmbeddingIndex::new(ids(&["cap"]), a.embeddings.clone(), Modality::Text).unwrap();
        for dir in [Direction::TextToAudio, Direction::AudioToText] {
            let r = evaluate_indexes(&a, &t, &ids(&["item0"]), dir, ApNorm::MinRelK).unwrap();
            assert_eq!(r.n_queries, 1);
            assert_eq!(r.map_at_10, 1.0);
            assert!(r.recall_at.values().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn audio_queries_see_all_captions() {
        // two recordings, captions 0,1 -> a0 and 2 -> a1, embeddings aligned
        let audio = EmbeddingIndex::new(
            ids(&["a0", "a1"]),
            EmbeddingMatrix {
                values: Matrix::identity(2),
                normalized: true,
            },
            Modality::Audio,
        )
        .unwrap();
        let captions = EmbeddingIndex::new(
            ids(&["c0", "c1", "c2"]),
            EmbeddingMatrix {
                values: Matrix::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(),
                normalized: true,
            },
            Modality::Text,
        )
        .unwrap();
        let owner = ids(&["a0", "a0", "a1"]);
        let r = evaluate_indexes(&audio, &captions, &owner, Direction::AudioToText, ApNorm::MinRelK).unwrap();
        assert_eq!(r.n_queries, 2);
        assert_eq!(r.map_at_10, 1.0);
        let r = evaluate_indexes(&audio, &captions, &owner, Direction::TextToAudio, ApNorm::MinRelK).unwrap();
        assert_eq!(r.n_queries, 3);
        assert_eq!(r.recall_at[&1], 1.0);
    }
}
