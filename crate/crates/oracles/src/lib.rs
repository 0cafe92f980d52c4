//! Test oracles that recompute jointspace quantities by independent routes:
//! extended-precision forward passes for finite differences, brute-force
//! ranking and metric enumeration, and direct n-gram counting.

pub mod dd;

use std::collections::{BTreeSet, HashMap};

use jointspace_core::encoders::FeatureMatrix;
use jointspace_core::jointspace::ProjectionModel;

use dd::Dd;

fn project_dd(w: &[f64], b: &[f64], x: &[f64], normalize: bool) -> Vec<Dd> {
    let d = b.len();
    let v = x.len();
    let mut z: Vec<Dd> = (0..d)
        .map(|r| {
            let mut acc = Dd::new(b[r]);
            for c in 0..v {
                acc = acc + Dd::new(w[r * v + c]) * Dd::new(x[c]);
            }
            acc
        })
        .collect();
    if normalize {
        let n = z.iter().fold(Dd::ZERO, |acc, &q| acc + q * q).sqrt();
        if n.hi > 0.0 {
            z.iter_mut().for_each(|q| *q = *q / n);
        }
    }
    z
}

/// Symmetric contrastive loss of an aligned batch in double-double, computed
/// from the raw parameters without touching the library's forward path.
pub fn extended_loss(model: &ProjectionModel, audio: &FeatureMatrix, text: &FeatureMatrix) -> Dd {
    let n = audio.n();
    let ea: Vec<Vec<Dd>> = (0..n)
        .map(|i| {
            project_dd(
                model.w_audio.as_slice(),
                &model.b_audio,
                audio.values.row(i),
                model.normalize,
            )
        })
        .collect();
    let et: Vec<Vec<Dd>> = (0..n)
        .map(|i| {
            project_dd(
                model.w_text.as_slice(),
                &model.b_text,
                text.values.row(i),
                model.normalize,
            )
        })
        .collect();
    let s = Dd::new(model.log_scale).exp();
    let logits: Vec<Vec<Dd>> = et
        .iter()
        .map(|t| {
            ea.iter()
                .map(|a| s * t.iter().zip(a).fold(Dd::ZERO, |acc, (&x, &y)| acc + x * y))
                .collect()
        })
        .collect();
    let shift = logits.iter().flatten().map(|v| v.hi).fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<Vec<Dd>> = logits
        .iter()
        .map(|row| row.iter().map(|&v| (v - Dd::new(shift)).exp()).collect())
        .collect();
    let mut total = Dd::ZERO;
    for i in 0..n {
        let row_sum = ex[i].iter().fold(Dd::ZERO, |acc, &v| acc + v);
        let col_sum = (0..n).fold(Dd::ZERO, |acc, r| acc + ex[r][i]);
        let lse_row = Dd::new(shift) + row_sum.ln();
        let lse_col = Dd::new(shift) + col_sum.ln();
        total = total + (lse_row - logits[i][i]) + (lse_col - logits[i][i]);
    }
    total / Dd::new(2.0 * n as f64)
}

/// Central differences of [`extended_loss`] for every parameter, in
/// checkpoint order (`W_a, b_a, W_t, b_t, log_scale`).
pub fn finite_difference_gradient(
    model: &ProjectionModel,
    audio: &FeatureMatrix,
    text: &FeatureMatrix,
    h: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.n_params());
    for slot in 0..5 {
        for i in 0..model.slices()[slot].len() {
            let p = model.slices()[slot][i];
            let mut plus = model.clone();
            plus.slices_mut()[slot][i] = p + h;
            let mut minus = model.clone();
            minus.slices_mut()[slot][i] = p - h;
            // the step actually taken after rounding p ± h
            let step = Dd::new(p + h) - Dd::new(p - h);
            let diff = extended_loss(&plus, audio, text) - extended_loss(&minus, audio, text);
            out.push((diff / step).to_f64());
        }
    }
    out
}

/// `|a − b| / max(|a|, |b|)`, with 0 for two exact zeros.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Ranking by repeated arg-max (highest score, then smallest id).
pub fn selection_ranking(scores: &[(String, f64)], n: usize) -> Vec<(String, f64)> {
    let mut remaining: Vec<(String, f64)> = scores.to_vec();
    let mut out = Vec::new();
    while !remaining.is_empty() && out.len() < n {
        let mut best = 0;
        for k in 1..remaining.len() {
            let (ref id, s) = remaining[k];
            let (ref bid, bs) = remaining[best];
            if s > bs || (s == bs && id < bid) {
                best = k;
            }
        }
        out.push(remaining.remove(best));
    }
    out
}

/// AP@k from the 1-based ranks of the relevant items.
pub fn ap_from_ranks(relevant_ranks: &[usize], n_relevant: usize, k: usize) -> f64 {
    let mut ranks: Vec<usize> = relevant_ranks.iter().copied().filter(|&r| r <= k).collect();
    ranks.sort_unstable();
    let sum: f64 = ranks.iter().enumerate().map(|(j, &r)| (j + 1) as f64 / r as f64).sum();
    sum / n_relevant.min(k) as f64
}

/// R@k from each query's best relevant rank (1-based).
pub fn recall_from_best_ranks(best_ranks: &[usize], k: usize) -> f64 {
    best_ranks.iter().filter(|&&r| r <= k).count() as f64 / best_ranks.len() as f64
}

/// Every way to place `n_rel` relevant items among `n_slots` ranks.
pub fn placements(n_slots: usize, n_rel: usize) -> Vec<BTreeSet<usize>> {
    let mut out = Vec::new();
    for mask in 0u32..(1 << n_slots) {
        if mask.count_ones() as usize == n_rel {
            out.push((0..n_slots).filter(|i| mask & (1 << i) != 0).map(|i| i + 1).collect());
        }
    }
    out
}

fn ngram_counts(text: &str, lo: usize, hi: usize) -> HashMap<String, f64> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase();
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    let mut m = HashMap::new();
    for n in lo..=hi {
        if words.len() < n {
            continue;
        }
        for i in 0..=words.len() - n {
            *m.entry(words[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        }
    }
    m
}

fn sparse_cosine<K: std::hash::Hash + Eq>(ca: &HashMap<K, f64>, cb: &HashMap<K, f64>) -> f64 {
    let dot: f64 = ca.iter().map(|(k, v)| v * cb.get(k).copied().unwrap_or(0.0)).sum();
    let na: f64 = ca.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = cb.values().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Cosine of two captions' word n-gram count vectors, counted with a hash map
/// (no hashing into buckets).
pub fn ngram_cosine(a: &str, b: &str, lo: usize, hi: usize) -> f64 {
    sparse_cosine(&ngram_counts(a, lo, hi), &ngram_counts(b, lo, hi))
}

/// FNV-1a 64 written out from its published offset basis and prime.
pub fn fnv1a64_reference(bytes: &[u8]) -> u64 {
    bytes.iter().fold(14_695_981_039_346_656_037u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(1_099_511_628_211)
    })
}

/// Like [`ngram_cosine`] but folding n-grams into `n_buckets` FNV-1a buckets.
pub fn hashed_ngram_cosine(a: &str, b: &str, lo: usize, hi: usize, n_buckets: u64) -> f64 {
    let fold = |m: HashMap<String, f64>| {
        let mut out: HashMap<u64, f64> = HashMap::new();
        for (gram, c) in m {
            *out.entry(fnv1a64_reference(gram.as_bytes()) % n_buckets).or_insert(0.0) += c;
        }
        out
    };
    sparse_cosine(&fold(ngram_counts(a, lo, hi)), &fold(ngram_counts(b, lo, hi)))
}

/// Plain softmax without max-shifting.
pub fn scalar_softmax(logits: &[f64]) -> Vec<f64> {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / z).collect()
}
