//! Caption metrics: corpus BLEU-1..4, ROUGE-L, a stem-stage METEOR
//! variant, CIDEr-D, their S*_m mean, router accuracy, and the ρ
//! conversion-efficiency ratio. Inputs are raw strings; tokenization is
//! lowercase, punctuation stripped to spaces, whitespace split.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::DatasetRecord;
use crate::error::{HisemError, Result};

pub fn tokenize(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(String::from)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_corpus(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], op: &str) -> Result<()> {
    if cands.is_empty() || cands.len() != refs.len() || refs.iter().any(Vec::is_empty) {
        return Err(HisemError::InvalidArgument(format!(
            "{op}: need a nonempty corpus with at least one reference per candidate"
        )));
    }
    Ok(())
}

fn tokenize_corpus(
    candidates: &[String],
    references: &[Vec<String>],
) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    (
        candidates.iter().map(|c| tokenize(c)).collect(),
        references
            .iter()
            .map(|rs| rs.iter().map(|r| tokenize(r)).collect())
            .collect(),
    )
}

/// Corpus-level BLEU-n: geometric mean of clipped modified precisions for
/// orders 1..=n, times the brevity penalty. Zero precisions are floored
/// at 1e-9; an empty candidate corpus scores 0.
pub fn bleu_n(candidates: &[String], references: &[Vec<String>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(HisemError::InvalidArgument(format!("bleu order {n} not in 1..=4")));
    }
    let (cands, refs) = tokenize_corpus(candidates, references);
    check_corpus(&cands, &refs, "bleu")?;

    let mut c_total = 0usize;
    let mut r_total = 0usize;
    for (c, rs) in cands.iter().zip(&refs) {
        c_total += c.len();
        // closest reference length, ties toward the shorter
        r_total += rs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .unwrap();
    }
    if c_total == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for order in 1..=n {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for (c, rs) in cands.iter().zip(&refs) {
            let cc = ngram_counts(c, order);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in rs {
                for (g, k) in ngram_counts(r, order) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cc {
                total += k;
                clipped += k.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
        let p = if total == 0 || clipped == 0 {
            1e-9
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = if c_total > r_total {
        1.0
    } else {
        (1.0 - r_total as f64 / c_total as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L with the recall-weighted F-measure (β=1.2); max over
/// references, mean over the corpus.
pub fn rouge_l(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    let (cands, refs) = tokenize_corpus(candidates, references);
    check_corpus(&cands, &refs, "rouge_l")?;
    let beta2: f64 = 1.2f64 * 1.2;
    let mut sum = 0.0;
    for (c, rs) in cands.iter().zip(&refs) {
        let mut best: f64 = 0.0;
        for r in rs {
            if c.is_empty() || r.is_empty() {
                continue;
            }
            let l = lcs_len(c, r) as f64;
            let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
            if p + rec > 0.0 {
                best = best.max((1.0 + beta2) * p * rec / (rec + beta2 * p));
            }
        }
        sum += best;
    }
    Ok(100.0 * sum / cands.len() as f64)
}

/// Suffix-stripping stem: drops one of ing/ed/es/s, then collapses a
/// trailing doubled letter ("running" → "runn" → "run").
pub fn stem(w: &str) -> String {
    let mut s = w.to_string();
    for suf in ["ing", "ed", "es", "s"] {
        if s.len() > suf.len() + 1 && s.ends_with(suf) {
            s.truncate(s.len() - suf.len());
            break;
        }
    }
    let b = s.as_bytes();
    if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] {
        s.truncate(s.len() - 1);
    }
    s
}

/// Aligns candidate to reference unigrams in two stages (exact, then
/// stem) and returns (matches, chunks).
fn meteor_align(c: &[String], r: &[String]) -> (usize, usize) {
    let mut pair: Vec<Option<usize>> = vec![None; c.len()];
    let mut used = vec![false; r.len()];
    for stage in 0..2 {
        for (i, cw) in c.iter().enumerate() {
            if pair[i].is_some() {
                continue;
            }
            let key = if stage == 0 { cw.clone() } else { stem(cw) };
            for (j, rw) in r.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let rk = if stage == 0 { rw.clone() } else { stem(rw) };
                if key == rk {
                    pair[i] = Some(j);
                    used[j] = true;
                    break;
                }
            }
        }
    }
    let matched: Vec<(usize, usize)> = pair
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();
    let mut chunks = 0;
    for (k, &(i, j)) in matched.iter().enumerate() {
        if k == 0 || matched[k - 1].0 + 1 != i || matched[k - 1].1 + 1 != j {
            chunks += 1;
        }
    }
    (matched.len(), chunks)
}

/// METEOR without the synonym stage: exact and stem unigram alignment,
/// F = 10PR/(R+9P), fragmentation penalty 0.5·(chunks/m)³.
pub fn meteor_lite(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    let (cands, refs) = tokenize_corpus(candidates, references);
    check_corpus(&cands, &refs, "meteor_lite")?;
    let mut sum = 0.0;
    for (c, rs) in cands.iter().zip(&refs) {
        let mut best: f64 = 0.0;
        for r in rs {
            if c.is_empty() || r.is_empty() {
                continue;
            }
            let (m, chunks) = meteor_align(c, r);
            if m == 0 {
                continue;
            }
            let (p, rec) = (m as f64 / c.len() as f64, m as f64 / r.len() as f64);
            let f = 10.0 * p * rec / (rec + 9.0 * p);
            let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
            best = best.max(f * (1.0 - penalty));
        }
        sum += best;
    }
    Ok(100.0 * sum / cands.len() as f64)
}

/// CIDEr-D: per order n=1..4, TF-IDF n-gram vectors with IDF from the
/// reference corpus, candidate counts clipped against each reference,
/// cosine similarity with a Gaussian length penalty (σ=6), averaged over
/// orders and references, ×10.
pub fn cider_d(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    let (cands, refs) = tokenize_corpus(candidates, references);
    check_corpus(&cands, &refs, "cider_d")?;
    let n_imgs = refs.len() as f64;
    if refs.iter().flatten().collect::<HashSet<_>>().len() < 2 {
        eprintln!("warning: cider_d IDF computed from fewer than 2 distinct references");
    }
    const SIGMA: f64 = 6.0;
    let mut total = 0.0;
    for order in 1..=4 {
        // document frequency: one count per image whose references
        // contain the n-gram
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for rs in &refs {
            let mut seen = HashSet::new();
            for r in rs {
                for g in ngram_counts(r, order).into_keys() {
                    seen.insert(g);
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| {
            n_imgs.ln() - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln()
        };
        let mut order_sum = 0.0;
        for (c, rs) in cands.iter().zip(&refs) {
            let cc = ngram_counts(c, order);
            let c_norm = cc
                .iter()
                .map(|(g, &k)| (k as f64 * idf(g)).powi(2))
                .sum::<f64>()
                .sqrt();
            let mut img = 0.0;
            for r in rs {
                let rc = ngram_counts(r, order);
                let r_norm = rc
                    .iter()
                    .map(|(g, &k)| (k as f64 * idf(g)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if c_norm == 0.0 || r_norm == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (g, &k) in &cc {
                    if let Some(&rk) = rc.get(g) {
                        let w = idf(g);
                        // clip the candidate term frequency at the
                        // reference's
                        dot += (k.min(rk) as f64 * w) * (rk as f64 * w);
                    }
                }
                let delta = c.len() as f64 - r.len() as f64;
                let penalty = (-delta * delta / (2.0 * SIGMA * SIGMA)).exp();
                img += penalty * dot / (c_norm * r_norm);
            }
            order_sum += img / rs.len() as f64;
        }
        total += order_sum / cands.len() as f64;
    }
    Ok(10.0 * total / 4.0)
}

/// Mean of the four headline metrics.
pub fn s_star_m(bleu4: f64, rouge_l: f64, meteor: f64, cider_d: f64) -> f64 {
    (bleu4 + rouge_l + meteor + cider_d) / 4.0
}

/// Conversion efficiency ρ = ΔScore / ΔAcc_router, both in percentage
/// points.
pub fn rho_conversion(score_pre: f64, score_gt: f64, acc_pre: f64, acc_gt: f64) -> Result<f64> {
    let da = acc_gt - acc_pre;
    if da <= 0.0 {
        return Err(HisemError::InvalidArgument(format!(
            "rho: accuracy delta {da} must be positive"
        )));
    }
    Ok((score_gt - score_pre) / da)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    All,
    Changed,
    Unchanged,
}

/// One stratum's scores, percentages throughout. `cider_d`/`s_star_m`
/// are omitted for the unchanged stratum, where the shared references
/// collapse the IDF.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub stratum: Stratum,
    pub n_samples: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider_d: Option<f64>,
    pub s_star_m: Option<f64>,
    pub router_accuracy: f64,
}

fn eval_stratum(
    stratum: Stratum,
    idx: &[usize],
    predictions: &[String],
    records: &[DatasetRecord],
    predicted_labels: &[u8],
    with_cider: bool,
) -> Result<MetricReport> {
    let cands: Vec<String> = idx.iter().map(|&i| predictions[i].clone()).collect();
    let refs: Vec<Vec<String>> = idx.iter().map(|&i| records[i].captions.clone()).collect();
    let correct = idx
        .iter()
        .filter(|&&i| predicted_labels[i] == records[i].label)
        .count();
    let acc = if idx.is_empty() {
        0.0
    } else {
        100.0 * correct as f64 / idx.len() as f64
    };
    if idx.is_empty() {
        return Ok(MetricReport {
            stratum,
            n_samples: 0,
            bleu1: 0.0,
            bleu2: 0.0,
            bleu3: 0.0,
            bleu4: 0.0,
            rouge_l: 0.0,
            meteor: 0.0,
            cider_d: None,
            s_star_m: None,
            router_accuracy: acc,
        });
    }
    let bleu4 = bleu_n(&cands, &refs, 4)?;
    let rl = rouge_l(&cands, &refs)?;
    let met = meteor_lite(&cands, &refs)?;
    let cd = if with_cider {
        Some(cider_d(&cands, &refs)?)
    } else {
        None
    };
    Ok(MetricReport {
        stratum,
        n_samples: idx.len(),
        bleu1: bleu_n(&cands, &refs, 1)?,
        bleu2: bleu_n(&cands, &refs, 2)?,
        bleu3: bleu_n(&cands, &refs, 3)?,
        bleu4,
        rouge_l: rl,
        meteor: met,
        cider_d: cd,
        s_star_m: cd.map(|c| s_star_m(bleu4, rl, met, c)),
        router_accuracy: acc,
    })
}

/// Scores the corpus as a whole and split by ground-truth label. Router
/// accuracy compares the predicted path labels against the records.
pub fn stratified_evaluate(
    predictions: &[String],
    records: &[DatasetRecord],
    predicted_labels: &[u8],
) -> Result<Vec<MetricReport>> {
    if predictions.len() != records.len() || predicted_labels.len() != records.len() {
        return Err(HisemError::InvalidArgument(format!(
            "stratified_evaluate: {} predictions, {} labels, {} records",
            predictions.len(),
            predicted_labels.len(),
            records.len()
        )));
    }
    let all: Vec<usize> = (0..records.len()).collect();
    let changed: Vec<usize> = all.iter().copied().filter(|&i| records[i].label == 1).collect();
    let unchanged: Vec<usize> = all.iter().copied().filter(|&i| records[i].label == 0).collect();
    Ok(vec![
        eval_stratum(Stratum::All, &all, predictions, records, predicted_labels, true)?,
        eval_stratum(Stratum::Changed, &changed, predictions, records, predicted_labels, true)?,
        eval_stratum(
            Stratum::Unchanged,
            &unchanged,
            predictions,
            records,
            predicted_labels,
            false,
        )?,
    ])
}
