//! Caption metrics and clinical-efficacy scoring for generated reports.
//!
//! BLEU is corpus-level modified n-gram precision with a brevity penalty and
//! no smoothing. ROUGE-L is the LCS F-measure (β = 1.2). METEOR is reduced
//! to exact-match unigram alignment. CIDEr is the length-penalty-free
//! tf-idf cosine form, scaled by 10.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{extract_labels, tokenize, DiseaseGrammar};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric needs a non-empty corpus")]
    EmptyCorpus,

    #[error("candidates ({candidates}) and references ({references}) must align")]
    LengthMismatch { candidates: usize, references: usize },

    #[error("n-gram order must be between 1 and 4, got {0}")]
    BadOrder(usize),
}

fn check_pairs(candidates: &[String], references: &[String]) -> Result<(), MetricsError> {
    if candidates.is_empty() || references.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-n: uniform weights over orders 1..=n, clipped counts,
/// shared brevity penalty, no smoothing.
pub fn bleu(candidates: &[String], references: &[String], n: usize) -> Result<f64, MetricsError> {
    check_pairs(candidates, references)?;
    if n == 0 || n > 4 {
        return Err(MetricsError::BadOrder(n));
    }
    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let cand_len: usize = cand_tokens.iter().map(Vec::len).sum();
    let ref_len: usize = ref_tokens.iter().map(Vec::len).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (c, r) in cand_tokens.iter().zip(ref_tokens.iter()) {
            let c_counts = ngram_counts(c, order);
            let r_counts = ngram_counts(r, order);
            for (gram, &count) in &c_counts {
                correct += count.min(*r_counts.get(gram).unwrap_or(&0));
            }
            total += c.len().saturating_sub(order - 1);
        }
        if correct == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (correct as f64 / total as f64).ln() / n as f64;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_sum.exp())
}

fn lcs_table(a: &[String], b: &[String]) -> Vec<Vec<usize>> {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i][j] = if a[i - 1] == b[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp
}

/// LCS-based F-measure with β = 1.2, averaged over pairs.
pub fn rouge_l(candidates: &[String], references: &[String]) -> Result<f64, MetricsError> {
    check_pairs(candidates, references)?;
    const BETA: f64 = 1.2;
    let mut total = 0.0;
    for (c, r) in candidates.iter().zip(references.iter()) {
        let ct = tokenize(c);
        let rt = tokenize(r);
        if ct.is_empty() || rt.is_empty() {
            continue;
        }
        let lcs = lcs_table(&ct, &rt)[ct.len()][rt.len()] as f64;
        let p = lcs / ct.len() as f64;
        let rec = lcs / rt.len() as f64;
        let denom = rec + BETA * BETA * p;
        if denom > 0.0 {
            total += (1.0 + BETA * BETA) * rec * p / denom;
        }
    }
    Ok(total / candidates.len() as f64)
}

/// Order-preserving exact-match alignment via the LCS backtrack; returns
/// matched (candidate, reference) index pairs in ascending order.
fn align(ct: &[String], rt: &[String]) -> Vec<(usize, usize)> {
    let dp = lcs_table(ct, rt);
    let mut pairs = Vec::new();
    let (mut i, mut j) = (ct.len(), rt.len());
    while i > 0 && j > 0 {
        if ct[i - 1] == rt[j - 1] {
            pairs.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if dp[i - 1][j] >= dp[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pairs.reverse();
    pairs
}

/// Exact-match METEOR: harmonic mean with recall weight 9 and fragmentation
/// penalty 0.5·(chunks/matches)³, averaged over pairs. No stemming or
/// synonymy — the grammar here is closed.
pub fn meteor_simple(candidates: &[String], references: &[String]) -> Result<f64, MetricsError> {
    check_pairs(candidates, references)?;
    let mut total = 0.0;
    for (c, r) in candidates.iter().zip(references.iter()) {
        let ct = tokenize(c);
        let rt = tokenize(r);
        let pairs = align(&ct, &rt);
        let m = pairs.len() as f64;
        if pairs.is_empty() || ct.is_empty() || rt.is_empty() {
            continue;
        }
        let p = m / ct.len() as f64;
        let rec = m / rt.len() as f64;
        let fmean = 10.0 * p * rec / (rec + 9.0 * p);
        let mut chunks = 1usize;
        for w in pairs.windows(2) {
            if w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1 {
                chunks += 1;
            }
        }
        let penalty = 0.5 * (chunks as f64 / m).powi(3);
        total += fmean * (1.0 - penalty);
    }
    Ok(total / candidates.len() as f64)
}

/// tf-idf n-gram cosine (n = 1..4) averaged over orders and pairs, scaled
/// by 10. Document frequencies come from the reference corpus; with a
/// single document every idf is ln(1) = 0 and the score is 0 by
/// construction.
pub fn cider(candidates: &[String], references: &[String]) -> Result<f64, MetricsError> {
    check_pairs(candidates, references)?;
    let n_docs = references.len() as f64;
    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();

    let mut total = 0.0;
    for order in 1..=4usize {
        // document frequency over references
        let mut df: HashMap<Vec<String>, f64> = HashMap::new();
        for rt in &ref_tokens {
            let mut seen: Vec<&[String]> = ngram_counts(rt, order).into_keys().collect();
            seen.sort();
            for gram in seen {
                *df.entry(gram.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        let idf = |gram: &[String]| -> f64 {
            let d = df.get(gram).copied().unwrap_or(0.0).max(1.0);
            (n_docs / d).ln()
        };
        let mut order_sum = 0.0;
        for (ct, rt) in cand_tokens.iter().zip(ref_tokens.iter()) {
            let cv: HashMap<&[String], f64> = ngram_counts(ct, order)
                .into_iter()
                .map(|(g, c)| (g, c as f64 * idf(g)))
                .collect();
            let rv: HashMap<&[String], f64> = ngram_counts(rt, order)
                .into_iter()
                .map(|(g, c)| (g, c as f64 * idf(g)))
                .collect();
            let dot: f64 = cv
                .iter()
                .filter_map(|(g, w)| rv.get(g).map(|w2| w * w2))
                .sum();
            let cn: f64 = cv.values().map(|w| w * w).sum::<f64>().sqrt();
            let rn: f64 = rv.values().map(|w| w * w).sum::<f64>().sqrt();
            if cn > 0.0 && rn > 0.0 {
                order_sum += dot / (cn * rn);
            }
        }
        total += order_sum / candidates.len() as f64 / 4.0;
    }
    Ok(10.0 * total)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassEfficacy {
    pub class_name: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClinicalEfficacy {
    pub per_class: Vec<ClassEfficacy>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Per-class precision/recall/F1 of labels extracted from candidates versus
/// references. The macro average skips classes absent from both sides.
pub fn clinical_efficacy(
    candidates: &[String],
    references: &[String],
    grammar: &DiseaseGrammar,
) -> Result<ClinicalEfficacy, MetricsError> {
    check_pairs(candidates, references)?;
    let k = grammar.num_classes();
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (c, r) in candidates.iter().zip(references.iter()) {
        let cl = extract_labels(c, grammar);
        let rl = extract_labels(r, grammar);
        for i in 0..k {
            match (cl[i], rl[i]) {
                (true, true) => tp[i] += 1,
                (true, false) => fp[i] += 1,
                (false, true) => fn_[i] += 1,
                (false, false) => {}
            }
        }
    }
    let mut per_class = Vec::with_capacity(k);
    let mut sums = (0.0, 0.0, 0.0);
    let mut present = 0usize;
    for i in 0..k {
        let (p, r, f1) = prf(tp[i], fp[i], fn_[i]);
        if tp[i] + fp[i] + fn_[i] > 0 {
            sums.0 += p;
            sums.1 += r;
            sums.2 += f1;
            present += 1;
        }
        per_class.push(ClassEfficacy {
            class_name: grammar.diseases[i].name.clone(),
            tp: tp[i],
            fp: fp[i],
            fn_: fn_[i],
            precision: p,
            recall: r,
            f1,
        });
    }
    let denom = present.max(1) as f64;
    Ok(ClinicalEfficacy {
        per_class,
        macro_precision: sums.0 / denom,
        macro_recall: sums.1 / denom,
        macro_f1: sums.2 / denom,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor_simple: f64,
    pub cider: f64,
    pub clinical: ClinicalEfficacy,
}

pub fn evaluate(
    candidates: &[String],
    references: &[String],
    grammar: &DiseaseGrammar,
) -> Result<EvalReport, MetricsError> {
    Ok(EvalReport {
        n_pairs: candidates.len(),
        bleu1: bleu(candidates, references, 1)?,
        bleu2: bleu(candidates, references, 2)?,
        bleu3: bleu(candidates, references, 3)?,
        bleu4: bleu(candidates, references, 4)?,
        rouge_l: rouge_l(candidates, references)?,
        meteor_simple: meteor_simple(candidates, references)?,
        cider: cider(candidates, references)?,
        clinical: clinical_efficacy(candidates, references, grammar)?,
    })
}
