//! Message-level evaluation metrics. All scoring lowercases tokens first and
//! assumes a single reference per candidate.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

fn lower(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_pairs(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(invalid!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        ));
    }
    if candidates.is_empty() {
        return Err(invalid!("nothing to evaluate"));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Smoothed sentence BLEU on a 0–1 scale: unsmoothed unigram precision,
/// add-one smoothing for 2..4-grams, brevity penalty `exp(1 - r/c)`.
pub fn sentence_bnorm(candidate: &[String], reference: &[String]) -> f64 {
    let (c, r) = (lower(candidate), lower(reference));
    if c.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cc = ngram_counts(&c, n);
        let rc = ngram_counts(&r, n);
        let total: usize = cc.values().sum();
        let matches: usize = cc
            .iter()
            .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            matches as f64 / total as f64
        } else {
            (matches + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / 4.0;
    }
    let (cl, rl) = (c.len() as f64, r.len() as f64);
    let bp = if cl < rl { (1.0 - rl / cl).exp() } else { 1.0 };
    bp * log_sum.exp()
}

/// Corpus B-Norm: mean sentence score × 100.
pub fn bnorm_bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let s: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| sentence_bnorm(c, r))
        .collect();
    Ok(100.0 * mean(&s))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn sentence_rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    let (c, r) = (lower(candidate), lower(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r) as f64;
    let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
    if p + rec == 0.0 {
        0.0
    } else {
        2.0 * p * rec / (p + rec)
    }
}

pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let s: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| sentence_rouge_l(c, r))
        .collect();
    Ok(mean(&s))
}

/// Above this many candidate alignments the chunk count comes from a greedy
/// left-to-right alignment instead of exhaustive search.
pub const METEOR_ALIGNMENT_CAP: usize = 20_000;

fn chunks_of(pairs: &mut [(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    pairs.sort_unstable();
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// Number of ways to injectively map `k` items into `m` slots.
fn arrangements(m: usize, k: usize) -> usize {
    (m - k + 1..=m).fold(1usize, |acc, x| acc.saturating_mul(x))
}

/// Fewest chunks over all maximum exact-match alignments.
fn min_chunks(c: &[String], r: &[String]) -> (usize, usize) {
    let mut groups: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, t) in c.iter().enumerate() {
        let g = *index.entry(t).or_insert_with(|| {
            groups.push((Vec::new(), Vec::new()));
            groups.len() - 1
        });
        groups[g].0.push(i);
    }
    for (j, t) in r.iter().enumerate() {
        if let Some(&g) = index.get(t.as_str()) {
            groups[g].1.push(j);
        }
    }
    groups.retain(|(a, b)| !a.is_empty() && !b.is_empty());
    let matches: usize = groups.iter().map(|(a, b)| a.len().min(b.len())).sum();
    if matches == 0 {
        return (0, 0);
    }
    let total = groups.iter().fold(1usize, |acc, (a, b)| {
        acc.saturating_mul(arrangements(a.len().max(b.len()), a.len().min(b.len())))
    });
    if total > METEOR_ALIGNMENT_CAP {
        return (matches, greedy_chunks(c, r));
    }
    let options: Vec<Vec<Vec<(usize, usize)>>> = groups
        .iter()
        .map(|(cs, rs)| {
            let mut out = Vec::new();
            injections(cs, rs, &mut vec![false; rs.len()], &mut Vec::new(), &mut out);
            out
        })
        .collect();
    let mut best = usize::MAX;
    product(&options, 0, &mut Vec::with_capacity(matches), &mut best);
    (matches, best)
}

/// Every maximum pairing between candidate positions `cs` and reference
/// positions `rs` of one token type.
fn injections(
    cs: &[usize],
    rs: &[usize],
    used: &mut [bool],
    cur: &mut Vec<(usize, usize)>,
    out: &mut Vec<Vec<(usize, usize)>>,
) {
    let k = cur.len();
    if k == cs.len().min(rs.len()) {
        out.push(cur.clone());
        return;
    }
    if cs.len() <= rs.len() {
        for j in 0..rs.len() {
            if !used[j] {
                used[j] = true;
                cur.push((cs[k], rs[j]));
                injections(cs, rs, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    } else {
        // More candidate than reference occurrences: choose which candidate
        // position each reference occurrence pairs with.
        let mut taken = vec![false; cs.len()];
        for &(ci, _) in cur.iter() {
            taken[cs.iter().position(|&x| x == ci).unwrap()] = true;
        }
        for (i, &ci) in cs.iter().enumerate() {
            if !taken[i] {
                cur.push((ci, rs[k]));
                injections(cs, rs, used, cur, out);
                cur.pop();
            }
        }
    }
}

fn product(options: &[Vec<Vec<(usize, usize)>>], g: usize, pairs: &mut Vec<(usize, usize)>, best: &mut usize) {
    if g == options.len() {
        let mut p = pairs.clone();
        *best = (*best).min(chunks_of(&mut p));
        return;
    }
    for opt in &options[g] {
        let len = pairs.len();
        pairs.extend_from_slice(opt);
        product(options, g + 1, pairs, best);
        pairs.truncate(len);
    }
}

/// Scans the candidate left to right, preferring the reference position that
/// continues the previous match and otherwise the earliest unused one.
fn greedy_chunks(c: &[String], r: &[String]) -> usize {
    let mut used = vec![false; r.len()];
    let mut pairs = Vec::new();
    let mut last: Option<(usize, usize)> = None;
    for (i, t) in c.iter().enumerate() {
        let cont = last
            .filter(|&(li, lj)| li + 1 == i && lj + 1 < r.len() && !used[lj + 1] && r[lj + 1] == *t)
            .map(|(_, lj)| lj + 1);
        let pick = cont.or_else(|| (0..r.len()).find(|&j| !used[j] && r[j] == *t));
        if let Some(j) = pick {
            used[j] = true;
            pairs.push((i, j));
            last = Some((i, j));
        } else {
            last = None;
        }
    }
    chunks_of(&mut pairs)
}

/// Exact-match METEOR: `F = 10PR / (R + 9P)` times `1 - 0.5 (chunks/matches)^3`.
pub fn sentence_meteor(candidate: &[String], reference: &[String]) -> f64 {
    let (c, r) = (lower(candidate), lower(reference));
    let (m, chunks) = min_chunks(&c, &r);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f = 10.0 * p * rec / (rec + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

pub fn meteor(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let s: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| sentence_meteor(c, r))
        .collect();
    Ok(mean(&s))
}

/// Per-pair CIDEr scores (0–10). Document frequencies come from the
/// references. Orders longer than the reference are left out of the mean.
/// When a reference's tf-idf vector vanishes at some order because every one
/// of its n-grams occurs in every reference (always the case for a one-pair
/// corpus), that order is scored with plain term frequencies.
pub fn cider_scores(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<Vec<f64>> {
    check_pairs(candidates, references)?;
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| lower(c)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|r| lower(r)).collect();
    let n_docs = refs.len() as f64;
    let mut sums = vec![0.0; cands.len()];
    for n in 1..=4 {
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for rc in &ref_counts {
            for g in rc.keys() {
                *df.entry(*g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (i, c) in cands.iter().enumerate() {
            let rc = &ref_counts[i];
            if rc.is_empty() {
                continue;
            }
            let cc = ngram_counts(c, n);
            if cc.is_empty() {
                continue;
            }
            let mut rv = tf_weighted(rc, idf);
            let use_idf = rv.values().any(|&w| w != 0.0);
            if !use_idf {
                rv = tf_weighted(rc, |_| 1.0);
            }
            let cv = if use_idf { tf_weighted(&cc, idf) } else { tf_weighted(&cc, |_| 1.0) };
            sums[i] += cosine_sparse(&cv, &rv).clamp(0.0, 1.0);
        }
    }
    Ok(cands
        .iter()
        .zip(&refs)
        .zip(sums)
        .map(|((c, r), s)| match r.len().min(4) {
            0 => {
                if c.is_empty() {
                    10.0
                } else {
                    0.0
                }
            }
            orders => 10.0 * s / orders as f64,
        })
        .collect())
}

fn tf_weighted<'a>(m: &BTreeMap<&'a [String], usize>, w: impl Fn(&[String]) -> f64) -> BTreeMap<&'a [String], f64> {
    let tot: usize = m.values().sum();
    m.iter().map(|(g, &k)| (*g, k as f64 / tot as f64 * w(g))).collect()
}

fn cosine_sparse(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

pub fn cider(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    Ok(mean(&cider_scores(candidates, references)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub corpus: f64,
    pub per_example: Vec<f64>,
}

impl MetricScores {
    fn from_per_example(per_example: Vec<f64>, scale: f64) -> Self {
        let per_example: Vec<f64> = per_example.into_iter().map(|s| s * scale).collect();
        Self {
            corpus: mean(&per_example),
            per_example,
        }
    }
}

/// BLEU on 0–100, ROUGE-L and METEOR on 0–1, CIDEr on 0–10; each corpus
/// score is the mean of its per-example scores. Pairs with an empty
/// reference are skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub evaluated: usize,
    pub skipped: usize,
    pub bleu: MetricScores,
    pub rouge_l: MetricScores,
    pub meteor: MetricScores,
    pub cider: MetricScores,
}

pub fn evaluate_all(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<EvalReport> {
    check_pairs(candidates, references)?;
    let (c, r): (Vec<Vec<String>>, Vec<Vec<String>>) = candidates
        .iter()
        .zip(references)
        .filter(|(_, r)| !r.is_empty())
        .map(|(c, r)| (c.clone(), r.clone()))
        .unzip();
    if c.is_empty() {
        return Err(invalid!("every reference is empty"));
    }
    let per = |f: fn(&[String], &[String]) -> f64| -> Vec<f64> {
        c.iter().zip(&r).map(|(c, r)| f(c, r)).collect()
    };
    Ok(EvalReport {
        evaluated: c.len(),
        skipped: candidates.len() - c.len(),
        bleu: MetricScores::from_per_example(per(sentence_bnorm), 100.0),
        rouge_l: MetricScores::from_per_example(per(sentence_rouge_l), 1.0),
        meteor: MetricScores::from_per_example(per(sentence_meteor), 1.0),
        cider: MetricScores::from_per_example(cider_scores(&c, &r)?, 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn one(s: &str) -> Vec<Vec<String>> {
        vec![t(s)]
    }

    #[test]
    fn bleu_examples() {
        let s = bnorm_bleu(&one("fix bug in parser"), &one("fix bug in parser")).unwrap();
        assert_abs_diff_eq!(s, 100.0, epsilon = 1e-9);
        let s = bnorm_bleu(&one("fix bug"), &one("fix bug in parser")).unwrap();
        assert_abs_diff_eq!(s, 100.0 * (-1.0f64).exp(), epsilon = 1e-9);
        assert_eq!(bnorm_bleu(&one("a b c d"), &one("e f g h")).unwrap(), 0.0);
        assert_eq!(bnorm_bleu(&one(""), &one("e f")).unwrap(), 0.0);
    }

    #[test]
    fn bleu_partial_overlap_by_hand() {
        // cand "a b x", ref "a b c": p1 = 2/3, p2 = (1+1)/(2+1), p3 = (0+1)/(1+1),
        // p4 = 1 (no 4-grams), no brevity penalty.
        let expected = (2.0f64 / 3.0 * 2.0 / 3.0 * 0.5).powf(0.25);
        assert_abs_diff_eq!(sentence_bnorm(&t("a b x"), &t("a b c")), expected, epsilon = 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&one("a b"), &one("a b")).unwrap(), 1.0);
        assert_eq!(rouge_l(&one("a b c"), &one("a c")).unwrap(), 0.8);
        assert_eq!(rouge_l(&one("a"), &one("b")).unwrap(), 0.0);
    }

    #[test]
    fn meteor_examples() {
        assert_eq!(meteor(&one("a b c d"), &one("a b c d")).unwrap(), 0.9921875);
        assert_eq!(meteor(&one("a b"), &one("c d")).unwrap(), 0.0);
        assert_eq!(meteor(&one("b a"), &one("a b")).unwrap(), 0.5);
    }

    #[test]
    fn meteor_picks_fewest_chunks() {
        // Aligning the second "a" of the candidate keeps "a b" as one chunk.
        let (m, ch) = min_chunks(&t("a a b"), &t("a b"));
        assert_eq!((m, ch), (2, 1));
        let (m, ch) = min_chunks(&t("x a b y a b"), &t("a b a b"));
        assert_eq!((m, ch), (4, 2));
    }

    #[test]
    fn meteor_greedy_fallback_counts_matches() {
        let c: Vec<String> = (0..30).map(|i| if i % 2 == 0 { "a" } else { "b" }.to_string()).collect();
        let r = c.clone();
        let (m, ch) = min_chunks(&c, &r);
        assert_eq!((m, ch), (30, 1));
    }

    #[test]
    fn cider_examples() {
        assert_abs_diff_eq!(cider(&one("fix bug"), &one("fix bug")).unwrap(), 10.0, epsilon = 1e-9);
        assert_eq!(cider(&one("a b"), &one("c d")).unwrap(), 0.0);
    }

    #[test]
    fn cider_unigram_only_overlap_by_hand() {
        // Two pairs; the first shares unigrams only with its reference.
        let cands = vec![t("a b c d"), t("p q")];
        let refs = vec![t("d c b a"), t("p r")];
        // Order 1 of pair 0: every reference unigram has df 1, idf ln 2, and
        // the candidate holds the same four unigrams with the same tf, so s1 = 1.
        let s = cider_scores(&cands, &refs).unwrap();
        assert_abs_diff_eq!(s[0], 10.0 * 1.0 / 4.0, epsilon = 1e-12);
        // Pair 1: unigrams {p, q} vs {p, r}, all idf ln 2 → cosine 1/2; bigrams
        // "p q" vs "p r" disjoint; the reference has no higher orders.
        assert_abs_diff_eq!(s[1], 10.0 * (0.5 + 0.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn cider_idf_weighting() {
        // "a" appears in both references, so it carries no weight; pair 0's
        // candidate shares only "a" with its reference.
        let cands = vec![t("a x"), t("a c")];
        let refs = vec![t("a b"), t("a c")];
        let s = cider_scores(&cands, &refs).unwrap();
        assert_abs_diff_eq!(s[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn evaluate_all_examples() {
        let cs = vec![t("fix bug in parser"), t("add tests")];
        let r = evaluate_all(&cs, &cs).unwrap();
        assert_abs_diff_eq!(r.bleu.corpus, 100.0, epsilon = 1e-9);
        assert_eq!(r.rouge_l.corpus, 1.0);
        let m4 = 1.0 - 0.5 / 64.0;
        let m2 = 1.0 - 0.5 / 8.0;
        assert_abs_diff_eq!(r.meteor.corpus, (m4 + m2) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.cider.corpus, 10.0, epsilon = 1e-9);
        assert!(evaluate_all(&[], &[]).is_err());
        assert!(evaluate_all(&one("a"), &[]).is_err());
        let d = evaluate_all(&one("a b"), &one("c d")).unwrap();
        assert_eq!(
            (d.bleu.corpus, d.rouge_l.corpus, d.meteor.corpus, d.cider.corpus),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec("[a-dA-D]{1,2}", 1..10)
    }

    proptest! {
        #[test]
        fn case_invariance(c in words(), r in words()) {
            let up = |v: &Vec<String>| vec![v.iter().map(|t| t.to_uppercase()).collect::<Vec<_>>()];
            let lo = |v: &Vec<String>| vec![v.iter().map(|t| t.to_lowercase()).collect::<Vec<_>>()];
            let a = evaluate_all(&up(&c), &lo(&r)).unwrap();
            let b = evaluate_all(&lo(&c), &up(&r)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn maximum_on_identical(c in words()) {
            let r = evaluate_all(&[c.clone()], &[c.clone()]).unwrap();
            prop_assert!((r.bleu.corpus - 100.0).abs() < 1e-9);
            prop_assert_eq!(r.rouge_l.corpus, 1.0);
            prop_assert!((r.cider.corpus - 10.0).abs() < 1e-9);
            let m = c.len() as f64;
            prop_assert!((r.meteor.corpus - (1.0 - 0.5 / (m * m * m))).abs() < 1e-12);
        }

        #[test]
        fn appending_unrelated_token_hurts(c in words()) {
            let mut longer = c.clone();
            longer.push("zzz".into());
            prop_assert!(sentence_bnorm(&longer, &c) < sentence_bnorm(&c, &c));
            prop_assert!(sentence_rouge_l(&longer, &c) < sentence_rouge_l(&c, &c));
        }

        #[test]
        fn corpus_is_mean_of_examples(pairs in proptest::collection::vec((words(), words()), 1..6)) {
            let (c, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let rep = evaluate_all(&c, &r).unwrap();
            let mut bleu = 0.0;
            let mut rouge = 0.0;
            for (x, y) in c.iter().zip(&r) {
                bleu += sentence_bnorm(x, y);
                rouge += sentence_rouge_l(x, y);
            }
            let n = c.len() as f64;
            prop_assert!((rep.bleu.corpus - 100.0 * bleu / n).abs() < 1e-9);
            prop_assert!((rep.rouge_l.corpus - rouge / n).abs() < 1e-12);
            prop_assert!((rep.cider.corpus - cider(&c, &r).unwrap()).abs() < 1e-12);
            prop_assert!((rep.meteor.corpus - meteor(&c, &r).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn meteor_search_matches_brute_force(c in proptest::collection::vec("[ab]", 1..6), r in proptest::collection::vec("[ab]", 1..6)) {
            // Brute force: every subset-injection pairing with maximal size.
            let (m, ch) = min_chunks(&c, &r);
            let mut best = (0usize, usize::MAX);
            let n = c.len();
            let mut stack = vec![(0usize, vec![false; r.len()], Vec::<(usize, usize)>::new())];
            while let Some((i, used, pairs)) = stack.pop() {
                if i == n {
                    let mut p = pairs.clone();
                    let key = (p.len(), chunks_of(&mut p));
                    if key.0 > best.0 || (key.0 == best.0 && key.1 < best.1) { best = key; }
                    continue;
                }
                stack.push((i + 1, used.clone(), pairs.clone()));
                for j in 0..r.len() {
                    if !used[j] && r[j] == c[i] {
                        let mut u = used.clone(); u[j] = true;
                        let mut p = pairs.clone(); p.push((i, j));
                        stack.push((i + 1, u, p));
                    }
                }
            }
            if best.0 == 0 { best.1 = 0; }
            prop_assert_eq!((m, ch), best);
        }
    }
}
