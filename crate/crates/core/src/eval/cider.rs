//! CIDEr-D with one reference per item.

use std::collections::HashMap;

const MAX_N: usize = 4;
const SIGMA: f64 = 6.0;

type Counts = HashMap<Vec<String>, f64>;

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn ngrams(words: &[String], n: usize) -> Counts {
    let mut c = Counts::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *c.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    c
}

fn tfidf(counts: &Counts, df: &HashMap<Vec<String>, f64>, log_n: f64) -> (Counts, f64) {
    let mut v = Counts::new();
    let mut norm = 0.0;
    for (g, tf) in counts {
        let d = df.get(g).copied().unwrap_or(0.0).max(1.0);
        let w = tf * (log_n - d.ln());
        norm += w * w;
        v.insert(g.clone(), w);
    }
    (v, norm.sqrt())
}

/// Per-item scores; the corpus score is their mean. Document frequencies are
/// taken over the references.
pub fn cider_items(candidates: &[String], references: &[String]) -> crate::Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(crate::Error::invalid("one reference per candidate"));
    }
    if references.len() < 2 {
        return Err(crate::Error::invalid("CIDEr needs at least two items"));
    }
    let n_items = references.len();
    let log_n = (n_items as f64).ln();
    let cand: Vec<Vec<String>> = candidates.iter().map(|c| tokens(c)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokens(r)).collect();
    let mut df: Vec<HashMap<Vec<String>, f64>> = vec![HashMap::new(); MAX_N];
    for r in &refs {
        for n in 1..=MAX_N {
            for g in ngrams(r, n).into_keys() {
                *df[n - 1].entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    let mut out = Vec::with_capacity(n_items);
    for (c, r) in cand.iter().zip(&refs) {
        if c.is_empty() {
            out.push(0.0);
            continue;
        }
        let delta = c.len() as f64 - r.len() as f64;
        let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
        let mut score = 0.0;
        for n in 1..=MAX_N {
            let (vc, nc) = tfidf(&ngrams(c, n), &df[n - 1], log_n);
            let (vr, nr) = tfidf(&ngrams(r, n), &df[n - 1], log_n);
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            // clipped dot product
            let dot: f64 = vc
                .iter()
                .filter_map(|(g, a)| vr.get(g).map(|b| a.min(*b) * b))
                .sum();
            score += dot / (nc * nr) * penalty;
        }
        out.push(score / MAX_N as f64 * 10.0);
    }
    Ok(out)
}

/// Corpus CIDEr-D in `[0, 10]`.
pub fn cider(candidates: &[String], references: &[String]) -> crate::Result<f64> {
    let items = cider_items(candidates, references)?;
    Ok(items.iter().sum::<f64>() / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn identity_scores_ten() {
        let refs = s(&["a steady tone plays", "a rising chirp then a noise burst", "a click train plays"]);
        let score = cider(&refs, &refs).unwrap();
        assert!((score - 10.0).abs() < 1e-6, "{score}");
    }

    #[test]
    fn disjoint_scores_zero() {
        let refs = s(&["a steady tone plays", "a rising chirp"]);
        let cands = s(&["xyz qqq", "zzz www"]);
        assert_eq!(cider(&cands, &refs).unwrap(), 0.0);
    }

    #[test]
    fn empty_candidate_and_bad_inputs() {
        let refs = s(&["a b", "c d"]);
        assert_eq!(cider_items(&s(&["", "c d"]), &refs).unwrap()[0], 0.0);
        assert!(cider(&s(&["a"]), &s(&["a"])).is_err());
        assert!(cider(&s(&["a", "b"]), &s(&["a"])).is_err());
    }

    #[test]
    fn case_insensitive() {
        let refs = s(&["A Steady tone now", "noise is here again"]);
        let cands = s(&["a steady TONE now", "noise is HERE again"]);
        assert!((cider(&cands, &refs).unwrap() - 10.0).abs() < 1e-9);
    }
}
