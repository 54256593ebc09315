//! Synthetic commit corpora for smoke runs and controlled experiments.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CommitRecord, CorpusSplit};

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "we", "za", "bo", "di", "fe", "gu", "ha", "je", "ko", "le",
    "mo", "ni", "pu", "ri", "ta",
];

/// Distinct pseudo-words of two or three syllables.
fn word_pool(rng: &mut ChaCha8Rng, n: usize, prefix: &str) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = rng.random_range(2..=3);
        let w: String = std::iter::once(prefix.to_string())
            .chain((0..syl).map(|_| SYLLABLES.choose(rng).unwrap().to_string()))
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

#[derive(Clone, Debug)]
enum Stmt {
    Assign(String, String, u32),
    Guard(String, u32),
    Call(String, String),
}

impl Stmt {
    fn render(&self) -> String {
        match self {
            Stmt::Assign(x, y, n) => format!("    {x} = {y} + {n}"),
            Stmt::Guard(x, n) => format!("    if {x} > {n}:\n        return {x}"),
            Stmt::Call(f, x) => format!("    {f}({x})"),
        }
    }
}

fn random_stmt(rng: &mut ChaCha8Rng, idents: &[String]) -> Stmt {
    let a = idents.choose(rng).unwrap().clone();
    let b = idents.choose(rng).unwrap().clone();
    match rng.random_range(0..3) {
        0 => Stmt::Assign(a, b, rng.random_range(0..100)),
        1 => Stmt::Guard(a, rng.random_range(0..100)),
        _ => Stmt::Call(a, b),
    }
}

fn render_fn(name: &str, arg: &str, body: &[Stmt]) -> String {
    let mut s = format!("def {name}({arg}):\n");
    for st in body {
        s.push_str(&st.render());
        s.push('\n');
    }
    s
}

fn record(id: String, old: String, new: String, message: String) -> CommitRecord {
    CommitRecord {
        id,
        language: "python".into(),
        old_text: old,
        new_text: new,
        message,
        repo: "synthetic/repo".into(),
        timestamp: 0,
    }
}

/// A random edit of one statement, with the message prefix describing it.
fn edit(rng: &mut ChaCha8Rng, body: &[Stmt], idents: &[String]) -> (Vec<Stmt>, String) {
    let at = rng.random_range(0..body.len());
    let mut new = body.to_vec();
    let msg = match new[at].clone() {
        Stmt::Assign(x, y, n) => {
            let m = (n + rng.random_range(1..50)) % 100;
            new[at] = Stmt::Assign(x.clone(), y, m);
            format!("update offset of {x}")
        }
        Stmt::Guard(x, _) => {
            new.remove(at);
            format!("remove guard on {x}")
        }
        Stmt::Call(f, x) => {
            let y = idents.iter().find(|i| **i != x).unwrap().clone();
            new.insert(at + 1, Stmt::Call(f.clone(), y.clone()));
            format!("call {f} with {y}")
        }
    };
    (new, msg)
}

/// Small corpus of `n` unrelated commits for smoke and overfit runs.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<CommitRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = word_pool(&mut rng, n.max(1) * 4, "");
    (0..n)
        .map(|i| {
            let idents = &names[i * 4..i * 4 + 4];
            let body: Vec<Stmt> = (0..3).map(|_| random_stmt(&mut rng, &idents[1..])).collect();
            let (new_body, msg) = edit(&mut rng, &body, &idents[1..]);
            record(
                format!("toy{i:03}"),
                render_fn(&idents[0], &idents[1], &body),
                render_fn(&idents[0], &idents[1], &new_body),
                format!("{msg} in {}", idents[0]),
            )
        })
        .collect()
}

/// Clusters of near-duplicate commits. Members of a cluster share the edit
/// and the message; their diffs differ by one constant in an untouched
/// statement. Each message ends with two cluster-specific words that never
/// occur in any diff, so they can only be predicted from a retrieved
/// neighbour or by memorizing the cluster.
///
/// The split puts one member of each of the first `test_clusters` clusters
/// (in shuffled order) into test and everything else into train, so every
/// test diff has a near-duplicate in train.
pub fn exemplar_corpus(clusters: usize, cluster_size: usize, test_clusters: usize, seed: u64) -> CorpusSplit {
    assert!(cluster_size >= 2 && test_clusters <= clusters);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idents = word_pool(&mut rng, 400, "");
    let topics = word_pool(&mut rng, 300, "q");
    let mut order: Vec<usize> = (0..clusters).collect();
    order.shuffle(&mut rng);
    let mut is_test = vec![false; clusters];
    for &c in &order[..test_clusters] {
        is_test[c] = true;
    }
    let mut split = CorpusSplit::default();
    for c in 0..clusters {
        let local: Vec<String> = idents.choose_multiple(&mut rng, 4).cloned().collect();
        let name = local[0].clone();
        let vars = &local[1..];
        let body: Vec<Stmt> = (0..4).map(|_| random_stmt(&mut rng, vars)).collect();
        let (new_body, msg) = edit(&mut rng, &body, vars);
        let tags: Vec<&String> = topics.choose_multiple(&mut rng, 2).collect();
        let message = format!("{msg} for {} {}", tags[0], tags[1]);
        let base = rng.random_range(0..90);
        for m in 0..cluster_size {
            // A trailing statement untouched by the edit carries the
            // per-member constant.
            let anchor = Stmt::Assign(vars[0].clone(), vars[1].clone(), base + m as u32);
            let (mut old, mut new) = (body.clone(), new_body.clone());
            old.push(anchor.clone());
            new.push(anchor);
            let r = record(
                format!("x{c:04}m{m}"),
                render_fn(&name, &vars[0], &old),
                render_fn(&name, &vars[0], &new),
                message.clone(),
            );
            if is_test[c] && m == cluster_size - 1 {
                split.test.push(r);
            } else {
                split.train.push(r);
            }
        }
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{message_tokens, PreparedRecord};
    use crate::diffscript::tokenize_code;
    use std::collections::HashSet;

    #[test]
    fn toy_corpus_is_valid_and_deterministic() {
        let a = toy_corpus(32, 7);
        assert_eq!(a.len(), 32);
        assert_eq!(a, toy_corpus(32, 7));
        let ids: HashSet<_> = a.iter().map(|r| &r.id).collect();
        assert_eq!(ids.len(), 32);
        for r in &a {
            r.validate().unwrap();
            assert_ne!(r.old_text, r.new_text);
        }
    }

    #[test]
    fn exemplar_corpus_shape() {
        let s = exemplar_corpus(50, 2, 10, 3);
        assert_eq!(s.train.len() + s.test.len(), 100);
        assert_eq!(s.test.len(), 10);
        let train_msgs: HashSet<_> = s.train.iter().map(|r| &r.message).collect();
        for t in &s.test {
            assert!(train_msgs.contains(&t.message));
            let tags = &message_tokens(&t.message)[message_tokens(&t.message).len() - 2..];
            for r in s.train.iter().chain(&s.test) {
                let code: HashSet<String> =
                    tokenize_code(&r.old_text).into_iter().chain(tokenize_code(&r.new_text)).collect();
                assert!(tags.iter().all(|w| !code.contains(w)));
            }
        }
    }

    #[test]
    fn cluster_members_differ_by_one_token() {
        let s = exemplar_corpus(40, 2, 0, 11);
        for pair in s.train.chunks(2) {
            let a = PreparedRecord::from_commit(&pair[0]).action_tokens;
            let b = PreparedRecord::from_commit(&pair[1]).action_tokens;
            assert_ne!(a, b);
            assert_eq!(a.len(), b.len());
            assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1);
        }
    }
}
