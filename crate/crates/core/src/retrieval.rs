//! Exact cosine retrieval over encoder vectors, plus the NNGen and TF-IDF
//! baselines.
//!
//! Index file layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic b"RACEIDX1"
//! u32       vector width W
//! u64       entry count N
//! str       encoder checkpoint hash
//! N times:  str id, W × f32 vector, toks message, toks diff
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8 bytes and `toks` is a
//! u32 count followed by that many `str`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensorgrad::{Graph, Real};

use crate::corpus::PreparedRecord;
use crate::error::{invalid, Error, Result};
use crate::metrics::sentence_bnorm;
use crate::model::{EncoderRole, RaceModel};
use crate::vocab::{encode, Vocab};

pub const INDEX_MAGIC: &[u8; 8] = b"RACEIDX1";

/// `u·v / (‖u‖‖v‖)`; errors on a zero vector.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(invalid!("cosine of vectors with widths {} and {}", u.len(), v.len()));
    }
    let nu = u.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let nv = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(invalid!("cosine of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Scales `v` to unit length.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(invalid!("cannot normalize a vector of norm {n}"));
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub vector: Vec<f32>,
    pub msg_tokens: Vec<String>,
    pub diff_tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
    by_id: HashMap<String, usize>,
    width: usize,
    pub encoder_checkpoint_hash: String,
}

impl RetrievalIndex {
    /// Checks unit norms, a common width and unique ids.
    pub fn new(entries: Vec<IndexEntry>, encoder_checkpoint_hash: String) -> Result<Self> {
        let width = entries.first().map_or(0, |e| e.vector.len());
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.vector.len() != width {
                return Err(invalid!("entry {} has width {}, expected {width}", e.id, e.vector.len()));
            }
            let norm = e.vector.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(invalid!("entry {} has norm {norm}", e.id));
            }
            if by_id.insert(e.id.clone(), i).is_some() {
                return Err(invalid!("duplicate index id {}", e.id));
            }
        }
        Ok(Self {
            entries,
            by_id,
            width,
            encoder_checkpoint_hash,
        })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    /// Top `k` entries by cosine with `probe`, highest first, ties by
    /// ascending id. `exclude_id` is removed before ranking.
    pub fn query(&self, probe: &[f32], k: usize, exclude_id: Option<&str>) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(invalid!("k must be at least 1"));
        }
        if !self.entries.is_empty() && probe.len() != self.width {
            return Err(invalid!("probe width {} against index width {}", probe.len(), self.width));
        }
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .filter(|e| Some(e.id.as_str()) != exclude_id)
            .map(|e| Hit {
                id: e.id.clone(),
                similarity: e.vector.iter().zip(probe).map(|(&a, &b)| a as f64 * b as f64).sum(),
            })
            .collect();
        hits.sort_by(rank);
        hits.truncate(k);
        Ok(hits)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<index>", e);
        w.write_all(INDEX_MAGIC).map_err(io)?;
        w.write_all(&(self.width as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes()).map_err(io)?;
        write_str(&mut w, &self.encoder_checkpoint_hash).map_err(io)?;
        for e in &self.entries {
            write_str(&mut w, &e.id).map_err(io)?;
            for &x in &e.vector {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
            write_tokens(&mut w, &e.msg_tokens).map_err(io)?;
            write_tokens(&mut w, &e.diff_tokens).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |e: std::io::Error| invalid!("malformed index: {e}");
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != INDEX_MAGIC {
            return Err(invalid!("not an index file"));
        }
        let width = read_u32(&mut r).map_err(fmt)? as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(fmt)?;
        let count = u64::from_le_bytes(b8) as usize;
        let hash = read_str(&mut r).map_err(fmt)?;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = read_str(&mut r).map_err(fmt)?;
            let mut vector = Vec::with_capacity(width);
            for _ in 0..width {
                let mut b4 = [0u8; 4];
                r.read_exact(&mut b4).map_err(fmt)?;
                vector.push(f32::from_le_bytes(b4));
            }
            let msg_tokens = read_tokens(&mut r).map_err(fmt)?;
            let diff_tokens = read_tokens(&mut r).map_err(fmt)?;
            entries.push(IndexEntry {
                id,
                vector,
                msg_tokens,
                diff_tokens,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(fmt)? != 0 {
            return Err(invalid!("trailing bytes after index entries"));
        }
        let idx = Self::new(entries, hash)?;
        if count > 0 && idx.width != width {
            return Err(invalid!("index header width {width} disagrees with entries"));
        }
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

fn rank(a: &Hit, b: &Hit) -> Ordering {
    b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn write_tokens<W: Write>(w: &mut W, toks: &[String]) -> std::io::Result<()> {
    w.write_all(&(toks.len() as u32).to_le_bytes())?;
    toks.iter().try_for_each(|t| write_str(w, t))
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn read_tokens<R: Read>(r: &mut R) -> std::io::Result<Vec<String>> {
    let n = read_u32(r)? as usize;
    (0..n).map(|_| read_str(r)).collect()
}

/// Unit-length pooled encoder vector of one rendered diff.
pub fn embed_diff<T: Real>(model: &RaceModel<T>, vocab: &Vocab, diff_tokens: &[String]) -> Result<Vec<f32>> {
    let max = model.config().max_diff_len;
    let ids = encode(diff_tokens, vocab, max, false)?.real_ids();
    if ids.is_empty() {
        return Err(invalid!("cannot embed an empty diff"));
    }
    let mut g = Graph::inference(&model.params);
    let out = model.encode(&mut g, EncoderRole::Diff, &ids, &vec![true; ids.len()])?;
    let v: Vec<f32> = g.value(out.pooled).iter().map(|x| x.as_f64() as f32).collect();
    normalize(&v)
}

/// Index over `records` using the encoder of `model`. `checkpoint_vocab_hash`
/// is the vocabulary hash the encoder was trained with.
pub fn build_index<T: Real>(
    model: &RaceModel<T>,
    vocab: &Vocab,
    checkpoint_vocab_hash: &str,
    checkpoint_hash: &str,
    records: &[PreparedRecord],
) -> Result<RetrievalIndex> {
    if vocab.hash() != checkpoint_vocab_hash {
        return Err(invalid!(
            "vocabulary hash {} does not match the checkpoint's {checkpoint_vocab_hash}",
            vocab.hash()
        ));
    }
    let entries = records
        .iter()
        .map(|r| {
            Ok(IndexEntry {
                id: r.id.clone(),
                vector: embed_diff(model, vocab, &r.action_tokens)?,
                msg_tokens: r.msg_tokens.clone(),
                diff_tokens: r.action_tokens.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::new(entries, checkpoint_hash.to_string())
}

type Sparse = BTreeMap<u32, f64>;

fn sparse_norm(v: &Sparse) -> f64 {
    v.values().map(|x| x * x).sum::<f64>().sqrt()
}

fn sparse_dot(a: &Sparse, b: &Sparse) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().map(|(k, x)| x * large.get(k).copied().unwrap_or(0.0)).sum()
}

/// Token interning shared by the bag-of-words baselines.
#[derive(Default)]
struct Interner {
    ids: HashMap<String, u32>,
}

impl Interner {
    fn counts(&mut self, tokens: &[String]) -> Sparse {
        let mut m = Sparse::new();
        for t in tokens {
            let next = self.ids.len() as u32;
            let id = *self.ids.entry(t.clone()).or_insert(next);
            *m.entry(id).or_insert(0.0) += 1.0;
        }
        m
    }

    /// Counts for a probe; unseen tokens get fresh ids that match nothing.
    fn probe_counts(&self, tokens: &[String]) -> Sparse {
        let mut m = Sparse::new();
        let mut fresh = self.ids.len() as u32;
        let mut unseen: HashMap<&str, u32> = HashMap::new();
        for t in tokens {
            let id = match self.ids.get(t) {
                Some(&i) => i,
                None => *unseen.entry(t).or_insert_with(|| {
                    fresh += 1;
                    fresh
                }),
            };
            *m.entry(id).or_insert(0.0) += 1.0;
        }
        m
    }
}

fn cosine_sparse(a: &Sparse, na: f64, b: &Sparse, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        sparse_dot(a, b) / (na * nb)
    }
}

/// NNGen: bag-of-words cosine over diff tokens picks `k` candidates; the one
/// whose diff scores the highest B-Norm against the probe diff wins.
pub struct NnGen<'a> {
    records: &'a [PreparedRecord],
    interner: Interner,
    vectors: Vec<(Sparse, f64)>,
}

impl<'a> NnGen<'a> {
    pub fn new(records: &'a [PreparedRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid!("NNGen needs a non-empty training set"));
        }
        let mut interner = Interner::default();
        let vectors = records
            .iter()
            .map(|r| {
                let v = interner.counts(&r.action_tokens);
                let n = sparse_norm(&v);
                (v, n)
            })
            .collect();
        Ok(Self {
            records,
            interner,
            vectors,
        })
    }

    /// The `k` nearest records by bag-of-words cosine.
    pub fn nearest(&self, probe: &[String], k: usize) -> Vec<Hit> {
        let p = self.interner.probe_counts(probe);
        let pn = sparse_norm(&p);
        let mut hits: Vec<Hit> = self
            .records
            .iter()
            .zip(&self.vectors)
            .map(|(r, (v, n))| Hit {
                id: r.id.clone(),
                similarity: cosine_sparse(&p, pn, v, *n),
            })
            .collect();
        hits.sort_by(rank);
        hits.truncate(k);
        hits
    }

    /// The chosen record.
    pub fn retrieve(&self, probe: &[String], k: usize) -> Result<&'a PreparedRecord> {
        if k == 0 {
            return Err(invalid!("k must be at least 1"));
        }
        let by_id: HashMap<&str, &PreparedRecord> = self.records.iter().map(|r| (r.id.as_str(), r)).collect();
        let mut best: Option<(f64, &'a PreparedRecord)> = None;
        for h in self.nearest(probe, k) {
            let r: &'a PreparedRecord = by_id[h.id.as_str()];
            let s = sentence_bnorm(&r.action_tokens, probe);
            let better = match best {
                None => true,
                Some((bs, br)) => s > bs || (s == bs && r.id < br.id),
            };
            if better {
                best = Some((s, r));
            }
        }
        Ok(best.expect("non-empty training set").1)
    }
}

/// Message tokens chosen by NNGen.
pub fn nngen_retrieve(train: &[PreparedRecord], probe_diff: &[String], k: usize) -> Result<Vec<String>> {
    Ok(NnGen::new(train)?.retrieve(probe_diff, k)?.msg_tokens.clone())
}

/// Lucene-style TF-IDF nearest neighbour: raw term counts times
/// `ln((1 + N) / (1 + df)) + 1`, L2-normalized, ranked by cosine.
pub struct TfIdf<'a> {
    records: &'a [PreparedRecord],
    interner: Interner,
    idf: HashMap<u32, f64>,
    unseen_idf: f64,
    vectors: Vec<Sparse>,
}

impl<'a> TfIdf<'a> {
    pub fn new(records: &'a [PreparedRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid!("TF-IDF needs a non-empty training set"));
        }
        let mut interner = Interner::default();
        let counts: Vec<Sparse> = records.iter().map(|r| interner.counts(&r.action_tokens)).collect();
        let mut df: HashMap<u32, usize> = HashMap::new();
        for c in &counts {
            for &t in c.keys() {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let n = records.len() as f64;
        let idf: HashMap<u32, f64> = df
            .into_iter()
            .map(|(t, d)| (t, ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0))
            .collect();
        let unseen_idf = (1.0 + n).ln() + 1.0;
        let vectors = counts
            .into_iter()
            .map(|c| unit(weight(c, |t| idf[&t])))
            .collect();
        Ok(Self {
            records,
            interner,
            idf,
            unseen_idf,
            vectors,
        })
    }

    pub fn idf(&self, token: &str) -> f64 {
        self.interner
            .ids
            .get(token)
            .map_or(self.unseen_idf, |t| self.idf[t])
    }

    pub fn nearest(&self, probe: &[String], k: usize) -> Vec<Hit> {
        let p = unit(weight(self.interner.probe_counts(probe), |t| {
            self.idf.get(&t).copied().unwrap_or(self.unseen_idf)
        }));
        let mut hits: Vec<Hit> = self
            .records
            .iter()
            .zip(&self.vectors)
            .map(|(r, v)| Hit {
                id: r.id.clone(),
                similarity: sparse_dot(&p, v),
            })
            .collect();
        hits.sort_by(rank);
        hits.truncate(k);
        hits
    }

    pub fn retrieve(&self, probe: &[String]) -> &'a PreparedRecord {
        let best = &self.nearest(probe, 1)[0];
        self.records
            .iter()
            .find(|r| r.id == best.id)
            .expect("hit comes from the records")
    }
}

fn weight(mut v: Sparse, idf: impl Fn(u32) -> f64) -> Sparse {
    for (t, x) in v.iter_mut() {
        *x *= idf(*t);
    }
    v
}

fn unit(mut v: Sparse) -> Sparse {
    let n = sparse_norm(&v);
    if n > 0.0 {
        v.values_mut().for_each(|x| *x /= n);
    }
    v
}

/// Message tokens of the TF-IDF nearest neighbour.
pub fn tfidf_retrieve(train: &[PreparedRecord], probe_diff: &[String]) -> Result<Vec<String>> {
    Ok(TfIdf::new(train)?.retrieve(probe_diff).msg_tokens.clone())
}

/// Ids must be unique within a training set handed to the baselines.
pub fn check_unique_ids(records: &[PreparedRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(invalid!("duplicate id {}", r.id));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn rec(id: &str, diff: &str, msg: &str) -> PreparedRecord {
        PreparedRecord {
            id: id.into(),
            action_tokens: t(diff),
            msg_tokens: t(msg),
        }
    }

    fn entry(id: &str, v: &[f32]) -> IndexEntry {
        IndexEntry {
            id: id.into(),
            vector: normalize(v).unwrap(),
            msg_tokens: t("m"),
            diff_tokens: t("d"),
        }
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn query_examples() {
        let idx = RetrievalIndex::new(vec![entry("a", &[1.0, 0.0]), entry("b", &[1.0, 1.0])], "h".into()).unwrap();
        let a = idx.get("a").unwrap().vector.clone();
        let hits = idx.query(&a, 1, None).unwrap();
        assert_eq!(hits[0].id, "a");
        assert_abs_diff_eq!(hits[0].similarity, 1.0, epsilon = 1e-6);
        assert_eq!(idx.query(&a, 1, Some("a")).unwrap()[0].id, "b");
        let all = idx.query(&a, 10, None).unwrap();
        assert_eq!(all.iter().map(|h| h.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert!(idx.query(&a, 0, None).is_err());
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let idx = RetrievalIndex::new(vec![entry("z", &[1.0, 0.0]), entry("y", &[1.0, 0.0])], "h".into()).unwrap();
        assert_eq!(idx.query(&[1.0, 0.0], 1, None).unwrap()[0].id, "y");
    }

    #[test]
    fn index_rejects_bad_entries() {
        let mut bad = entry("a", &[1.0, 0.0]);
        bad.vector = vec![2.0, 0.0];
        assert!(RetrievalIndex::new(vec![bad], "h".into()).is_err());
        assert!(RetrievalIndex::new(vec![entry("a", &[1.0]), entry("a", &[2.0])], "h".into()).is_err());
    }

    #[test]
    fn index_file_round_trip() {
        let idx = RetrievalIndex::new(
            vec![entry("a", &[1.0, 2.0, 3.0]), entry("ü", &[-1.0, 0.5, 0.0])],
            "abc123".into(),
        )
        .unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], INDEX_MAGIC);
        assert_eq!(RetrievalIndex::read_from(buf.as_slice()).unwrap(), idx);
        buf.push(0);
        assert!(RetrievalIndex::read_from(buf.as_slice()).is_err());
        let empty = RetrievalIndex::new(vec![], "h".into()).unwrap();
        let mut buf = Vec::new();
        empty.write_to(&mut buf).unwrap();
        assert!(RetrievalIndex::read_from(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn nngen_examples() {
        let train = vec![
            rec("1", "a b c d", "first"),
            rec("2", "a b x y", "second"),
            rec("3", "p q r s", "third"),
        ];
        assert_eq!(nngen_retrieve(&train, &t("a b c d"), 3).unwrap(), t("first"));
        assert_eq!(nngen_retrieve(&train, &t("p q r"), 1).unwrap(), t("third"));
        assert!(nngen_retrieve(&[], &t("a"), 1).is_err());
    }

    #[test]
    fn nngen_rerank_by_hand() {
        // All three candidates share the bag {a, b, c} with the probe but in
        // different orders; the cosine ranking ties and the BLEU re-rank
        // decides.
        let train = vec![
            rec("1", "c a b", "one"),
            rec("2", "a b c", "two"),
            rec("3", "b a c", "three"),
        ];
        let probe = t("a b c");
        let nn = NnGen::new(&train).unwrap();
        let near = nn.nearest(&probe, 3);
        assert!(near.iter().all(|h| (h.similarity - 1.0).abs() < 1e-12));
        // Hand BLEU against "a b c", with p4 = (0+1)/(0+1) for 3-token
        // candidates. Record 2 is identical: 1. Record 1 "c a b" matches the
        // bigram "a b": p2 = (1+1)/(2+1), p3 = 1/2. Record 3 "b a c" matches
        // no bigram: p2 = 1/3, p3 = 1/2.
        let s1 = (2.0f64 / 3.0 * 0.5).powf(0.25);
        let s3 = (1.0f64 / 3.0 * 0.5).powf(0.25);
        assert_abs_diff_eq!(sentence_bnorm(&t("c a b"), &probe), s1, epsilon = 1e-12);
        assert_abs_diff_eq!(sentence_bnorm(&t("b a c"), &probe), s3, epsilon = 1e-12);
        assert_eq!(nn.retrieve(&probe, 3).unwrap().id, "2");
        let rest = vec![train[2].clone(), train[0].clone()];
        assert_eq!(NnGen::new(&rest).unwrap().retrieve(&probe, 2).unwrap().id, "1");
        // With k = 1 the cosine tie goes to the smaller id before re-ranking.
        assert_eq!(NnGen::new(&rest).unwrap().retrieve(&probe, 1).unwrap().id, "1");
        let tied = vec![rec("9", "b a c", "x"), rec("8", "c b a", "y")];
        assert_eq!(NnGen::new(&tied).unwrap().retrieve(&probe, 2).unwrap().id, "8");
    }

    #[test]
    fn tfidf_examples() {
        let one = vec![rec("x", "a b", "only")];
        assert_eq!(tfidf_retrieve(&one, &t("zz")).unwrap(), t("only"));
        let train = vec![rec("1", "a b", "m1"), rec("2", "a c", "m2"), rec("3", "a d d", "m3")];
        assert_eq!(tfidf_retrieve(&train, &t("a d d")).unwrap(), t("m3"));
    }

    #[test]
    fn tfidf_table_by_hand() {
        let train = vec![rec("1", "a b", "m1"), rec("2", "a c", "m2"), rec("3", "a c d", "m3")];
        let tf = TfIdf::new(&train).unwrap();
        // N = 3: idf(a) = ln(4/4) + 1 = 1, idf(c) = ln(4/3) + 1, idf(b) = ln 2 + 1.
        assert_abs_diff_eq!(tf.idf("a"), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tf.idf("c"), (4.0f64 / 3.0).ln() + 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tf.idf("b"), 2.0f64.ln() + 1.0, epsilon = 1e-12);
        // Probe "a c": doc 2 is the same bag (cosine 1); doc 3 adds d.
        let (ia, ic, id) = (1.0f64, (4.0f64 / 3.0).ln() + 1.0, 2.0f64.ln() + 1.0);
        let ib = id;
        let hits = tf.nearest(&t("a c"), 3);
        assert_eq!(hits[0].id, "2");
        assert_abs_diff_eq!(hits[0].similarity, 1.0, epsilon = 1e-12);
        let pn = (ia * ia + ic * ic).sqrt();
        let c3 = (ia * ia + ic * ic) / (pn * (ia * ia + ic * ic + id * id).sqrt());
        let c1 = ia * ia / (pn * (ia * ia + ib * ib).sqrt());
        assert_eq!(hits[1].id, "3");
        assert_abs_diff_eq!(hits[1].similarity, c3, epsilon = 1e-12);
        assert_abs_diff_eq!(hits[2].similarity, c1, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn self_retrieval_and_exclusion(vs in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 4), 1..20)) {
            let entries: Vec<IndexEntry> = vs.iter().enumerate()
                .filter(|(_, v)| v.iter().any(|&x| x.abs() > 1e-3))
                .map(|(i, v)| entry(&format!("e{i:03}"), v))
                .collect();
            let idx = RetrievalIndex::new(entries, "h".into()).unwrap();
            for e in idx.entries() {
                let top = &idx.query(&e.vector, 1, None).unwrap()[0];
                prop_assert!((top.similarity - 1.0).abs() < 1e-6);
                // Another entry may tie at 1.0 only if it is parallel; then it
                // must sort before by id.
                if top.id != e.id {
                    prop_assert!(top.id < e.id);
                }
                for h in idx.query(&e.vector, 3, Some(&e.id)).unwrap() {
                    prop_assert_ne!(&h.id, &e.id);
                }
            }
        }

        #[test]
        fn ranking_is_scale_invariant(vs in proptest::collection::vec(proptest::collection::vec(0.1f32..1.0, 3), 2..10), probe in proptest::collection::vec(0.1f32..1.0, 3), s in 0.5f32..4.0) {
            let entries: Vec<IndexEntry> = vs.iter().enumerate().map(|(i, v)| entry(&format!("e{i}"), v)).collect();
            let idx = RetrievalIndex::new(entries, "h".into()).unwrap();
            let scaled: Vec<f32> = probe.iter().map(|x| x * s).collect();
            let a: Vec<String> = idx.query(&normalize(&probe).unwrap(), 10, None).unwrap().into_iter().map(|h| h.id).collect();
            let b: Vec<String> = idx.query(&normalize(&scaled).unwrap(), 10, None).unwrap().into_iter().map(|h| h.id).collect();
            prop_assert_eq!(a, b);
        }
    }
}
