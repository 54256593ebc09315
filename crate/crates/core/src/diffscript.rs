//! Token-level edit scripts between two versions of a file.
//!
//! Matching follows the Ratcliff–Obershelp scheme used by Python's
//! `difflib.SequenceMatcher` (without its junk heuristics): find the longest
//! common contiguous block, then recurse on the pieces to its left and right.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const KEEP: &str = "<keep>";
pub const KEEP_END: &str = "<keep_end>";
pub const INSERT: &str = "<insert>";
pub const INSERT_END: &str = "<insert_end>";
pub const DELETE: &str = "<delete>";
pub const DELETE_END: &str = "<delete_end>";
pub const REPLACE_OLD: &str = "<replace_old>";
pub const REPLACE_NEW: &str = "<replace_new>";
pub const REPLACE_END: &str = "<replace_end>";

/// The nine action markers, in vocabulary order.
pub const ACTION_MARKERS: [&str; 9] = [
    KEEP,
    KEEP_END,
    INSERT,
    INSERT_END,
    DELETE,
    DELETE_END,
    REPLACE_OLD,
    REPLACE_NEW,
    REPLACE_END,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Keep,
    Insert,
    Delete,
    Replace,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpan {
    pub action: Action,
    pub old_span: Vec<String>,
    pub new_span: Vec<String>,
}

impl ActionSpan {
    pub fn keep(tokens: Vec<String>) -> Self {
        Self {
            action: Action::Keep,
            old_span: tokens.clone(),
            new_span: tokens,
        }
    }

    pub fn insert(tokens: Vec<String>) -> Self {
        Self {
            action: Action::Insert,
            old_span: Vec::new(),
            new_span: tokens,
        }
    }

    pub fn delete(tokens: Vec<String>) -> Self {
        Self {
            action: Action::Delete,
            old_span: tokens,
            new_span: Vec::new(),
        }
    }

    pub fn replace(old: Vec<String>, new: Vec<String>) -> Self {
        Self {
            action: Action::Replace,
            old_span: old,
            new_span: new,
        }
    }

    fn check(&self) -> Result<()> {
        let (o, n) = (&self.old_span, &self.new_span);
        let ok = match self.action {
            Action::Keep => !o.is_empty() && o == n,
            Action::Insert => o.is_empty() && !n.is_empty(),
            Action::Delete => !o.is_empty() && n.is_empty(),
            Action::Replace => !o.is_empty() && !n.is_empty() && o != n,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid!("malformed {:?} span: old {o:?}, new {n:?}", self.action))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditScript {
    pub spans: Vec<ActionSpan>,
}

impl EditScript {
    /// Checks per-span invariants and that no two neighbours share an action.
    pub fn validate(&self) -> Result<()> {
        for s in &self.spans {
            s.check()?;
        }
        if let Some(w) = self.spans.windows(2).find(|w| w[0].action == w[1].action) {
            return Err(invalid!("adjacent {:?} spans", w[0].action));
        }
        Ok(())
    }

    /// True when valid and no delete/insert pair sits side by side.
    pub fn is_canonical(&self) -> bool {
        self.validate().is_ok()
            && self.spans.windows(2).all(|w| {
                !matches!(
                    (w[0].action, w[1].action),
                    (Action::Delete, Action::Insert) | (Action::Insert, Action::Delete)
                )
            })
    }

    /// Number of tokens [`render_action_sequence`] will produce.
    pub fn rendered_len(&self) -> usize {
        self.spans
            .iter()
            .map(|s| match s.action {
                Action::Keep => s.old_span.len() + 2,
                Action::Insert => s.new_span.len() + 2,
                Action::Delete => s.old_span.len() + 2,
                Action::Replace => s.old_span.len() + s.new_span.len() + 3,
            })
            .sum()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Splits source text into identifier/number runs (`[A-Za-z0-9_]+`) and
/// single-character punctuation tokens; whitespace separates tokens.
pub fn tokenize_code(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if is_word_char(c) {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// A common block: `a[a_start..a_start + len] == b[b_start..b_start + len]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchBlock {
    pub a_start: usize,
    pub b_start: usize,
    pub len: usize,
}

struct Matcher<'a, T> {
    a: &'a [T],
    b: &'a [T],
    b2j: HashMap<&'a T, Vec<usize>>,
    prev: Vec<usize>,
    cur: Vec<usize>,
}

impl<'a, T: Eq + Hash> Matcher<'a, T> {
    fn new(a: &'a [T], b: &'a [T]) -> Self {
        let mut b2j: HashMap<&T, Vec<usize>> = HashMap::new();
        for (j, t) in b.iter().enumerate() {
            b2j.entry(t).or_default().push(j);
        }
        Self {
            a,
            b,
            b2j,
            prev: vec![0; b.len() + 1],
            cur: vec![0; b.len() + 1],
        }
    }

    /// Longest block inside `a[alo..ahi]` × `b[blo..bhi]`; ties go to the
    /// smallest start in `a`, then the smallest start in `b`.
    fn longest(&mut self, alo: usize, ahi: usize, blo: usize, bhi: usize) -> MatchBlock {
        let mut best = MatchBlock {
            a_start: alo,
            b_start: blo,
            len: 0,
        };
        // prev[j + 1] holds the length of the common run ending at (i - 1, j).
        let mut prev_touched: Vec<usize> = Vec::new();
        let mut cur_touched: Vec<usize> = Vec::new();
        for i in alo..ahi {
            if let Some(js) = self.b2j.get(&self.a[i]) {
                let start = js.partition_point(|&j| j < blo);
                for &j in &js[start..] {
                    if j >= bhi {
                        break;
                    }
                    let k = self.prev[j] + 1;
                    self.cur[j + 1] = k;
                    cur_touched.push(j + 1);
                    if k > best.len {
                        best = MatchBlock {
                            a_start: i + 1 - k,
                            b_start: j + 1 - k,
                            len: k,
                        };
                    }
                }
            }
            for &t in &prev_touched {
                self.prev[t] = 0;
            }
            prev_touched.clear();
            std::mem::swap(&mut self.prev, &mut self.cur);
            std::mem::swap(&mut prev_touched, &mut cur_touched);
        }
        for &t in &prev_touched {
            self.prev[t] = 0;
        }
        best
    }

    fn blocks(mut self) -> Vec<MatchBlock> {
        let mut out = Vec::new();
        let mut stack = vec![(0, self.a.len(), 0, self.b.len())];
        while let Some((alo, ahi, blo, bhi)) = stack.pop() {
            let m = self.longest(alo, ahi, blo, bhi);
            if m.len == 0 {
                continue;
            }
            out.push(m);
            if alo < m.a_start && blo < m.b_start {
                stack.push((alo, m.a_start, blo, m.b_start));
            }
            let (ae, be) = (m.a_start + m.len, m.b_start + m.len);
            if ae < ahi && be < bhi {
                stack.push((ae, ahi, be, bhi));
            }
        }
        out.sort_by_key(|m| (m.a_start, m.b_start));
        // Merge blocks that touch in both sequences.
        let mut merged: Vec<MatchBlock> = Vec::with_capacity(out.len());
        for m in out {
            match merged.last_mut() {
                Some(p) if p.a_start + p.len == m.a_start && p.b_start + p.len == m.b_start => {
                    p.len += m.len;
                }
                _ => merged.push(m),
            }
        }
        merged
    }
}

/// Ordered, non-overlapping common blocks of `a` and `b`.
pub fn matching_blocks<T: Eq + Hash>(a: &[T], b: &[T]) -> Vec<MatchBlock> {
    Matcher::new(a, b).blocks()
}

/// Edit script turning `old` into `new`, in canonical form.
pub fn compute_edit_script(old: &[String], new: &[String]) -> EditScript {
    let mut spans = Vec::new();
    let (mut i, mut j) = (0, 0);
    let sentinel = MatchBlock {
        a_start: old.len(),
        b_start: new.len(),
        len: 0,
    };
    for m in matching_blocks(old, new).into_iter().chain([sentinel]) {
        let (o, n) = (&old[i..m.a_start], &new[j..m.b_start]);
        match (o.is_empty(), n.is_empty()) {
            (true, true) => {}
            (false, true) => spans.push(ActionSpan::delete(o.to_vec())),
            (true, false) => spans.push(ActionSpan::insert(n.to_vec())),
            (false, false) => spans.push(ActionSpan::replace(o.to_vec(), n.to_vec())),
        }
        if m.len > 0 {
            spans.push(ActionSpan::keep(old[m.a_start..m.a_start + m.len].to_vec()));
        }
        i = m.a_start + m.len;
        j = m.b_start + m.len;
    }
    EditScript { spans }
}

/// Flattens a script into marker-delimited tokens.
pub fn render_action_sequence(script: &EditScript) -> Result<Vec<String>> {
    script.validate()?;
    let mut out = Vec::with_capacity(script.rendered_len());
    let push = |out: &mut Vec<String>, marker: &str| out.push(marker.to_string());
    for s in &script.spans {
        match s.action {
            Action::Keep => {
                push(&mut out, KEEP);
                out.extend(s.old_span.iter().cloned());
                push(&mut out, KEEP_END);
            }
            Action::Insert => {
                push(&mut out, INSERT);
                out.extend(s.new_span.iter().cloned());
                push(&mut out, INSERT_END);
            }
            Action::Delete => {
                push(&mut out, DELETE);
                out.extend(s.old_span.iter().cloned());
                push(&mut out, DELETE_END);
            }
            Action::Replace => {
                push(&mut out, REPLACE_OLD);
                out.extend(s.old_span.iter().cloned());
                push(&mut out, REPLACE_NEW);
                out.extend(s.new_span.iter().cloned());
                push(&mut out, REPLACE_END);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`render_action_sequence`].
pub fn parse_action_sequence(tokens: &[String]) -> Result<EditScript> {
    fn take_until<'t>(
        tokens: &'t [String],
        pos: &mut usize,
        end: &str,
    ) -> Result<&'t [String]> {
        let start = *pos;
        while *pos < tokens.len() {
            let t = tokens[*pos].as_str();
            if t == end {
                let span = &tokens[start..*pos];
                *pos += 1;
                return Ok(span);
            }
            if ACTION_MARKERS.contains(&t) {
                return Err(invalid!("unexpected {t} at {}, expected {end}", *pos));
            }
            *pos += 1;
        }
        Err(invalid!("missing {end}"))
    }

    let mut spans = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let marker = tokens[pos].as_str();
        pos += 1;
        let span = match marker {
            KEEP => ActionSpan::keep(take_until(tokens, &mut pos, KEEP_END)?.to_vec()),
            INSERT => ActionSpan::insert(take_until(tokens, &mut pos, INSERT_END)?.to_vec()),
            DELETE => ActionSpan::delete(take_until(tokens, &mut pos, DELETE_END)?.to_vec()),
            REPLACE_OLD => {
                let old = take_until(tokens, &mut pos, REPLACE_NEW)?.to_vec();
                let new = take_until(tokens, &mut pos, REPLACE_END)?.to_vec();
                ActionSpan::replace(old, new)
            }
            other => return Err(invalid!("expected an action marker at {}, found {other:?}", pos - 1)),
        };
        spans.push(span);
    }
    let script = EditScript { spans };
    script.validate()?;
    Ok(script)
}

/// Concatenated old and new spans.
pub fn apply_edit_script(script: &EditScript) -> (Vec<String>, Vec<String>) {
    let mut old = Vec::new();
    let mut new = Vec::new();
    for s in &script.spans {
        old.extend(s.old_span.iter().cloned());
        new.extend(s.new_span.iter().cloned());
    }
    (old, new)
}

/// Tokenizes both versions of a file and renders their action sequence.
pub fn diff_texts(old_text: &str, new_text: &str) -> Vec<String> {
    let script = compute_edit_script(&tokenize_code(old_text), &tokenize_code(new_text));
    render_action_sequence(&script).expect("computed scripts are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn tokenizer_examples() {
        assert!(tokenize_code("").is_empty());
        assert_eq!(tokenize_code("x=1"), toks("x = 1"));
        assert_eq!(tokenize_code("foo_bar(a, b)"), toks("foo_bar ( a , b )"));
        assert_eq!(tokenize_code("  a\n\t+= b2;"), toks("a + = b2 ;"));
    }

    #[test]
    fn tokenizer_is_idempotent_on_joined_output() {
        let t = tokenize_code("if (x->y >= 10) { return foo::bar(\"s\"); }");
        assert_eq!(tokenize_code(&t.join(" ")), t);
    }

    #[test]
    fn identical_sequences_keep() {
        let s = compute_edit_script(&toks("a b"), &toks("a b"));
        assert_eq!(s.spans, vec![ActionSpan::keep(toks("a b"))]);
    }

    #[test]
    fn pure_insertion() {
        let s = compute_edit_script(&[], &toks("a"));
        assert_eq!(s.spans, vec![ActionSpan::insert(toks("a"))]);
    }

    #[test]
    fn literal_change_is_keep_then_replace() {
        let s = compute_edit_script(&toks("a = 1"), &toks("a = 2"));
        assert_eq!(
            s.spans,
            vec![
                ActionSpan::keep(toks("a =")),
                ActionSpan::replace(toks("1"), toks("2"))
            ]
        );
    }

    #[test]
    fn disjoint_alphabets_are_one_replace() {
        let s = compute_edit_script(&toks("a b c"), &toks("x y"));
        assert_eq!(s.spans, vec![ActionSpan::replace(toks("a b c"), toks("x y"))]);
    }

    #[test]
    fn longest_block_ties_prefer_earliest() {
        // "a" matches at b[0] and b[2]; earliest wins.
        let m = matching_blocks(&toks("a"), &toks("a x a"));
        assert_eq!(
            m,
            vec![MatchBlock {
                a_start: 0,
                b_start: 0,
                len: 1
            }]
        );
        // Two blocks of length 2 in a; the earlier one in a is chosen first.
        let m = matching_blocks(&toks("p q z r s"), &toks("r s p q"));
        assert_eq!(m[0].a_start, 0);
        assert_eq!(m[0].len, 2);
    }

    #[test]
    fn render_examples() {
        let keep = EditScript {
            spans: vec![ActionSpan::keep(toks("a ="))],
        };
        assert_eq!(render_action_sequence(&keep).unwrap(), toks("<keep> a = <keep_end>"));
        let rep = EditScript {
            spans: vec![ActionSpan::replace(toks("1"), toks("2"))],
        };
        assert_eq!(
            render_action_sequence(&rep).unwrap(),
            toks("<replace_old> 1 <replace_new> 2 <replace_end>")
        );
        assert!(render_action_sequence(&EditScript::default()).unwrap().is_empty());
    }

    #[test]
    fn render_rejects_invalid_scripts() {
        let bad = EditScript {
            spans: vec![ActionSpan {
                action: Action::Keep,
                old_span: toks("a"),
                new_span: toks("b"),
            }],
        };
        assert!(render_action_sequence(&bad).is_err());
        let adjacent = EditScript {
            spans: vec![ActionSpan::keep(toks("a")), ActionSpan::keep(toks("b"))],
        };
        assert!(render_action_sequence(&adjacent).is_err());
    }

    #[test]
    fn apply_examples() {
        let s = EditScript {
            spans: vec![ActionSpan::keep(toks("a"))],
        };
        assert_eq!(apply_edit_script(&s), (toks("a"), toks("a")));
        let s = EditScript {
            spans: vec![ActionSpan::delete(toks("x")), ActionSpan::insert(toks("y"))],
        };
        assert_eq!(apply_edit_script(&s), (toks("x"), toks("y")));
        assert!(!s.is_canonical());
    }

    #[test]
    fn parser_rejects_garbage() {
        assert!(parse_action_sequence(&toks("a b")).is_err());
        assert!(parse_action_sequence(&toks("<keep> a")).is_err());
        assert!(parse_action_sequence(&toks("<keep> a <insert_end>")).is_err());
        assert!(parse_action_sequence(&toks("<replace_old> a <replace_end>")).is_err());
    }

    #[test]
    fn rendered_len_matches_rendering() {
        let s = compute_edit_script(&toks("a b c d e"), &toks("a x c e f"));
        assert_eq!(render_action_sequence(&s).unwrap().len(), s.rendered_len());
    }
}
