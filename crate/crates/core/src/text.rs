//! Dataset files, character tokenization, vocabulary and the seeded
//! train/validation/test split.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const RESERVED: usize = 3;

/// A labeled sentence; label 1 marks a description of illegal behavior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub label: usize,
    pub text: String,
}

impl Example {
    pub fn new(label: usize, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if label > 1 {
            return Err(Error::Label(format!("label {label} not in {{0,1}}")));
        }
        if text.trim().is_empty() {
            return Err(Error::Parse { line: 0, msg: "empty text".into() });
        }
        Ok(Self { label, text })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    pub fn label_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for e in &self.examples {
            c[e.label] += 1;
        }
        c
    }
}

/// Parses `<label>\t<text>` lines. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_dataset(content: &str) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, raw) in content.split('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse { line: line_no, msg: "expected <label>\\t<text>".into() })?;
        let label = match label {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Label(format!("line {line_no}: label {other:?} not in {{0,1}}"))),
        };
        if text.trim().is_empty() {
            return Err(Error::Parse { line: line_no, msg: "empty text".into() });
        }
        examples.push(Example { label, text: text.to_string() });
    }
    Ok(Dataset { examples })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = fs::read(path.as_ref())?;
    let content = String::from_utf8(bytes)
        .map_err(|e| Error::Parse { line: 0, msg: format!("{}: not UTF-8 ({e})", path.as_ref().display()) })?;
    parse_dataset(&content)
}

pub fn render_dataset(ds: &Dataset) -> String {
    let mut s = String::new();
    for e in &ds.examples {
        s.push_str(&format!("{}\t{}\n", e.label, e.text));
    }
    s
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(render_dataset(ds).as_bytes())?;
    Ok(())
}

/// One token per Unicode scalar value, dropping ASCII whitespace and
/// control characters. No case folding.
pub fn tokenize(text: &str) -> Vec<char> {
    text.chars().filter(|c| !c.is_ascii_whitespace() && !c.is_control()).collect()
}

/// Character vocabulary with reserved ids PAD=0, UNK=1, CLS=2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i + RESERVED).is_some() {
                return Err(Error::Vocab(format!("duplicate token {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn token(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED).and_then(|i| self.chars.get(i)).copied()
    }

    /// Non-reserved tokens in id order.
    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

/// Tokens occurring at least `min_count` times get ids 3, 4, … by
/// descending frequency, ties broken by first occurrence.
pub fn build_vocab(ds: &Dataset, min_count: usize) -> Vocabulary {
    let mut counts: HashMap<char, (usize, usize)> = HashMap::new();
    let mut order = 0;
    for e in &ds.examples {
        for c in tokenize(&e.text) {
            let entry = counts.entry(c).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            entry.0 += 1;
        }
    }
    let mut ranked: Vec<(char, usize, usize)> =
        counts.into_iter().filter(|(_, (n, _))| *n >= min_count.max(1)).map(|(c, (n, first))| (c, n, first)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    Vocabulary::from_chars(ranked.into_iter().map(|(c, _, _)| c).collect()).expect("token counts are keyed uniquely")
}

/// `[CLS] + ids(tokens)` truncated to `max_len − 1` tokens and right-padded
/// with PAD. Returns the ids and the true length (including CLS).
pub fn encode_pad(tokens: &[char], max_len: usize, vocab: &Vocabulary) -> Result<(Vec<usize>, usize)> {
    if max_len < 2 {
        return Err(Error::Param(format!("max_len {max_len} < 2")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(tokens.iter().take(max_len - 1).map(|&c| vocab.id(c)));
    let len = ids.len();
    ids.resize(max_len, PAD);
    Ok((ids, len))
}

/// Fractions of the whole dataset held out for test and validation; the
/// train split takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub test: f64,
    pub val: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self { test: 0.20, val: 0.16, seed }
    }

    pub fn train(&self) -> f64 {
        1.0 - self.test - self.val
    }

    /// (train, val, test) sizes for `n` examples, rounding half up.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let test = round_half_up(n as f64 * self.test);
        let val = round_half_up(n as f64 * self.val);
        (n - test - val, val, test)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

pub const MIN_SPLIT_SIZE: usize = 5;

/// Seeded shuffle, then test, validation and train slices in that order.
pub fn split_dataset(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let n = ds.len();
    if n < MIN_SPLIT_SIZE {
        return Err(Error::Size(format!("cannot split {n} examples, need at least {MIN_SPLIT_SIZE}")));
    }
    let ok = |f: f64| (0.0..1.0).contains(&f);
    if !ok(spec.test) || !ok(spec.val) || spec.train() <= 0.0 {
        return Err(Error::Param(format!("invalid split fractions test={} val={}", spec.test, spec.val)));
    }
    let (n_train, n_val, n_test) = spec.counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(spec.seed).shuffle(&mut order);
    let take = |idx: &[usize]| Dataset::new(idx.iter().map(|&i| ds.examples[i].clone()).collect());
    let test = take(&order[..n_test]);
    let val = take(&order[n_test..n_test + n_val]);
    let train = take(&order[n_test + n_val..]);
    debug_assert_eq!(train.len(), n_train);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds(texts: &[&str]) -> Dataset {
        Dataset::new(texts.iter().map(|t| Example::new(0, *t).unwrap()).collect())
    }

    #[test]
    fn parses_a_line() {
        let d = parse_dataset("1\t某某实施了诈骗\n").unwrap();
        assert_eq!(d.examples, vec![Example { label: 1, text: "某某实施了诈骗".into() }]);
        assert!(parse_dataset("").unwrap().is_empty());
    }

    #[test]
    fn bad_label_names_line() {
        let err = parse_dataset("2\tx").unwrap_err();
        assert!(matches!(err, Error::Label(_)));
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = parse_dataset("0\tok\nno tab here").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn tokenize_cases() {
        assert_eq!(tokenize("合法"), vec!['合', '法']);
        assert_eq!(tokenize("a b"), vec!['a', 'b']);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A\tb\u{7}"), vec!['A', 'b']);
    }

    #[test]
    fn vocab_frequency_order() {
        let v = build_vocab(&ds(&["aa", "ab"]), 1);
        assert_eq!(v.id('a'), 3);
        assert_eq!(v.id('b'), 4);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id('z'), UNK);
        assert_eq!(build_vocab(&Dataset::default(), 1).len(), 3);
        assert_eq!(build_vocab(&ds(&["ab"]), 2).len(), 3);
    }

    #[test]
    fn vocab_ties_follow_first_occurrence() {
        let v = build_vocab(&ds(&["cba", "abc"]), 1);
        assert_eq!(v.chars(), &['c', 'b', 'a']);
    }

    #[test]
    fn encode_pad_cases() {
        let v = build_vocab(&ds(&["合法"]), 1);
        let (ids, len) = encode_pad(&['合', '法'], 5, &v).unwrap();
        assert_eq!(ids, vec![CLS, v.id('合'), v.id('法'), PAD, PAD]);
        assert_eq!(len, 3);
        let (ids, len) = encode_pad(&['合', '法', '合', '法'], 3, &v).unwrap();
        assert_eq!(ids, vec![CLS, v.id('合'), v.id('法')]);
        assert_eq!(len, 3);
        let (ids, len) = encode_pad(&[], 3, &v).unwrap();
        assert_eq!((ids, len), (vec![CLS, PAD, PAD], 1));
        assert!(encode_pad(&[], 1, &v).is_err());
    }

    #[test]
    fn split_counts() {
        let spec = SplitSpec::new(0);
        assert_eq!(spec.counts(6755), (4323, 1081, 1351));
        assert_eq!(spec.counts(100), (64, 16, 20));
        let small = ds(&["a", "b", "c", "d"]);
        assert!(matches!(split_dataset(&small, &spec), Err(Error::Size(_))));
    }

    proptest! {
        #[test]
        fn split_partitions(n in 5usize..300, seed in any::<u64>()) {
            let data = Dataset::new((0..n).map(|i| Example { label: i % 2, text: format!("t{i}") }).collect());
            let spec = SplitSpec::new(seed);
            let (tr, va, te) = split_dataset(&data, &spec).unwrap();
            prop_assert_eq!((tr.len(), va.len(), te.len()), spec.counts(n));
            let mut all: Vec<String> = tr.iter().chain(va.iter()).chain(te.iter()).map(|e| e.text.clone()).collect();
            all.sort();
            let mut orig: Vec<String> = data.iter().map(|e| e.text.clone()).collect();
            orig.sort();
            prop_assert_eq!(all, orig);
            let again = split_dataset(&data, &spec).unwrap();
            prop_assert_eq!(again, (tr, va, te));
        }

        #[test]
        fn encode_has_fixed_length(text in "\\PC{0,40}", max_len in 2usize..20) {
            let v = build_vocab(&Dataset::new(vec![Example { label: 0, text: text.clone() }]), 1);
            let (ids, len) = encode_pad(&tokenize(&text), max_len, &v).unwrap();
            prop_assert_eq!(ids.len(), max_len);
            prop_assert_eq!(ids[0], CLS);
            prop_assert!(len >= 1 && len <= max_len);
        }

        #[test]
        fn tokenize_commutes_with_concat(a in "[^\\s\\p{Cc}]{0,12}", b in "[^\\s\\p{Cc}]{0,12}") {
            let mut joined = tokenize(&a);
            joined.extend(tokenize(&b));
            prop_assert_eq!(tokenize(&format!("{a}{b}")), joined);
        }

        #[test]
        fn lookup_is_total(c in any::<char>()) {
            let v = build_vocab(&ds(&["合法"]), 1);
            prop_assert!(v.id(c) < v.len());
        }
    }
}
