//! Ingredient canonicalization and instruction tokenization.
//!
//! Raw ingredient names go through [`normalize_name`], then
//! [`merge_shared_bigrams`], [`cluster_head_words`] and
//! [`filter_by_frequency`]. Every rename is logged as a `from -> to` step,
//! so a raw name resolves to its canonical entry by following the chain.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::RecipeRecord;
use crate::Error;

pub const SOR: &str = "<sor>";
pub const EOR: &str = "<eor>";
pub const EOI: &str = "<eoi>";
pub const UNK: &str = "<unk>";
pub const SOR_ID: usize = 0;
pub const EOR_ID: usize = 1;
pub const EOI_ID: usize = 2;
pub const UNK_ID: usize = 3;
const SPECIALS: [&str; 4] = [SOR, EOR, EOI, UNK];

/// Canonical name to corpus count.
pub type NameCounts = BTreeMap<String, usize>;

/// One rename: `(from, to)`.
pub type MergeStep = (String, String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    /// Ingredients seen fewer times are discarded.
    pub min_count: usize,
    /// Words seen fewer times become `<unk>`.
    pub min_word_count: usize,
    /// Extra head words that names may cluster onto even when they never
    /// occur as standalone ingredients.
    pub head_words: Vec<String>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_count: 10,
            min_word_count: 10,
            head_words: Vec::new(),
        }
    }
}

const IRREGULAR: [(&str, &str); 9] = [
    ("leaves", "leaf"),
    ("halves", "half"),
    ("loaves", "loaf"),
    ("knives", "knife"),
    ("cookies", "cookie"),
    ("brownies", "brownie"),
    ("smoothies", "smoothie"),
    ("veggies", "veggie"),
    ("calories", "calorie"),
];

const UNCOUNTABLE: [&str; 9] = [
    "molasses", "hummus", "couscous", "asparagus", "citrus", "swiss", "grits", "brussels", "series",
];

/// Singular form of one lowercase word.
pub fn singularize(word: &str) -> String {
    if let Some((_, s)) = IRREGULAR.iter().find(|(p, _)| *p == word) {
        return s.to_string();
    }
    if UNCOUNTABLE.contains(&word) || word.len() <= 3 {
        return word.to_string();
    }
    if word.ends_with("ss") || word.ends_with("us") || word.ends_with("is") {
        return word.to_string();
    }
    if word.len() >= 5 && word.ends_with("ies") {
        return format!("{}y", &word[..word.len() - 3]);
    }
    if word.ends_with("oes") || word.ends_with("sses") {
        return word[..word.len() - 2].to_string();
    }
    match word.strip_suffix('s') {
        Some(stem) => stem.to_string(),
        None => word.to_string(),
    }
}

/// Lowercases, trims, collapses inner whitespace and singularizes the last
/// word.
pub fn normalize_name(raw: &str) -> Result<String, Error> {
    let lower = raw.to_lowercase();
    let mut words: Vec<&str> = lower.split_whitespace().collect();
    let Some(last) = words.pop() else {
        return Err(Error::Validation(format!("rejected ingredient token {raw:?}: empty after normalization")));
    };
    let last = singularize(last);
    let mut out = words.join(" ");
    if !out.is_empty() {
        out.push(' ');
    }
    out.push_str(&last);
    Ok(out)
}

fn words(name: &str) -> Vec<&str> {
    name.split(' ').collect()
}

fn share_bigram(a: &str, b: &str) -> bool {
    let (wa, wb) = (words(a), words(b));
    if wa.len() < 2 || wb.len() < 2 {
        return false;
    }
    wa[..2] == wb[..2] || wa[wa.len() - 2..] == wb[wb.len() - 2..]
}

/// Survivor of a merge: the shorter name, then the more frequent, then the
/// lexicographically smaller.
fn survivor<'a>(a: &'a str, b: &'a str, counts: &NameCounts) -> &'a str {
    let key = |n: &str| (n.chars().count(), std::cmp::Reverse(counts[n]), n.to_string());
    if key(a) <= key(b) {
        a
    } else {
        b
    }
}

/// Merges names sharing their first two or last two words until no such
/// pair remains. Pairs are taken in lexicographic order.
pub fn merge_shared_bigrams(names: &NameCounts) -> (NameCounts, Vec<MergeStep>) {
    let mut counts = names.clone();
    let mut log = Vec::new();
    loop {
        let keys: Vec<&String> = counts.keys().collect();
        let pair = keys
            .iter()
            .enumerate()
            .find_map(|(i, a)| keys[i + 1..].iter().find(|b| share_bigram(a, b)).map(|b| ((*a).clone(), (*b).clone())));
        let Some((a, b)) = pair else { break };
        let keep = survivor(&a, &b, &counts).to_string();
        let gone = if keep == a { b } else { a };
        let c = counts.remove(&gone).unwrap();
        *counts.get_mut(&keep).unwrap() += c;
        log.push((gone, keep));
    }
    (counts, log)
}

/// Collapses multi-word names onto a first or last word that is itself an
/// ingredient (or listed in `head_words`) and shared by at least two names.
/// The last word wins when both qualify.
pub fn cluster_head_words(names: &NameCounts, head_words: &[String]) -> (NameCounts, Vec<MergeStep>) {
    let single: BTreeSet<&str> = names.keys().filter(|n| !n.contains(' ')).map(String::as_str).collect();
    let mut sharing: BTreeMap<&str, usize> = BTreeMap::new();
    for name in names.keys() {
        let w = words(name);
        let ends: BTreeSet<&str> = [w[0], w[w.len() - 1]].into();
        for e in ends {
            *sharing.entry(e).or_default() += 1;
        }
    }
    let is_head = |w: &str| {
        (single.contains(w) || head_words.iter().any(|h| h == w)) && sharing.get(w).copied().unwrap_or(0) >= 2
    };
    let mut counts = NameCounts::new();
    let mut log = Vec::new();
    for (name, &c) in names {
        let w = words(name);
        let target = if w.len() < 2 {
            None
        } else if is_head(w[w.len() - 1]) {
            Some(w[w.len() - 1])
        } else if is_head(w[0]) {
            Some(w[0])
        } else {
            None
        };
        let to = target.map(str::to_string).unwrap_or_else(|| name.clone());
        if to != *name {
            log.push((name.clone(), to.clone()));
        }
        *counts.entry(to).or_default() += c;
    }
    (counts, log)
}

/// Keeps names counted at least `min_count` times.
pub fn filter_by_frequency(names: NameCounts, min_count: usize) -> Result<NameCounts, Error> {
    let kept: NameCounts = names.into_iter().filter(|(_, c)| *c >= min_count).collect();
    if kept.is_empty() {
        return Err(Error::Validation(format!("no ingredient occurs at least {min_count} times")));
    }
    Ok(kept)
}

#[derive(Serialize, Deserialize)]
struct IngredientVocabularyRepr {
    names: Vec<String>,
    counts: Vec<usize>,
    merge_log: Vec<MergeStep>,
}

impl TryFrom<IngredientVocabularyRepr> for IngredientVocabulary {
    type Error = Error;

    fn try_from(r: IngredientVocabularyRepr) -> Result<Self, Error> {
        Self::from_parts(r.names, r.counts, r.merge_log)
    }
}

/// Canonical ingredient dictionary with the rename log that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IngredientVocabularyRepr")]
pub struct IngredientVocabulary {
    names: Vec<String>,
    counts: Vec<usize>,
    merge_log: Vec<MergeStep>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    #[serde(skip)]
    renames: BTreeMap<String, String>,
}

impl IngredientVocabulary {
    /// Ids follow descending count, then name.
    pub fn from_counts(counts: NameCounts, merge_log: Vec<MergeStep>) -> Result<Self, Error> {
        let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
        if entries.is_empty() {
            return Err(Error::Validation("empty ingredient vocabulary".into()));
        }
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let (names, counts) = entries.into_iter().unzip();
        Self::from_parts(names, counts, merge_log)
    }

    fn from_parts(names: Vec<String>, counts: Vec<usize>, merge_log: Vec<MergeStep>) -> Result<Self, Error> {
        let mut index = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.trim() != n || n.to_lowercase() != *n {
                return Err(Error::Validation(format!("ingredient name {n:?} is not canonical")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Validation(format!("ingredient {n:?} listed twice")));
            }
        }
        let mut renames = BTreeMap::new();
        for (from, to) in &merge_log {
            renames.insert(from.clone(), to.clone());
        }
        Ok(IngredientVocabulary {
            names,
            counts,
            merge_log,
            index,
            renames,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count(&self, id: usize) -> usize {
        self.counts[id]
    }

    pub fn id(&self, canonical: &str) -> Option<usize> {
        self.index.get(canonical).copied()
    }

    pub fn merge_log(&self) -> &[MergeStep] {
        &self.merge_log
    }

    /// End of the rename chain starting at `raw`; names the log never
    /// saw are normalized first.
    pub fn canonical(&self, raw: &str) -> String {
        let mut name = if self.renames.contains_key(raw) || self.index.contains_key(raw) {
            raw.to_string()
        } else {
            normalize_name(raw).unwrap_or_else(|_| raw.to_string())
        };
        for _ in 0..=self.merge_log.len() {
            match self.renames.get(&name) {
                Some(next) => name = next.clone(),
                None => break,
            }
        }
        name
    }

    /// Id of a raw corpus name, if its canonical form survived filtering.
    pub fn lookup(&self, raw: &str) -> Option<usize> {
        self.id(&self.canonical(raw))
    }

    /// Ids of a raw ingredient list, dropping unknown names and repeats
    /// while keeping first-seen order.
    pub fn encode_list(&self, raw: &[String]) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        raw.iter()
            .filter_map(|r| self.lookup(r))
            .filter(|&id| seen.insert(id))
            .collect()
    }

    /// `id<TAB>name<TAB>count` lines sorted by id.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, (n, c)) in self.names.iter().zip(&self.counts).enumerate() {
            writeln!(s, "{i}\t{n}\t{c}").unwrap();
        }
        s
    }

    /// `raw<TAB>canonical` lines in the order the renames happened.
    pub fn merge_log_tsv(&self) -> String {
        let mut s = String::new();
        for (from, to) in &self.merge_log {
            writeln!(s, "{from}\t{to}").unwrap();
        }
        s
    }

    pub fn from_tsv(vocab: &str, merge_log: &str) -> Result<Self, Error> {
        let mut names = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in vocab.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("vocabulary line {}: expected id<TAB>name<TAB>count", i + 1));
            if f.len() != 3 {
                return Err(bad());
            }
            let id: usize = f[0].parse().map_err(|_| bad())?;
            if id != i {
                return Err(Error::Format(format!("vocabulary line {}: id {id} out of order", i + 1)));
            }
            names.push(f[1].to_string());
            counts.push(f[2].parse().map_err(|_| bad())?);
        }
        let mut log = Vec::new();
        for (i, line) in merge_log.lines().enumerate() {
            let (from, to) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("merge log line {}: expected raw<TAB>canonical", i + 1)))?;
            log.push((from.to_string(), to.to_string()));
        }
        Self::from_parts(names, counts, log)
    }

    pub fn save(&self, vocab_path: &Path, log_path: &Path) -> Result<(), Error> {
        std::fs::write(vocab_path, self.to_tsv()).map_err(|e| Error::io(vocab_path, e))?;
        std::fs::write(log_path, self.merge_log_tsv()).map_err(|e| Error::io(log_path, e))
    }

    pub fn load(vocab_path: &Path, log_path: &Path) -> Result<Self, Error> {
        let v = std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let l = std::fs::read_to_string(log_path).map_err(|e| Error::io(log_path, e))?;
        Self::from_tsv(&v, &l)
    }

}

/// Normalize, merge, cluster, filter. `raw` pairs names with their counts;
/// repeated names add up.
pub fn build_ingredient_vocab<'a>(
    raw: impl IntoIterator<Item = (&'a str, usize)>,
    cfg: &VocabConfig,
) -> Result<IngredientVocabulary, Error> {
    let mut counts = NameCounts::new();
    let mut log = Vec::new();
    let mut seen = BTreeSet::new();
    for (name, c) in raw {
        let canon = normalize_name(name)?;
        if canon != name && seen.insert(name.to_string()) {
            log.push((name.to_string(), canon.clone()));
        }
        *counts.entry(canon).or_default() += c;
    }
    if counts.is_empty() {
        return Err(Error::Validation("empty ingredient corpus".into()));
    }
    let (merged, merge_log) = merge_shared_bigrams(&counts);
    let (clustered, cluster_log) = cluster_head_words(&merged, &cfg.head_words);
    let kept = filter_by_frequency(clustered, cfg.min_count)?;
    log.extend(merge_log);
    log.extend(cluster_log);
    IngredientVocabulary::from_counts(kept, log)
}

/// Raw ingredient names of a corpus with their occurrence counts.
pub fn count_ingredients(records: &[RecipeRecord]) -> NameCounts {
    let mut counts = NameCounts::new();
    for r in records {
        for name in &r.ingredients {
            *counts.entry(name.clone()).or_default() += 1;
        }
    }
    counts
}

/// Lowercase word and punctuation tokens: runs of alphanumerics (with
/// inner apostrophes) form words, every other visible character stands
/// alone.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &ch) in chars.iter().enumerate() {
        let inner_apostrophe = ch == '\''
            && !cur.is_empty()
            && chars.get(i + 1).is_some_and(|c| c.is_alphanumeric());
        if ch.is_alphanumeric() || inner_apostrophe {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct WordVocabularyRepr {
    words: Vec<String>,
    counts: Vec<usize>,
}

impl TryFrom<WordVocabularyRepr> for WordVocabulary {
    type Error = Error;

    fn try_from(r: WordVocabularyRepr) -> Result<Self, Error> {
        Self::from_parts(r.words, r.counts)
    }
}

/// Splits at `<eoi>`, stopping at `<eor>`; `<sor>` is skipped. A trailing
/// segment without `<eoi>` is kept.
pub fn split_segments(tokens: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for &t in tokens {
        match t {
            SOR_ID => {}
            EOR_ID => break,
            EOI_ID => out.push(std::mem::take(&mut cur)),
            _ => cur.push(t),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Cuts a token sequence to at most `t_max` tokens, keeping `<eor>` last.
pub fn clip_tokens(mut tokens: Vec<usize>, t_max: usize) -> Vec<usize> {
    if tokens.len() > t_max && t_max >= 2 {
        tokens.truncate(t_max - 1);
        tokens.push(EOR_ID);
    }
    tokens
}

/// Word dictionary with the four special tokens at ids 0 to 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WordVocabularyRepr")]
pub struct WordVocabulary {
    words: Vec<String>,
    counts: Vec<usize>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl WordVocabulary {
    /// Words seen at least `min_count` times over every segment, ids by
    /// descending count then word.
    pub fn build<S: AsRef<str>>(segments: impl IntoIterator<Item = S>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for seg in segments {
            for w in split_words(seg.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !SPECIALS.contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut cs = vec![0; SPECIALS.len()];
        for (w, c) in kept {
            words.push(w);
            cs.push(c);
        }
        Self::from_parts(words, cs).expect("distinct words")
    }

    /// Vocabulary over the title and instructions of every record.
    pub fn from_corpus(records: &[RecipeRecord], min_count: usize) -> Self {
        Self::build(
            records
                .iter()
                .flat_map(|r| std::iter::once(&r.title).chain(&r.instructions)),
            min_count,
        )
    }

    fn from_parts(words: Vec<String>, counts: Vec<usize>) -> Result<Self, Error> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format("word vocabulary must start with <sor> <eor> <eoi> <unk>".into()));
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Format(format!("word {w:?} listed twice")));
            }
        }
        Ok(WordVocabulary { words, counts, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// `<sor>`, then each segment's tokens followed by `<eoi>`, then `<eor>`.
    pub fn tokenize<S: AsRef<str>>(&self, segments: &[S]) -> Vec<usize> {
        let mut out = vec![SOR_ID];
        for seg in segments {
            out.extend(split_words(seg.as_ref()).iter().map(|w| self.id(w)));
            out.push(EOI_ID);
        }
        out.push(EOR_ID);
        out
    }

    /// Tokens of a recipe: the title is the first segment.
    pub fn tokenize_recipe(&self, record: &RecipeRecord) -> Vec<usize> {
        let segments: Vec<&str> = std::iter::once(record.title.as_str())
            .chain(record.instructions.iter().map(String::as_str))
            .collect();
        self.tokenize(&segments)
    }

    /// See [`split_segments`].
    pub fn segments(&self, tokens: &[usize]) -> Vec<Vec<usize>> {
        split_segments(tokens)
    }

    /// Words joined by spaces, with no space before closing punctuation.
    pub fn detokenize(&self, tokens: &[usize]) -> String {
        let mut s = String::new();
        for &t in tokens {
            let w = self.word(t);
            let glue = w.len() == 1 && ".,;:!?)".contains(w);
            if !s.is_empty() && !glue {
                s.push(' ');
            }
            s.push_str(w);
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, (w, c)) in self.words.iter().zip(&self.counts).enumerate() {
            writeln!(s, "{i}\t{w}\t{c}").unwrap();
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self, Error> {
        let mut words = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("word vocabulary line {}: expected id<TAB>word<TAB>count", i + 1));
            if f.len() != 3 || f[0].parse::<usize>().map_err(|_| bad())? != i {
                return Err(bad());
            }
            words.push(f[1].to_string());
            counts.push(f[2].parse().map_err(|_| bad())?);
        }
        Self::from_parts(words, counts)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in std::io::BufReader::new(f).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_tsv(&text)
    }

}
