//! Token lexicon: categories, synonym/hypernym links, static embeddings, and
//! the tf-idf statistics used for coverage weighting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub type TokenId = usize;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown token id {0}")]
    UnknownToken(TokenId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, message: impl Into<String>) -> LexiconError {
    LexiconError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Object,
    Action,
    Other,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Object => "object",
            Category::Action => "action",
            Category::Other => "other",
        })
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "object" => Ok(Category::Object),
            "action" => Ok(Category::Action),
            "other" => Ok(Category::Other),
            _ => Err(format!("unknown category `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexiconEntry {
    pub token_id: TokenId,
    pub surface: String,
    pub category: Category,
    pub synonyms: Vec<TokenId>,
    pub hypernyms: Vec<TokenId>,
    /// Unit-norm static embedding.
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
}

pub const BOS_SURFACE: &str = "<bos>";
pub const EOS_SURFACE: &str = "<eos>";

impl Lexicon {
    /// Validates ids (dense from 0), link targets, and embedding norms.
    pub fn new(entries: Vec<LexiconEntry>) -> Result<Self, LexiconError> {
        let n = entries.len();
        let dim = entries.first().map(|e| e.embedding.len()).unwrap_or(0);
        for (i, e) in entries.iter().enumerate() {
            let line = i + 1;
            if e.token_id != i {
                return Err(parse_err(line, format!("token id {} is not dense (expected {i})", e.token_id)));
            }
            if let Some(&bad) = e.synonyms.iter().chain(&e.hypernyms).find(|&&t| t >= n) {
                return Err(parse_err(line, format!("link references unknown token id {bad}")));
            }
            if e.embedding.len() != dim || dim == 0 {
                return Err(parse_err(line, "embedding dimension mismatch"));
            }
            let norm = crate::tensor::l2_norm(&e.embedding);
            if (norm - 1.0).abs() > 1e-9 {
                return Err(parse_err(line, format!("embedding norm {norm} is not 1")));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn entry(&self, id: TokenId) -> Result<&LexiconEntry, LexiconError> {
        self.entries.get(id).ok_or(LexiconError::UnknownToken(id))
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id < self.entries.len()
    }

    pub fn category(&self, id: TokenId) -> Result<Category, LexiconError> {
        Ok(self.entry(id)?.category)
    }

    pub fn embedding(&self, id: TokenId) -> Result<&[f64], LexiconError> {
        Ok(&self.entry(id)?.embedding)
    }

    pub fn embedding_dim(&self) -> usize {
        self.entries.first().map(|e| e.embedding.len()).unwrap_or(0)
    }

    pub fn surface(&self, id: TokenId) -> &str {
        self.entries.get(id).map(|e| e.surface.as_str()).unwrap_or("<?>")
    }

    pub fn find(&self, surface: &str) -> Option<TokenId> {
        self.entries.iter().position(|e| e.surface == surface)
    }

    pub fn bos(&self) -> Option<TokenId> {
        self.find(BOS_SURFACE)
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.find(EOS_SURFACE)
    }

    pub fn tokens_of(&self, category: Category) -> impl Iterator<Item = TokenId> + '_ {
        self.entries
            .iter()
            .filter(move |e| e.category == category)
            .map(|e| e.token_id)
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|&t| self.surface(t)).collect::<Vec<_>>().join(" ")
    }

    /// `tokens` plus the one-hop synonyms and hypernyms of each member.
    pub fn expand_token_set(&self, tokens: &BTreeSet<TokenId>) -> Result<BTreeSet<TokenId>, LexiconError> {
        let mut out = tokens.clone();
        for &t in tokens {
            let e = self.entry(t)?;
            out.extend(e.synonyms.iter().copied());
            out.extend(e.hypernyms.iter().copied());
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            entries.push(parse_entry(raw, line)?);
        }
        if entries.is_empty() {
            return Err(parse_err(0, "lexicon is empty"));
        }
        // Report the offending line rather than a generic failure.
        let mut seen = BTreeSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.token_id) {
                return Err(parse_err(i + 1, format!("duplicate token id {}", e.token_id)));
            }
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LexiconError> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

fn join_ids(ids: &[TokenId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for Lexicon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let emb = e
                .embedding
                .iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(
                f,
                "{}\t{}\t{}\tsyn:{}\thyp:{}\temb:{}",
                e.token_id,
                e.surface,
                e.category,
                join_ids(&e.synonyms),
                join_ids(&e.hypernyms),
                emb
            )?;
        }
        Ok(())
    }
}

fn parse_list<T: FromStr>(field: &str, prefix: &str, line: usize) -> Result<Vec<T>, LexiconError> {
    let body = field
        .strip_prefix(prefix)
        .ok_or_else(|| parse_err(line, format!("expected field starting with `{prefix}`, got `{field}`")))?;
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split(',')
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| parse_err(line, format!("bad value `{s}` in `{prefix}` list")))
        })
        .collect()
}

fn parse_entry(raw: &str, line: usize) -> Result<LexiconEntry, LexiconError> {
    let fields: Vec<&str> = raw.split('\t').collect();
    if fields.len() != 6 {
        return Err(parse_err(line, format!("expected 6 tab-separated fields, got {}", fields.len())));
    }
    let token_id = fields[0]
        .parse()
        .map_err(|_| parse_err(line, format!("bad token id `{}`", fields[0])))?;
    let surface = fields[1].to_string();
    if surface.is_empty() || surface.contains(char::is_whitespace) {
        return Err(parse_err(line, "surface must be a non-empty word"));
    }
    let category = fields[2].parse().map_err(|e: String| parse_err(line, e))?;
    Ok(LexiconEntry {
        token_id,
        surface,
        category,
        synonyms: parse_list(fields[3], "syn:", line)?,
        hypernyms: parse_list(fields[4], "hyp:", line)?,
        embedding: parse_list(fields[5], "emb:", line)?,
    })
}

/// Document statistics for tf-idf weighting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub doc_freq: BTreeMap<TokenId, usize>,
}

impl CorpusStats {
    /// Builds document frequencies over a set of documents (ground-truth
    /// captions of the evaluation split).
    pub fn from_documents<'a, I>(docs: I) -> Self
    where
        I: IntoIterator<Item = &'a [TokenId]>,
    {
        let mut stats = CorpusStats::default();
        for doc in docs {
            stats.num_docs += 1;
            let unique: BTreeSet<_> = doc.iter().copied().collect();
            for t in unique {
                *stats.doc_freq.entry(t).or_insert(0) += 1;
            }
        }
        stats
    }

    pub fn df(&self, token: TokenId) -> usize {
        self.doc_freq.get(&token).copied().unwrap_or(0)
    }

    /// Smoothed idf: `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, token: TokenId) -> f64 {
        ((1.0 + self.num_docs as f64) / (1.0 + self.df(token) as f64)).ln() + 1.0
    }
}

pub fn term_frequency(token: TokenId, document: &[TokenId]) -> usize {
    document.iter().filter(|&&t| t == token).count()
}

/// Raw term count in `document` times smoothed idf.
pub fn tf_idf(token: TokenId, document: &[TokenId], stats: &CorpusStats) -> f64 {
    let tf = term_frequency(token, document);
    if tf == 0 {
        return 0.0;
    }
    tf as f64 * stats.idf(token)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i % d] = 1.0;
        v
    }

    fn entry(id: TokenId, surface: &str, category: Category, syn: &[TokenId], hyp: &[TokenId]) -> LexiconEntry {
        LexiconEntry {
            token_id: id,
            surface: surface.into(),
            category,
            synonyms: syn.to_vec(),
            hypernyms: hyp.to_vec(),
            embedding: unit(id, 4),
        }
    }

    pub(crate) fn child_stand_lexicon() -> Lexicon {
        Lexicon::new(vec![
            entry(0, "child", Category::Object, &[1], &[2]),
            entry(1, "kid", Category::Object, &[0], &[2]),
            entry(2, "person", Category::Object, &[], &[]),
            entry(3, "stand", Category::Action, &[4], &[5]),
            entry(4, "get_up", Category::Action, &[3], &[5]),
            entry(5, "move", Category::Action, &[], &[]),
            entry(6, "the", Category::Other, &[], &[]),
        ])
        .unwrap()
    }

    #[test]
    fn expand_child() {
        let lex = child_stand_lexicon();
        let out = lex.expand_token_set(&BTreeSet::from([0])).unwrap();
        assert_eq!(out, BTreeSet::from([0, 1, 2]));
    }

    #[test]
    fn expand_stand() {
        let lex = child_stand_lexicon();
        let out = lex.expand_token_set(&BTreeSet::from([3])).unwrap();
        assert_eq!(out, BTreeSet::from([3, 4, 5]));
    }

    #[test]
    fn expand_empty() {
        let lex = child_stand_lexicon();
        assert!(lex.expand_token_set(&BTreeSet::new()).unwrap().is_empty());
    }

    #[test]
    fn expand_is_one_hop() {
        // a -> b -> c: expanding {a} must not reach c
        let lex = Lexicon::new(vec![
            entry(0, "a", Category::Object, &[1], &[]),
            entry(1, "b", Category::Object, &[], &[2]),
            entry(2, "c", Category::Object, &[], &[]),
        ])
        .unwrap();
        assert_eq!(lex.expand_token_set(&BTreeSet::from([0])).unwrap(), BTreeSet::from([0, 1]));
    }

    #[test]
    fn tf_idf_examples() {
        let stats = CorpusStats::from_documents([&[7usize][..], &[7, 8], &[7]]);
        // present once, df == N
        assert!((tf_idf(7, &[7, 1], &stats) - 1.0).abs() < 1e-15);
        // absent
        assert_eq!(tf_idf(8, &[7], &stats), 0.0);
        // present twice, N = 3, df = 1
        let want = 2.0 * (2.0f64.ln() + 1.0);
        assert!((tf_idf(8, &[8, 8], &stats) - want).abs() < 1e-12);
        assert!((want - 3.3863).abs() < 1e-4);
    }

    #[test]
    fn idf_non_increasing_in_df() {
        let stats = CorpusStats::from_documents([&[1usize, 2, 3][..], &[2, 3], &[3]]);
        assert!(stats.idf(1) >= stats.idf(2));
        assert!(stats.idf(2) >= stats.idf(3));
        assert!(stats.idf(99) >= stats.idf(1));
    }

    #[test]
    fn text_round_trip() {
        let lex = child_stand_lexicon();
        let text = lex.to_string();
        assert!(text.starts_with("0\tchild\tobject\tsyn:1\thyp:2\temb:1.0,0.0,0.0,0.0\n"));
        assert!(text.contains("6\tthe\tother\tsyn:\thyp:\temb:"));
        assert_eq!(Lexicon::parse(&text).unwrap(), lex);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let lex = child_stand_lexicon();
        let mut lines: Vec<String> = lex.to_string().lines().map(String::from).collect();
        lines[2] = lines[2].replace("syn:", "syn:42");
        let err = Lexicon::parse(&lines.join("\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("42"), "{msg}");

        let dup = format!("{}\n{}", lines[0], lines[0]);
        assert!(Lexicon::parse(&dup).unwrap_err().to_string().contains("duplicate"));

        let bad = "0\tchild\tobject\tsyn:\n";
        assert!(Lexicon::parse(bad).unwrap_err().to_string().contains("line 1"));

        let non_unit = "0\tchild\tobject\tsyn:\thyp:\temb:0.5,0.0\n";
        assert!(Lexicon::parse(non_unit).unwrap_err().to_string().contains("norm"));
    }
}
