//! Articles, sentence segmentation, word-level vocabulary and token streams.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const BOS: TokenId = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<bos>";

/// Words that end in a period without ending a sentence.
pub const ABBREVIATIONS: &[&str] = &["Dr.", "Mr.", "Mrs.", "St.", "e.g.", "i.e.", "etc.", "vs.", "No."];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

/// Byte range `[start, end)` of one sentence inside its article text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextSpan {
    pub start: usize,
    pub end: usize,
}

impl TextSpan {
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceSpan {
    pub article_id: String,
    pub index: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub token_ids: Vec<TokenId>,
}

/// Token ids of one article with the sentence each token belongs to. The
/// leading `<bos>` is assigned to sentence 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub token_ids: Vec<TokenId>,
    pub sentence_index_of_token: Vec<usize>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_sentences(&self) -> usize {
        self.sentence_index_of_token.last().map_or(0, |&s| s + 1)
    }
}

/// An article after segmentation and tokenization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProcessedArticle {
    pub id: String,
    pub text: String,
    pub sentences: Vec<SentenceSpan>,
    pub stream: TokenStream,
}

impl ProcessedArticle {
    pub fn sentence_text(&self, j: usize) -> &str {
        let s = &self.sentences[j];
        &self.text[s.char_start..s.char_end]
    }

    pub fn sentence_texts(&self) -> Vec<&str> {
        (0..self.sentences.len()).map(|j| self.sentence_text(j)).collect()
    }
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn ends_with_abbreviation(text: &str, dot: usize) -> bool {
    let word_start = text[..dot].rfind(char::is_whitespace).map_or(0, |i| i + text[i..].chars().next().unwrap().len_utf8());
    let word = &text[word_start..=dot];
    ABBREVIATIONS.contains(&word)
}

/// Rule-based sentence segmentation.
///
/// A sentence ends at `.`, `!` or `?` followed by whitespace and an uppercase
/// letter, or by the end of the text; a period closing one of
/// [`ABBREVIATIONS`] does not end a sentence. A blank line always ends one.
pub fn split_sentences(text: &str) -> Vec<TextSpan> {
    let mut cuts = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c.is_whitespace() {
            let mut j = i;
            let mut newlines = 0;
            while j < chars.len() && chars[j].1.is_whitespace() {
                newlines += usize::from(chars[j].1 == '\n');
                j += 1;
            }
            if newlines >= 2 {
                cuts.push(pos);
            }
            i = j;
            continue;
        }
        if is_terminal(c) {
            let end = pos + c.len_utf8();
            let next = chars.get(i + 1).map(|&(_, n)| n);
            let splits = match next {
                None => true,
                Some(n) if n.is_whitespace() => {
                    let following = chars[i + 1..].iter().map(|&(_, ch)| ch).find(|ch| !ch.is_whitespace());
                    match following {
                        None => true,
                        Some(f) => f.is_uppercase() && !(c == '.' && ends_with_abbreviation(text, pos)),
                    }
                }
                Some(_) => false,
            };
            if splits {
                cuts.push(end);
            }
        }
        i += 1;
    }
    cuts.push(text.len());

    let mut spans = Vec::new();
    let mut start = 0;
    for cut in cuts {
        if cut < start {
            continue;
        }
        let piece = &text[start..cut];
        let lead = piece.len() - piece.trim_start().len();
        let trimmed = piece.trim();
        if !trimmed.is_empty() {
            spans.push(TextSpan { start: start + lead, end: start + lead + trimmed.len() });
        }
        start = cut;
    }
    spans
}

/// True when `text` would end a sentence if another sentence followed it.
/// Used for incremental boundary detection during decoding.
pub fn ends_sentence(text: &str) -> bool {
    let trimmed = text.trim_end();
    if trimmed.is_empty() {
        return false;
    }
    let probe = format!("{trimmed} A");
    let spans = split_sentences(&probe);
    spans.len() >= 2 && spans[spans.len() - 2].end == trimmed.len()
}

/// Lowercased word-level tokens: maximal alphanumeric runs and single
/// punctuation marks.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_lowercase().collect());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Bijective token string <-> id map with reserved `<unk>` = 0, `<bos>` = 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != UNK_TOKEN || tokens[1] != BOS_TOKEN {
            return Err(Error::Format { format: "vocabulary", reason: "first two entries must be <unk>, <bos>".into() });
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Format { format: "vocabulary", reason: format!("bad token on line {}", i + 1) });
            }
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Format { format: "vocabulary", reason: format!("duplicate token {t:?}") });
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        word_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, attaching closing punctuation to the left.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut glue_next = false;
        for &id in ids {
            if id == BOS {
                continue;
            }
            let tok = self.token(id);
            let attach_left = matches!(tok, "." | "," | "!" | "?" | ";" | ":" | ")" | "%" | "'");
            if !out.is_empty() && !attach_left && !glue_next {
                out.push(' ');
            }
            out.push_str(tok);
            glue_next = tok == "(";
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let tokens = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Keeps the `max_size - 2` most frequent tokens; ties break lexicographically.
pub fn build_vocabulary(articles: &[Article], max_size: usize) -> Result<Vocabulary> {
    if max_size < 3 {
        return Err(invalid(format!("vocabulary max_size must be >= 3, got {max_size}")));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for a in articles {
        for t in word_tokens(&a.text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    counts.remove(UNK_TOKEN);
    counts.remove(BOS_TOKEN);
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens = vec![UNK_TOKEN.to_string(), BOS_TOKEN.to_string()];
    tokens.extend(ranked.into_iter().take(max_size - 2).map(|(t, _)| t));
    Vocabulary::from_tokens(tokens)
}

/// Tokenizes already-segmented sentences and prepends `<bos>`.
pub fn tokenize_spans(article_id: &str, text: &str, spans: &[TextSpan], vocab: &Vocabulary) -> (Vec<SentenceSpan>, TokenStream) {
    let mut token_ids = vec![BOS];
    let mut sentence_index_of_token = vec![0];
    let mut sentences = Vec::with_capacity(spans.len());
    for (j, span) in spans.iter().enumerate() {
        let ids = vocab.encode(span.slice(text));
        token_ids.extend_from_slice(&ids);
        sentence_index_of_token.extend(std::iter::repeat_n(j, ids.len()));
        sentences.push(SentenceSpan {
            article_id: article_id.to_string(),
            index: j,
            char_start: span.start,
            char_end: span.end,
            token_ids: ids,
        });
    }
    (sentences, TokenStream { token_ids, sentence_index_of_token })
}

pub fn tokenize(article: &Article, vocab: &Vocabulary) -> ProcessedArticle {
    let spans = split_sentences(&article.text);
    let (sentences, stream) = tokenize_spans(&article.id, &article.text, &spans, vocab);
    ProcessedArticle { id: article.id.clone(), text: article.text.clone(), sentences, stream }
}

/// Deterministic shuffled partition into (train, val, test).
pub fn split_corpus<T: Clone>(items: &[T], seed: u64, n_val: usize, n_test: usize) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if n_val + n_test >= items.len() {
        return Err(Error::CorpusTooSmall { have: items.len(), need: n_val + n_test });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| items[i].clone()).collect::<Vec<_>>()
    };
    let val = pick(0..n_val);
    let test = pick(n_val..n_val + n_test);
    let train = pick(n_val + n_test..items.len());
    Ok((train, val, test))
}

fn validate(articles: &[Article]) -> Result<()> {
    let mut seen = HashSet::new();
    for a in articles {
        if a.text.trim().is_empty() {
            return Err(Error::Format { format: "corpus", reason: format!("article {} has empty text", a.id) });
        }
        if !seen.insert(a.id.as_str()) {
            return Err(Error::Format { format: "corpus", reason: format!("duplicate article id {}", a.id) });
        }
    }
    Ok(())
}

/// One JSON object per line with fields `id`, `title`, `text`.
pub fn read_jsonl(r: impl BufRead) -> Result<Vec<Article>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Article = serde_json::from_str(&line)
            .map_err(|e| Error::Format { format: "corpus jsonl", reason: format!("line {}: {e}", n + 1) })?;
        out.push(a);
    }
    validate(&out)?;
    Ok(out)
}

pub fn write_jsonl(articles: &[Article], w: &mut impl Write) -> Result<()> {
    for a in articles {
        serde_json::to_writer(&mut *w, a)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Directory of `.txt` files: file stem = id, first line = title, the rest = text.
pub fn read_txt_dir(dir: &Path) -> Result<Vec<Article>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let raw = std::fs::read_to_string(&p)?;
        let (title, body) = raw.split_once('\n').unwrap_or((raw.as_str(), ""));
        let text = if body.trim().is_empty() { raw.clone() } else { body.to_string() };
        let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        out.push(Article { id, title: title.trim().to_string(), text });
    }
    validate(&out)?;
    Ok(out)
}

pub fn load_articles(path: &Path) -> Result<Vec<Article>> {
    if path.is_dir() {
        read_txt_dir(path)
    } else {
        read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(text: &str) -> Vec<&str> {
        split_sentences(text).iter().map(|s| s.slice(text)).collect()
    }

    fn art(id: &str, text: &str) -> Article {
        Article { id: id.into(), title: String::new(), text: text.into() }
    }

    #[test]
    fn splits_plain_sentences() {
        assert_eq!(texts("Hello world. Bye."), ["Hello world.", "Bye."]);
    }

    #[test]
    fn empty_and_whitespace_give_no_spans() {
        assert!(split_sentences("").is_empty());
        assert!(split_sentences(" \n\t ").is_empty());
    }

    #[test]
    fn abbreviation_suppresses_split() {
        assert_eq!(texts("Dr. Smith arrived. He left."), ["Dr. Smith arrived.", "He left."]);
        assert_eq!(texts("Fruit, e.g. Apples are good."), ["Fruit, e.g. Apples are good."]);
    }

    #[test]
    fn lowercase_continuation_does_not_split_but_blank_line_does() {
        assert_eq!(texts("a b. c."), ["a b. c."]);
        assert_eq!(texts("a b\n\nc d"), ["a b", "c d"]);
        assert_eq!(texts("Wait! What? Yes."), ["Wait!", "What?", "Yes."]);
    }

    #[test]
    fn ends_sentence_detects_completed_sentences() {
        assert!(ends_sentence("he was born in paris."));
        assert!(!ends_sentence("He met Dr."));
        assert!(ends_sentence("First one. Second one!"));
        assert!(!ends_sentence("he was born"));
        assert!(!ends_sentence(""));
    }

    #[test]
    fn vocabulary_keeps_everything_that_fits() {
        let v = build_vocabulary(&[art("x", "a a b")], 4).unwrap();
        assert_eq!(v.tokens(), ["<unk>", "<bos>", "a", "b"]);
    }

    #[test]
    fn vocabulary_breaks_ties_lexicographically() {
        let v = build_vocabulary(&[art("x", "a a b c")], 3).unwrap();
        assert_eq!(v.tokens(), ["<unk>", "<bos>", "a"]);
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.id("c"), UNK);
        let v = build_vocabulary(&[art("x", "c b")], 3).unwrap();
        assert_eq!(v.tokens(), ["<unk>", "<bos>", "b"]);
    }

    #[test]
    fn empty_corpus_gives_reserved_tokens_only() {
        let v = build_vocabulary(&[], 10).unwrap();
        assert_eq!(v.tokens(), ["<unk>", "<bos>"]);
        assert!(build_vocabulary(&[], 2).is_err());
    }

    #[test]
    fn tokenize_aligns_tokens_with_sentences() {
        let v = build_vocabulary(&[art("x", "a b . c")], 10).unwrap();
        let p = tokenize(&art("x", "a b.\n\nc."), &v);
        let expect: Vec<TokenId> = [BOS_TOKEN, "a", "b", ".", "c", "."].iter().map(|t| if *t == BOS_TOKEN { BOS } else { v.id(t) }).collect();
        assert_eq!(p.stream.token_ids, expect);
        assert_eq!(p.stream.sentence_index_of_token, [0, 0, 0, 0, 1, 1]);
        assert_eq!(p.sentences.len(), 2);
    }

    #[test]
    fn out_of_vocabulary_sentence_is_all_unk() {
        let v = build_vocabulary(&[art("x", "known")], 3).unwrap();
        let p = tokenize(&art("y", "Strange words here"), &v);
        assert_eq!(p.sentences.len(), 1);
        assert!(p.sentences[0].token_ids.iter().all(|&t| t == UNK));
        assert!(p.stream.sentence_index_of_token.iter().all(|&s| s == 0));
    }

    #[test]
    fn split_corpus_sizes_and_determinism() {
        let items: Vec<usize> = (0..10).collect();
        let (a, b, c) = split_corpus(&items, 7, 1, 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert_eq!(split_corpus(&items, 7, 1, 1).unwrap(), (a, b, c));
        assert!(matches!(split_corpus(&items, 7, 5, 5), Err(Error::CorpusTooSmall { .. })));
    }

    #[test]
    fn decode_attaches_punctuation() {
        let v = build_vocabulary(&[art("x", "He was born in Paris, France.")], 50).unwrap();
        let ids = v.encode("He was born in Paris, France.");
        assert_eq!(v.decode(&ids), "he was born in paris, france.");
    }

    #[test]
    fn jsonl_rejects_duplicate_ids_and_empty_text() {
        let dup = "{\"id\":\"a\",\"title\":\"t\",\"text\":\"x\"}\n{\"id\":\"a\",\"title\":\"t\",\"text\":\"y\"}\n";
        assert!(read_jsonl(dup.as_bytes()).is_err());
        let empty = "{\"id\":\"a\",\"title\":\"t\",\"text\":\"  \"}\n";
        assert!(read_jsonl(empty.as_bytes()).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = build_vocabulary(&[art("x", "the cat sat on the mat.")], 100).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(Vocabulary::read_from(buf.as_slice()).unwrap(), v);
    }
}
