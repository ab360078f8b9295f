//! Number substitution, vocabulary construction, integer encoding,
//! length filtering, and corpus splitting.

use crate::tokenizer::{
    number_tag_text, Language, Token, TokenKind, TokenStream, EXCEPTIONAL_OPERATORS,
};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const NUM_NUMBER_TAGS: u8 = 32;
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Assignment of number tags (1..=32) to the multi-digit literals they
/// replaced within one formula.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NumberMap {
    assignments: BTreeMap<u8, String>,
}

impl NumberMap {
    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn get(&self, tag: u8) -> Option<&str> {
        self.assignments.get(&tag).map(String::as_str)
    }

    pub fn insert(&mut self, tag: u8, digits: String) {
        debug_assert!((1..=NUM_NUMBER_TAGS).contains(&tag));
        debug_assert!(digits.len() >= 2 && digits.bytes().all(|b| b.is_ascii_digit()));
        self.assignments.insert(tag, digits);
    }

    /// Serializes as `NN=digits` entries joined by commas.
    pub fn serialize(&self) -> String {
        self.assignments
            .iter()
            .map(|(tag, digits)| format!("{tag:02}={digits}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse(text: &str) -> Result<NumberMap> {
        let mut map = NumberMap::default();
        if text.is_empty() {
            return Ok(map);
        }
        for entry in text.split(',') {
            let (tag, digits) = entry
                .split_once('=')
                .ok_or_else(|| Error::Other(format!("bad number-map entry `{entry}`")))?;
            let tag: u8 = tag
                .parse()
                .map_err(|_| Error::Other(format!("bad tag index `{tag}`")))?;
            if !(1..=NUM_NUMBER_TAGS).contains(&tag)
                || digits.len() < 2
                || !digits.bytes().all(|b| b.is_ascii_digit())
            {
                return Err(Error::Other(format!("bad number-map entry `{entry}`")));
            }
            map.assignments.insert(tag, digits.to_owned());
        }
        Ok(map)
    }
}

fn draw_tags(count: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags: Vec<u8> = (1..=NUM_NUMBER_TAGS).collect();
    tags.shuffle(&mut rng);
    tags.truncate(count);
    tags
}

fn distinct_numbers(streams: &[&TokenStream]) -> Vec<String> {
    let mut seen = Vec::new();
    for stream in streams {
        for tok in &stream.tokens {
            if tok.kind == TokenKind::Number && !seen.contains(&tok.text) {
                seen.push(tok.text.clone());
            }
        }
    }
    seen
}

fn apply_assignment(stream: &TokenStream, tag_of: &HashMap<&str, u8>) -> TokenStream {
    let tokens = stream
        .tokens
        .iter()
        .flat_map(|tok| {
            if tok.kind == TokenKind::Number {
                match tag_of.get(tok.text.as_str()) {
                    Some(&tag) => {
                        vec![Token::new(number_tag_text(tag), TokenKind::NumberTag)]
                    }
                    // overflow fallback: split into single digits
                    None => tok
                        .text
                        .chars()
                        .map(|c| Token::new(c.to_string(), TokenKind::Digit))
                        .collect(),
                }
            } else {
                vec![tok.clone()]
            }
        })
        .collect();
    TokenStream::new(tokens, stream.language)
}

fn substitute_streams(
    streams: &[&TokenStream],
    seed: u64,
    digit_fallback: bool,
) -> Result<(Vec<TokenStream>, NumberMap)> {
    let mut numbers = distinct_numbers(streams);
    if numbers.len() > NUM_NUMBER_TAGS as usize {
        if !digit_fallback {
            return Err(Error::NumberCapacity {
                max: NUM_NUMBER_TAGS as usize,
            });
        }
        numbers.truncate(NUM_NUMBER_TAGS as usize);
    }
    let tags = draw_tags(numbers.len(), seed);
    let mut map = NumberMap::default();
    let mut tag_of = HashMap::new();
    for (digits, &tag) in numbers.iter().zip(&tags) {
        map.insert(tag, digits.clone());
        tag_of.insert(digits.as_str(), tag);
    }
    let out = streams.iter().map(|s| apply_assignment(s, &tag_of)).collect();
    Ok((out, map))
}

/// Replaces every multi-digit Number token with a randomly drawn
/// `<number_NN>` tag; equal literals share one tag. Errors if the
/// formula holds more than 32 distinct multi-digit numbers.
pub fn substitute_numbers(stream: &TokenStream, seed: u64) -> Result<(TokenStream, NumberMap)> {
    let (mut streams, map) = substitute_streams(&[stream], seed, false)?;
    Ok((streams.pop().unwrap(), map))
}

/// Like [`substitute_numbers`] but falls back to single-digit splitting
/// for numbers beyond the 32-tag capacity instead of failing.
pub fn substitute_numbers_lossy(stream: &TokenStream, seed: u64) -> (TokenStream, NumberMap) {
    let (mut streams, map) = substitute_streams(&[stream], seed, true).expect("fallback variant");
    (streams.pop().unwrap(), map)
}

/// Substitutes numbers jointly for an aligned pair so that equal
/// literals share the same tag on both sides (required for
/// back-substitution after translation). Falls back to digit splitting
/// beyond capacity.
pub fn substitute_pair_numbers(
    source: &TokenStream,
    target: &TokenStream,
    seed: u64,
) -> (TokenStream, TokenStream, NumberMap) {
    let (mut streams, map) =
        substitute_streams(&[source, target], seed, true).expect("fallback variant");
    let tgt = streams.pop().unwrap();
    let src = streams.pop().unwrap();
    (src, tgt, map)
}

/// Replaces every `<number_NN>` tag with its literal from the map.
pub fn restore_numbers(stream: &TokenStream, map: &NumberMap) -> Result<TokenStream> {
    let mut tokens = Vec::with_capacity(stream.len());
    for tok in &stream.tokens {
        if tok.kind == TokenKind::NumberTag {
            let idx: u8 = tok.text[8..10].parse().expect("tag text invariant");
            let digits = map.get(idx).ok_or(Error::UnresolvedTag(idx))?;
            tokens.push(Token::new(digits, TokenKind::Number));
        } else {
            tokens.push(tok.clone());
        }
    }
    Ok(TokenStream::new(tokens, stream.language))
}

/// Bijection between token texts and integer ids. Ids 0..4 are the
/// specials, 4..36 the number tags, then corpus tokens by descending
/// frequency (lexicographic tie-break).
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;
    pub const UNK_ID: usize = 3;

    fn with_reserved() -> (Vec<String>, Vec<u64>) {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        for idx in 1..=NUM_NUMBER_TAGS {
            tokens.push(number_tag_text(idx));
        }
        let counts = vec![0; tokens.len()];
        (tokens, counts)
    }

    fn from_lists(tokens: Vec<String>, counts: Vec<u64>) -> Vocabulary {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, counts, ids }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (tok, count) in self.tokens.iter().zip(&self.counts) {
            out.push_str(tok);
            out.push(' ');
            out.push_str(&count.to_string());
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let content = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (lineno, line) in content.lines().enumerate() {
            let (tok, count) = line.rsplit_once(' ').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: "expected `token count`".into(),
            })?;
            let count: u64 = count.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad count `{count}`"),
            })?;
            tokens.push(tok.to_owned());
            counts.push(count);
        }
        if tokens.len() < 4 + NUM_NUMBER_TAGS as usize || tokens[Self::PAD_ID] != PAD {
            return Err(Error::Other("vocabulary file missing reserved entries".into()));
        }
        Ok(Vocabulary::from_lists(tokens, counts))
    }
}

/// Builds a vocabulary from one corpus side. Specials and all 32
/// number tags are always present regardless of `min_count`.
pub fn build_vocabulary(corpus: &[TokenStream], min_count: u64) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::Config("min_count must be >= 1".into()));
    }
    let (mut tokens, mut counts) = Vocabulary::with_reserved();
    let reserved: HashMap<&String, usize> =
        tokens.iter().enumerate().map(|(i, t)| (t, i)).collect();

    let mut freq: HashMap<&str, u64> = HashMap::new();
    let mut tag_counts = vec![0u64; tokens.len()];
    for stream in corpus {
        for tok in &stream.tokens {
            match reserved.get(&tok.text) {
                Some(&id) => tag_counts[id] += 1,
                None => *freq.entry(tok.text.as_str()).or_default() += 1,
            }
        }
    }
    for (id, c) in tag_counts.into_iter().enumerate() {
        counts[id] = c;
    }
    let mut entries: Vec<(&str, u64)> = freq
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    for (tok, count) in entries {
        tokens.push(tok.to_owned());
        counts.push(count);
    }
    Ok(Vocabulary::from_lists(tokens, counts))
}

/// Maps tokens to ids, unknown tokens to UNK, optionally appending EOS.
pub fn encode(stream: &TokenStream, vocab: &Vocabulary, append_eos: bool) -> Vec<usize> {
    let mut ids: Vec<usize> = stream
        .tokens
        .iter()
        .map(|t| vocab.id_of(&t.text).unwrap_or(Vocabulary::UNK_ID))
        .collect();
    if append_eos {
        ids.push(Vocabulary::EOS_ID);
    }
    ids
}

fn classify(text: &str) -> TokenKind {
    if text.starts_with("\\[") {
        TokenKind::MacroSymbol
    } else if text.starts_with('\\') {
        TokenKind::Command
    } else if text.starts_with("<number_") {
        TokenKind::NumberTag
    } else if text.bytes().all(|b| b.is_ascii_digit()) {
        if text.len() >= 2 {
            TokenKind::Number
        } else {
            TokenKind::Digit
        }
    } else if text.len() == 1 && matches!(text.as_bytes()[0], b'(' | b')' | b'{' | b'}' | b'[' | b']')
    {
        TokenKind::Bracket
    } else if EXCEPTIONAL_OPERATORS.contains(&text) {
        TokenKind::MultiCharOperator
    } else if text.chars().all(|c| c.is_ascii_alphabetic()) {
        TokenKind::Letter
    } else {
        TokenKind::SpecialChar
    }
}

/// Maps ids back to a token stream, dropping PAD/BOS/EOS; UNK becomes
/// the literal `<unk>` token.
pub fn decode_ids(ids: &[usize], vocab: &Vocabulary, language: Language) -> TokenStream {
    let tokens = ids
        .iter()
        .filter(|&&id| {
            !matches!(
                id,
                Vocabulary::PAD_ID | Vocabulary::BOS_ID | Vocabulary::EOS_ID
            )
        })
        .map(|&id| match vocab.token_of(id) {
            Some(text) if id != Vocabulary::UNK_ID => {
                Token::new(text, classify(text))
            }
            _ => Token::new(UNK, TokenKind::SpecialChar),
        })
        .collect();
    TokenStream::new(tokens, language)
}

/// One integer-encoded training/evaluation pair.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncodedPair {
    pub id: String,
    pub source_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    /// `NN=digits` comma-joined serialization of the pair's NumberMap.
    #[serde(default)]
    pub number_map: String,
}

/// Retains the pairs whose both sides fit within `max_tokens` ids.
pub fn filter_by_length(pairs: Vec<EncodedPair>, max_tokens: usize) -> Vec<EncodedPair> {
    pairs
        .into_iter()
        .filter(|p| p.source_ids.len() <= max_tokens && p.target_ids.len() <= max_tokens)
        .collect()
}

/// Train/valid/test fractions plus the shuffling seed.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fractions = [self.train_fraction, self.valid_fraction, self.test_fraction];
        if fractions.iter().any(|&f| f < 0.0) {
            return Err(Error::Config("split fractions must be non-negative".into()));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Largest-remainder partition sizes for `n` items.
fn split_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remainder = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if remainder == 0 {
            break;
        }
        sizes[i] += 1;
        remainder -= 1;
    }
    [sizes[0], sizes[1], sizes[2]]
}

/// Randomly partitions `pairs` into disjoint train/valid/test sets.
pub fn split_corpus<T: Clone>(pairs: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    spec.validate()?;
    let mut perm: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    perm.shuffle(&mut rng);
    let [n_train, n_valid, _] = split_sizes(
        pairs.len(),
        [spec.train_fraction, spec.valid_fraction, spec.test_fraction],
    );
    let take = |range: std::ops::Range<usize>| -> Vec<T> {
        perm[range].iter().map(|&i| pairs[i].clone()).collect()
    };
    Ok((
        take(0..n_train),
        take(n_train..n_train + n_valid),
        take(n_train + n_valid..pairs.len()),
    ))
}
