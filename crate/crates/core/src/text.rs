//! Tokenisation, prompt injection and classifier generation through the
//! frozen text encoder.
//!
//! Prompt layout for a bank with `k` vectors per side:
//!
//! ```text
//! [start, a_1 .. a_k, tok_1 .. tok_n, a_{k+1} .. a_{2k}, end]
//! ```
//!
//! The embedding is read at the end-token position after the final layer norm.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use thiserror::Error;

use crate::autograd::{Graph, ParamStore, Var};
use crate::nn::{layer_norm, NnError, TransformerConfig, TransformerEncoder};
use crate::tensor::{Scalar, Tensor};

/// Default maximum number of textual tokens, including start/end markers.
pub const DEFAULT_TOKEN_BUDGET: usize = 77;

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("cannot tokenize empty text")]
    EmptyText,
    #[error("token budget {budget} cannot hold {k} prompt vectors per side plus markers (needs at least {required})")]
    BudgetTooSmall { budget: usize, k: usize, required: usize },
    #[error("duplicate category name `{0}`")]
    DuplicateName(String),
    #[error("duplicate vocabulary entry `{0}`")]
    DuplicateToken(String),
    #[error("malformed vocabulary line {line}: {reason}")]
    VocabFormat { line: usize, reason: String },
    #[error("vocabulary embedding row {0} is zero")]
    DegenerateEmbedding(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Closed subword vocabulary with dense ids.
///
/// Ids `0..4` are reserved for the start, end, padding and unknown markers.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, usize>,
}

const SPECIALS: [&str; 4] = ["<start>", "<end>", "<pad>", "<unk>"];

const COMMON_WORDS: [&str; 24] = [
    "a", "the", "in", "of", "on", "with", "video", "person", "archery", "kick", "fry", "onion",
    "pan", "run", "jump", "swim", "ride", "throw", "catch", "dance", "cook", "climb", "play",
    "ball",
];

impl Vocabulary {
    pub const START: usize = 0;
    pub const END: usize = 1;
    pub const PAD: usize = 2;
    pub const UNK: usize = 3;

    /// Specials followed by `words` in order.
    pub fn new<I, S>(words: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), id).is_some() {
                return Err(TextError::DuplicateToken(t.clone()));
            }
        }
        Ok(Self { tokens, lookup })
    }

    /// Deterministic toy vocabulary of `size` entries: the specials, a few
    /// common English words, then two-syllable pseudo-words.
    pub fn synthetic(size: usize) -> Self {
        assert!(size > SPECIALS.len(), "vocabulary needs room beyond the specials");
        let n_words = size - SPECIALS.len();
        let mut words: Vec<String> = COMMON_WORDS.iter().take(n_words).map(|s| s.to_string()).collect();
        let consonants = b"bdfgklmnprstvz";
        let vowels = b"aeiou";
        let syllables: Vec<String> = consonants
            .iter()
            .flat_map(|&c| vowels.iter().map(move |&v| format!("{}{}", c as char, v as char)))
            .collect();
        let ns = syllables.len();
        // 61 is coprime with 70*70, so the stride visits every pair once.
        let mut i = 0usize;
        while words.len() < n_words {
            let k = (i * 61 + 17) % (ns * ns);
            words.push(format!("{}{}", syllables[k / ns], syllables[k % ns]));
            i += 1;
        }
        Self::new(words).expect("synthetic words are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Non-special entries, in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    /// Entries outside the specials and the fixed English word list; these
    /// name synthetic concepts.
    pub fn concept_words(&self) -> Vec<&str> {
        self.words()
            .iter()
            .map(String::as_str)
            .filter(|w| !COMMON_WORDS.contains(w))
            .collect()
    }

    /// The fixed English filler words present in this vocabulary.
    pub fn filler_words(&self) -> Vec<&str> {
        self.words()
            .iter()
            .map(String::as_str)
            .filter(|w| COMMON_WORDS.contains(w))
            .collect()
    }

    /// UTF-8 lines `id<TAB>subword`, in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{id}\t{t}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, TextError> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, tok) = line.split_once('\t').ok_or_else(|| TextError::VocabFormat {
                line: n + 1,
                reason: "missing tab".into(),
            })?;
            let id: usize = id.parse().map_err(|_| TextError::VocabFormat {
                line: n + 1,
                reason: format!("bad id `{id}`"),
            })?;
            if id != tokens.len() {
                return Err(TextError::VocabFormat {
                    line: n + 1,
                    reason: format!("expected id {}, found {id}", tokens.len()),
                });
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(TextError::VocabFormat { line: 1, reason: "missing special tokens".into() });
        }
        Self::new(tokens.into_iter().skip(SPECIALS.len()))
    }

    /// Whitespace split, then each word is either a whole entry or a greedy
    /// longest-prefix segmentation into entries. A remainder with no matching
    /// prefix becomes one unknown token.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence, TextError> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let word = word.to_lowercase();
            if let Some(id) = self.id(&word) {
                ids.push(id);
                continue;
            }
            let mut rest = word.as_str();
            while !rest.is_empty() {
                let found = rest
                    .char_indices()
                    .map(|(i, c)| i + c.len_utf8())
                    .rev()
                    .find_map(|end| self.id(&rest[..end]).filter(|&id| !Self::is_special(id)).map(|id| (id, end)));
                match found {
                    Some((id, end)) => {
                        ids.push(id);
                        rest = &rest[end..];
                    }
                    None => {
                        ids.push(Self::UNK);
                        break;
                    }
                }
            }
        }
        if ids.is_empty() {
            return Err(TextError::EmptyText);
        }
        Ok(TokenSequence { ids })
    }
}

/// Content token ids, without start/end markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Keep the first `budget − 2k − 2` content tokens.
pub fn truncate_to_budget(tokens: &TokenSequence, k: usize, budget: usize) -> Result<TokenSequence, TextError> {
    let required = 2 * k + 3;
    if budget < required {
        return Err(TextError::BudgetTooSmall { budget, k, required });
    }
    let keep = budget - 2 * k - 2;
    Ok(TokenSequence { ids: tokens.ids.iter().take(keep).copied().collect() })
}

/// Learnable prompt vectors shared by every category or query of one task.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub k: usize,
    pub width: usize,
    prefix: String,
    suffix: String,
}

impl PromptBank {
    pub fn new(task: &str, k: usize, width: usize) -> Self {
        Self {
            k,
            width,
            prefix: format!("prompt.{task}.prefix"),
            suffix: format!("prompt.{task}.suffix"),
        }
    }

    /// Layout descriptor such as `16+X+16`.
    pub fn pattern(&self) -> String {
        format!("{}+X+{}", self.k, self.k)
    }

    pub fn prefix_param(&self) -> &str {
        &self.prefix
    }

    pub fn suffix_param(&self) -> &str {
        &self.suffix
    }

    pub fn param_names(&self) -> Vec<String> {
        if self.k == 0 {
            Vec::new()
        } else {
            vec![self.prefix.clone(), self.suffix.clone()]
        }
    }

    /// Vectors drawn from `N(0, std²)`; nothing is registered when `k = 0`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, std: f64, rng: &mut R) {
        if self.k == 0 {
            return;
        }
        store.insert(&self.prefix, Tensor::randn(&[self.k, self.width], std, rng), true);
        store.insert(&self.suffix, Tensor::randn(&[self.k, self.width], std, rng), true);
    }

    /// All `2k` prompt vectors, prefix first, as a `2k × D` tensor.
    pub fn vectors<T: Scalar>(&self, store: &ParamStore<T>) -> Option<Tensor<T>> {
        if self.k == 0 {
            return None;
        }
        let mut data = store.tensor(&self.prefix).data().to_vec();
        data.extend_from_slice(store.tensor(&self.suffix).data());
        Some(Tensor::from_rows(2 * self.k, self.width, data))
    }
}

/// The frozen text tower: token embedding table, positional embeddings,
/// a Transformer stack and a final layer norm.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub vocab: Vocabulary,
    pub transformer: TransformerEncoder,
    pub token_budget: usize,
}

pub const TOKEN_EMBEDDING: &str = "text.token_embedding";
pub const TEXT_POSITIONAL: &str = "text.positional";
const LN_FINAL_GAMMA: &str = "text.ln_final.gamma";
const LN_FINAL_BETA: &str = "text.ln_final.beta";

impl TextEncoder {
    pub fn new(vocab: Vocabulary, mut config: TransformerConfig, token_budget: usize) -> Result<Self, TextError> {
        config.max_seq_len = token_budget;
        Ok(Self { vocab, transformer: TransformerEncoder::new("text", config)?, token_budget })
    }

    pub fn width(&self) -> usize {
        self.transformer.config.width
    }

    /// Register the (frozen) text-tower weights.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let d = self.width();
        let std = 1.0 / (d as f64).sqrt();
        store.insert(TOKEN_EMBEDDING, Tensor::randn(&[self.vocab.len(), d], 1.0, rng), false);
        store.insert(TEXT_POSITIONAL, Tensor::randn(&[self.token_budget, d], 0.1, rng), false);
        self.transformer.init(store, std, false, rng);
        store.insert(LN_FINAL_GAMMA, Tensor::filled(&[d], T::one()), false);
        store.insert(LN_FINAL_BETA, Tensor::zeros(&[d]), false);
    }

    /// Names of every text-tower parameter.
    pub fn param_names<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<String> {
        store
            .iter()
            .map(|p| p.name.clone())
            .filter(|n| n.starts_with("text."))
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence, TextError> {
        self.vocab.tokenize(text)
    }

    /// Embed `[start, prefix, tokens, suffix, end]`, truncating content to
    /// the token budget first. Prompt rows stay connected to the bank.
    pub fn inject_prompts<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: &TokenSequence,
        bank: &PromptBank,
    ) -> Result<Var, TextError> {
        let tokens = truncate_to_budget(tokens, bank.k, self.token_budget)?;
        let table = g.param_from(store, TOKEN_EMBEDDING);
        let start = g.gather_rows(table, &[Vocabulary::START]);
        let end = g.gather_rows(table, &[Vocabulary::END]);
        let mut parts = vec![start];
        if bank.k > 0 {
            parts.push(g.param_from(store, bank.prefix_param()));
        }
        if !tokens.is_empty() {
            parts.push(g.gather_rows(table, &tokens.ids));
        }
        if bank.k > 0 {
            parts.push(g.param_from(store, bank.suffix_param()));
        }
        parts.push(end);
        Ok(g.concat_rows(&parts))
    }

    /// Run the tower over an embedded sequence; returns the `1 × D`
    /// representation at the end-token (last) position.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, embedded: Var) -> Result<Var, TextError> {
        let n = g.value(embedded).rows();
        if n > self.token_budget {
            return Err(NnError::SequenceTooLong { len: n, max: self.token_budget }.into());
        }
        let pos_table = g.param_from(store, TEXT_POSITIONAL);
        let pos = g.slice_rows(pos_table, 0, n);
        let x = g.add(embedded, pos);
        let h = self.transformer.forward(g, store, x)?;
        let last = g.slice_rows(h, n - 1, 1);
        let gamma = g.param_from(store, LN_FINAL_GAMMA);
        let beta = g.param_from(store, LN_FINAL_BETA);
        Ok(layer_norm(g, last, gamma, beta))
    }

    /// Tokenize, inject and encode one string.
    pub fn encode_text<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        text: &str,
        bank: &PromptBank,
    ) -> Result<Var, TextError> {
        let tokens = self.tokenize(text)?;
        let embedded = self.inject_prompts(g, store, &tokens, bank)?;
        self.encode(g, store, embedded)
    }

    /// One classifier row per name, all through the same bank.
    pub fn generate_classifiers<T: Scalar, S: AsRef<str>>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        names: &[S],
        bank: &PromptBank,
    ) -> Result<Var, TextError> {
        let mut seen = BTreeSet::new();
        for n in names {
            if !seen.insert(n.as_ref()) {
                return Err(TextError::DuplicateName(n.as_ref().to_string()));
            }
        }
        let rows = names
            .iter()
            .map(|n| self.encode_text(g, store, n.as_ref(), bank))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(g.concat_rows(&rows))
    }

    /// Evaluate query or classifier embeddings without keeping the graph.
    pub fn embed_all<T: Scalar, S: AsRef<str>>(
        &self,
        store: &ParamStore<T>,
        texts: &[S],
        bank: &PromptBank,
    ) -> Result<Tensor<T>, TextError> {
        let mut rows = Vec::with_capacity(texts.len() * self.width());
        for t in texts {
            let mut g = Graph::new();
            let v = self.encode_text(&mut g, store, t.as_ref(), bank)?;
            rows.extend_from_slice(g.value(v).data());
        }
        Ok(Tensor::from_rows(texts.len(), self.width(), rows))
    }
}

/// Position of a vector inside a prompt bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSlot {
    Prefix(usize),
    Suffix(usize),
}

impl std::fmt::Display for PromptSlot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PromptSlot::Prefix(i) => write!(f, "a{}", i + 1),
            PromptSlot::Suffix(i) => write!(f, "a{}'", i + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearestSubword {
    pub slot: PromptSlot,
    /// `None` when the prompt vector is zero and cosine distance is undefined.
    pub token: Option<String>,
    pub distance: Option<f64>,
}

/// For each prompt vector, the non-special vocabulary entry with the smallest
/// cosine distance; ties go to the lowest id.
pub fn nearest_subwords<T: Scalar>(
    prompts: &Tensor<T>,
    k: usize,
    vocab: &Vocabulary,
    embeddings: &Tensor<T>,
) -> Result<Vec<NearestSubword>, TextError> {
    let norms: Vec<f64> = (0..embeddings.rows())
        .map(|i| embeddings.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect();
    for (id, &n) in norms.iter().enumerate() {
        if !Vocabulary::is_special(id) && n == 0.0 {
            return Err(TextError::DegenerateEmbedding(id));
        }
    }
    let mut out = Vec::with_capacity(prompts.rows());
    for r in 0..prompts.rows() {
        let slot = if r < k { PromptSlot::Prefix(r) } else { PromptSlot::Suffix(r - k) };
        let p = prompts.row(r);
        let pn = p.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if pn == 0.0 {
            out.push(NearestSubword { slot, token: None, distance: None });
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for id in SPECIALS.len()..vocab.len() {
            let e = embeddings.row(id);
            let dot: f64 = p.iter().zip(e).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            let dist = 1.0 - dot / (pn * norms[id]);
            if best.is_none_or(|(_, d)| dist < d) {
                best = Some((id, dist));
            }
        }
        let (id, dist) = best.expect("vocabulary has words");
        out.push(NearestSubword { slot, token: Some(vocab.token(id).to_string()), distance: Some(dist) });
    }
    Ok(out)
}
