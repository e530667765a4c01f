//! Tokenisation, vocabularies, and per-token embedding backends.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

/// String <-> contiguous id map with reserved PAD and UNK slots.
///
/// While growable, unseen strings are registered; once frozen they map to UNK.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    growable: bool,
}

pub type EntityVocabulary = Vocabulary;

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            index,
            growable: true,
        }
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::new();
        for t in tokens {
            v.intern(t.as_ref());
        }
        v
    }

    /// Rebuilds the lookup index after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn freeze(&mut self) {
        self.growable = false;
    }

    pub fn is_growable(&self) -> bool {
        self.growable
    }

    /// Id of `token`, registering it if the vocabulary is still growable.
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        if !self.growable {
            return UNK;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Fixed-length token ids; `mask[i]` is false exactly where `ids[i] == PAD`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn from_ids(ids: &[usize], n_w: usize) -> Self {
        let mut out: Vec<usize> = ids.iter().copied().filter(|&i| i != PAD).take(n_w).collect();
        out.resize(n_w, PAD);
        let mask = out.iter().map(|&i| i != PAD).collect();
        TokenSequence { ids: out, mask }
    }

    pub fn from_text(text: &str, vocab: &mut Vocabulary, n_w: usize) -> Self {
        let ids: Vec<usize> = tokenize(text).iter().map(|t| vocab.intern(t)).collect();
        Self::from_ids(&ids, n_w)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_real(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Real tokens of `self` followed by those of `other`, truncated to `n_w`.
    pub fn concat(&self, other: &TokenSequence, n_w: usize) -> Self {
        let ids: Vec<usize> = self
            .ids
            .iter()
            .chain(&other.ids)
            .copied()
            .filter(|&i| i != PAD)
            .collect();
        Self::from_ids(&ids, n_w)
    }
}

/// Where token vectors come from.
#[derive(Clone, Debug)]
pub enum TextBackend {
    /// A trainable `vocab x d_w` parameter table.
    Trainable(ParamId),
    /// Fixed vectors, `vocab x d_w`; receives no gradient.
    Frozen(Tensor<f32>),
}

impl TextBackend {
    pub fn dim<T: Scalar>(&self, tape: &Tape<'_, T>) -> usize {
        match self {
            TextBackend::Trainable(id) => tape.params().get(*id).shape()[1],
            TextBackend::Frozen(t) => t.shape()[1],
        }
    }

    /// Embeds a sequence as `n_w x d_w`; PAD rows are zero.
    pub fn encode_tokens<T: Scalar>(&self, tape: &mut Tape<'_, T>, seq: &TokenSequence) -> Result<Var> {
        let emb = self.lookup(tape, &seq.ids)?;
        if seq.mask.iter().all(|m| *m) {
            return Ok(emb);
        }
        let d = tape.dims(emb).1;
        tape.mul_const(emb, crate::nn::row_mask(&seq.mask, d))
    }

    /// Raw row lookup without masking.
    pub fn lookup<T: Scalar>(&self, tape: &mut Tape<'_, T>, ids: &[usize]) -> Result<Var> {
        match self {
            TextBackend::Trainable(id) => tape.embedding(*id, ids),
            TextBackend::Frozen(table) => {
                let (n, d) = table.as_matrix_dims()?;
                let mut v = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    if i >= n {
                        return Err(Error::Vocabulary { id: i, size: n });
                    }
                    v.extend(table.row(i).iter().map(|x| T::from_f64_lossy(*x as f64)));
                }
                tape.constant(ids.len(), d, v)
            }
        }
    }
}

/// Parses a vector file: header `count dim`, then `token v_1 .. v_dim` per line.
/// The whole file is validated before anything is returned.
pub fn read_vector_file(path: &Path, expected_dim: usize) -> Result<Vec<(String, Vec<f32>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vectors(&text, expected_dim)
}

pub fn parse_vectors(text: &str, expected_dim: usize) -> Result<Vec<(String, Vec<f32>)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else {
        return Ok(Vec::new());
    };
    let head: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match head.as_slice() {
        [c, d] => (
            c.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad vector count {c:?}")))?,
            d.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad vector dim {d:?}")))?,
        ),
        _ => return Err(Error::Format(format!("malformed header {header:?}"))),
    };
    if dim != expected_dim {
        return Err(Error::Format(format!(
            "vector dim {dim} does not match configured {expected_dim}"
        )));
    }
    let mut out = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap_or_default().to_string();
        let v = parts
            .map(|x| {
                x.parse::<f32>()
                    .map_err(|_| Error::Format(format!("line {}: bad float {x:?}", i + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        if v.len() != dim {
            return Err(Error::Format(format!(
                "line {}: {} values, expected {dim}",
                i + 2,
                v.len()
            )));
        }
        out.push((token, v));
    }
    if out.len() != count {
        return Err(Error::Format(format!(
            "header declares {count} vectors, found {}",
            out.len()
        )));
    }
    Ok(out)
}

/// Builds a non-trainable table aligned with `vocab`. Tokens absent from the
/// file take the `[UNK]` row, which is the file's `[UNK]` entry if present
/// and zero otherwise. PAD is always zero.
pub fn frozen_table(entries: &[(String, Vec<f32>)], vocab: &Vocabulary, dim: usize) -> Tensor<f32> {
    let found: HashMap<&str, &Vec<f32>> = entries.iter().map(|(t, v)| (t.as_str(), v)).collect();
    let unk = found
        .get(UNK_TOKEN)
        .map(|v| v.to_vec())
        .unwrap_or_else(|| vec![0.0; dim]);
    let mut data = Vec::with_capacity(vocab.len() * dim);
    for id in 0..vocab.len() {
        let token = vocab.token(id).unwrap_or(UNK_TOKEN);
        if id == PAD {
            data.extend(std::iter::repeat_n(0.0, dim));
        } else if let Some(v) = found.get(token) {
            data.extend_from_slice(v);
        } else {
            data.extend_from_slice(&unk);
        }
    }
    Tensor::matrix(vocab.len(), dim, data).expect("table dims are consistent")
}

pub fn import_frozen_vectors(path: &Path, vocab: &Vocabulary, dim: usize) -> Result<TextBackend> {
    let entries = read_vector_file(path, dim)?;
    Ok(TextBackend::Frozen(frozen_table(&entries, vocab, dim)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("Star-Wars: The NEW hope, 2024!"),
            vec!["star", "wars", "the", "new", "hope", "2024"]
        );
        assert!(tokenize("  ,,, ").is_empty());
    }

    #[test]
    fn vocabulary_reserves_pad_and_unk() {
        let mut v = Vocabulary::from_tokens(["a", "b", "a"]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.get("a"), 2);
        assert_eq!(v.get(PAD_TOKEN), PAD);
        assert_eq!(v.get("zzz"), UNK);
        v.freeze();
        assert_eq!(v.intern("new"), UNK);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn sequences_pad_and_truncate() {
        let s = TokenSequence::from_ids(&[5, 6], 4);
        assert_eq!(s.ids, vec![5, 6, PAD, PAD]);
        assert_eq!(s.mask, vec![true, true, false, false]);
        let s = TokenSequence::from_ids(&[1, 2, 3, 4, 5], 3);
        assert_eq!(s.ids, vec![1, 2, 3]);
        let c = TokenSequence::from_ids(&[2, 3], 4).concat(&TokenSequence::from_ids(&[7, 8, 9], 4), 4);
        assert_eq!(c.ids, vec![2, 3, 7, 8]);
    }

    #[test]
    fn all_pad_sequence_encodes_to_zeros() {
        let mut p = ParamSet::<f32>::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let id = p.insert_uniform("emb", 10, 4, 0.1, &mut rng).unwrap();
        let backend = TextBackend::Trainable(id);
        let mut t = Tape::new(&p);
        let v = backend
            .encode_tokens(&mut t, &TokenSequence::from_ids(&[], 3))
            .unwrap();
        assert!(t.value(v).iter().all(|x| *x == 0.0));
        let bad = TokenSequence::from_ids(&[12], 3);
        assert!(matches!(
            backend.encode_tokens(&mut t, &bad),
            Err(Error::Vocabulary { id: 12, .. })
        ));
    }

    #[test]
    fn frozen_vectors_round_trip() {
        let file = "3 4\nfoo 0.1 0.2 0.3 0.4\nbar -1 2.5 3e-2 0\n[UNK] 9 9 9 9\n";
        let entries = parse_vectors(file, 4).unwrap();
        let vocab = Vocabulary::from_tokens(["foo", "bar", "baz"]);
        let table = frozen_table(&entries, &vocab, 4);
        assert_eq!(table.row(vocab.get("foo")), &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(table.row(vocab.get("bar")), &[-1.0, 2.5, 3e-2, 0.0]);
        assert_eq!(table.row(vocab.get("baz")), &[9.0; 4]);
        assert_eq!(table.row(PAD), &[0.0; 4]);

        let p = ParamSet::<f64>::new();
        let mut t = Tape::new(&p);
        let backend = TextBackend::Frozen(table);
        let seq = TokenSequence::from_ids(&[vocab.get("bar"), vocab.get("foo")], 3);
        let v = backend.encode_tokens(&mut t, &seq).unwrap();
        assert_eq!(&t.value(v)[..4], &[-1.0f32 as f64, 2.5, 3e-2f32 as f64, 0.0]);
        assert_eq!(&t.value(v)[8..], &[0.0; 4]);
    }

    #[test]
    fn empty_vector_file_maps_everything_to_unk() {
        let entries = parse_vectors("", 4).unwrap();
        let vocab = Vocabulary::from_tokens(["foo"]);
        let table = frozen_table(&entries, &vocab, 4);
        assert_eq!(table.row(vocab.get("foo")), table.row(UNK));
    }

    #[test]
    fn malformed_vector_files_rejected() {
        assert!(parse_vectors("three 4\n", 4).is_err());
        assert!(parse_vectors("1 5\nfoo 1 2 3 4 5\n", 4).is_err());
        assert!(parse_vectors("2 2\nfoo 1 2\n", 2).is_err());
        assert!(parse_vectors("1 2\nfoo 1 x\n", 2).is_err());
    }
}
