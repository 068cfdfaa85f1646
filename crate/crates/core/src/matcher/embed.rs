//! Text embedders.

use std::borrow::Cow;
use std::io::Write;
use std::process::{Command, Stdio};

use super::{MatchError, Result};
use crate::scalar::Scalar;

/// Real vector with its cached L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
    norm: T,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        let norm = values.iter().map(|v| *v * *v).sum::<T>().sqrt();
        Self { values, norm }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn norm(&self) -> T {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Scaled to unit length; `None` for the zero vector.
    pub fn normalized(&self) -> Option<Self> {
        if self.norm == T::zero() || !self.norm.is_finite() {
            return None;
        }
        let values: Vec<T> = self.values.iter().map(|v| *v / self.norm).collect();
        Some(Self::new(values))
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self::new(self.values.iter().map(|v| *v * factor).collect())
    }

    pub fn is_unit(&self) -> bool {
        (self.norm - T::one()).abs() <= T::norm_tolerance()
    }
}

/// A sentence-embedding backend.
pub trait Embedder<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    /// Maximum input length in whitespace tokens.
    fn max_tokens(&self) -> usize;

    /// Raw vectors, one per text, in order. Need not be normalised.
    fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<T>>>;

    /// Keep the head of `text` up to the token limit.
    fn truncate<'a>(&self, text: &'a str) -> Cow<'a, str> {
        let limit = self.max_tokens();
        match text.split_whitespace().nth(limit) {
            None => Cow::Borrowed(text),
            Some(_) => Cow::Owned(text.split_whitespace().take(limit).collect::<Vec<_>>().join(" ")),
        }
    }
}

/// Embed and unit-normalise `texts`, preserving order.
pub fn embed_texts<T: Scalar, E: Embedder<T> + ?Sized>(
    embedder: &E,
    texts: &[&str],
) -> Result<Vec<EmbeddingVector<T>>> {
    embed_texts_lenient(embedder, texts)?
        .into_iter()
        .zip(texts)
        .map(|(v, text)| v.ok_or_else(|| MatchError::ZeroVector((*text).to_string())))
        .collect()
}

/// Like [`embed_texts`], but a text whose vector is zero (for instance when
/// signed hash buckets cancel) yields `None` instead of failing the batch.
pub fn embed_texts_lenient<T: Scalar, E: Embedder<T> + ?Sized>(
    embedder: &E,
    texts: &[&str],
) -> Result<Vec<Option<EmbeddingVector<T>>>> {
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(MatchError::EmptyText(i));
    }
    let raw = embedder.encode(texts)?;
    if raw.len() != texts.len() {
        return Err(MatchError::Embed(format!(
            "backend returned {} vectors for {} texts",
            raw.len(),
            texts.len()
        )));
    }
    raw.into_iter()
        .map(|values| {
            if values.len() != embedder.dim() {
                return Err(MatchError::DimensionMismatch(values.len(), embedder.dim()));
            }
            Ok(EmbeddingVector::new(values).normalized())
        })
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Deterministic bag-of-tokens embedder with signed feature hashing.
///
/// Each lowercased token hashes (FNV-1a) to bucket `h % dim` with sign `+1`
/// when bit 32 of `h` is clear and `-1` otherwise. Word order is ignored.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    max_tokens: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 64;
    pub const DEFAULT_MAX_TOKENS: usize = 384;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            max_tokens: Self::DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl<T: Scalar> Embedder<T> for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<T>>> {
        Ok(texts
            .iter()
            .map(|text| {
                let mut v = vec![T::zero(); self.dim];
                for token in tokenize(text) {
                    let h = fnv1a(token.as_bytes());
                    let bucket = (h % self.dim as u64) as usize;
                    if (h >> 32) & 1 == 0 {
                        v[bucket] = v[bucket] + T::one();
                    } else {
                        v[bucket] = v[bucket] - T::one();
                    }
                }
                v
            })
            .collect())
    }
}

/// External model behind a command: the texts go to stdin as a JSON array
/// of strings and the command prints a JSON array of float arrays.
#[derive(Debug, Clone)]
pub struct CommandEmbedder {
    pub program: String,
    pub args: Vec<String>,
    pub dim: usize,
    pub max_tokens: usize,
}

pub const ENV_EMBEDDER_CMD: &str = "AUDIT_EMBEDDER_CMD";

impl CommandEmbedder {
    /// Parse a whitespace-separated command line such as
    /// `python3 scripts/embed.py --model all-mpnet-base-v2`.
    pub fn from_command_line(line: &str, dim: usize, max_tokens: usize) -> Result<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| MatchError::Embed("empty embedder command".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
            dim,
            max_tokens,
        })
    }
}

impl<T: Scalar> Embedder<T> for CommandEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<T>>> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| MatchError::Embed(format!("{}: {e}", self.program)))?;
        let input = serde_json::to_vec(texts).map_err(|e| MatchError::Embed(e.to_string()))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            stdin
                .write_all(&input)
                .map_err(|e| MatchError::Embed(format!("writing to embedder: {e}")))?;
        }
        let out = child.wait_with_output().map_err(|e| MatchError::Embed(e.to_string()))?;
        if !out.status.success() {
            return Err(MatchError::Embed(format!(
                "{} exited with {}",
                self.program, out.status
            )));
        }
        let rows: Vec<Vec<f64>> =
            serde_json::from_slice(&out.stdout).map_err(|e| MatchError::Embed(format!("bad embedder output: {e}")))?;
        Ok(rows.into_iter().map(|r| r.into_iter().map(T::of).collect()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_texts_identical_vectors() {
        let e = HashEmbedder::default();
        let v: Vec<EmbeddingVector<f64>> = embed_texts(&e, &["abc", "abc"]).unwrap();
        assert_eq!(v[0], v[1]);
        assert!(v.iter().all(|x| x.is_unit()));
    }

    #[test]
    fn word_order_does_not_matter() {
        let e = HashEmbedder::new(64);
        let v: Vec<EmbeddingVector<f64>> = embed_texts(&e, &["vaccine microchip", "microchip vaccine"]).unwrap();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn empty_and_tokenless_texts_fail() {
        let e = HashEmbedder::default();
        assert!(matches!(
            embed_texts::<f64, _>(&e, &["ok", ""]),
            Err(MatchError::EmptyText(1))
        ));
        assert!(matches!(
            embed_texts::<f64, _>(&e, &["!!!"]),
            Err(MatchError::ZeroVector(_))
        ));
    }

    #[test]
    fn truncation_keeps_head() {
        let e = HashEmbedder::default().with_max_tokens(3);
        let t = <HashEmbedder as Embedder<f64>>::truncate(&e, "a b c d e");
        assert_eq!(t, "a b c");
        let short = <HashEmbedder as Embedder<f64>>::truncate(&e, "a b");
        assert!(matches!(short, Cow::Borrowed(_)));
    }

    #[test]
    fn f32_and_f64_agree() {
        let e = HashEmbedder::default();
        let a: Vec<EmbeddingVector<f32>> = embed_texts(&e, &["hoax rigged ballots"]).unwrap();
        let b: Vec<EmbeddingVector<f64>> = embed_texts(&e, &["hoax rigged ballots"]).unwrap();
        for (x, y) in a[0].values().iter().zip(b[0].values()) {
            assert!((f64::from(*x) - y).abs() < 1e-6);
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[cfg(unix)]
    #[test]
    fn command_embedder_round_trip() {
        // Stand-in model: emits [1, 0] and [0, 1] regardless of input.
        let e = CommandEmbedder {
            program: "sh".into(),
            args: vec!["-c".into(), "cat > /dev/null; echo '[[2.0, 0.0], [0.0, 3.0]]'".into()],
            dim: 2,
            max_tokens: 10,
        };
        let v: Vec<EmbeddingVector<f64>> = embed_texts(&e, &["x", "y"]).unwrap();
        assert_eq!(v[0].values(), &[1.0, 0.0]);
        assert_eq!(v[1].values(), &[0.0, 1.0]);
        let wrong_dim = CommandEmbedder { dim: 3, ..e };
        assert!(matches!(
            embed_texts::<f64, _>(&wrong_dim, &["x", "y"]),
            Err(MatchError::DimensionMismatch(2, 3))
        ));
    }
}
