//! Deterministic text embeddings via signed feature hashing.
//!
//! Documents and prompts are embedded into a fixed 256-dimensional space by
//! hashing tokens into buckets with a sign bit (the classic hashing trick).
//! There is no model and no randomness: the same text always produces the
//! same vector, bit for bit, on every platform. That determinism is what
//! makes the retrieval and routing layers exactly testable against
//! brute-force reimplementations.
//!
//! The pipeline for [`embed_text`]:
//!
//! 1. tokenize: lowercase, split on runs of non-alphanumeric characters;
//! 2. for each token, hash the UTF-8 bytes with FNV-1a (64-bit);
//! 3. add `+1.0` or `-1.0` (hash bit 0) to component `(hash >> 1) % 256`;
//! 4. L2-normalize, leaving the all-zero vector untouched.
//!
//! The math here is generic over the float width via [`num_traits::Float`];
//! the rest of the system uses the `f64` alias exported from the crate root.

use num_traits::Float;

/// Number of hash buckets, i.e. the dimensionality of every embedding.
pub const EMBEDDING_DIM: usize = 256;

/// FNV-1a offset basis (64-bit variant).
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
/// FNV-1a prime (64-bit variant).
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// A dense vector of [`EMBEDDING_DIM`] components.
///
/// Always either the all-zero vector or (up to rounding) unit length when
/// produced by [`embed_text`] / [`mean_normalized`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseEmbedding<F> {
    values: [F; EMBEDDING_DIM],
}

impl<F: Float> DenseEmbedding<F> {
    pub fn zero() -> DenseEmbedding<F> {
        DenseEmbedding {
            values: [F::zero(); EMBEDDING_DIM],
        }
    }

    pub fn from_values(values: [F; EMBEDDING_DIM]) -> DenseEmbedding<F> {
        DenseEmbedding { values }
    }

    pub fn values(&self) -> &[F; EMBEDDING_DIM] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == F::zero())
    }

    pub fn norm(&self) -> F {
        dot(self, self).sqrt()
    }

    /// Scales to unit length; the zero vector stays zero.
    pub fn normalized(mut self) -> DenseEmbedding<F> {
        let n = self.norm();
        if n > F::zero() {
            for v in self.values.iter_mut() {
                *v = *v / n;
            }
        }
        self
    }
}

/// Dot product, accumulated in component order (index 0 upward) so the
/// result is reproducible bit for bit.
fn dot<F: Float>(a: &DenseEmbedding<F>, b: &DenseEmbedding<F>) -> F {
    let mut acc = F::zero();
    for i in 0..EMBEDDING_DIM {
        acc = acc + a.values[i] * b.values[i];
    }
    acc
}

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &byte in bytes {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Lowercases and splits on runs of non-alphanumeric characters
/// (per Unicode `char::is_alphanumeric`). Empty tokens are dropped, so
/// punctuation-only text tokenizes to nothing.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// The first `max_tokens` tokens of `text`, joined by single spaces.
/// Used wherever a response quotes a document body.
pub fn token_snippet(text: &str, max_tokens: usize) -> String {
    tokenize(text)
        .into_iter()
        .take(max_tokens)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Embeds text as described in the module docs. Text with no tokens embeds
/// to the zero vector.
pub fn embed_text<F: Float>(text: &str) -> DenseEmbedding<F> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return DenseEmbedding::zero();
    }
    let mut values = [F::zero(); EMBEDDING_DIM];
    for token in &tokens {
        let hash = fnv1a_64(token.as_bytes());
        let index = ((hash >> 1) % EMBEDDING_DIM as u64) as usize;
        let delta = if hash & 1 == 0 { F::one() } else { -F::one() };
        values[index] = values[index] + delta;
    }
    DenseEmbedding::from_values(values).normalized()
}

/// Cosine similarity. Inputs from this module are already unit length, so
/// this is a plain dot product; if either side is the zero vector the
/// similarity is defined as 0.0.
pub fn cosine_similarity<F: Float>(a: &DenseEmbedding<F>, b: &DenseEmbedding<F>) -> F {
    if a.is_zero() || b.is_zero() {
        return F::zero();
    }
    dot(a, b)
}

/// Component-wise mean of the inputs, re-normalized to unit length.
/// An empty input yields the zero vector. Summation runs in iteration
/// order, so callers that need bit-exact reproducibility must present the
/// inputs in a canonical order.
pub fn mean_normalized<'a, F, I>(embeddings: I) -> DenseEmbedding<F>
where
    F: Float + 'a,
    I: IntoIterator<Item = &'a DenseEmbedding<F>>,
{
    let mut sum = [F::zero(); EMBEDDING_DIM];
    let mut count: usize = 0;
    for e in embeddings {
        for (acc, v) in sum.iter_mut().zip(e.values.iter()) {
            *acc = *acc + *v;
        }
        count += 1;
    }
    if count == 0 {
        return DenseEmbedding::zero();
    }
    let n = F::from(count).expect("count fits in the float type");
    for v in sum.iter_mut() {
        *v = *v / n;
    }
    DenseEmbedding::from_values(sum).normalized()
}
