use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::KnowledgeError;
use crate::numkit::{Scalar, Tensor};

pub const MAX_TOKENS: usize = 256;

/// Token matrix for one molecule's knowledge text. Rows whose mask entry is
/// false are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeEmbedding {
    pub tokens: Tensor<f64>,
    pub mask: Vec<bool>,
    pub provider_id: String,
    pub text_hash: String,
}

impl KnowledgeEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// A frozen text → token-matrix map.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<KnowledgeEmbedding, KnowledgeError>;
    /// Token strings aligned with the rows `embed` returns.
    fn tokens(&self, text: &str) -> Vec<String>;
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Lowercased runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Hash-seeded random unit vectors per token. Deterministic for a given
/// `(d_k, seed)` on every platform: the token seed comes from SHA-256 and the
/// vector from ChaCha8.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuiltinProvider {
    pub dim: usize,
    pub seed: u64,
}

impl BuiltinProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding width must be positive");
        Self { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        loop {
            // Box–Muller gives an isotropic direction after normalization.
            let mut v: Vec<f64> = (0..self.dim)
                .map(|_| {
                    let u1: f64 = 1.0 - rng.gen::<f64>();
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                v.iter_mut().for_each(|x| *x /= norm);
                return v;
            }
        }
    }
}

impl EmbeddingProvider for BuiltinProvider {
    fn id(&self) -> String {
        format!("builtin-d{}-s{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn tokens(&self, text: &str) -> Vec<String> {
        let mut t = tokenize(text);
        t.truncate(MAX_TOKENS);
        t
    }

    fn embed(&self, text: &str) -> Result<KnowledgeEmbedding, KnowledgeError> {
        if text.trim().is_empty() {
            return Err(KnowledgeError::EmptyText);
        }
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(KnowledgeError::NoTokens);
        }
        if tokens.len() > MAX_TOKENS {
            log::warn!(
                "knowledge text has {} tokens; truncating to {MAX_TOKENS}",
                tokens.len()
            );
            tokens.truncate(MAX_TOKENS);
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for t in &tokens {
            data.extend(self.token_vector(t));
        }
        Ok(KnowledgeEmbedding {
            tokens: Tensor::new(vec![tokens.len(), self.dim], data).expect("rows × dim"),
            mask: vec![true; tokens.len()],
            provider_id: self.id(),
            text_hash: text_hash(text),
        })
    }
}

pub fn builtin_embed(
    text: &str,
    dim: usize,
    seed: u64,
) -> Result<KnowledgeEmbedding, KnowledgeError> {
    BuiltinProvider::new(dim, seed).embed(text)
}

/// Zero-pads to the longest item: `[B, m_max, d_k]` plus a row-major
/// `[B, m_max]` mask.
pub fn pad_batch<T: Scalar>(
    items: &[&KnowledgeEmbedding],
) -> Result<(Tensor<T>, Vec<bool>), KnowledgeError> {
    let Some(first) = items.first() else {
        return Err(KnowledgeError::EmptyBatch);
    };
    let d = first.dim();
    if let Some(bad) = items.iter().find(|e| e.dim() != d) {
        return Err(KnowledgeError::DimMismatch {
            expected: d,
            got: bad.dim(),
        });
    }
    let m = items.iter().map(|e| e.len()).max().unwrap_or(0);
    let mut data = vec![T::zero(); items.len() * m * d];
    let mut mask = vec![false; items.len() * m];
    for (b, e) in items.iter().enumerate() {
        for r in 0..e.len() {
            if !e.mask[r] {
                continue;
            }
            mask[b * m + r] = true;
            let dst = &mut data[(b * m + r) * d..(b * m + r + 1) * d];
            for (x, &y) in dst.iter_mut().zip(e.tokens.row(r)) {
                *x = T::from_f64_lossy(y);
            }
        }
    }
    Ok((
        Tensor::new(vec![items.len(), m, d], data).expect("padded layout"),
        mask,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits_on_punctuation() {
        assert_eq!(
            tokenize("Aromatic ring, (hydroxyl)-group!"),
            vec!["aromatic", "ring", "hydroxyl", "group"]
        );
        assert!(tokenize(" ,.; ").is_empty());
    }

    #[test]
    fn rows_are_unit_norm_and_deterministic() {
        let a = builtin_embed("aromatic ring", 64, 7).unwrap();
        let b = builtin_embed("aromatic ring", 64, 7).unwrap();
        assert_eq!(a.tokens.data(), b.tokens.data());
        for r in 0..a.len() {
            let n: f64 = a.tokens.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn swapped_words_swap_rows() {
        let ab = builtin_embed("a b", 16, 1).unwrap();
        let ba = builtin_embed("b a", 16, 1).unwrap();
        assert_eq!(ab.tokens.row(0), ba.tokens.row(1));
        assert_eq!(ab.tokens.row(1), ba.tokens.row(0));
    }

    #[test]
    fn seed_changes_vectors() {
        let a = builtin_embed("ring", 16, 1).unwrap();
        let b = builtin_embed("ring", 16, 2).unwrap();
        assert_ne!(a.tokens.data(), b.tokens.data());
    }

    #[test]
    fn empty_and_tokenless_text() {
        assert!(matches!(
            builtin_embed("  \n", 8, 0),
            Err(KnowledgeError::EmptyText)
        ));
        assert!(matches!(
            builtin_embed("--", 8, 0),
            Err(KnowledgeError::NoTokens)
        ));
    }

    #[test]
    fn long_text_is_capped() {
        let text = "w ".repeat(400);
        assert_eq!(builtin_embed(&text, 4, 0).unwrap().len(), MAX_TOKENS);
    }

    #[test]
    fn padding() {
        let a = builtin_embed("x y", 8, 0).unwrap();
        let b = builtin_embed("p q r s t", 8, 0).unwrap();
        let (t, mask) = pad_batch::<f64>(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 5, 8]);
        assert_eq!(&mask[..5], &[true, true, false, false, false]);
        assert!(t.data()[2 * 8..5 * 8].iter().all(|&x| x == 0.0));
        let (single, m1) = pad_batch::<f64>(&[&b]).unwrap();
        assert_eq!(single.data(), b.tokens.data());
        assert!(m1.iter().all(|&x| x));
        let c = builtin_embed("x", 4, 0).unwrap();
        assert!(matches!(
            pad_batch::<f64>(&[&a, &c]),
            Err(KnowledgeError::DimMismatch { .. })
        ));
    }
}
