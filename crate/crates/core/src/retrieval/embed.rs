use serde::{Deserialize, Serialize};

pub const EMBEDDING_DIMS: usize = 256;

const FNV_OFFSET: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

/// L2-normalized embedding. The empty-text embedding is all zeros; an empty
/// `values` vector marks "not computed yet" in catalog files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn is_absent(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, text: &str) -> EmbeddingVector;
}

/// Bag-of-tokens embedder: lowercase, split on non-alphanumeric runs,
/// FNV-1a 64 each token into one of 256 buckets, L2-normalize the counts.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

impl Embedder for HashEmbedder {
    fn id(&self) -> &str {
        "fnv1a-256"
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        let lower = text.to_lowercase();
        let mut counts = vec![0.0f64; EMBEDDING_DIMS];
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let bucket = (fnv1a64(token.as_bytes()) % EMBEDDING_DIMS as u64) as usize;
            counts[bucket] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            for c in &mut counts {
                *c /= norm;
            }
        }
        EmbeddingVector(counts)
    }
}

pub fn embed(text: &str) -> EmbeddingVector {
    HashEmbedder.embed(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn deterministic_and_normalized() {
        let a = embed("NDVI raster over the Nile delta");
        let b = embed("NDVI raster over the Nile delta");
        assert_eq!(a, b);
        assert_eq!(a.dims(), EMBEDDING_DIMS);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let z = embed("");
        assert_eq!(z.dims(), EMBEDDING_DIMS);
        assert!(z.values().iter().all(|v| *v == 0.0));
        assert_eq!(cosine(&z, &embed("x")), 0.0);
        assert_eq!(embed("  --  ").norm(), 0.0);
    }

    #[test]
    fn case_and_punctuation_insensitive() {
        assert_eq!(embed("Cloud-Mask!"), embed("cloud mask"));
    }
}
