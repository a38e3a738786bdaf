use std::collections::HashMap;
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{Embedder, ProviderError};

pub const HASH_EMBEDDER_ID: &str = "hash-v1";

const HASH_DIM: usize = 256;
const NGRAM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub embedder_id: String,
}

/// Scale `values` to unit L2 norm. Returns `false` (leaving the input
/// untouched) for the zero vector.
pub fn l2_normalize(values: &mut [f64]) -> bool {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    values.iter_mut().for_each(|v| *v /= norm);
    true
}

/// Dot product. Equals cosine similarity for unit vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Feature-hashing embedder over lowercase character 3-grams.
///
/// Each gram is hashed with 64-bit FNV-1a; the low bits pick one of 256
/// buckets (`hash % 256`) and the top bit picks the sign. Texts shorter
/// than three characters count as a single gram. The bucket counts are
/// L2-normalized; if they cancel to zero, the vector is the unit basis
/// vector at the whole text's bucket.
#[derive(Debug, Default, Clone, Copy)]
pub struct HashEmbedder;

impl HashEmbedder {
    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::InvalidRequest(
                "cannot embed empty text".into(),
            ));
        }
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let mut values = vec![0.0; HASH_DIM];
        let mut add = |gram: &[char]| {
            let gram: String = gram.iter().collect();
            let h = fnv1a64(gram.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            values[(h % HASH_DIM as u64) as usize] += sign;
        };
        if chars.len() < NGRAM {
            add(&chars);
        } else {
            chars.windows(NGRAM).for_each(&mut add);
        }
        if !l2_normalize(&mut values) {
            values.iter_mut().for_each(|v| *v = 0.0);
            values[(fnv1a64(text.as_bytes()) % HASH_DIM as u64) as usize] = 1.0;
        }
        Ok(EmbeddingVector {
            values,
            embedder_id: HASH_EMBEDDER_ID.to_string(),
        })
    }
}

#[async_trait]
impl Embedder for HashEmbedder {
    fn embedder_id(&self) -> &str {
        HASH_EMBEDDER_ID
    }

    fn dim(&self) -> usize {
        HASH_DIM
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        self.embed_text(text)
    }
}

/// Memoizes embeddings by text for one embedder.
pub struct CachedEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

#[async_trait]
impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn embedder_id(&self) -> &str {
        self.inner.embedder_id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        if let Some(hit) = self.cache.lock().unwrap().get(text) {
            return Ok(hit.clone());
        }
        let vector = self.inner.embed(text).await?;
        self.cache
            .lock()
            .unwrap()
            .insert(text.to_string(), vector.clone());
        Ok(vector)
    }
}
