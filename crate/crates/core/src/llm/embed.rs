//! Vector helpers and the deterministic hashing embedder used by the mock
//! backend.

use std::fmt;

/// L2-normalize in place. Returns `false` for a zero (or non-finite) vector.
pub fn normalize(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return false;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    true
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity computed from scratch (no unit-norm assumption).
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Maps text to a vector. Implementations must be deterministic.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f32>;
}

impl fmt::Debug for dyn Embedder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Embedder(dim={})", self.dim())
    }
}

/// FNV-1a, 64 bit. Stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Signed feature hashing over lowercased word tokens. Texts sharing words
/// get similar vectors, identical texts identical ones.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        let lower = text.to_lowercase();
        let mut any = false;
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let h = fnv1a(word.as_bytes());
            let slot = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[slot] += sign;
            any = true;
        }
        if !any || !normalize(&mut v) {
            // Token-free text: a fixed direction derived from the raw bytes.
            v.iter_mut().for_each(|x| *x = 0.0);
            v[(fnv1a(text.as_bytes()) % self.dim as u64) as usize] = 1.0;
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embeddings_are_unit_and_deterministic() {
        let e = HashEmbedder::default();
        for t in ["a", "", "   ", "The quick brown fox", "!!!"] {
            let v = e.embed(t);
            assert_eq!(v.len(), 256);
            let n: f32 = dot(&v, &v).sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{t:?}");
            assert_eq!(v, e.embed(t));
        }
        let x = e.embed("harbor trade routes");
        assert!((cosine(&x, &x) - 1.0).abs() < 1e-6);
        let y = e.embed("harbor trade");
        let z = e.embed("volcanic soil chemistry");
        assert!(cosine(&x, &y) > cosine(&x, &z));
    }

    #[test]
    fn normalize_rejects_zero() {
        let mut v = vec![0.0, 0.0];
        assert!(!normalize(&mut v));
        let mut v = vec![3.0, 4.0];
        assert!(normalize(&mut v));
        assert!((v[0] - 0.6).abs() < 1e-7);
    }
}
