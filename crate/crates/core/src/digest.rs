use sha2::{Digest, Sha256};

/// Incremental SHA-256 over length-prefixed fields, so `("ab","c")` and
/// `("a","bc")` hash differently.
#[derive(Default, Clone)]
pub struct FieldHasher {
    inner: Sha256,
}

impl FieldHasher {
    pub fn new(domain: &str) -> Self {
        let mut h = Self::default();
        h.field(domain.as_bytes());
        h
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        self.inner.update((bytes.len() as u64).to_le_bytes());
        self.inner.update(bytes);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.field(s.as_bytes())
    }

    pub fn finish_hex(self) -> String {
        hex::encode(self.inner.finalize())
    }

    pub fn finish_u64(self) -> u64 {
        let out = self.inner.finalize();
        u64::from_le_bytes(out[..8].try_into().unwrap())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
