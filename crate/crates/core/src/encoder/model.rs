use super::{tokenize, EncoderError, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dense embedding produced by an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn l2_distance(&self, other: &Vector) -> f64 {
        l2_distance(&self.0, &other.0)
    }
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_buckets: usize,
    pub dim: usize,
    pub hash_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_buckets: 1 << 18,
            dim: 64,
            hash_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.dim < 2 {
            return Err(EncoderError::InvalidConfig(format!("dim {} < 2", self.dim)));
        }
        if self.vocab_buckets < 1024 || self.vocab_buckets > u32::MAX as usize {
            return Err(EncoderError::InvalidConfig(format!(
                "vocab_buckets {} outside [1024, 2^32)",
                self.vocab_buckets
            )));
        }
        Ok(())
    }
}

/// Hashed embedding bag with mean pooling.
///
/// The table is stored row-major (`V x D`) in `f64`; checkpoints persist it as
/// `f32`, and [`EncoderModel::round_to_f32`] makes an in-memory model agree
/// bit-for-bit with its saved form.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    cfg: EncoderConfig,
    table: Vec<f64>,
}

impl EncoderModel {
    /// Fresh model with entries drawn from `uniform(-0.05, 0.05)`.
    pub fn new(cfg: EncoderConfig, init_seed: u64) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let table = (0..cfg.vocab_buckets * cfg.dim)
            .map(|_| rng.random_range(-0.05..0.05))
            .collect();
        Ok(Self { cfg, table })
    }

    pub fn from_table(cfg: EncoderConfig, table: Vec<f64>) -> Result<Self, EncoderError> {
        cfg.validate()?;
        if table.len() != cfg.vocab_buckets * cfg.dim {
            return Err(EncoderError::InvalidConfig(format!(
                "table has {} entries, expected {}",
                table.len(),
                cfg.vocab_buckets * cfg.dim
            )));
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::InvalidConfig("non-finite table entry".into()));
        }
        Ok(Self { cfg, table })
    }

    pub fn config(&self) -> EncoderConfig {
        self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn vocab_buckets(&self) -> usize {
        self.cfg.vocab_buckets
    }

    pub fn hash_seed(&self) -> u64 {
        self.cfg.hash_seed
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub(crate) fn table_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    pub fn row(&self, id: TokenId) -> &[f64] {
        let d = self.cfg.dim;
        let start = id.0 as usize * d;
        &self.table[start..start + d]
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        tokenize(text, self.cfg.vocab_buckets as u32, self.cfg.hash_seed)
    }

    /// Mean of the rows for `tokens`; the zero vector for an empty list.
    pub fn embed_tokens(&self, tokens: &[TokenId]) -> Vector {
        let mut out = vec![0.0; self.cfg.dim];
        if tokens.is_empty() {
            return Vector(out);
        }
        for &t in tokens {
            for (o, v) in out.iter_mut().zip(self.row(t)) {
                *o += v;
            }
        }
        let n = tokens.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Vector(out)
    }

    pub fn embed_text(&self, text: &str) -> Vector {
        let tokens = self.tokenize(text);
        if tokens.is_empty() {
            log::warn!("embedding text with no tokens; using the zero vector");
        }
        self.embed_tokens(&tokens)
    }

    /// Euclidean distance between the embeddings of `query` and `doc`.
    pub fn distance(&self, query: &str, doc: &str) -> f64 {
        self.embed_text(query).l2_distance(&self.embed_text(doc))
    }

    pub fn round_to_f32(&mut self) {
        self.table.iter_mut().for_each(|v| *v = f64::from(*v as f32));
    }

    pub fn is_finite(&self) -> bool {
        self.table.iter().all(|v| v.is_finite())
    }
}
