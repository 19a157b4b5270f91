use super::{EncoderConfig, EncoderError, EncoderModel, TokenId, MAX_SIDE_TOKENS, SEPARATOR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Whether dropout is active for a cross-encoder forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Inference,
    /// Dropout mask drawn from `seed`.
    Training { seed: u64 },
}

/// Cross-encoder: `s = w^T dropout(W^T h)` over a joint encoding `h` of the
/// token sequence `query SEP doc`.
///
/// The joint encoder splits the sequence at the separator, mean-pools each
/// segment with the shared embedding table and combines the two segment
/// vectors elementwise, so `h_k = q_k * d_k`. A plain mean over the whole
/// sequence would make `s` additive in query and document and unable to
/// express their interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoderModel {
    pub base: EncoderModel,
    hidden: usize,
    /// `D x H`, row-major.
    proj: Vec<f64>,
    /// Length `H`.
    out: Vec<f64>,
    dropout_rate: f64,
}

/// Intermediates of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct CrossForward {
    pub query_tokens: Vec<TokenId>,
    pub doc_tokens: Vec<TokenId>,
    pub query_vec: Vec<f64>,
    pub doc_vec: Vec<f64>,
    pub joint: Vec<f64>,
    /// Pre-dropout hidden activations `W^T h`.
    pub hidden: Vec<f64>,
    /// Per-unit dropout multipliers (all 1 in inference mode).
    pub mask: Vec<f64>,
    pub score: f64,
}

impl CrossEncoderModel {
    /// Fresh model: embedding table as in [`EncoderModel::new`], head weights
    /// uniform in `±1/sqrt(fan_in)`.
    pub fn new(
        cfg: EncoderConfig,
        hidden: usize,
        dropout_rate: f64,
        init_seed: u64,
    ) -> Result<Self, EncoderError> {
        let base = EncoderModel::new(cfg, init_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::hashing::derive_seed(init_seed, &[0x4845_4144]));
        let d = cfg.dim;
        let a = 1.0 / (d as f64).sqrt();
        let proj = (0..d * hidden).map(|_| rng.random_range(-a..a)).collect();
        let b = 1.0 / (hidden.max(1) as f64).sqrt();
        let out = (0..hidden).map(|_| rng.random_range(-b..b)).collect();
        Self::from_parts(base, hidden, proj, out, dropout_rate)
    }

    pub fn from_parts(
        base: EncoderModel,
        hidden: usize,
        proj: Vec<f64>,
        out: Vec<f64>,
        dropout_rate: f64,
    ) -> Result<Self, EncoderError> {
        if hidden == 0 {
            return Err(EncoderError::InvalidConfig("hidden size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(EncoderError::InvalidConfig(format!(
                "dropout_rate {dropout_rate} outside [0, 1)"
            )));
        }
        if proj.len() != base.dim() * hidden || out.len() != hidden {
            return Err(EncoderError::InvalidConfig("head shape mismatch".into()));
        }
        if proj.iter().chain(&out).any(|v| !v.is_finite()) {
            return Err(EncoderError::InvalidConfig("non-finite head weight".into()));
        }
        Ok(Self {
            base,
            hidden,
            proj,
            out,
            dropout_rate,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn proj(&self) -> &[f64] {
        &self.proj
    }

    pub fn out(&self) -> &[f64] {
        &self.out
    }

    pub(crate) fn head_mut(&mut self) -> (&mut EncoderModel, &mut [f64], &mut [f64]) {
        (&mut self.base, &mut self.proj, &mut self.out)
    }

    /// The joint input sequence `query SEP doc`, each side capped at 512 tokens.
    pub fn joint_tokens(&self, query: &str, doc: &str) -> Vec<TokenId> {
        let (q, d) = self.side_tokens(query, doc);
        let mut seq = q;
        seq.push(SEPARATOR);
        seq.extend(d);
        seq
    }

    fn side_tokens(&self, query: &str, doc: &str) -> (Vec<TokenId>, Vec<TokenId>) {
        let mut q = self.base.tokenize(query);
        q.truncate(MAX_SIDE_TOKENS);
        let mut d = self.base.tokenize(doc);
        d.truncate(MAX_SIDE_TOKENS);
        (q, d)
    }

    pub fn dropout_mask(&self, mode: ScoreMode) -> Vec<f64> {
        match mode {
            ScoreMode::Training { seed } if self.dropout_rate > 0.0 => {
                let keep = 1.0 - self.dropout_rate;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..self.hidden)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
            _ => vec![1.0; self.hidden],
        }
    }

    pub fn forward(&self, query: &str, doc: &str, mode: ScoreMode) -> CrossForward {
        let (q, d) = self.side_tokens(query, doc);
        let mask = self.dropout_mask(mode);
        self.forward_tokens(q, d, mask)
    }

    pub fn forward_tokens(
        &self,
        query_tokens: Vec<TokenId>,
        doc_tokens: Vec<TokenId>,
        mask: Vec<f64>,
    ) -> CrossForward {
        let query_vec = self.base.embed_tokens(&query_tokens).0;
        let doc_vec = self.base.embed_tokens(&doc_tokens).0;
        let joint: Vec<f64> = query_vec.iter().zip(&doc_vec).map(|(a, b)| a * b).collect();
        let h = self.hidden;
        let mut hidden = vec![0.0; h];
        for (i, &x) in joint.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.proj[i * h..(i + 1) * h];
            for (z, w) in hidden.iter_mut().zip(row) {
                *z += x * w;
            }
        }
        let score = hidden
            .iter()
            .zip(&mask)
            .zip(&self.out)
            .map(|((z, m), w)| z * m * w)
            .sum();
        CrossForward {
            query_tokens,
            doc_tokens,
            query_vec,
            doc_vec,
            joint,
            hidden,
            mask,
            score,
        }
    }

    /// Relevance score of `doc` for `query`; higher is better.
    pub fn score(&self, query: &str, doc: &str, mode: ScoreMode) -> f64 {
        self.forward(query, doc, mode).score
    }

    pub fn round_to_f32(&mut self) {
        self.base.round_to_f32();
        for v in self.proj.iter_mut().chain(self.out.iter_mut()) {
            *v = f64::from(*v as f32);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.base.is_finite() && self.proj.iter().chain(&self.out).all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::hash_word;

    fn cfg2() -> EncoderConfig {
        EncoderConfig {
            vocab_buckets: 1024,
            dim: 2,
            hash_seed: 0,
        }
    }

    #[test]
    fn zero_projection_scores_zero() {
        let base = EncoderModel::new(cfg2(), 3).unwrap();
        let m = CrossEncoderModel::from_parts(base, 3, vec![0.0; 6], vec![1.0, -2.0, 0.5], 0.1)
            .unwrap();
        assert_eq!(m.score("tacos please", "great tacos", ScoreMode::Inference), 0.0);
        assert_eq!(m.score("", "x", ScoreMode::Inference), 0.0);
    }

    #[test]
    fn no_dropout_training_equals_inference() {
        let m = CrossEncoderModel::new(cfg2(), 8, 0.0, 5).unwrap();
        let a = m.score("cozy cafe", "a cozy little cafe", ScoreMode::Inference);
        let b = m.score("cozy cafe", "a cozy little cafe", ScoreMode::Training { seed: 99 });
        assert_eq!(a, b);
    }

    #[test]
    fn training_mode_deterministic_given_seed() {
        let m = CrossEncoderModel::new(cfg2(), 16, 0.5, 5).unwrap();
        let a = m.score("cozy cafe", "a cozy cafe", ScoreMode::Training { seed: 4 });
        let b = m.score("cozy cafe", "a cozy cafe", ScoreMode::Training { seed: 4 });
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn hand_computed_score() {
        let mut table = vec![0.0; 2048];
        let q = hash_word("q", 1024, 0).0 as usize;
        let d = hash_word("d", 1024, 0).0 as usize;
        table[q * 2] = 2.0;
        table[q * 2 + 1] = -1.0;
        table[d * 2] = 0.5;
        table[d * 2 + 1] = 3.0;
        let base = EncoderModel::from_table(cfg2(), table).unwrap();
        // W = [[1, 2], [-1, 0.5]] (D=2 rows, H=2 cols), w = [0.3, -0.7]
        let m = CrossEncoderModel::from_parts(
            base,
            2,
            vec![1.0, 2.0, -1.0, 0.5],
            vec![0.3, -0.7],
            0.2,
        )
        .unwrap();
        // h = (2*0.5, -1*3) = (1, -3); W^T h = (1*1 + -1*-3, 2*1 + 0.5*-3) = (4, 0.5)
        // s = 0.3*4 - 0.7*0.5 = 0.85
        let s = m.score("q", "d", ScoreMode::Inference);
        assert!((s - 0.85).abs() < 1e-9, "{s}");
    }

    #[test]
    fn joint_sequence_layout() {
        let m = CrossEncoderModel::new(cfg2(), 2, 0.0, 1).unwrap();
        let seq = m.joint_tokens("a b", "c");
        assert_eq!(seq.len(), 4);
        assert_eq!(seq[2], SEPARATOR);
        let long = "w ".repeat(600);
        assert_eq!(m.joint_tokens(&long, &long).len(), 2 * MAX_SIDE_TOKENS + 1);
    }

    #[test]
    fn rejects_bad_dropout() {
        let base = EncoderModel::new(cfg2(), 3).unwrap();
        assert!(CrossEncoderModel::from_parts(base, 1, vec![0.0; 2], vec![0.0], 1.0).is_err());
    }
}
