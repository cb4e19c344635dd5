use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Arch, DifferentiableLm, LogitHead, ParamSegment};
use crate::corpus::{TokenId, Vocab};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularConfig {
    pub vocab_size: usize,
    /// Number of preceding tokens forming the context key.
    pub order: usize,
    /// Rows of the logits table. For `order == 1` this must equal the
    /// vocabulary size and the key is the previous token itself.
    pub buckets: usize,
    pub context_window: usize,
    pub seed: u64,
    /// Standard deviation of the random initial logits; 0 gives a uniform model.
    pub init_std: f64,
}

impl TabularConfig {
    pub fn bigram(vocab_size: usize, seed: u64, init_std: f64) -> Self {
        TabularConfig {
            vocab_size,
            order: 1,
            buckets: vocab_size,
            context_window: 4096,
            seed,
            init_std,
        }
    }

    pub fn hashed(vocab_size: usize, order: usize, buckets: usize, seed: u64, init_std: f64) -> Self {
        TabularConfig {
            vocab_size,
            order,
            buckets,
            context_window: 4096,
            seed,
            init_std,
        }
    }
}

/// Logits looked up from a table keyed by the preceding context. The
/// gradient of any loss is the logit gradient scattered into table rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLm {
    config: TabularConfig,
    table: Vec<f64>,
}

impl TabularLm {
    pub fn new(config: TabularConfig) -> Self {
        assert!(config.order >= 1, "order must be at least 1");
        assert!(
            config.order > 1 || config.buckets == config.vocab_size,
            "bigram tables need one row per token"
        );
        let n = config.buckets * config.vocab_size;
        let table = if config.init_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let normal = Normal::new(0.0, config.init_std).expect("valid std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        } else {
            vec![0.0; n]
        };
        TabularLm { config, table }
    }

    pub fn config(&self) -> &TabularConfig {
        &self.config
    }

    /// Table row used to predict the token after `ids[..=pos]`.
    pub fn row_key(&self, ids: &[TokenId], pos: usize) -> usize {
        if self.config.order == 1 {
            return ids[pos] as usize;
        }
        // FNV-1a over the last `order` ids, left-padded with BOS.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for k in (0..self.config.order).rev() {
            let tok = if pos >= k { ids[pos - k] } else { Vocab::BOS };
            for b in tok.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        (h % self.config.buckets as u64) as usize
    }
}

impl DifferentiableLm for TabularLm {
    fn arch(&self) -> Arch {
        Arch::Tabular(self.config.clone())
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_window(&self) -> usize {
        self.config.context_window
    }

    fn params(&self) -> &[f64] {
        &self.table
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    fn segments(&self) -> Vec<ParamSegment> {
        vec![ParamSegment {
            name: "table".into(),
            offset: 0,
            len: self.table.len(),
        }]
    }

    fn logits(&self, ids: &[TokenId]) -> Vec<f64> {
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(ids.len() * v);
        for pos in 0..ids.len() {
            let r = self.row_key(ids, pos);
            out.extend_from_slice(&self.table[r * v..(r + 1) * v]);
        }
        out
    }

    fn next_logits(&self, ids: &[TokenId]) -> Vec<f64> {
        let v = self.config.vocab_size;
        let r = self.row_key(ids, ids.len() - 1);
        self.table[r * v..(r + 1) * v].to_vec()
    }

    fn value_and_grad(&self, ids: &[TokenId], head: &mut LogitHead<'_>) -> Result<(f64, Vec<f64>)> {
        let v = self.config.vocab_size;
        let logits = self.logits(ids);
        let (loss, dlogits) = head(&logits)?;
        let mut grad = vec![0.0; self.table.len()];
        for pos in 0..ids.len() {
            let drow = &dlogits[pos * v..(pos + 1) * v];
            if drow.iter().all(|&d| d == 0.0) {
                continue;
            }
            let r = self.row_key(ids, pos);
            for (g, d) in grad[r * v..(r + 1) * v].iter_mut().zip(drow) {
                *g += d;
            }
        }
        Ok((loss, grad))
    }
}
