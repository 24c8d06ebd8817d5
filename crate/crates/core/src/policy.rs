//! Tabular autoregressive softmax policy.
//!
//! Parameters are one row of raw logits per context key. Every quantity the
//! objectives need (log-probability, entropy, score) is closed-form on a row,
//! which keeps the gradient contracts exactly checkable.

use std::io::{Read, Write};
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

/// Magic bytes at the start of a policy checkpoint.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HTPOPOL\0";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ranges of the context-key components. The arity is fixed per table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySpace {
    ranges: Vec<usize>,
    rows: usize,
}

impl KeySpace {
    pub fn new(ranges: Vec<usize>) -> Result<Self> {
        if ranges.is_empty() || ranges.contains(&0) {
            return Err(Error::invalid(format!(
                "key ranges must be nonempty and positive, got {ranges:?}"
            )));
        }
        let rows = ranges
            .iter()
            .try_fold(1usize, |acc, &r| acc.checked_mul(r))
            .ok_or_else(|| Error::invalid("key space too large"))?;
        Ok(Self { ranges, rows })
    }

    pub fn ranges(&self) -> &[usize] {
        &self.ranges
    }

    pub fn arity(&self) -> usize {
        self.ranges.len()
    }

    /// Number of distinct keys (logit rows).
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Row-major encoding of a component tuple.
    pub fn key(&self, components: &[usize]) -> Result<ContextKey> {
        if components.len() != self.ranges.len() {
            return Err(Error::invalid(format!(
                "key arity {} does not match key space arity {}",
                components.len(),
                self.ranges.len()
            )));
        }
        let mut row = 0usize;
        for (i, (&c, &range)) in components.iter().zip(&self.ranges).enumerate() {
            if c >= range {
                return Err(Error::invalid(format!(
                    "key component {i} = {c} out of range [0, {range})"
                )));
            }
            row = row * range + c;
        }
        Ok(ContextKey(row))
    }

    /// Inverse of [`KeySpace::key`].
    pub fn components(&self, key: ContextKey) -> Vec<usize> {
        let mut rest = key.0;
        let mut out = vec![0; self.ranges.len()];
        for (slot, &range) in out.iter_mut().zip(&self.ranges).rev() {
            *slot = rest % range;
            rest /= range;
        }
        out
    }
}

/// Conditioning context of one token, stored as its logit-row index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextKey(usize);

impl ContextKey {
    pub fn from_row(row: usize) -> Self {
        Self(row)
    }

    pub fn row(self) -> usize {
        self.0
    }
}

/// Token entropy in nats.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TokenEntropy(pub f64);

/// Live policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    vocab: usize,
    keys: KeySpace,
    logits: Vec<f64>,
    version: u64,
}

/// Frozen, cheaply shareable copy of a policy.
#[derive(Debug, Clone)]
pub struct PolicySnapshot(Arc<PolicyTable>);

impl Deref for PolicySnapshot {
    type Target = PolicyTable;

    fn deref(&self) -> &PolicyTable {
        &self.0
    }
}

impl PolicyTable {
    /// All-zero logits: the uniform policy with entropy `ln V` everywhere.
    pub fn uniform(vocab: usize, keys: KeySpace) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::invalid(format!("vocabulary size {vocab} < 2")));
        }
        let len = keys
            .rows()
            .checked_mul(vocab)
            .ok_or_else(|| Error::invalid("policy table too large"))?;
        Ok(Self {
            vocab,
            keys,
            logits: vec![0.0; len],
            version: 0,
        })
    }

    /// Table from explicit row-major logits.
    pub fn from_logits(vocab: usize, keys: KeySpace, logits: Vec<f64>) -> Result<Self> {
        let mut table = Self::uniform(vocab, keys)?;
        if logits.len() != table.logits.len() {
            return Err(Error::invalid(format!(
                "expected {} logits, got {}",
                table.logits.len(),
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("logit {i} is not finite")));
        }
        table.logits = logits;
        Ok(table)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn key_space(&self) -> &KeySpace {
        &self.keys
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Total number of parameters (rows × vocabulary).
    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(Arc::new(self.clone()))
    }

    fn check_key(&self, key: ContextKey) -> Result<()> {
        if key.0 >= self.keys.rows() {
            return Err(Error::invalid(format!(
                "context key row {} out of range [0, {})",
                key.0,
                self.keys.rows()
            )));
        }
        Ok(())
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.vocab {
            return Err(Error::invalid(format!(
                "token {token} out of vocabulary range [0, {})",
                self.vocab
            )));
        }
        Ok(())
    }

    pub fn row(&self, key: ContextKey) -> Result<&[f64]> {
        self.check_key(key)?;
        let start = key.0 * self.vocab;
        Ok(&self.logits[start..start + self.vocab])
    }

    /// Mutable logit row. Bumps the version counter.
    pub fn row_mut(&mut self, key: ContextKey) -> Result<&mut [f64]> {
        self.check_key(key)?;
        self.version += 1;
        let start = key.0 * self.vocab;
        Ok(&mut self.logits[start..start + self.vocab])
    }

    /// Adds `delta` (full parameter layout) to the logits and bumps the version.
    pub fn apply_delta(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.logits.len() {
            return Err(Error::invalid(format!(
                "delta length {} does not match {} parameters",
                delta.len(),
                self.logits.len()
            )));
        }
        for (x, d) in self.logits.iter_mut().zip(delta) {
            *x += d;
        }
        self.version += 1;
        Ok(())
    }

    /// Adds one delta row per listed key and bumps the version once.
    pub fn apply_row_deltas(&mut self, deltas: &[(ContextKey, Vec<f64>)]) -> Result<()> {
        for (key, delta) in deltas {
            self.check_key(*key)?;
            if delta.len() != self.vocab {
                return Err(Error::invalid(format!(
                    "row delta length {} does not match vocabulary {}",
                    delta.len(),
                    self.vocab
                )));
            }
        }
        for (key, delta) in deltas {
            let start = key.0 * self.vocab;
            for (x, d) in self.logits[start..start + self.vocab].iter_mut().zip(delta) {
                *x += d;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Log-softmax of a row.
    pub fn log_probs(&self, key: ContextKey) -> Result<Vec<f64>> {
        Ok(log_softmax(self.row(key)?))
    }

    pub fn probs(&self, key: ContextKey) -> Result<Vec<f64>> {
        Ok(self.log_probs(key)?.into_iter().map(f64::exp).collect())
    }

    pub fn log_prob(&self, key: ContextKey, token: usize) -> Result<f64> {
        self.check_token(token)?;
        let row = self.row(key)?;
        Ok(row[token] - log_sum_exp(row))
    }

    pub fn token_entropy(&self, key: ContextKey) -> Result<TokenEntropy> {
        Ok(TokenEntropy(entropy_of_log_probs(&self.log_probs(key)?)))
    }

    /// Gradient of `log_prob(key, token)` with respect to the key's logit row:
    /// `onehot(token) - softmax(row)`.
    pub fn score(&self, key: ContextKey, token: usize) -> Result<Vec<f64>> {
        self.check_token(token)?;
        let mut grad: Vec<f64> = self.probs(key)?.into_iter().map(|p| -p).collect();
        grad[token] += 1.0;
        Ok(grad)
    }

    /// Draws a token from `softmax(row / temperature)` by inverse CDF.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        key: ContextKey,
        temperature: f64,
        rng: &mut R,
    ) -> Result<usize> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let row = self.row(key)?;
        let probs = if temperature == 1.0 {
            softmax(row)
        } else {
            let scaled: Vec<f64> = row.iter().map(|x| x / temperature).collect();
            softmax(&scaled)
        };
        Ok(sample_index(&probs, rng.gen::<f64>()))
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.vocab as u64).to_le_bytes())?;
        w.write_all(&(self.keys.arity() as u64).to_le_bytes())?;
        for &r in self.keys.ranges() {
            w.write_all(&(r as u64).to_le_bytes())?;
        }
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&(self.logits.len() as u64).to_le_bytes())?;
        for x in &self.logits {
            w.write_all(&x.to_bits().to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |msg: &str| Error::invalid(format!("policy checkpoint: {msg}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mut read_u64 = |what: &str| -> Result<u64> {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)
                .map_err(|_| bad(&format!("truncated while reading {what}")))?;
            Ok(u64::from_le_bytes(b8))
        };
        let vocab = read_u64("vocabulary size")? as usize;
        let arity = read_u64("key arity")? as usize;
        if arity == 0 || arity > 64 {
            return Err(bad(&format!("implausible key arity {arity}")));
        }
        let ranges = (0..arity)
            .map(|_| read_u64("key range").map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        let table_version = read_u64("table version")?;
        let n = read_u64("logit count")? as usize;
        let keys = KeySpace::new(ranges)?;
        if keys.rows().checked_mul(vocab) != Some(n) {
            return Err(bad("logit count does not match header"));
        }
        let logits = (0..n)
            .map(|_| read_u64("logits").map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        let mut table = Self::from_logits(vocab, keys, logits)?;
        table.version = table_version;
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    log_softmax(xs).into_iter().map(f64::exp).collect()
}

/// `-Σ p log p` from log-probabilities; zero-probability entries contribute 0.
pub fn entropy_of_log_probs(log_probs: &[f64]) -> f64 {
    let h: f64 = log_probs
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

/// Inverse-CDF draw from `probs` with a uniform `u` in [0, 1).
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the accumulated mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_row(logits: &[f64]) -> PolicyTable {
        PolicyTable::from_logits(logits.len(), KeySpace::new(vec![1]).unwrap(), logits.to_vec())
            .unwrap()
    }

    const K0: ContextKey = ContextKey(0);

    #[test]
    fn log_prob_examples() {
        let p = single_row(&[0.0; 4]);
        assert!((p.log_prob(K0, 2).unwrap() - (0.25f64).ln()).abs() < 1e-15);

        let p = single_row(&[10.0, -10.0, -10.0]);
        assert!(p.log_prob(K0, 0).unwrap() >= 0.999f64.ln());

        // direct evaluation: -ln(1 + e^-1 + e^-2)
        let p = single_row(&[1.0, 2.0, 3.0]);
        let expected = -(1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((p.log_prob(K0, 2).unwrap() - expected).abs() < 1e-15);
        assert!((expected + 0.4076).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        let p = single_row(&[0.0; 4]);
        assert!(matches!(p.log_prob(K0, 4), Err(Error::InvalidInput(_))));
        assert!(matches!(
            p.log_prob(ContextKey(1), 0),
            Err(Error::InvalidInput(_))
        ));
        assert!(p.score(K0, 9).is_err());
        let ks = KeySpace::new(vec![2, 3]).unwrap();
        assert!(ks.key(&[1, 3]).is_err());
        assert!(ks.key(&[1]).is_err());
        assert!(PolicyTable::uniform(1, ks).is_err());
    }

    #[test]
    fn entropy_examples() {
        let ln4 = 4f64.ln();
        assert!((single_row(&[0.0; 4]).token_entropy(K0).unwrap().0 - ln4).abs() < 1e-15);
        let h = single_row(&[1e3, 0.0, 0.0, 0.0]).token_entropy(K0).unwrap().0;
        assert!(h.abs() < 1e-9);
        let h = single_row(&[3.0, 3.0, -1e3, -1e3]).token_entropy(K0).unwrap().0;
        assert!((h - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn score_examples() {
        let s = single_row(&[0.0; 3]).score(K0, 0).unwrap();
        let want = [2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0];
        for (a, b) in s.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let s = single_row(&[1e3, 0.0, 0.0]).score(K0, 0).unwrap();
        assert!(s.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-6);

        let s = single_row(&[1.0, 2.0, 3.0]).score(K0, 1).unwrap();
        let want = [-0.0900, 1.0 - 0.2447, -0.6652];
        for (a, b) in s.iter().zip(want) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn sample_is_dominant_and_deterministic() {
        let p = single_row(&[0.0, 1e3, 0.0, 0.0]);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(p.sample(K0, 1.0, &mut rng).unwrap(), 1);
        }
        let p = single_row(&[0.3, -0.2, 1.0, 0.0]);
        let a = p.sample(K0, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = p.sample(K0, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(p.sample(K0, 0.0, &mut rng).is_err());
        assert!(p.sample(K0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn uniform_sampling_frequencies_within_binomial_bound() {
        let v = 8;
        let p = single_row(&vec![0.0; v]);
        let n = 100_000;
        let mut counts = vec![0usize; v];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..n {
            counts[p.sample(K0, 1.0, &mut rng).unwrap()] += 1;
        }
        let q = 1.0 / v as f64;
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * q).abs() <= 4.0 * sigma);
        }
    }

    #[test]
    fn snapshot_is_isolated_from_live_updates() {
        let mut live = PolicyTable::uniform(4, KeySpace::new(vec![2]).unwrap()).unwrap();
        let snap = live.snapshot();
        let before = snap.log_prob(K0, 0).unwrap();
        live.row_mut(K0).unwrap()[0] = 5.0;
        assert_eq!(snap.version(), 0);
        assert_eq!(live.version(), 1);
        assert_eq!(snap.log_prob(K0, 0).unwrap(), before);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let keys = KeySpace::new(vec![2, 3]).unwrap();
        let logits: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 1e3 + 1e-300).collect();
        let mut table = PolicyTable::from_logits(4, keys, logits).unwrap();
        table.row_mut(ContextKey(2)).unwrap()[1] = -0.0;
        let mut buf = Vec::new();
        table.write_checkpoint(&mut buf).unwrap();
        let back = PolicyTable::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.version(), table.version());
        assert!(back
            .logits()
            .iter()
            .zip(table.logits())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        buf[0] = b'X';
        assert!(PolicyTable::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn key_components_round_trip() {
        let ks = KeySpace::new(vec![3, 5, 2]).unwrap();
        for row in 0..ks.rows() {
            let comps = ks.components(ContextKey(row));
            assert_eq!(ks.key(&comps).unwrap(), ContextKey(row));
        }
    }

    proptest! {
        #[test]
        fn row_probabilities_sum_to_one(logits in prop::collection::vec(-50.0f64..50.0, 2..20)) {
            let p = single_row(&logits);
            let total: f64 = (0..logits.len()).map(|v| p.log_prob(K0, v).unwrap().exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn score_sums_to_zero(logits in prop::collection::vec(-50.0f64..50.0, 2..20), t in 0usize..20) {
            let p = single_row(&logits);
            let tok = t % logits.len();
            let s: f64 = p.score(K0, tok).unwrap().iter().sum();
            prop_assert!(s.abs() < 1e-12);
        }

        #[test]
        fn entropy_is_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 2..20), c in -100.0f64..100.0) {
            let h = single_row(&logits).token_entropy(K0).unwrap().0;
            let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
            let h2 = single_row(&shifted).token_entropy(K0).unwrap().0;
            prop_assert!((h - h2).abs() < 1e-12);
            prop_assert!(h >= 0.0 && h <= (logits.len() as f64).ln() + 1e-12);
        }
    }
}
