//! Run configuration: a key-value file with one default per field. Fields
//! with published settings default to them (r = 10, threshold = 0.1,
//! k_top = 3, learning rates 0.01 / 0.001); the rest are desk-scale choices.

use crate::error::{Error, Result};
use crate::pooling::PoolingMethod;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingKind {
    Lse,
    Mean,
    Max,
}

impl PoolingKind {
    pub fn parse(s: &str) -> Result<PoolingKind> {
        match s {
            "lse" => Ok(PoolingKind::Lse),
            "mean" => Ok(PoolingKind::Mean),
            "max" => Ok(PoolingKind::Max),
            other => Err(Error::Config(format!(
                "pooling must be lse|mean|max, got {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoolingKind::Lse => "lse",
            PoolingKind::Mean => "mean",
            PoolingKind::Max => "max",
        }
    }

    pub fn method(&self, r: f64) -> Result<PoolingMethod> {
        match self {
            PoolingKind::Lse => PoolingMethod::lse(r),
            PoolingKind::Mean => Ok(PoolingMethod::Mean),
            PoolingKind::Max => Ok(PoolingMethod::Max),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub scales: Vec<usize>,
    /// LSE sharpness.
    pub r: f64,
    pub pooling: PoolingKind,
    /// Proposal score threshold t.
    pub threshold: f64,
    /// Top-k regions per class per scale.
    pub k_top: usize,
    pub lr_proposal: f64,
    pub lr_verifier: f64,
    pub batch: usize,
    /// Proposal-net training epochs.
    pub epochs: usize,
    /// Verifier SGD steps per stage.
    pub verifier_steps: usize,
    /// Localization tolerance in pixels.
    pub tolerance: f64,
    /// Dataset image side; training tranche sizes; eval split size.
    pub side: usize,
    pub train_count: usize,
    pub train2_count: usize,
    pub eval_count: usize,
    /// Verifier patch side.
    pub patch_side: usize,
    /// Default cascade topology file for inference commands.
    pub topology: Option<String>,
    /// Inference worker threads.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 42,
            scales: vec![32, 48, 64],
            r: crate::pooling::DEFAULT_LSE_R,
            pooling: PoolingKind::Lse,
            threshold: 0.1,
            k_top: 3,
            lr_proposal: 0.01,
            lr_verifier: 0.001,
            batch: 16,
            epochs: 8,
            verifier_steps: 1200,
            tolerance: crate::eval::DESK_TOLERANCE_PX,
            side: 64,
            train_count: 2000,
            train2_count: 2000,
            eval_count: 500,
            patch_side: crate::cascade::DESK_VERIFIER_INPUT,
            topology: None,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn pooling_method(&self) -> Result<PoolingMethod> {
        self.pooling.method(self.r)
    }

    /// Applies `key = value` lines (or `key value`; `#` comments allowed).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => line
                    .split_once(char::is_whitespace)
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::Config(format!("bad config line {raw:?}")))?,
            };
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad {what} value {value:?}"));
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "scales" => {
                self.scales = value
                    .split(',')
                    .map(|t| t.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("scales"))?;
                if self.scales.is_empty() {
                    return Err(Error::Config("scales must be non-empty".to_string()));
                }
            }
            "r" => self.r = value.parse().map_err(|_| bad("r"))?,
            "pooling" => self.pooling = PoolingKind::parse(value)?,
            "threshold" => self.threshold = value.parse().map_err(|_| bad("threshold"))?,
            "k_top" => self.k_top = value.parse().map_err(|_| bad("k_top"))?,
            "lr_proposal" => self.lr_proposal = value.parse().map_err(|_| bad("lr_proposal"))?,
            "lr_verifier" => self.lr_verifier = value.parse().map_err(|_| bad("lr_verifier"))?,
            "batch" => self.batch = value.parse().map_err(|_| bad("batch"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "verifier_steps" => {
                self.verifier_steps = value.parse().map_err(|_| bad("verifier_steps"))?
            }
            "tolerance" => self.tolerance = value.parse().map_err(|_| bad("tolerance"))?,
            "side" => self.side = value.parse().map_err(|_| bad("side"))?,
            "train_count" => self.train_count = value.parse().map_err(|_| bad("train_count"))?,
            "train2_count" => self.train2_count = value.parse().map_err(|_| bad("train2_count"))?,
            "eval_count" => self.eval_count = value.parse().map_err(|_| bad("eval_count"))?,
            "patch_side" => self.patch_side = value.parse().map_err(|_| bad("patch_side"))?,
            "topology" => self.topology = Some(value.to_string()),
            "workers" => self.workers = value.parse().map_err(|_| bad("workers"))?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical text form: fixed key order, used for the config hash and
    /// the stamp.
    pub fn to_canonical_text(&self) -> String {
        let scales: Vec<String> = self.scales.iter().map(|s| s.to_string()).collect();
        format!(
            "batch = {}\nepochs = {}\neval_count = {}\nk_top = {}\nlr_proposal = {}\n\
             lr_verifier = {}\npatch_side = {}\npooling = {}\nr = {}\nscales = {}\nseed = {}\n\
             side = {}\nthreshold = {}\ntolerance = {}\ntopology = {}\ntrain2_count = {}\n\
             train_count = {}\nverifier_steps = {}\nworkers = {}\n",
            self.batch,
            self.epochs,
            self.eval_count,
            self.k_top,
            self.lr_proposal,
            self.lr_verifier,
            self.patch_side,
            self.pooling.name(),
            self.r,
            scales.join(","),
            self.seed,
            self.side,
            self.threshold,
            self.tolerance,
            self.topology.as_deref().unwrap_or(""),
            self.train2_count,
            self.train_count,
            self.verifier_steps,
            self.workers,
        )
    }

    /// FNV-1a hash of the canonical text. The worker count is excluded: it
    /// must not change any output.
    pub fn hash(&self) -> u64 {
        let mut canonical = self.to_canonical_text();
        if let Some(pos) = canonical.find("workers") {
            canonical.truncate(pos);
        }
        fnv1a(canonical.as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.r, 10.0);
        assert_eq!(cfg.threshold, 0.1);
        assert_eq!(cfg.k_top, 3);
        assert_eq!(cfg.lr_proposal, 0.01);
        assert_eq!(cfg.lr_verifier, 0.001);
        assert_eq!(cfg.pooling, PoolingKind::Lse);
    }

    #[test]
    fn text_overrides_apply() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("pooling = mean\nscales = 16,24\n# comment\nepochs 3\n")
            .unwrap();
        assert_eq!(cfg.pooling, PoolingKind::Mean);
        assert_eq!(cfg.scales, vec![16, 24]);
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("frobnicate = 1").is_err());
    }

    #[test]
    fn hash_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        let mut c = RunConfig::default();
        c.seed = 43;
        assert_ne!(a.hash(), c.hash());
        // worker count must not affect the hash
        let mut d = RunConfig::default();
        d.workers = 8;
        assert_eq!(a.hash(), d.hash());
    }
}
