//! Run configuration: line-oriented `key = value` text with dotted keys.
//! `#` starts a comment. Unknown and repeated keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::detector::BackboneConfig;
use crate::fourier::BetaSchedule;
use crate::tensor::SgdConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    FdclEwc,
    FdclEwc2w,
    NoEwcCropped,
    NoEwcFull,
    FourierFt,
    Day2NightBaseline,
    DayLonger,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::FdclEwc,
        Variant::FdclEwc2w,
        Variant::NoEwcCropped,
        Variant::NoEwcFull,
        Variant::FourierFt,
        Variant::Day2NightBaseline,
        Variant::DayLonger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FdclEwc => "fdcl_ewc",
            Variant::FdclEwc2w => "fdcl_ewc_2w",
            Variant::NoEwcCropped => "no_ewc_cropped",
            Variant::NoEwcFull => "no_ewc_full",
            Variant::FourierFt => "fourier_ft",
            Variant::Day2NightBaseline => "day2night_baseline",
            Variant::DayLonger => "day_longer",
        }
    }

    /// Variants that run the contrastive stage.
    pub fn is_contrastive(self) -> bool {
        matches!(
            self,
            Variant::FdclEwc | Variant::FdclEwc2w | Variant::NoEwcCropped | Variant::NoEwcFull
        )
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::config(
                "variant",
                format!("unknown variant `{s}`, expected one of {}", names.join(", ")),
            )
        })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a split comes from: generated from the seed, or a manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitSource {
    Synthetic(usize),
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub day_train: SplitSource,
    pub day_val: SplitSource,
    pub night_val: SplitSource,
    /// Unlabelled night images used as translation targets.
    pub night_pool: SplitSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub beta: BetaSchedule,
    pub lambda_ewc: f64,
    pub mu_key: f64,
    pub mu_backsignal: f64,
    pub mu_no_ewc: f64,
    pub crop_probability: f64,
    pub adapt_sgd: SgdConfig,
    pub det_sgd: SgdConfig,
    pub burn_in_batch: usize,
    pub adapt_batch: usize,
    pub decoder_batch: usize,
    pub burn_in_iters: usize,
    pub adapt_iters: usize,
    /// Stage-3 steps after every Stage-2 step.
    pub decoder_steps_per_iter: usize,
    pub fisher_samples: usize,
    pub pos_weight: f64,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::FdclEwc2w,
            beta: BetaSchedule::standard(),
            lambda_ewc: 0.9,
            mu_key: 0.99,
            mu_backsignal: 0.99,
            mu_no_ewc: 0.85,
            crop_probability: 0.25,
            adapt_sgd: SgdConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-6,
            },
            det_sgd: SgdConfig {
                lr: 0.02,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            burn_in_batch: 16,
            adapt_batch: 8,
            decoder_batch: 8,
            burn_in_iters: 500,
            adapt_iters: 2000,
            decoder_steps_per_iter: 1,
            fisher_samples: 64,
            pos_weight: 10.0,
            backbone: BackboneConfig::default(),
            data: DataConfig {
                day_train: SplitSource::Synthetic(200),
                day_val: SplitSource::Synthetic(100),
                night_val: SplitSource::Synthetic(100),
                night_pool: SplitSource::Synthetic(200),
            },
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn source_to_string(s: &SplitSource) -> String {
    match s {
        SplitSource::Synthetic(n) => format!("synthetic:{n}"),
        SplitSource::Dir(p) => p.display().to_string(),
    }
}

fn parse_source(key: &str, v: &str) -> Result<SplitSource> {
    match v.strip_prefix("synthetic:") {
        Some(n) => Ok(SplitSource::Synthetic(parse(key, n)?)),
        None if v.is_empty() => Err(Error::config(key, "empty path")),
        None => Ok(SplitSource::Dir(PathBuf::from(v))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", ln + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "beta.schedule" => self.beta = BetaSchedule::parse(v).map_err(|e| Error::config(key, e.to_string()))?,
            "lambda_ewc" => self.lambda_ewc = parse(key, v)?,
            "mu.key" => self.mu_key = parse(key, v)?,
            "mu.backsignal" => self.mu_backsignal = parse(key, v)?,
            "mu.no_ewc" => self.mu_no_ewc = parse(key, v)?,
            "augment.crop_probability" => self.crop_probability = parse(key, v)?,
            "sgd.adapt.lr" => self.adapt_sgd.lr = parse(key, v)?,
            "sgd.adapt.momentum" => self.adapt_sgd.momentum = parse(key, v)?,
            "sgd.adapt.weight_decay" => self.adapt_sgd.weight_decay = parse(key, v)?,
            "sgd.det.lr" => self.det_sgd.lr = parse(key, v)?,
            "sgd.det.momentum" => self.det_sgd.momentum = parse(key, v)?,
            "sgd.det.weight_decay" => self.det_sgd.weight_decay = parse(key, v)?,
            "batch.burn_in" => self.burn_in_batch = parse(key, v)?,
            "batch.adapt" => self.adapt_batch = parse(key, v)?,
            "batch.decoder" => self.decoder_batch = parse(key, v)?,
            "iters.burn_in" => self.burn_in_iters = parse(key, v)?,
            "iters.adapt" => self.adapt_iters = parse(key, v)?,
            "iters.decoder_per_adapt" => self.decoder_steps_per_iter = parse(key, v)?,
            "fisher.samples" => self.fisher_samples = parse(key, v)?,
            "loss.pos_weight" => self.pos_weight = parse(key, v)?,
            "model.channels" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::config(key, format!("expected three widths, got `{v}`")));
                }
                for (slot, p) in self.backbone.channels.iter_mut().zip(parts) {
                    *slot = parse(key, p)?;
                }
            }
            "model.feature_dim" => self.backbone.feature_dim = parse(key, v)?,
            "data.day_train" => self.data.day_train = parse_source(key, v)?,
            "data.day_val" => self.data.day_val = parse_source(key, v)?,
            "data.night_val" => self.data.night_val = parse_source(key, v)?,
            "data.night_pool" => self.data.night_pool = parse_source(key, v)?,
            "paths.out" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key, format!("{v} outside [0, 1]")))
            }
        };
        if !(self.lambda_ewc > 0.0 && self.lambda_ewc < 1.0) {
            return Err(Error::config(
                "lambda_ewc",
                format!("{} outside (0, 1)", self.lambda_ewc),
            ));
        }
        unit("mu.key", self.mu_key)?;
        unit("mu.backsignal", self.mu_backsignal)?;
        unit("mu.no_ewc", self.mu_no_ewc)?;
        unit("augment.crop_probability", self.crop_probability)?;
        self.adapt_sgd
            .validate()
            .map_err(|e| Error::config("sgd.adapt", e.to_string()))?;
        self.det_sgd
            .validate()
            .map_err(|e| Error::config("sgd.det", e.to_string()))?;
        for (key, v) in [
            ("batch.burn_in", self.burn_in_batch),
            ("batch.adapt", self.adapt_batch),
            ("batch.decoder", self.decoder_batch),
            ("fisher.samples", self.fisher_samples),
            ("model.feature_dim", self.backbone.feature_dim),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.backbone.channels.contains(&0) {
            return Err(Error::config("model.channels", "widths must be at least 1"));
        }
        if !(self.pos_weight.is_finite() && self.pos_weight > 0.0) {
            return Err(Error::config("loss.pos_weight", "must be positive"));
        }
        for (key, s) in [
            ("data.day_train", &self.data.day_train),
            ("data.day_val", &self.data.day_val),
            ("data.night_val", &self.data.night_val),
            ("data.night_pool", &self.data.night_pool),
        ] {
            if *s == SplitSource::Synthetic(0) {
                return Err(Error::config(key, "needs at least one scene"));
            }
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order; parses back to `self`.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("variant", self.variant.to_string());
        kv("beta.schedule", self.beta.to_config_string());
        kv("lambda_ewc", self.lambda_ewc.to_string());
        kv("mu.key", self.mu_key.to_string());
        kv("mu.backsignal", self.mu_backsignal.to_string());
        kv("mu.no_ewc", self.mu_no_ewc.to_string());
        kv("augment.crop_probability", self.crop_probability.to_string());
        for (p, c) in [("adapt", &self.adapt_sgd), ("det", &self.det_sgd)] {
            kv(&format!("sgd.{p}.lr"), c.lr.to_string());
            kv(&format!("sgd.{p}.momentum"), c.momentum.to_string());
            kv(&format!("sgd.{p}.weight_decay"), c.weight_decay.to_string());
        }
        kv("batch.burn_in", self.burn_in_batch.to_string());
        kv("batch.adapt", self.adapt_batch.to_string());
        kv("batch.decoder", self.decoder_batch.to_string());
        kv("iters.burn_in", self.burn_in_iters.to_string());
        kv("iters.adapt", self.adapt_iters.to_string());
        kv("iters.decoder_per_adapt", self.decoder_steps_per_iter.to_string());
        kv("fisher.samples", self.fisher_samples.to_string());
        kv("loss.pos_weight", self.pos_weight.to_string());
        let ch = self.backbone.channels;
        kv("model.channels", format!("{}, {}, {}", ch[0], ch[1], ch[2]));
        kv("model.feature_dim", self.backbone.feature_dim.to_string());
        kv("data.day_train", source_to_string(&self.data.day_train));
        kv("data.day_val", source_to_string(&self.data.day_val));
        kv("data.night_val", source_to_string(&self.data.night_val));
        kv("data.night_pool", source_to_string(&self.data.night_pool));
        kv("paths.out", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_default() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_config_string()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg =
            RunConfig::parse("# toy\nseed = 7  # trailing\nvariant = fourier_ft\n\nbeta.schedule = 0.05:1\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.variant, Variant::FourierFt);
        assert_eq!(cfg.beta.entries(), &[(0.05, 1.0)]);
    }

    fn key_of(text: &str) -> String {
        match RunConfig::parse(text).unwrap_err() {
            Error::Config { key, .. } => key,
            e => panic!("not a config error: {e}"),
        }
    }

    #[test]
    fn violations_name_their_field() {
        assert_eq!(key_of("lambda_ewc = 0"), "lambda_ewc");
        assert_eq!(key_of("lambda_ewc = 1"), "lambda_ewc");
        assert_eq!(key_of("mu.key = 1.5"), "mu.key");
        assert_eq!(key_of("mu.backsignal = -0.1"), "mu.backsignal");
        assert_eq!(key_of("beta.schedule = 0.01:0.5, 0.05:0.4"), "beta.schedule");
        assert_eq!(key_of("variant = nope"), "variant");
        assert_eq!(key_of("batch.adapt = 0"), "batch.adapt");
        assert_eq!(key_of("sgd.adapt.lr = -1"), "sgd.adapt");
        assert_eq!(key_of("bogus = 1"), "bogus");
        assert_eq!(key_of("seed = 1\nseed = 2"), "seed");
        assert_eq!(key_of("seed = x"), "seed");
        assert_eq!(key_of("data.night_pool = synthetic:0"), "data.night_pool");
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
