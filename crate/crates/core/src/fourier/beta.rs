use rand::Rng;

use crate::{Error, Result};

/// Discrete distribution over mask sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSchedule {
    entries: Vec<(f64, f64)>,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self::standard()
    }
}

impl BetaSchedule {
    /// `(value, probability)` pairs; probabilities must sum to 1.
    pub fn new(entries: Vec<(f64, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::config("beta.schedule", "schedule is empty"));
        }
        for &(v, p) in &entries {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config("beta.schedule", format!("beta {v} outside [0, 1)")));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(
                    "beta.schedule",
                    format!("probability {p} outside [0, 1]"),
                ));
            }
        }
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "beta.schedule",
                format!("probabilities sum to {total}, expected 1"),
            ));
        }
        Ok(Self { entries })
    }

    /// 0.01 with probability 0.9, 0.05 with probability 0.1.
    pub fn standard() -> Self {
        Self {
            entries: vec![(0.01, 0.9), (0.05, 0.1)],
        }
    }

    pub fn constant(beta: f64) -> Result<Self> {
        Self::new(vec![(beta, 1.0)])
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(v, p) in &self.entries {
            acc += p;
            if u < acc {
                return v;
            }
        }
        self.entries.last().expect("non-empty schedule").0
    }

    /// `0.01:0.9, 0.05:0.1`
    pub fn to_config_string(&self) -> String {
        self.entries
            .iter()
            .map(|(v, p)| format!("{v}:{p}"))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (v, p) = part
                .split_once(':')
                .ok_or_else(|| Error::config("beta.schedule", format!("expected value:probability, got `{part}`")))?;
            let num = |x: &str| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config("beta.schedule", format!("not a number: `{x}`")))
            };
            entries.push((num(v)?, num(p)?));
        }
        Self::new(entries)
    }
}

/// Draws from the default 0.01 / 0.05 schedule.
pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    BetaSchedule::standard().sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn standard_frequencies() {
        let mut rng = stream(11, Stream::Beta);
        let n = 10_000;
        let small = (0..n).filter(|_| sample_beta(&mut rng) == 0.01).count();
        let frac = small as f64 / n as f64;
        assert!((0.88..=0.92).contains(&frac), "{frac}");
    }

    #[test]
    fn degenerate_schedule() {
        let s = BetaSchedule::constant(0.01).unwrap();
        let mut rng = stream(1, Stream::Beta);
        assert!((0..1000).all(|_| s.sample(&mut rng) == 0.01));
    }

    #[test]
    fn same_seed_same_sequence() {
        let a: Vec<f64> = {
            let mut r = stream(5, Stream::Beta);
            (0..100).map(|_| sample_beta(&mut r)).collect()
        };
        let b: Vec<f64> = {
            let mut r = stream(5, Stream::Beta);
            (0..100).map(|_| sample_beta(&mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn parse_and_validate() {
        let s = BetaSchedule::parse("0.01:0.9, 0.05:0.1").unwrap();
        assert_eq!(s, BetaSchedule::standard());
        assert_eq!(BetaSchedule::parse(&s.to_config_string()).unwrap(), s);
        assert!(BetaSchedule::parse("0.01:0.5").is_err());
        assert!(BetaSchedule::parse("1.2:1.0").is_err());
        assert!(BetaSchedule::parse("abc").is_err());
    }
}
