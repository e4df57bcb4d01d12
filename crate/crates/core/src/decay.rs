//! Decay factor scheduling: lambda transitions from 1 to 0 over the decay
//! phase and is clamped to exact 0 from the endpoint onward.
//!
//! The three curves map the decay phase `[0, q]` onto `[0, 1]` with
//! quarter-period trigonometric shapes: `sine` front-loads the decay,
//! `one_minus_cosine` back-loads it, `linear` sits between them.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    Sine,
    OneMinusCosine,
    Linear,
}

impl DecayKind {
    pub const ALL: [DecayKind; 3] = [DecayKind::Sine, DecayKind::OneMinusCosine, DecayKind::Linear];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sine" | "sin" => Ok(DecayKind::Sine),
            "one_minus_cosine" | "one-cosine" | "1-cosine" | "one_cosine" => {
                Ok(DecayKind::OneMinusCosine)
            }
            "linear" | "lin" => Ok(DecayKind::Linear),
            other => Err(Error::InvalidConfig(format!(
                "unknown decay kind `{other}` (expected sine, one-cosine, or linear)"
            ))),
        }
    }
}

impl fmt::Display for DecayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DecayKind::Sine => "sine",
            DecayKind::OneMinusCosine => "one_minus_cosine",
            DecayKind::Linear => "linear",
        };
        f.write_str(name)
    }
}

/// Scheduler kind plus decay endpoint `q` out of `total_iters` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySpec {
    pub kind: DecayKind,
    /// Endpoint of the decay phase, in iterations; lambda is exactly 0 for
    /// every `n >= q`.
    pub q: u64,
    pub total_iters: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validation {
    Ok,
    /// Valid but outside the recommended endpoint range.
    Warning(String),
}

impl DecaySpec {
    pub fn new(kind: DecayKind, q: u64, total_iters: u64) -> Result<Self> {
        let spec = Self {
            kind,
            q,
            total_iters,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Materialize the endpoint from a fraction of the total budget,
    /// rounding up so `q_fraction = 0.6, N = 5` decays through iteration 3.
    pub fn from_fraction(kind: DecayKind, q_fraction: f64, total_iters: u64) -> Result<Self> {
        if !(q_fraction.is_finite() && q_fraction > 0.0 && q_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decay endpoint fraction {q_fraction} must lie in (0, 1]"
            )));
        }
        let q = (q_fraction * total_iters as f64).ceil() as u64;
        Self::new(kind, q.max(1), total_iters)
    }

    pub fn q_fraction(&self) -> f64 {
        self.q as f64 / self.total_iters as f64
    }

    /// Errors on a degenerate endpoint; warns when `q/N` leaves the
    /// recommended `[0.4, 0.8]` band.
    pub fn validate(&self) -> Result<Validation> {
        if self.q < 1 || self.q > self.total_iters {
            return Err(Error::InvalidConfig(format!(
                "decay endpoint q={} must satisfy 1 <= q <= total iterations ({})",
                self.q, self.total_iters
            )));
        }
        let frac = self.q_fraction();
        if !(0.4..=0.8).contains(&frac) {
            return Ok(Validation::Warning(format!(
                "decay endpoint q/N = {frac:.3} is outside the recommended range [0.4, 0.8]"
            )));
        }
        Ok(Validation::Ok)
    }

    /// Decay factor at iteration `n`.
    pub fn lambda_at(&self, n: u64) -> f64 {
        if n >= self.q {
            return 0.0;
        }
        if n == 0 {
            return 1.0;
        }
        let x = n as f64 / self.q as f64;
        let f = match self.kind {
            DecayKind::Linear => x,
            DecayKind::Sine => (FRAC_PI_2 * x).sin(),
            DecayKind::OneMinusCosine => 1.0 - (FRAC_PI_2 * x).cos(),
        };
        (1.0 - f).clamp(0.0, 1.0)
    }

    /// Sample `(n, lambda)` at `n = 0, stride, 2*stride, ...` up to and
    /// always including `total_iters`.
    pub fn curve(&self, stride: u64) -> Vec<(u64, f64)> {
        assert!(stride >= 1, "stride must be at least 1");
        let mut out = Vec::new();
        let mut n = 0;
        while n < self.total_iters {
            out.push((n, self.lambda_at(n)));
            n += stride;
        }
        out.push((self.total_iters, self.lambda_at(self.total_iters)));
        out
    }

    /// Render [`DecaySpec::curve`] as CSV with header `n,lambda`.
    pub fn curve_csv(&self, stride: u64) -> String {
        let mut s = String::from("n,lambda\n");
        for (n, l) in self.curve(stride) {
            s.push_str(&format!("{n},{l}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn starts_at_one_ends_at_zero() {
        for kind in DecayKind::ALL {
            let spec = DecaySpec::new(kind, 100, 200).unwrap();
            assert_eq!(spec.lambda_at(0), 1.0);
            assert_eq!(spec.lambda_at(100), 0.0);
            assert_eq!(spec.lambda_at(1000), 0.0);
        }
    }

    #[test]
    fn midpoint_closed_forms() {
        let q = 1000;
        let lin = DecaySpec::new(DecayKind::Linear, q, q).unwrap();
        let sin = DecaySpec::new(DecayKind::Sine, q, q).unwrap();
        let omc = DecaySpec::new(DecayKind::OneMinusCosine, q, q).unwrap();
        let half_sqrt2 = std::f64::consts::SQRT_2 / 2.0;
        assert!((lin.lambda_at(500) - 0.5).abs() < 1e-12);
        assert!((sin.lambda_at(500) - (1.0 - half_sqrt2)).abs() < 1e-12);
        assert!((omc.lambda_at(500) - half_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn curve_linear_example() {
        let spec = DecaySpec::new(DecayKind::Linear, 4, 4).unwrap();
        let lambdas: Vec<f64> = spec.curve(1).iter().map(|(_, l)| *l).collect();
        assert_eq!(lambdas, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn curve_endpoints_for_all_kinds() {
        for kind in DecayKind::ALL {
            let spec = DecaySpec::new(kind, 37, 61).unwrap();
            let pts = spec.curve(7);
            assert_eq!(pts.first().unwrap().1, 1.0);
            assert_eq!(pts.last().unwrap().0, 61);
            assert_eq!(pts.last().unwrap().1, 0.0);
        }
    }

    #[test]
    fn sine_below_linear_below_one_minus_cosine() {
        let q = 1000;
        let lin = DecaySpec::new(DecayKind::Linear, q, q).unwrap();
        let sin = DecaySpec::new(DecayKind::Sine, q, q).unwrap();
        let omc = DecaySpec::new(DecayKind::OneMinusCosine, q, q).unwrap();
        for n in 1..q {
            let (a, b, c) = (sin.lambda_at(n), lin.lambda_at(n), omc.lambda_at(n));
            assert!(a <= b && b <= c, "ordering violated at n={n}: {a} {b} {c}");
        }
    }

    #[test]
    fn validate_bands() {
        let ok = DecaySpec::new(DecayKind::Sine, 60, 100).unwrap();
        assert_eq!(ok.validate().unwrap(), Validation::Ok);
        let warn = DecaySpec::new(DecayKind::Sine, 10, 100).unwrap();
        assert!(matches!(warn.validate().unwrap(), Validation::Warning(_)));
        assert!(DecaySpec::new(DecayKind::Sine, 0, 100).is_err());
        assert!(DecaySpec::new(DecayKind::Sine, 101, 100).is_err());
    }

    #[test]
    fn kind_parsing_round_trips() {
        for kind in DecayKind::ALL {
            assert_eq!(DecayKind::parse(&kind.to_string()).unwrap(), kind);
        }
        assert_eq!(DecayKind::parse("one-cosine").unwrap(), DecayKind::OneMinusCosine);
        assert_eq!(DecayKind::parse("1-cosine").unwrap(), DecayKind::OneMinusCosine);
        assert!(DecayKind::parse("quadratic").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lambda_monotone_and_in_range(
            kind_idx in 0usize..3,
            q in 1u64..=2000,
        ) {
            let kind = DecayKind::ALL[kind_idx];
            let spec = DecaySpec { kind, q, total_iters: q.max(1) };
            let mut prev = f64::INFINITY;
            for n in 0..=q + 10 {
                let l = spec.lambda_at(n);
                prop_assert!((0.0..=1.0).contains(&l));
                prop_assert!(l <= prev + 1e-15, "not nonincreasing at n={n}");
                prev = l;
            }
        }
    }
}
