//! Exact non-negative rational arithmetic.
//!
//! Sampling rates and frame timestamps are stored as exact rationals so that
//! rendered prompts are byte-identical across platforms and runs. Floats only
//! appear at the rendering boundary, never in stored values.

use std::fmt;
use std::ops::{Add, Div, Mul};
use std::str::FromStr;

use num_rational::Ratio;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RatError {
    #[error("denominator must be non-zero")]
    ZeroDenominator,
    #[error("cannot parse rational from {0:?}")]
    Unparseable(String),
}

/// A non-negative rational number with exact arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rat(Ratio<u64>);

impl Rat {
    pub const ZERO: Rat = Rat(Ratio::new_raw(0, 1));

    pub fn new(numer: u64, denom: u64) -> Result<Self, RatError> {
        if denom == 0 {
            return Err(RatError::ZeroDenominator);
        }
        Ok(Rat(Ratio::new(numer, denom)))
    }

    pub fn integer(n: u64) -> Self {
        Rat(Ratio::from_integer(n))
    }

    pub fn numer(&self) -> u64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u64 {
        *self.0.denom()
    }

    pub fn is_zero(&self) -> bool {
        self.numer() == 0
    }

    /// Decimal rendering with exactly two fractional digits, rounded half-up.
    ///
    /// Computed in integer arithmetic: `floor((200n + d) / (2d))` hundredths.
    pub fn to_decimal_2dp(&self) -> String {
        let n = u128::from(self.numer());
        let d = u128::from(self.denom());
        let hundredths = (200 * n + d) / (2 * d);
        format!("{}.{:02}", hundredths / 100, hundredths % 100)
    }

    /// Parse a decimal string like `"29.97"` into the exact rational 2997/100.
    fn from_decimal_str(s: &str) -> Result<Self, RatError> {
        let bad = || RatError::Unparseable(s.to_string());
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(bad());
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
            || frac_part.len() > 9
        {
            return Err(bad());
        }
        let int: u64 = if int_part.is_empty() {
            0
        } else {
            int_part.parse().map_err(|_| bad())?
        };
        let scale = 10u64.pow(frac_part.len() as u32);
        let frac: u64 = if frac_part.is_empty() {
            0
        } else {
            frac_part.parse().map_err(|_| bad())?
        };
        let numer = int
            .checked_mul(scale)
            .and_then(|v| v.checked_add(frac))
            .ok_or_else(bad)?;
        Rat::new(numer, scale)
    }

    /// Convert a finite `f64` through its shortest decimal representation.
    ///
    /// `29.97` becomes exactly 2997/100 — the digits the user wrote, not the
    /// binary expansion of the float.
    pub fn from_f64(x: f64) -> Result<Self, RatError> {
        if !x.is_finite() || x < 0.0 {
            return Err(RatError::Unparseable(x.to_string()));
        }
        let repr = format!("{x}");
        if repr.contains(['e', 'E']) {
            return Err(RatError::Unparseable(repr));
        }
        Self::from_decimal_str(&repr)
    }
}

impl FromStr for Rat {
    type Err = RatError;

    /// Accepts `"30"`, `"29.97"` and `"30000/1001"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let numer: u64 = n
                .trim()
                .parse()
                .map_err(|_| RatError::Unparseable(s.into()))?;
            let denom: u64 = d
                .trim()
                .parse()
                .map_err(|_| RatError::Unparseable(s.into()))?;
            return Rat::new(numer, denom);
        }
        Self::from_decimal_str(s)
    }
}

impl fmt::Display for Rat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom() == 1 {
            write!(f, "{}", self.numer())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

impl Add for Rat {
    type Output = Rat;
    fn add(self, rhs: Rat) -> Rat {
        Rat(self.0 + rhs.0)
    }
}

impl Mul for Rat {
    type Output = Rat;
    fn mul(self, rhs: Rat) -> Rat {
        Rat(self.0 * rhs.0)
    }
}

impl Div for Rat {
    type Output = Rat;
    fn div(self, rhs: Rat) -> Rat {
        Rat(self.0 / rhs.0)
    }
}

/// Serialized as a JSON integer when integral, otherwise as an `"n/d"`
/// string, so that round-trips are exact.
impl Serialize for Rat {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.denom() == 1 {
            serializer.serialize_u64(self.numer())
        } else {
            serializer.serialize_str(&format!("{}/{}", self.numer(), self.denom()))
        }
    }
}

struct RatVisitor;

impl Visitor<'_> for RatVisitor {
    type Value = Rat;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a non-negative number or a rational string like \"30000/1001\"")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Rat, E> {
        Ok(Rat::integer(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Rat, E> {
        u64::try_from(v)
            .map(Rat::integer)
            .map_err(|_| E::custom("rational must be non-negative"))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Rat, E> {
        Rat::from_f64(v).map_err(E::custom)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Rat, E> {
        v.parse().map_err(E::custom)
    }
}

impl<'de> Deserialize<'de> for Rat {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(RatVisitor)
    }
}
