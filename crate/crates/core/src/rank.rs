use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// How many singular components to keep for a `d × m` layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankPolicy {
    /// `max(1, floor(f · min(d, m)))`, `0 < f ≤ 1`.
    Fraction(f64),
    /// `max(1, floor(min(d, m) / T))`.
    PerTask(usize),
    /// A fixed rank, which must not exceed `min(d, m)` of any layer.
    Explicit(usize),
    /// No truncation.
    Full,
}

impl RankPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RankPolicy::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                Err(Error::InvalidPolicy(format!("fraction {f} outside (0, 1]")))
            }
            RankPolicy::PerTask(0) => Err(Error::InvalidPolicy("task count must be >= 1".into())),
            RankPolicy::Explicit(0) => Err(Error::InvalidPolicy("rank must be >= 1".into())),
            _ => Ok(()),
        }
    }

    pub fn rank_for(&self, rows: usize, cols: usize) -> Result<usize> {
        self.validate()?;
        let full = rows.min(cols);
        let k = match *self {
            // the nudge keeps e.g. 0.29 · 100 from flooring to 28
            RankPolicy::Fraction(f) => ((f * full as f64) + 1e-9).floor() as usize,
            RankPolicy::PerTask(tasks) => full / tasks,
            RankPolicy::Explicit(k) => {
                if k > full {
                    return Err(Error::RankOutOfRange { k, max: full });
                }
                k
            }
            RankPolicy::Full => full,
        };
        Ok(k.max(1))
    }
}

impl fmt::Display for RankPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankPolicy::Fraction(x) => write!(f, "fraction:{x}"),
            RankPolicy::PerTask(t) => write!(f, "per-task:{t}"),
            RankPolicy::Explicit(k) => write!(f, "rank:{k}"),
            RankPolicy::Full => f.write_str("full"),
        }
    }
}

impl FromStr for RankPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidPolicy(format!("cannot parse {s:?}"));
        let policy = match s.split_once(':') {
            None if s == "full" => RankPolicy::Full,
            Some(("fraction", v)) => RankPolicy::Fraction(v.parse().map_err(|_| bad())?),
            Some(("per-task", v)) => RankPolicy::PerTask(v.parse().map_err(|_| bad())?),
            Some(("rank", v)) => RankPolicy::Explicit(v.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl Serialize for RankPolicy {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}
