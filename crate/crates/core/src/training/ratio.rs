//! Dataset-level CT:MR composition for imbalance experiments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// CT:MR scan ratio; one of 1:1, 2:1 or 3:1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub ct: usize,
    pub mr: usize,
}

impl Ratio {
    pub const ONE_TO_ONE: Ratio = Ratio { ct: 1, mr: 1 };
    pub const SUPPORTED: [Ratio; 3] = [Ratio { ct: 1, mr: 1 }, Ratio { ct: 2, mr: 1 }, Ratio { ct: 3, mr: 1 }];
}

impl Default for Ratio {
    fn default() -> Self {
        Ratio::ONE_TO_ONE
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ct, self.mr)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parsed = s.split_once(':').and_then(|(a, b)| Some(Ratio { ct: a.trim().parse().ok()?, mr: b.trim().parse().ok()? }));
        match parsed {
            Some(r) if Ratio::SUPPORTED.contains(&r) => Ok(r),
            _ => Err(Error::Config(format!("unsupported CT:MR ratio {s:?} (use 1:1, 2:1 or 3:1)"))),
        }
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioStrategy {
    /// Keep every MR training scan and draw CT scans to match the ratio.
    #[default]
    ExpandCt,
    /// Keep every CT training scan and subsample MR to match the ratio.
    SubsampleMr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioPlan {
    pub ratio: Ratio,
    pub strategy: RatioStrategy,
    pub ct_train: usize,
    pub mr_train: usize,
}

/// Training-pool sizes after holding out `test_per_modality` scans of each
/// modality and applying `ratio`.
pub fn plan_ratio(
    ratio: Ratio,
    strategy: RatioStrategy,
    n_ct: usize,
    n_mr: usize,
    test_per_modality: usize,
) -> Result<RatioPlan> {
    if n_ct <= test_per_modality || n_mr <= test_per_modality {
        bail!(Config, "{n_ct} CT / {n_mr} MR scans leave no training data after {test_per_modality} test scans each");
    }
    let (ct_pool, mr_pool) = (n_ct - test_per_modality, n_mr - test_per_modality);
    let (ct_train, mr_train) = match strategy {
        RatioStrategy::ExpandCt => {
            let need = mr_pool * ratio.ct / ratio.mr;
            if need > ct_pool {
                bail!(Config, "ratio {ratio} needs {need} CT training scans for {mr_pool} MR but only {ct_pool} are available");
            }
            (need, mr_pool)
        }
        RatioStrategy::SubsampleMr => {
            let keep = ((ct_pool * ratio.mr) as f64 / ratio.ct as f64).round() as usize;
            if keep == 0 || keep > mr_pool {
                bail!(Config, "ratio {ratio} cannot be reached with {ct_pool} CT and {mr_pool} MR training scans");
            }
            (ct_pool, keep)
        }
    };
    Ok(RatioPlan { ratio, strategy, ct_train, mr_train })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let p = plan_ratio(Ratio::ONE_TO_ONE, RatioStrategy::ExpandCt, 54, 54, 19).unwrap();
        assert_eq!((p.ct_train, p.mr_train), (35, 35));
        let two: Ratio = "2:1".parse().unwrap();
        let p = plan_ratio(two, RatioStrategy::ExpandCt, 70, 35, 0).unwrap();
        assert_eq!((p.ct_train, p.mr_train), (70, 35));
        let three: Ratio = "3:1".parse().unwrap();
        assert!(matches!(plan_ratio(three, RatioStrategy::ExpandCt, 35, 35, 0), Err(Error::Config(_))));
        let p = plan_ratio(three, RatioStrategy::SubsampleMr, 36, 35, 0).unwrap();
        assert_eq!((p.ct_train, p.mr_train), (36, 12));
    }

    #[test]
    fn ratio_parsing() {
        assert!("4:1".parse::<Ratio>().is_err());
        assert!("x".parse::<Ratio>().is_err());
        assert_eq!("1:1".parse::<Ratio>().unwrap(), Ratio::ONE_TO_ONE);
        let json = serde_json::to_string(&Ratio { ct: 2, mr: 1 }).unwrap();
        assert_eq!(json, "\"2:1\"");
    }
}
