use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng;

pub const MIN_SPLIT_CASES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio {
            train: 8,
            val: 1,
            test: 1,
        }
    }
}

impl SplitRatio {
    /// Partition sizes for `n` cases: train and val rounded, test takes the rest.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let total = (self.train + self.val + self.test) as f64;
        let train = (n as f64 * self.train as f64 / total).round() as usize;
        let val = (n as f64 * self.val as f64 / total).round() as usize;
        let val = val.min(n - train.min(n));
        let train = train.min(n);
        (train, val, n - train - val)
    }
}

impl FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("ratio must look like 8:1:1, got '{s}'"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let v: Vec<u32> = parts
            .iter()
            .map(|p| p.trim().parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if v[0] == 0 || v.iter().sum::<u32>() == 0 {
            return Err(bad());
        }
        Ok(SplitRatio {
            train: v[0],
            val: v[1],
            test: v[2],
        })
    }
}

impl fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Seeded shuffle, then partition; each list comes back sorted.
pub fn split(case_ids: &[String], ratio: SplitRatio, seed: u64) -> Result<SplitSpec> {
    if case_ids.len() < MIN_SPLIT_CASES {
        return Err(Error::Data(format!(
            "split needs at least {MIN_SPLIT_CASES} cases, got {}",
            case_ids.len()
        )));
    }
    let mut ids = case_ids.to_vec();
    ids.sort();
    let before = ids.len();
    ids.dedup();
    if ids.len() != before {
        return Err(Error::Data("duplicate case ids".into()));
    }
    ids.shuffle(&mut rng(seed));
    let (n_train, n_val, _) = ratio.sizes(ids.len());
    let mut test = ids.split_off(n_train + n_val);
    let mut val = ids.split_off(n_train);
    let mut train = ids;
    train.sort();
    val.sort();
    test.sort();
    Ok(SplitSpec {
        train,
        val,
        test,
        seed,
    })
}

impl SplitSpec {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn part(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}
