use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Which layers a prune step runs at, resolved against a depth.
///
/// Text form: `first_half`, `all`, `none`, or a comma list whose items are
/// single indices, half-open ranges `a..b`, or inclusive ranges `a..=b`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LayerSpec {
    #[default]
    FirstHalf,
    All,
    None,
    Explicit(BTreeSet<usize>),
}

impl LayerSpec {
    pub fn resolve(&self, depth: usize) -> Result<BTreeSet<usize>> {
        let set = match self {
            LayerSpec::FirstHalf => (0..depth / 2).collect(),
            LayerSpec::All => (0..depth).collect(),
            LayerSpec::None => BTreeSet::new(),
            LayerSpec::Explicit(s) => s.clone(),
        };
        if let Some(&l) = set.iter().find(|&&l| l >= depth) {
            return Err(Error::Config(format!("layer {l} out of range for depth {depth}")));
        }
        Ok(set)
    }

    pub fn explicit(layers: impl IntoIterator<Item = usize>) -> Self {
        LayerSpec::Explicit(layers.into_iter().collect())
    }
}

fn parse_index(s: &str, whole: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad layer spec `{whole}`: `{s}` is not an index")))
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "first_half" => return Ok(LayerSpec::FirstHalf),
            "all" => return Ok(LayerSpec::All),
            "none" | "" => return Ok(LayerSpec::None),
            _ => {}
        }
        let mut set = BTreeSet::new();
        for item in s.split(',') {
            if let Some((a, b)) = item.split_once("..=") {
                set.extend(parse_index(a, s)?..=parse_index(b, s)?);
            } else if let Some((a, b)) = item.split_once("..") {
                set.extend(parse_index(a, s)?..parse_index(b, s)?);
            } else {
                set.insert(parse_index(item, s)?);
            }
        }
        Ok(LayerSpec::Explicit(set))
    }
}

/// Canonical form: runs of three or more become `a..=b`.
impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let set = match self {
            LayerSpec::FirstHalf => return f.write_str("first_half"),
            LayerSpec::All => return f.write_str("all"),
            LayerSpec::None => return f.write_str("none"),
            LayerSpec::Explicit(s) if s.is_empty() => return f.write_str("none"),
            LayerSpec::Explicit(s) => s,
        };
        let v: Vec<usize> = set.iter().copied().collect();
        let mut parts = Vec::new();
        let mut i = 0;
        while i < v.len() {
            let mut j = i;
            while j + 1 < v.len() && v[j + 1] == v[j] + 1 {
                j += 1;
            }
            if j - i >= 2 {
                parts.push(format!("{}..={}", v[i], v[j]));
            } else {
                parts.extend(v[i..=j].iter().map(usize::to_string));
            }
            i = j + 1;
        }
        f.write_str(&parts.join(","))
    }
}

impl Serialize for LayerSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
