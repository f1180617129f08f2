//! Ordered named parameter maps.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::engine::RealArray;
use crate::error::{Error, Result};

/// Ordered map from parameter name to array.
///
/// Iteration order is insertion order; for model parameters that is the
/// documented name-scheme order, which is also the canonical order used to
/// break ties in TopK selections.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "Vec<(String, RealArray)>", into = "Vec<(String, RealArray)>")]
pub struct NamedParams {
    entries: Vec<(String, RealArray)>,
    index: HashMap<String, usize>,
}

impl PartialEq for NamedParams {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl From<Vec<(String, RealArray)>> for NamedParams {
    fn from(entries: Vec<(String, RealArray)>) -> Self {
        let mut p = NamedParams::new();
        for (k, v) in entries {
            p.insert(k, v);
        }
        p
    }
}

impl From<NamedParams> for Vec<(String, RealArray)> {
    fn from(p: NamedParams) -> Self {
        p.entries
    }
}

impl NamedParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces; replacement keeps the original position.
    pub fn insert(&mut self, name: impl Into<String>, value: RealArray) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&RealArray> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RealArray> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&RealArray> {
        self.get(name)
            .ok_or_else(|| Error::KeyMismatch(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RealArray)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut RealArray)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Total number of scalar coordinates.
    pub fn num_coords(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, v| RealArray::zeros(v.shape()))
    }

    pub fn map(&self, mut f: impl FnMut(&str, &RealArray) -> RealArray) -> Self {
        let mut out = NamedParams::new();
        for (k, v) in self.iter() {
            out.insert(k, f(k, v));
        }
        out
    }

    /// Checks that `other` has the same names in the same order with the same shapes.
    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::KeyMismatch(format!(
                "{} entries vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.iter().zip(other.iter()) {
            if ka != kb {
                return Err(Error::KeyMismatch(format!("`{ka}` vs `{kb}`")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::ShapeMismatch {
                    op: "layout",
                    left: va.shape().to_vec(),
                    right: vb.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// `self - other`, per entry.
    pub fn diff(&self, other: &Self) -> Result<Self> {
        self.check_layout(other)?;
        let mut out = NamedParams::new();
        for ((k, a), (_, b)) in self.iter().zip(other.iter()) {
            out.insert(k, a.sub(b)?);
        }
        Ok(out)
    }

    /// Accumulates `other` into `self` entrywise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(other.iter()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, c: f64) {
        for (_, a) in self.entries.iter_mut() {
            for x in a.data_mut() {
                *x *= c;
            }
        }
    }

    /// Global L2 norm over all coordinates.
    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, v)| v.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, v)| v.is_finite())
    }

    /// Flattened copy of all coordinates in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, v)| v.data().iter().copied())
            .collect()
    }

    pub fn bit_equal(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
