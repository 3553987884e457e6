//! View-specific hard masking of segmentation logits.
//!
//! Each standard view can only show a fixed subset of the 15 structure
//! classes. Logits of the other classes are pushed to a large negative
//! sentinel so that argmax and softmax never select them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEG_CLASSES: usize = 15;
pub const MASKED_LOGIT: f32 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "4CH")]
    FourChamber,
    #[serde(rename = "LVOT")]
    Lvot,
    #[serde(rename = "RVOT")]
    Rvot,
    #[serde(rename = "3VT")]
    ThreeVesselTrachea,
}

impl View {
    pub const ALL: [View; 4] = [
        View::FourChamber,
        View::Lvot,
        View::Rvot,
        View::ThreeVesselTrachea,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Index(format!("view index {i} outside [0,4)")))
    }

    pub fn name(self) -> &'static str {
        match self {
            View::FourChamber => "4CH",
            View::Lvot => "LVOT",
            View::Rvot => "RVOT",
            View::ThreeVesselTrachea => "3VT",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        View::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown view {s:?}")))
    }
}

/// Allowed class set per view, stored as 15-bit masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewCategoryTable {
    allowed: [u16; 4],
}

impl Default for ViewCategoryTable {
    fn default() -> Self {
        let set = |classes: &[usize]| classes.iter().fold(0u16, |m, &c| m | (1 << c));
        Self {
            allowed: [
                set(&[0, 1, 2, 3, 4, 5, 6, 7]),
                set(&[0, 1, 2, 4, 8]),
                set(&[0, 6, 8, 9, 10, 11, 12]),
                set(&[0, 9, 12, 13, 14]),
            ],
        }
    }
}

impl ViewCategoryTable {
    /// A table from explicit class lists. Background must be allowed in
    /// every view and every class must be below 15.
    pub fn from_sets(sets: [&[usize]; 4]) -> Result<Self> {
        let mut allowed = [0u16; 4];
        for (slot, classes) in allowed.iter_mut().zip(sets) {
            for &c in classes {
                if c >= SEG_CLASSES {
                    return Err(Error::Config(format!("mask table class {c} ≥ {SEG_CLASSES}")));
                }
                *slot |= 1 << c;
            }
            if *slot & 1 == 0 {
                return Err(Error::Config("mask table view without background class 0".into()));
            }
        }
        Ok(Self { allowed })
    }

    /// Parse `4CH=0,1,2;LVOT=0,1;RVOT=...;3VT=...`. All four views required.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut sets: [Option<Vec<usize>>; 4] = Default::default();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, list) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("mask table entry {part:?} lacks '='")))?;
            let view: View = name.trim().parse()?;
            let classes = list
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad class {c:?} in mask table")))
                })
                .collect::<Result<Vec<_>>>()?;
            sets[view.index()] = Some(classes);
        }
        let get = |i: usize| {
            sets[i]
                .clone()
                .ok_or_else(|| Error::Config(format!("mask table missing view {}", View::ALL[i])))
        };
        let (a, b, c, d) = (get(0)?, get(1)?, get(2)?, get(3)?);
        Self::from_sets([&a, &b, &c, &d])
    }

    pub fn to_spec(&self) -> String {
        View::ALL
            .iter()
            .map(|v| {
                let list: Vec<String> = self.classes(*v).iter().map(|c| c.to_string()).collect();
                format!("{}={}", v.name(), list.join(","))
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn allows(&self, view: View, class: usize) -> bool {
        class < SEG_CLASSES && self.allowed[view.index()] & (1 << class) != 0
    }

    pub fn classes(&self, view: View) -> Vec<usize> {
        (0..SEG_CLASSES).filter(|&c| self.allows(view, c)).collect()
    }

    /// Number of mask pixels whose class the view does not allow.
    pub fn count_illegal(&self, mask: &[u8], view: View) -> usize {
        mask.iter().filter(|&&c| !self.allows(view, c as usize)).count()
    }
}

/// Set disallowed class planes of `15×H×W` logits to [`MASKED_LOGIT`];
/// allowed planes are left bit-identical.
pub fn apply_hard_mask(logits: &mut [f32], view: View, table: &ViewCategoryTable) -> Result<()> {
    if !logits.len().is_multiple_of(SEG_CLASSES) {
        return Err(Error::Dimension(format!(
            "{} logits are not {SEG_CLASSES} class planes",
            logits.len()
        )));
    }
    let plane = logits.len() / SEG_CLASSES;
    for (c, chunk) in logits.chunks_mut(plane).enumerate() {
        if !table.allows(view, c) {
            chunk.iter_mut().for_each(|v| *v = MASKED_LOGIT);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax_pixel(logits: &[f32], plane: usize, px: usize) -> Vec<f64> {
        let vals: Vec<f64> = (0..SEG_CLASSES).map(|c| f64::from(logits[c * plane + px])).collect();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    #[test]
    fn default_table_matches_view_sets() {
        let t = ViewCategoryTable::default();
        assert_eq!(t.classes(View::FourChamber), vec![0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(t.classes(View::Lvot), vec![0, 1, 2, 4, 8]);
        assert_eq!(t.classes(View::Rvot), vec![0, 6, 8, 9, 10, 11, 12]);
        assert_eq!(t.classes(View::ThreeVesselTrachea), vec![0, 9, 12, 13, 14]);
        assert_eq!(ViewCategoryTable::parse(&t.to_spec()).unwrap(), t);
    }

    #[test]
    fn table_without_background_rejected() {
        assert!(ViewCategoryTable::from_sets([&[1], &[0], &[0], &[0]]).is_err());
        assert!(ViewCategoryTable::from_sets([&[0, 15], &[0], &[0], &[0]]).is_err());
        assert!(ViewCategoryTable::parse("4CH=0;LVOT=0;RVOT=0").is_err());
    }

    #[test]
    fn all_allowed_table_is_identity() {
        let all: Vec<usize> = (0..SEG_CLASSES).collect();
        let t = ViewCategoryTable::from_sets([&all, &all, &all, &all]).unwrap();
        let orig: Vec<f32> = (0..SEG_CLASSES * 4).map(|i| i as f32 * 0.1 - 2.0).collect();
        let mut l = orig.clone();
        apply_hard_mask(&mut l, View::Rvot, &t).unwrap();
        assert_eq!(l, orig);
    }

    #[test]
    fn three_vessel_argmax_stays_in_allowed_set() {
        let t = ViewCategoryTable::default();
        let plane = 9;
        // make the disallowed class 5 the strongest everywhere
        let mut l: Vec<f32> = (0..SEG_CLASSES * plane)
            .map(|i| ((i * 7919) % 13) as f32 * 0.3)
            .collect();
        for px in 0..plane {
            l[5 * plane + px] = 50.0;
        }
        apply_hard_mask(&mut l, View::ThreeVesselTrachea, &t).unwrap();
        for px in 0..plane {
            let best = (0..SEG_CLASSES)
                .max_by(|&a, &b| l[a * plane + px].total_cmp(&l[b * plane + px]).then(b.cmp(&a)))
                .unwrap();
            assert!([0, 9, 12, 13, 14].contains(&best));
        }
    }

    #[test]
    fn zero_logits_lvot_spread_uniformly_over_allowed() {
        let t = ViewCategoryTable::default();
        let mut l = vec![0.0f32; SEG_CLASSES * 2];
        apply_hard_mask(&mut l, View::Lvot, &t).unwrap();
        let p = softmax_pixel(&l, 2, 1);
        for (c, pc) in p.iter().enumerate() {
            if [0, 1, 2, 4, 8].contains(&c) {
                assert!((pc - 0.2).abs() < 1e-12);
            } else {
                assert!(*pc < 1e-30);
            }
        }
    }

    #[test]
    fn masking_is_idempotent_and_preserves_allowed_bits() {
        let t = ViewCategoryTable::default();
        let orig: Vec<f32> = (0..SEG_CLASSES * 3).map(|i| (i as f32).sin() * 4.0).collect();
        let mut once = orig.clone();
        apply_hard_mask(&mut once, View::FourChamber, &t).unwrap();
        let mut twice = once.clone();
        apply_hard_mask(&mut twice, View::FourChamber, &t).unwrap();
        assert_eq!(once, twice);
        for c in 0..8 {
            for px in 0..3 {
                assert_eq!(once[c * 3 + px].to_bits(), orig[c * 3 + px].to_bits());
            }
        }
    }
}
