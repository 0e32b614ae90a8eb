//! Scored index pairs between a source and a target cloud.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Coarse,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence<T> {
    pub src: usize,
    pub tgt: usize,
    pub confidence: T,
}

impl<T> Correspondence<T> {
    pub fn new(src: usize, tgt: usize, confidence: T) -> Self {
        Self { src, tgt, confidence }
    }
}

/// Correspondences sorted by confidence, highest first, with no repeated `(src, tgt)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet<T> {
    pairs: Vec<Correspondence<T>>,
    level: Level,
}

fn by_confidence<T: Real>(a: &Correspondence<T>, b: &Correspondence<T>) -> std::cmp::Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then((a.src, a.tgt).cmp(&(b.src, b.tgt)))
}

impl<T: Real> CorrespondenceSet<T> {
    pub fn empty(level: Level) -> Self {
        Self { pairs: Vec::new(), level }
    }

    /// Sorts by confidence (ties by index pair) and drops repeated pairs,
    /// keeping the highest-confidence instance.
    pub fn from_pairs(mut pairs: Vec<Correspondence<T>>, level: Level) -> Self {
        pairs.sort_by(by_confidence);
        let mut seen = std::collections::HashSet::with_capacity(pairs.len());
        pairs.retain(|c| seen.insert((c.src, c.tgt)));
        Self { pairs, level }
    }

    /// Unit-confidence set from plain index pairs, ordered by index pair.
    pub fn from_index_pairs(pairs: &[(usize, usize)], level: Level) -> Self {
        Self::from_pairs(
            pairs.iter().map(|&(s, t)| Correspondence::new(s, t, T::one())).collect(),
            level,
        )
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn pairs(&self) -> &[Correspondence<T>] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Correspondence<T>> {
        self.pairs.iter()
    }

    pub fn index_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|c| (c.src, c.tgt)).collect()
    }

    /// Replaces target indices while keeping the list order. Repeated pairs
    /// produced by the replacement are dropped.
    pub(crate) fn with_targets(&self, targets: &[usize]) -> Self {
        let mut seen = std::collections::HashSet::with_capacity(self.pairs.len());
        let pairs = self
            .pairs
            .iter()
            .zip(targets)
            .map(|(c, &t)| Correspondence::new(c.src, t, c.confidence))
            .filter(|c| seen.insert((c.src, c.tgt)))
            .collect();
        Self { pairs, level: self.level }
    }

    /// Writes `src_index,tgt_index,confidence` rows with a header; confidence has 9 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "src_index,tgt_index,confidence")?;
        for c in &self.pairs {
            writeln!(w, "{},{},{}", c.src, c.tgt, format_sig(c.confidence.as_f64(), 9))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, level: Level) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::parse("correspondence csv", e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("src_index")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    "correspondence csv",
                    format!("line {}: expected 3 fields", lineno + 1),
                ));
            }
            let bad = |what: &str| Error::parse("correspondence csv", format!("line {}: bad {what}", lineno + 1));
            let src = fields[0].trim().parse().map_err(|_| bad("src_index"))?;
            let tgt = fields[1].trim().parse().map_err(|_| bad("tgt_index"))?;
            let conf: f64 = fields[2].trim().parse().map_err(|_| bad("confidence"))?;
            pairs.push(Correspondence::new(src, tgt, T::lit(conf)));
        }
        Ok(Self::from_pairs(pairs, level))
    }
}

impl<'a, T> IntoIterator for &'a CorrespondenceSet<T> {
    type Item = &'a Correspondence<T>;
    type IntoIter = std::slice::Iter<'a, Correspondence<T>>;
    fn into_iter(self) -> Self::IntoIter {
        self.pairs.iter()
    }
}

/// Formats `x` in scientific notation with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    format!("{:.*e}", digits.saturating_sub(1), x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_and_deduplicated() {
        let set = CorrespondenceSet::from_pairs(
            vec![
                Correspondence::new(0, 1, 0.2),
                Correspondence::new(2, 3, 0.9),
                Correspondence::new(0, 1, 0.7),
                Correspondence::new(1, 1, 0.7),
            ],
            Level::Dense,
        );
        let got: Vec<_> = set.iter().map(|c| (c.src, c.tgt, c.confidence)).collect();
        assert_eq!(got, vec![(2, 3, 0.9), (0, 1, 0.7), (1, 1, 0.7)]);
    }

    #[test]
    fn csv_round_trip() {
        let set = CorrespondenceSet::from_pairs(
            vec![Correspondence::new(4, 2, 0.123456789123), Correspondence::new(0, 9, 1.0)],
            Level::Coarse,
        );
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("src_index,tgt_index,confidence\n"));
        assert!(text.contains("4,2,1.23456789e-1"));
        let back = CorrespondenceSet::<f64>::read_csv(&buf[..], Level::Coarse).unwrap();
        assert_eq!(back.index_pairs(), set.index_pairs());
    }
}
