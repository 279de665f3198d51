use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};

/// Decomposition of a minimal alignment into unit-cost operations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl EditOps {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `distance / ref_len`; errors on an empty reference.
    pub fn rate(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(MetricsError::EmptyReference);
        }
        Ok(self.distance() as f64 / self.ref_len as f64)
    }
}

/// Levenshtein alignment of `hyp` against `reference`. When several
/// minimal alignments exist, the backtrack prefers a substitution (or
/// match), then an insertion, then a deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut ops = EditOps {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let differ = reference[i - 1] != hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(differ) == here {
                ops.substitutions += usize::from(differ);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            ops.insertions += 1;
            j -= 1;
        } else {
            ops.deletions += 1;
            i -= 1;
        }
    }
    ops
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Word,
    Char,
}

pub fn tokenize(text: &str, unit: Unit) -> Vec<String> {
    match unit {
        Unit::Word => text.split_whitespace().map(str::to_string).collect(),
        Unit::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

/// Word or character error rate. May exceed 1.
pub fn wer_cer(reference: &str, hyp: &str, unit: Unit) -> Result<f64> {
    let r = tokenize(reference, unit);
    if r.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    edit_distance(&r, &tokenize(hyp, unit)).rate()
}
