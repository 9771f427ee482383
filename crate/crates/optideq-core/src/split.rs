//! Dataset splitting: stratified three-way split, majority downsampling and
//! the leakage-free group split.
//!
//! All functions operate on row indices so callers can apply the result to
//! whatever row container they hold. Randomness is seeded per stage through
//! [`crate::seeds::derive_seed`]; identical inputs and seed reproduce
//! identical partitions. Returned index lists are sorted ascending, which
//! makes outputs canonical and diffs stable.
//!
//! The group split assigns every equivalence class of identical binarised
//! vectors to exactly one partition, greedily filling whichever partition is
//! furthest below its target count. Partition key sets are asserted disjoint
//! on every run.

use crate::encode::GroupKey;
use crate::error::{Error, Result};
use crate::seeds::stage_rng;
use rand::seq::SliceRandom;
use std::collections::HashMap;

/// Per-partition statistics for the audit report.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionStats {
    pub name: &'static str,
    pub samples: usize,
    pub unique_groups: Option<usize>,
    pub class_counts: [usize; 2],
}

/// Audit report emitted by the group split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitReport {
    pub partitions: Vec<PartitionStats>,
    /// `"none"` when the partition key sets are pairwise disjoint.
    pub leakage: String,
    pub seed: u64,
    /// Set when one group exceeds the largest partition target.
    pub oversized_group: Option<String>,
}

impl SplitReport {
    pub fn render_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let total: usize = self.partitions.iter().map(|p| p.samples).sum();
        let _ = writeln!(out, "split report (seed {})", self.seed);
        for p in &self.partitions {
            let balance = if p.samples > 0 {
                100.0 * p.class_counts[0] as f64 / p.samples as f64
            } else {
                0.0
            };
            let groups = match p.unique_groups {
                Some(g) => format!("{g}"),
                None => "-".to_string(),
            };
            let _ = writeln!(
                out,
                "{:<12} samples {:>9}  unique groups {:>9}  class balance {:.1}/{:.1}%",
                p.name,
                p.samples,
                groups,
                balance,
                100.0 - balance
            );
        }
        let _ = writeln!(out, "total {total}");
        let _ = writeln!(out, "leakage check: {}", self.leakage);
        if let Some(w) = &self.oversized_group {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

const PARTITION_NAMES: [&str; 3] = ["train", "validation", "test"];

fn check_ratios(ratios: &[f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| *r <= 0.0) {
        return Err(Error::config("split ratios must be positive"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Apportion `n` into three parts proportional to `ratios` using largest
/// remainders, so the parts sum to `n` exactly.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let mut base = [0usize; 3];
    let mut rema = [0f64; 3];
    let mut used = 0usize;
    for k in 0..3 {
        let exact = ratios[k] * n as f64;
        base[k] = exact.floor() as usize;
        rema[k] = exact - exact.floor();
        used += base[k];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rema[b].partial_cmp(&rema[a]).unwrap().then(a.cmp(&b)));
    for &k in order.iter().take(n - used) {
        base[k] += 1;
    }
    base
}

/// Stratified three-way split: each class is shuffled independently and
/// sliced by the ratios, so per-class proportions carry over to every
/// partition within rounding.
pub fn stratified_split(
    labels: &[u8],
    ratios: [f64; 3],
    seed: u64,
) -> Result<[Vec<usize>; 3]> {
    check_ratios(&ratios)?;
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    if by_class[0].is_empty() || by_class[1].is_empty() {
        return Err(Error::config("stratified split needs both classes present"));
    }
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < 3 {
            return Err(Error::config(format!(
                "class {c} has {} rows, fewer than the 3 partitions",
                idx.len()
            )));
        }
        let mut rng = stage_rng(seed, &format!("split.stratified.class{c}"));
        idx.shuffle(&mut rng);
        let counts = apportion(idx.len(), &ratios);
        let mut cursor = 0;
        for k in 0..3 {
            parts[k].extend_from_slice(&idx[cursor..cursor + counts[k]]);
            cursor += counts[k];
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Randomly subsample the majority class (without replacement) down to the
/// minority count. Returns kept row indices, ascending.
pub fn downsample_majority(labels: &[u8], seed: u64) -> Result<Vec<usize>> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    if by_class[0].is_empty() || by_class[1].is_empty() {
        return Err(Error::config("downsampling needs both classes present"));
    }
    let (minority, majority) = if by_class[0].len() <= by_class[1].len() {
        (0, 1)
    } else {
        (1, 0)
    };
    let keep_n = by_class[minority].len();
    let mut rng = stage_rng(seed, "split.downsample");
    let mut major = std::mem::take(&mut by_class[majority]);
    major.shuffle(&mut rng);
    major.truncate(keep_n);
    let mut kept = by_class[minority].clone();
    kept.extend_from_slice(&major);
    kept.sort_unstable();
    Ok(kept)
}

/// Group split: rows sharing a key move together. Unique keys (first-seen
/// order) are shuffled, then each group goes to the partition whose current
/// sample count is furthest below its target (ties to the earlier
/// partition).
pub fn group_split(
    keys: &[GroupKey],
    labels: &[u8],
    ratios: [f64; 3],
    seed: u64,
) -> Result<([Vec<usize>; 3], SplitReport)> {
    check_ratios(&ratios)?;
    if keys.len() != labels.len() {
        return Err(Error::config("keys and labels must align"));
    }
    if keys.is_empty() {
        return Err(Error::config("group split needs at least one row"));
    }
    // groups in first-appearance order
    let mut group_of: HashMap<&GroupKey, usize> = HashMap::new();
    let mut group_rows: Vec<Vec<usize>> = Vec::new();
    for (i, key) in keys.iter().enumerate() {
        match group_of.get(key) {
            Some(&g) => group_rows[g].push(i),
            None => {
                group_of.insert(key, group_rows.len());
                group_rows.push(vec![i]);
            }
        }
    }

    let n = keys.len();
    let targets = [
        ratios[0] * n as f64,
        ratios[1] * n as f64,
        ratios[2] * n as f64,
    ];
    let largest_target = targets.iter().cloned().fold(f64::MIN, f64::max);
    let mut order: Vec<usize> = (0..group_rows.len()).collect();
    let mut rng = stage_rng(seed, "split.group");
    order.shuffle(&mut rng);

    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut group_counts = [0usize; 3];
    let mut assigned = [0usize; 3];
    let mut oversized: Option<String> = None;
    for &g in &order {
        let size = group_rows[g].len();
        if size as f64 > largest_target && oversized.is_none() {
            oversized = Some(format!(
                "a group of {size} rows exceeds the largest partition target {largest_target:.0}"
            ));
        }
        let mut best = 0usize;
        let mut best_deficit = f64::MIN;
        for k in 0..3 {
            let deficit = targets[k] - assigned[k] as f64;
            if deficit > best_deficit {
                best_deficit = deficit;
                best = k;
            }
        }
        parts[best].extend_from_slice(&group_rows[g]);
        assigned[best] += size;
        group_counts[best] += 1;
    }
    for p in &mut parts {
        p.sort_unstable();
    }

    // leakage check: key sets must be pairwise disjoint
    let mut seen: HashMap<&GroupKey, usize> = HashMap::new();
    for (k, part) in parts.iter().enumerate() {
        for &i in part {
            match seen.get(&keys[i]) {
                Some(&owner) => assert_eq!(
                    owner, k,
                    "group split produced a key straddling partitions"
                ),
                None => {
                    seen.insert(&keys[i], k);
                }
            }
        }
    }

    let partitions = (0..3)
        .map(|k| {
            let mut class_counts = [0usize; 2];
            for &i in &parts[k] {
                class_counts[labels[i] as usize] += 1;
            }
            PartitionStats {
                name: PARTITION_NAMES[k],
                samples: parts[k].len(),
                unique_groups: Some(group_counts[k]),
                class_counts,
            }
        })
        .collect();

    let report = SplitReport {
        partitions,
        leakage: "none".to_string(),
        seed,
        oversized_group: oversized,
    };
    Ok((parts, report))
}

/// Write partition assignments as the two-column interchange format
/// (`row id<TAB>partition name`), so external baselines can consume the
/// identical split.
pub fn write_assignments(
    path: &std::path::Path,
    ids: &[u64],
    parts: &[Vec<usize>; 3],
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, part) in parts.iter().enumerate() {
        for &i in part {
            writeln!(f, "{}\t{}", ids[i], PARTITION_NAMES[k])?;
        }
    }
    f.flush()?;
    Ok(())
}
