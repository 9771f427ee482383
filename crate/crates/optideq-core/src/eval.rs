//! Metrics, error-overlap analyses and latency accounting.
//!
//! Everything here is a pure function over prediction vectors, so model
//! pairs can be analysed concurrently and every derived number in a report
//! can be recomputed from the persisted predictions. External published
//! figures (the tree-model rows of the reference tables) are carried as
//! flagged constants and never enter computed aggregates.

use crate::error::{Error, Result};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write as _};
use std::path::Path;
use std::time::Instant;

/// Arithmetic mean of per-class recall.
pub fn balanced_accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::config("prediction/label length mismatch"));
    }
    let cm = confusion_counts(preds, labels);
    let n0 = cm[0][0] + cm[0][1];
    let n1 = cm[1][0] + cm[1][1];
    if n0 == 0 || n1 == 0 {
        return Err(Error::config(
            "balanced accuracy needs both classes present in the labels",
        ));
    }
    let recall0 = cm[0][0] as f64 / n0 as f64;
    let recall1 = cm[1][1] as f64 / n1 as f64;
    Ok(0.5 * (recall0 + recall1))
}

/// `counts[label][pred]`.
pub fn confusion_counts(preds: &[u8], labels: &[u8]) -> [[usize; 2]; 2] {
    let mut cm = [[0usize; 2]; 2];
    for (&p, &l) in preds.iter().zip(labels) {
        cm[l as usize][p as usize] += 1;
    }
    cm
}

/// Positions where prediction and label disagree.
pub fn error_set(preds: &[u8], labels: &[u8], ids: &[u64]) -> BTreeSet<u64> {
    preds
        .iter()
        .zip(labels)
        .zip(ids)
        .filter(|((p, l), _)| p != l)
        .map(|(_, &id)| id)
        .collect()
}

/// Error-set overlap between two models on the same evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapReport {
    pub shared: usize,
    pub only_a: usize,
    pub only_b: usize,
    pub jaccard: f64,
}

pub fn error_overlap(err_a: &BTreeSet<u64>, err_b: &BTreeSet<u64>) -> OverlapReport {
    let shared = err_a.intersection(err_b).count();
    let union = err_a.len() + err_b.len() - shared;
    OverlapReport {
        shared,
        only_a: err_a.len() - shared,
        only_b: err_b.len() - shared,
        // two perfect models agree: 0/0 is defined as 1
        jaccard: if union == 0 {
            1.0
        } else {
            shared as f64 / union as f64
        },
    }
}

/// McNemar's test on paired predictions.
///
/// `b` counts rows A gets right and B wrong, `c` the reverse. The statistic
/// is the continuity-corrected `(|b - c| - 1)^2 / (b + c)` referred to
/// chi-square with one degree of freedom. With no discordant pairs `p = 1`;
/// with fewer than [`MCNEMAR_EXACT_BELOW`] discordant pairs the p-value
/// comes from the exact two-sided binomial instead of the asymptotic tail.
#[derive(Debug, Clone, PartialEq)]
pub struct McNemarResult {
    pub b: usize,
    pub c: usize,
    pub statistic: f64,
    pub p: f64,
}

/// Discordant-pair count below which the exact binomial path is used.
pub const MCNEMAR_EXACT_BELOW: usize = 10;

pub fn mcnemar(preds_a: &[u8], preds_b: &[u8], labels: &[u8]) -> Result<McNemarResult> {
    if preds_a.len() != labels.len() || preds_b.len() != labels.len() {
        return Err(Error::config("prediction/label length mismatch"));
    }
    let mut b = 0usize;
    let mut c = 0usize;
    for i in 0..labels.len() {
        let a_right = preds_a[i] == labels[i];
        let b_right = preds_b[i] == labels[i];
        match (a_right, b_right) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    let n = b + c;
    let statistic = if n == 0 {
        0.0
    } else {
        let diff = (b as f64 - c as f64).abs() - 1.0;
        diff.max(0.0).powi(2) / n as f64
    };
    let p = if n == 0 {
        1.0
    } else if n < MCNEMAR_EXACT_BELOW {
        binomial_two_sided(b.min(c), n)
    } else {
        chi2_survival_df1(statistic)
    };
    Ok(McNemarResult { b, c, statistic, p })
}

/// Two-sided exact binomial p-value: `min(1, 2 * P(X <= k))` for
/// `X ~ Binomial(n, 1/2)`.
fn binomial_two_sided(k: usize, n: usize) -> f64 {
    let mut tail = 0.0f64;
    let mut coef = 1.0f64; // C(n, 0)
    for i in 0..=k {
        if i > 0 {
            coef = coef * (n - i + 1) as f64 / i as f64;
        }
        tail += coef;
    }
    let p = 2.0 * tail * 0.5f64.powi(n as i32);
    p.min(1.0)
}

/// Upper tail of chi-square with one degree of freedom: `erfc(sqrt(x/2))`.
pub fn chi2_survival_df1(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    erfc((x / 2.0).sqrt())
}

/// Complementary error function via the regularized incomplete gamma
/// function `Q(1/2, x^2)` (series for small arguments, Lentz continued
/// fraction otherwise). Double-precision accurate; no statistics library
/// involved.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    gammq_half(x * x)
}

const LN_GAMMA_HALF: f64 = 0.5723649429247001; // ln sqrt(pi)

fn gammq_half(x: f64) -> f64 {
    const A: f64 = 0.5;
    if x == 0.0 {
        return 1.0;
    }
    if x < A + 1.0 {
        // P(a, x) by series, return 1 - P
        let mut ap = A;
        let mut sum = 1.0 / A;
        let mut del = sum;
        for _ in 0..300 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        1.0 - sum * (-x + A * x.ln() - LN_GAMMA_HALF).exp()
    } else {
        // Q(a, x) by continued fraction (modified Lentz)
        const FPMIN: f64 = 1e-300;
        let mut b = x + 1.0 - A;
        let mut c = 1.0 / FPMIN;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..300 {
            let an = -(i as f64) * (i as f64 - A);
            b += 2.0;
            d = an * d + b;
            if d.abs() < FPMIN {
                d = FPMIN;
            }
            c = b + an / c;
            if c.abs() < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x + A * x.ln() - LN_GAMMA_HALF).exp() * h
    }
}

/// Mean and sample standard deviation over seeds. A single seed has no
/// spread to report, so `std` is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedStats {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

pub fn aggregate_seeds(values: &[f64]) -> Result<SeedStats> {
    if values.is_empty() {
        return Err(Error::config("no seed values to aggregate"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n >= 2 {
        let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        Some((ss / (n - 1) as f64).sqrt())
    } else {
        None
    };
    Ok(SeedStats { mean, std, n })
}

/// Projected optical recurrence time: blocks are time-multiplexed on one
/// core, so the total is exactly `n_blocks * iterations * pass_time_ns`.
pub fn latency_projection(n_blocks: usize, iterations: usize, pass_time_ns: f64) -> f64 {
    n_blocks as f64 * iterations as f64 * pass_time_ns
}

/// Wall-clock timing mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    /// Total time over all rows divided by the row count.
    Batch,
    /// Median of per-row timings.
    Single,
}

impl BenchMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BenchMode::Batch => "batch",
            BenchMode::Single => "single",
        }
    }
}

#[derive(Debug, Clone)]
pub struct WallclockReport {
    pub mode: BenchMode,
    pub rows: usize,
    pub per_sample_ns: f64,
    pub warmup_passes: usize,
    /// `os/arch` of the measuring host.
    pub platform: String,
}

/// Time `predict_row` over `rows` inputs. Three warm-up passes run first and
/// are discarded.
pub fn wallclock_bench(
    mut predict_row: impl FnMut(usize),
    rows: usize,
    mode: BenchMode,
) -> Result<WallclockReport> {
    if rows == 0 {
        return Err(Error::config("wallclock_bench needs at least one row"));
    }
    let warmup_passes = 3;
    for _ in 0..warmup_passes {
        for i in 0..rows {
            predict_row(i);
        }
    }
    let per_sample_ns = match mode {
        BenchMode::Batch => {
            let start = Instant::now();
            for i in 0..rows {
                predict_row(i);
            }
            start.elapsed().as_nanos() as f64 / rows as f64
        }
        BenchMode::Single => {
            let mut times: Vec<f64> = (0..rows)
                .map(|i| {
                    let start = Instant::now();
                    predict_row(i);
                    start.elapsed().as_nanos() as f64
                })
                .collect();
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mid = times.len() / 2;
            if times.len() % 2 == 1 {
                times[mid]
            } else {
                0.5 * (times[mid - 1] + times[mid])
            }
        }
    };
    Ok(WallclockReport {
        mode,
        rows,
        per_sample_ns,
        warmup_passes,
        platform: format!("{}/{}", std::env::consts::OS, std::env::consts::ARCH),
    })
}

/// One model's persisted predictions: aligned ids, labels, predicted classes
/// and the raw logit pair.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub name: String,
    pub ids: Vec<u64>,
    pub labels: Vec<u8>,
    pub preds: Vec<u8>,
    pub logits: Vec<[f64; 2]>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn errors(&self) -> BTreeSet<u64> {
        error_set(&self.preds, &self.labels, &self.ids)
    }

    pub fn balanced_accuracy(&self) -> Result<f64> {
        balanced_accuracy(&self.preds, &self.labels)
    }

    /// Tab-separated: `id  label  pred  logit0  logit1`, with a `# model`
    /// header line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# optideq-predictions v1\tmodel={}", self.name)?;
        for i in 0..self.len() {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}",
                self.ids[i], self.labels[i], self.preds[i], self.logits[i][0], self.logits[i][1]
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<PredictionSet> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("empty prediction file"))??;
        if !header.starts_with("# optideq-predictions v1") {
            return Err(Error::format("missing prediction header"));
        }
        let name = header
            .split("model=")
            .nth(1)
            .unwrap_or("unnamed")
            .to_string();
        let mut set = PredictionSet {
            name,
            ids: Vec::new(),
            labels: Vec::new(),
            preds: Vec::new(),
            logits: Vec::new(),
        };
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 5 {
                return Err(Error::format(format!("bad prediction row: `{line}`")));
            }
            set.ids.push(parts[0].parse().map_err(|_| Error::format("bad id"))?);
            set.labels
                .push(parts[1].parse().map_err(|_| Error::format("bad label"))?);
            set.preds
                .push(parts[2].parse().map_err(|_| Error::format("bad pred"))?);
            let l0: f64 = parts[3].parse().map_err(|_| Error::format("bad logit"))?;
            let l1: f64 = parts[4].parse().map_err(|_| Error::format("bad logit"))?;
            set.logits.push([l0, l1]);
        }
        Ok(set)
    }

    /// Check row-id alignment with another set; reports the first divergence.
    pub fn check_aligned(&self, other: &PredictionSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::data(format!(
                "prediction sets differ in length: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for i in 0..self.len() {
            if self.ids[i] != other.ids[i] {
                return Err(Error::data(format!(
                    "row-id mismatch at position {i}: {} vs {}",
                    self.ids[i], other.ids[i]
                )));
            }
        }
        Ok(())
    }
}

/// Majority vote of two models; on disagreement the first-listed model's
/// prediction wins. For a pair this tie-break makes the vote coincide with
/// the first model's predictions, which is exactly the documented rule.
pub fn majority_vote_pair(a: &PredictionSet, b: &PredictionSet) -> Result<Vec<u8>> {
    a.check_aligned(b)?;
    Ok(a.preds.clone())
}

/// A published reference figure carried into reports but never recomputed.
#[derive(Debug, Clone)]
pub struct PublishedConstant {
    pub label: String,
    pub value: f64,
    pub unit: &'static str,
}

/// Reference rows from the published comparison: the externally trained
/// tree model and the measured digital latencies.
pub fn published_reference_rows() -> Vec<PublishedConstant> {
    let c = |label: &str, value: f64, unit: &'static str| PublishedConstant {
        label: label.to_string(),
        value,
        unit,
    };
    vec![
        c("xgboost.raw.bacc", 97.91, "%"),
        c("xgboost.binarized.bacc", 89.51, "%"),
        c("xgboost.params.approx", 31_500.0, "count"),
        c("xgboost.latency.cpu.batch", 3.7, "us/sample"),
        c("xgboost.latency.cpu.single", 190.0, "us/sample"),
        c("xgboost.latency.gpu.batch", 0.14, "us/sample"),
        c("xgboost.latency.gpu.single", 1731.0, "us/sample"),
        c("mlp_small.latency.cpu.batch", 0.31, "us/sample"),
        c("mlp_small.latency.cpu.single", 11.8, "us/sample"),
        c("mlp_small.latency.gpu.single", 39.0, "us/sample"),
    ]
}

/// Aggregated evaluation of one model family over its seeds.
#[derive(Debug, Clone)]
pub struct ModelSummary {
    pub name: String,
    pub per_seed: Vec<f64>,
    pub stats: SeedStats,
    pub confusion: [[usize; 2]; 2],
    pub error_count: usize,
}

/// Pairwise analysis between two prediction sets.
#[derive(Debug, Clone)]
pub struct PairAnalysis {
    pub a: String,
    pub b: String,
    pub overlap: OverlapReport,
    pub mcnemar: McNemarResult,
    pub vote_bacc: f64,
}

/// Full evaluation report: per-model aggregates, pairwise analyses, latency
/// projections and flagged published constants.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub models: Vec<ModelSummary>,
    pub pairs: Vec<PairAnalysis>,
    pub latency_ns: Vec<(String, f64)>,
    pub wallclock: Vec<(String, WallclockReport)>,
    pub published: Vec<PublishedConstant>,
}

impl EvalReport {
    /// Summaries from one prediction set per (model, seed); pairwise rows
    /// compare the first seed of each distinct model name.
    pub fn build(sets_per_model: &[(&str, Vec<&PredictionSet>)]) -> Result<EvalReport> {
        let mut report = EvalReport::default();
        for (name, sets) in sets_per_model {
            let per_seed: Vec<f64> = sets
                .iter()
                .map(|s| s.balanced_accuracy())
                .collect::<Result<_>>()?;
            let stats = aggregate_seeds(&per_seed)?;
            let first = sets.first().ok_or_else(|| Error::config("model with no seeds"))?;
            report.models.push(ModelSummary {
                name: name.to_string(),
                per_seed,
                stats,
                confusion: confusion_counts(&first.preds, &first.labels),
                error_count: first.errors().len(),
            });
        }
        for i in 0..sets_per_model.len() {
            for j in (i + 1)..sets_per_model.len() {
                let a = sets_per_model[i].1[0];
                let b = sets_per_model[j].1[0];
                a.check_aligned(b)?;
                let overlap = error_overlap(&a.errors(), &b.errors());
                let mc = mcnemar(&a.preds, &b.preds, &a.labels)?;
                let vote = majority_vote_pair(a, b)?;
                let vote_bacc = balanced_accuracy(&vote, &a.labels)?;
                report.pairs.push(PairAnalysis {
                    a: a.name.clone(),
                    b: b.name.clone(),
                    overlap,
                    mcnemar: mc,
                    vote_bacc,
                });
            }
        }
        Ok(report)
    }

    /// Human-readable rendering.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "== models ==");
        for m in &self.models {
            let spread = match m.stats.std {
                Some(s) => format!(" +/- {:.4}", s),
                None => String::new(),
            };
            let _ = writeln!(
                out,
                "{:<28} bacc {:.4}{} over {} seed(s), {} errors (seed 0), confusion {:?}",
                m.name, m.stats.mean, spread, m.stats.n, m.error_count, m.confusion
            );
        }
        if !self.pairs.is_empty() {
            let _ = writeln!(out, "== pairwise ==");
            for p in &self.pairs {
                let _ = writeln!(
                    out,
                    "{} vs {}: shared {} onlyA {} onlyB {} jaccard {:.3} | mcnemar b={} c={} stat={:.3} p={:.4} | vote bacc {:.4}",
                    p.a,
                    p.b,
                    p.overlap.shared,
                    p.overlap.only_a,
                    p.overlap.only_b,
                    p.overlap.jaccard,
                    p.mcnemar.b,
                    p.mcnemar.c,
                    p.mcnemar.statistic,
                    p.mcnemar.p,
                    p.vote_bacc
                );
            }
        }
        if !self.latency_ns.is_empty() {
            let _ = writeln!(out, "== latency projections ==");
            for (label, ns) in &self.latency_ns {
                let _ = writeln!(out, "{label}: {ns} ns");
            }
        }
        if !self.wallclock.is_empty() {
            let _ = writeln!(out, "== wall-clock ==");
            for (label, w) in &self.wallclock {
                let _ = writeln!(
                    out,
                    "{label}: {:.1} ns/sample ({} mode, {} rows, {})",
                    w.per_sample_ns,
                    w.mode.as_str(),
                    w.rows,
                    w.platform
                );
            }
        }
        if !self.published.is_empty() {
            let _ = writeln!(out, "== published reference figures (not reproduced) ==");
            for p in &self.published {
                let _ = writeln!(out, "{} = {} {} [published]", p.label, p.value, p.unit);
            }
        }
        out
    }

    /// Machine-readable key-value rendering.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        for m in &self.models {
            let _ = writeln!(out, "model.{}.bacc.mean {}", m.name, m.stats.mean);
            if let Some(s) = m.stats.std {
                let _ = writeln!(out, "model.{}.bacc.std {}", m.name, s);
            }
            let _ = writeln!(out, "model.{}.seeds {}", m.name, m.stats.n);
            let _ = writeln!(out, "model.{}.errors {}", m.name, m.error_count);
        }
        for p in &self.pairs {
            let key = format!("pair.{}.{}", p.a, p.b);
            let _ = writeln!(out, "{key}.jaccard {}", p.overlap.jaccard);
            let _ = writeln!(out, "{key}.shared {}", p.overlap.shared);
            let _ = writeln!(out, "{key}.mcnemar.b {}", p.mcnemar.b);
            let _ = writeln!(out, "{key}.mcnemar.c {}", p.mcnemar.c);
            let _ = writeln!(out, "{key}.mcnemar.stat {}", p.mcnemar.statistic);
            let _ = writeln!(out, "{key}.mcnemar.p {}", p.mcnemar.p);
            let _ = writeln!(out, "{key}.vote.bacc {}", p.vote_bacc);
        }
        for (label, ns) in &self.latency_ns {
            let _ = writeln!(out, "latency.{label}.ns {ns}");
        }
        for (label, w) in &self.wallclock {
            let _ = writeln!(out, "wallclock.{label}.ns_per_sample {}", w.per_sample_ns);
            let _ = writeln!(out, "wallclock.{label}.mode {}", w.mode.as_str());
            let _ = writeln!(out, "wallclock.{label}.rows {}", w.rows);
        }
        for p in &self.published {
            let _ = writeln!(out, "published.{} {}", p.label, p.value);
        }
        out
    }

    /// Plot-ready long-format table: `series<TAB>x<TAB>y`.
    pub fn render_long_table(&self) -> String {
        let mut out = String::from("series\tx\ty\n");
        for m in &self.models {
            for (seed, v) in m.per_seed.iter().enumerate() {
                let _ = writeln!(out, "bacc.{}\t{seed}\t{v}", m.name);
            }
        }
        for p in &self.pairs {
            let _ = writeln!(out, "jaccard\t{}|{}\t{}", p.a, p.b, p.overlap.jaccard);
        }
        out
    }
}
