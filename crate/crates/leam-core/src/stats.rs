//! Descriptive statistics, the Mann-Whitney U test, demographic grouping, and
//! the same-vs-different-identity map-similarity tables.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::mapsim::{bhattacharyya, emd_downsampled, ProbabilityMap};
use crate::occlusion::fnv1a64;
use crate::{Error, Result};

/// Std/mean/min/max plus the coefficient of variation. The standard deviation
/// is the population form (divisor n); `cv` is `None` when the mean is too
/// close to zero to divide by.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSummary {
    pub std: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub cv: Option<f64>,
}

pub fn summarize(series: &[f64]) -> Result<SeriesSummary> {
    if series.is_empty() {
        return Err(Error::Empty("summarize on empty series".into()));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let variance = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = variance.sqrt();
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cv = if mean > 1e-12 {
        Some(std / mean * 100.0)
    } else {
        None
    };
    Ok(SeriesSummary {
        std,
        mean,
        min,
        max,
        cv,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    TwoSided,
    Greater,
    Less,
}

impl Alternative {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two-sided" => Ok(Self::TwoSided),
            "greater" => Ok(Self::Greater),
            "less" => Ok(Self::Less),
            other => Err(Error::Format(format!("unknown alternative {other:?}"))),
        }
    }
}

/// Mann-Whitney U test. `U` counts pairs where `x > y` plus half the ties.
///
/// The p-value is exact (full null distribution of U) when `n + m <= 12` and
/// the pooled sample has no ties; otherwise the normal approximation with tie
/// and continuity corrections is used.
pub fn mann_whitney_u(x: &[f64], y: &[f64], alternative: Alternative) -> Result<(f64, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Empty("mann_whitney_u needs both samples".into()));
    }
    let (n, m) = (x.len(), y.len());
    let mut u = 0.0;
    for &a in x {
        for &b in y {
            if a > b {
                u += 1.0;
            } else if a == b {
                u += 0.5;
            }
        }
    }
    let mut pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let has_ties = pooled.windows(2).any(|w| w[0] == w[1]);

    let p = if n + m <= 12 && !has_ties {
        exact_p(u as usize, n, m, alternative)
    } else {
        normal_approx_p(u, n, m, &pooled, alternative)?
    };
    Ok((u, p.min(1.0)))
}

/// Null distribution counts of U for sample sizes (n, m): the number of
/// arrangements with statistic u, via the standard recurrence on whether the
/// largest pooled value is an x (contributing m) or a y (contributing 0).
fn u_distribution(n: usize, m: usize) -> Vec<f64> {
    let mut table: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); m + 1]; n + 1];
    for (i, row) in table.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let max_u = i * j;
            *cell = vec![0.0; max_u + 1];
            if i == 0 || j == 0 {
                cell[0] = 1.0;
            }
        }
    }
    for i in 1..=n {
        for j in 1..=m {
            for u in 0..=i * j {
                let mut total = 0.0;
                if u >= j {
                    total += table[i - 1][j][u - j];
                }
                if u <= i * (j - 1) {
                    total += table[i][j - 1][u];
                }
                table[i][j][u] = total;
            }
        }
    }
    table[n][m].clone()
}

fn exact_p(u: usize, n: usize, m: usize, alternative: Alternative) -> f64 {
    let counts = u_distribution(n, m);
    let total: f64 = counts.iter().sum();
    let p_le: f64 = counts[..=u].iter().sum::<f64>() / total;
    let p_ge: f64 = counts[u..].iter().sum::<f64>() / total;
    match alternative {
        Alternative::Greater => p_ge,
        Alternative::Less => p_le,
        Alternative::TwoSided => (2.0 * p_le.min(p_ge)).min(1.0),
    }
}

fn normal_approx_p(
    u: f64,
    n: usize,
    m: usize,
    pooled_sorted: &[f64],
    alternative: Alternative,
) -> Result<f64> {
    let nn = n as f64;
    let mm = m as f64;
    let total = nn + mm;
    let mu = nn * mm / 2.0;
    // Tie correction over pooled tie groups.
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled_sorted.len() {
        let mut j = i + 1;
        while j < pooled_sorted.len() && pooled_sorted[j] == pooled_sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let variance = nn * mm / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
    if variance <= 0.0 {
        // Every value tied: U is forced to nm/2 and carries no evidence.
        return Ok(1.0);
    }
    let sigma = variance.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p_greater = 1.0 - normal.cdf((u - mu - 0.5) / sigma);
    let p_less = normal.cdf((u - mu + 0.5) / sigma);
    Ok(match alternative {
        Alternative::Greater => p_greater,
        Alternative::Less => p_less,
        Alternative::TwoSided => (2.0 * p_greater.min(p_less)).min(1.0),
    })
}

/// One-sided paired Student-t test that `mean(x - y) > 0`.
/// Returns `(t, p)`; the standard deviation uses divisor n-1.
pub fn paired_t_greater(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "paired test: {} vs {} samples",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Empty("paired test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Ok((f64::INFINITY, if mean > 0.0 { 0.0 } else { 1.0 }));
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid dof");
    Ok((t, 1.0 - dist.cdf(t)))
}

// ---------------------------------------------------------------------------
// Demographics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ethnicity {
    Caucasian,
    African,
    #[serde(rename = "East Asian")]
    EastAsian,
    #[serde(rename = "South Asian")]
    SouthAsian,
}

impl Ethnicity {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Caucasian => "Caucasian",
            Self::African => "African",
            Self::EastAsian => "East Asian",
            Self::SouthAsian => "South Asian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicAttributes {
    pub gender: Gender,
    pub ethnicity: Ethnicity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PairKind {
    SameIdentity,
    DifferentIdentity,
}

impl PairKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SameIdentity => "same-identity",
            Self::DifferentIdentity => "different-identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Gender,
    Ethnicity,
    AgeDifference,
}

impl GroupKey {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gender" => Ok(Self::Gender),
            "ethnicity" => Ok(Self::Ethnicity),
            "age-difference" => Ok(Self::AgeDifference),
            other => Err(Error::Format(format!("unknown group key {other:?}"))),
        }
    }
}

/// A record to be grouped: a value plus the attributes of the pair's two
/// sides (the positive side matters only for age differences).
pub struct GroupRecord<'a> {
    pub value: f64,
    pub anchor: Option<&'a DemographicAttributes>,
    pub positive: Option<&'a DemographicAttributes>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedMean {
    pub group: String,
    pub mean: f64,
    pub count: usize,
}

/// Per-group means; records missing the needed attribute are excluded and
/// counted. Groups come out sorted by name and are never empty.
pub fn group_by(records: &[GroupRecord], key: GroupKey) -> (Vec<GroupedMean>, usize) {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut excluded = 0usize;
    for record in records {
        let group = match key {
            GroupKey::Gender => record.anchor.map(|a| format!("{:?}", a.gender)),
            GroupKey::Ethnicity => record.anchor.map(|a| a.ethnicity.name().to_string()),
            GroupKey::AgeDifference => match (
                record.anchor.and_then(|a| a.age),
                record.positive.and_then(|a| a.age),
            ) {
                (Some(a), Some(b)) => Some(format!("{:02}", a.abs_diff(b))),
                _ => None,
            },
        };
        match group {
            Some(g) => {
                let entry = sums.entry(g).or_insert((0.0, 0));
                entry.0 += record.value;
                entry.1 += 1;
            }
            None => excluded += 1,
        }
    }
    let groups = sums
        .into_iter()
        .map(|(group, (sum, count))| GroupedMean {
            group,
            mean: sum / count as f64,
            count,
        })
        .collect();
    (groups, excluded)
}

// ---------------------------------------------------------------------------
// Same/different identity BC+EMD tables
// ---------------------------------------------------------------------------

/// One aligned, sum-normalized map with its provenance.
pub struct MapEntry {
    pub identity: String,
    pub image_id: String,
    pub layer: String,
    pub model: String,
    pub map: ProbabilityMap,
}

#[derive(Debug, Clone)]
pub struct BcEmdRow {
    pub layer: String,
    pub model: String,
    pub kind: PairKind,
    pub mean_bc: f64,
    pub mean_emd: f64,
    pub pair_count: usize,
}

pub struct BcEmdOptions {
    pub emd_grid: usize,
    /// Seed for different-identity counterpart sampling.
    pub seed: u64,
    /// Counterpart identities sampled per identity.
    pub sample_size: usize,
}

impl Default for BcEmdOptions {
    fn default() -> Self {
        Self {
            emd_grid: 32,
            seed: 0,
            sample_size: 10,
        }
    }
}

/// Mean BC and EMD per (layer, model), pooled over within-identity pairs
/// (same kind) or seeded cross-identity samples (different kind). Rows come
/// out sorted by (layer, model); identities with fewer than two images are
/// skipped with a warning for the same-identity table.
pub fn pairwise_bc_emd_table(
    entries: &[MapEntry],
    kind: PairKind,
    options: &BcEmdOptions,
) -> Result<(Vec<BcEmdRow>, Vec<String>)> {
    let mut groups: BTreeMap<(String, String), BTreeMap<&str, Vec<&MapEntry>>> = BTreeMap::new();
    for entry in entries {
        groups
            .entry((entry.layer.clone(), entry.model.clone()))
            .or_default()
            .entry(entry.identity.as_str())
            .or_default()
            .push(entry);
    }
    let mut warnings: BTreeSet<String> = BTreeSet::new();
    let mut rows = Vec::new();
    for ((layer, model), identities) in groups {
        let mut bc_sum = 0.0;
        let mut emd_sum = 0.0;
        let mut count = 0usize;
        match kind {
            PairKind::SameIdentity => {
                for (identity, maps) in &identities {
                    if maps.len() < 2 {
                        warnings.insert(format!(
                            "identity {identity} has fewer than 2 images; skipped"
                        ));
                        continue;
                    }
                    for i in 0..maps.len() {
                        for j in i + 1..maps.len() {
                            bc_sum += bhattacharyya(&maps[i].map, &maps[j].map)?;
                            emd_sum +=
                                emd_downsampled(&maps[i].map, &maps[j].map, options.emd_grid)?
                                    .value;
                            count += 1;
                        }
                    }
                }
            }
            PairKind::DifferentIdentity => {
                let names: Vec<&str> = identities.keys().copied().collect();
                let stream = options.seed ^ fnv1a64(format!("{layer}|{model}").as_bytes());
                let mut rng = Xoshiro256StarStar::seed_from_u64(stream);
                for (identity, maps) in &identities {
                    let mut others: Vec<&str> =
                        names.iter().copied().filter(|n| n != identity).collect();
                    others.shuffle(&mut rng);
                    others.truncate(options.sample_size);
                    others.sort_unstable();
                    for other in others {
                        for a in maps {
                            for b in &identities[other] {
                                bc_sum += bhattacharyya(&a.map, &b.map)?;
                                emd_sum +=
                                    emd_downsampled(&a.map, &b.map, options.emd_grid)?.value;
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        if count > 0 {
            rows.push(BcEmdRow {
                layer,
                model,
                kind,
                mean_bc: bc_sum / count as f64,
                mean_emd: emd_sum / count as f64,
                pair_count: count,
            });
        }
    }
    Ok((rows, warnings.into_iter().collect()))
}
