//! `leam stats`: descriptive summaries, demographic grouping, and
//! Mann-Whitney testing over outcome or report CSVs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use leam_core::manifest::{load_manifest, Manifest};
use leam_core::stats::{
    group_by, mann_whitney_u, summarize, Alternative, GroupKey, GroupRecord,
};
use leam_core::{fmt_sci, fmt_sig};

use crate::common::{ensure_dir, finish_run, parse_pair_id, write_csv};

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Input CSV: either `outcomes.csv` from occlude or `reports.csv` from
    /// correlate (detected by header).
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Group values by a demographic key (needs --manifest for attributes).
    #[arg(long, value_parser = ["gender", "ethnicity", "age-difference"])]
    pub group_by: Option<String>,
    /// Manifest supplying demographic attributes for grouping and tests.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Statistical test over the two groups selected by --group-by.
    #[arg(long, value_parser = ["mann-whitney"])]
    pub test: Option<String>,
    /// Test alternative hypothesis.
    #[arg(long, default_value = "two-sided", value_parser = ["two-sided", "greater", "less"])]
    pub alternative: String,
}

struct OutcomeRow {
    pair_id: String,
    mode: String,
    percent: f64,
    drop: f64,
}

struct ReportRow {
    class: String,
    relative_percent: f64,
}

enum Input {
    Outcomes(Vec<OutcomeRow>),
    Reports(Vec<ReportRow>),
}

fn field_index(header: &str, name: &str) -> Option<usize> {
    header.split(',').position(|f| f == name)
}

fn parse_input(text: &str) -> Result<(Input, usize)> {
    let mut lines = text.lines();
    let header = lines.next().context("empty input CSV")?;
    let mut skipped = 0usize;
    if let (Some(pair), Some(mode), Some(percent), Some(drop)) = (
        field_index(header, "pair_id"),
        field_index(header, "mode"),
        field_index(header, "percent"),
        field_index(header, "drop"),
    ) {
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let parsed = (|| {
                Some(OutcomeRow {
                    pair_id: fields.get(pair)?.to_string(),
                    mode: fields.get(mode)?.to_string(),
                    percent: fields.get(percent)?.parse().ok()?,
                    drop: fields.get(drop)?.parse().ok()?,
                })
            })();
            match parsed {
                Some(row) => rows.push(row),
                None => skipped += 1,
            }
        }
        return Ok((Input::Outcomes(rows), skipped));
    }
    if let (Some(class), Some(relative)) = (
        field_index(header, "class"),
        field_index(header, "relative_percent"),
    ) {
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let parsed = (|| {
                Some(ReportRow {
                    class: fields.get(class)?.to_string(),
                    relative_percent: fields.get(relative)?.parse().ok()?,
                })
            })();
            match parsed {
                Some(row) => rows.push(row),
                None => skipped += 1,
            }
        }
        return Ok((Input::Reports(rows), skipped));
    }
    anyhow::bail!("unrecognized CSV header: {header}")
}

pub fn run(args: &StatsArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let (input, skipped) = parse_input(&text)?;
    ensure_dir(&args.out)?;
    let mut errors: Vec<String> = Vec::new();
    if skipped > 0 {
        errors.push(format!("{skipped} malformed rows skipped"));
    }

    let manifest = match &args.manifest {
        Some(path) => Some(load_manifest(path)?),
        None => None,
    };

    let produced = match &input {
        Input::Reports(rows) => {
            if args.group_by.is_some() || args.test.is_some() {
                anyhow::bail!("grouping and testing apply to outcome CSVs");
            }
            // Per-class summary of relative percentages (the per-individual
            // statistics table shape).
            let mut by_class: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for row in rows {
                by_class
                    .entry(row.class.as_str())
                    .or_default()
                    .push(row.relative_percent);
            }
            let mut lines = Vec::new();
            for (class, values) in by_class {
                let s = summarize(&values)?;
                lines.push(format!(
                    "{class},{},{},{},{},{}",
                    fmt_sig(s.std),
                    fmt_sig(s.mean),
                    fmt_sig(s.min),
                    fmt_sig(s.max),
                    s.cv.map(fmt_sig).unwrap_or_default(),
                ));
            }
            write_csv(
                &args.out.join("summary.csv"),
                "class,std,mean,min,max,cv",
                &lines,
            )?;
            lines.len()
        }
        Input::Outcomes(rows) => {
            // Summary per (mode, percent).
            let mut cells: BTreeMap<(&str, u64), Vec<f64>> = BTreeMap::new();
            for row in rows {
                cells
                    .entry((row.mode.as_str(), row.percent.to_bits()))
                    .or_default()
                    .push(row.drop);
            }
            let mut lines = Vec::new();
            for ((mode, percent_bits), values) in &cells {
                let s = summarize(values)?;
                lines.push(format!(
                    "{mode},{},{},{},{},{},{}",
                    fmt_sig(f64::from_bits(*percent_bits)),
                    fmt_sig(s.std),
                    fmt_sig(s.mean),
                    fmt_sig(s.min),
                    fmt_sig(s.max),
                    s.cv.map(fmt_sig).unwrap_or_default(),
                ));
            }
            write_csv(
                &args.out.join("summary.csv"),
                "mode,percent,std,mean,min,max,cv",
                &lines,
            )?;
            let mut produced = lines.len();

            if let Some(key_name) = &args.group_by {
                let key = GroupKey::parse(key_name).map_err(anyhow::Error::from)?;
                let manifest = manifest
                    .as_ref()
                    .context("--group-by needs --manifest for attributes")?;
                produced += write_grouped_and_tests(args, manifest, rows, key, &mut errors)?;
            } else if args.test.is_some() {
                anyhow::bail!("--test needs --group-by to define the two samples");
            }
            produced
        }
    };

    finish_run(&args.out, errors, produced)
}

fn write_grouped_and_tests(
    args: &StatsArgs,
    manifest: &Manifest,
    rows: &[OutcomeRow],
    key: GroupKey,
    errors: &mut Vec<String>,
) -> Result<usize> {
    let attributes_of = |pair_id: &str, anchor_side: bool| {
        let (identity, anchor, positive) = parse_pair_id(pair_id)?;
        let stem = if anchor_side { anchor } else { positive };
        manifest
            .identity(identity)
            .ok()?
            .images
            .iter()
            .find(|img| img.stem() == stem)
            .and_then(|img| img.attributes.as_ref())
    };

    let mut cells: BTreeMap<(&str, u64), Vec<&OutcomeRow>> = BTreeMap::new();
    for row in rows {
        cells
            .entry((row.mode.as_str(), row.percent.to_bits()))
            .or_default()
            .push(row);
    }

    let mut grouped_lines = Vec::new();
    let mut test_lines = Vec::new();
    let alternative = Alternative::parse(&args.alternative).map_err(anyhow::Error::from)?;
    for ((mode, percent_bits), cell) in &cells {
        let records: Vec<GroupRecord> = cell
            .iter()
            .map(|row| GroupRecord {
                value: row.drop,
                anchor: attributes_of(&row.pair_id, true),
                positive: attributes_of(&row.pair_id, false),
            })
            .collect();
        let (groups, excluded) = group_by(&records, key);
        if excluded > 0 {
            errors.push(format!(
                "{mode}/{}: {excluded} records missing attributes",
                fmt_sig(f64::from_bits(*percent_bits))
            ));
        }
        for group in &groups {
            grouped_lines.push(format!(
                "{},{mode},{},{},{}",
                group.group,
                fmt_sig(f64::from_bits(*percent_bits)),
                fmt_sig(group.mean),
                group.count,
            ));
        }
        if args.test.is_some() {
            // Mann-Whitney over exactly two groups.
            let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for record in &records {
                let name = match key {
                    GroupKey::Gender => record.anchor.map(|a| format!("{:?}", a.gender)),
                    GroupKey::Ethnicity => {
                        record.anchor.map(|a| a.ethnicity.name().to_string())
                    }
                    GroupKey::AgeDifference => match (
                        record.anchor.and_then(|a| a.age),
                        record.positive.and_then(|a| a.age),
                    ) {
                        (Some(a), Some(b)) => Some(format!("{:02}", a.abs_diff(b))),
                        _ => None,
                    },
                };
                if let Some(name) = name {
                    samples.entry(name).or_default().push(record.value);
                }
            }
            if samples.len() == 2 {
                let mut it = samples.into_iter();
                let (name_a, sample_a) = it.next().expect("two groups");
                let (name_b, sample_b) = it.next().expect("two groups");
                let (u, p) = mann_whitney_u(&sample_a, &sample_b, alternative)
                    .map_err(anyhow::Error::from)?;
                test_lines.push(format!(
                    "{mode},{},{name_a},{name_b},{},{},{},{}",
                    fmt_sig(f64::from_bits(*percent_bits)),
                    sample_a.len(),
                    sample_b.len(),
                    fmt_sig(u),
                    fmt_sci(p),
                ));
            } else {
                errors.push(format!(
                    "{mode}/{}: test needs exactly 2 groups, found {}",
                    fmt_sig(f64::from_bits(*percent_bits)),
                    samples.len()
                ));
            }
        }
    }
    let mut produced = grouped_lines.len();
    write_csv(
        &args.out.join("grouped.csv"),
        "group,mode,percent,mean,count",
        &grouped_lines,
    )?;
    if args.test.is_some() {
        produced += test_lines.len();
        write_csv(
            &args.out.join("tests.csv"),
            "mode,percent,group_x,group_y,n_x,n_y,u,p",
            &test_lines,
        )?;
    }
    Ok(produced)
}
