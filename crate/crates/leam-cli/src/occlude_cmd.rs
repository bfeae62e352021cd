//! `leam occlude`: run the validation-occlusion protocol over a manifest and
//! emit per-cell outcomes, the mode/percent summary, and demographic splits.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;

use leam_core::image_io::load_image;
use leam_core::manifest::{load_manifest, Manifest};
use leam_core::occlusion::{occlusion_sweep, OcclusionMode, OcclusionOutcome, SweepConfig, SweepPair};
use leam_core::stats::{group_by, GroupKey, GroupRecord};
use leam_core::fmt_sig;

use crate::common::{
    ensure_dir, finish_run, init_jobs, load_models, manifest_pairs, parse_f64_list,
    parse_pair_id, parse_u64_list, resolve_seed, write_csv,
};

#[derive(Args, Debug)]
pub struct OccludeArgs {
    /// Manifest describing models, identities, and attributes.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to these model ids (default: every manifest model).
    #[arg(long)]
    pub models: Vec<String>,
    /// Comma-separated occlusion percentages.
    #[arg(long, default_value = "0.1,0.5,1,2,5,10")]
    pub percents: String,
    /// Comma-separated mask modes: leam, random, leam-avg.
    #[arg(long, default_value = "leam,random")]
    pub modes: String,
    /// Explicit comma-separated trial seeds (overrides --num-seeds).
    #[arg(long)]
    pub seeds: Option<String>,
    /// Number of trial seeds, numbered seed..seed+N.
    #[arg(long, default_value_t = 1)]
    pub num_seeds: u64,
    /// Model whose maps drive LEAM masks for every listed model.
    #[arg(long)]
    pub transfer_from: Option<String>,
    /// Tagged layer driving LEAM masks (default: first tagged layer).
    #[arg(long)]
    pub layer: Option<String>,
    /// Base seed (default: LEAM_SEED, then the manifest).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker thread cap; output bytes are identical for any value.
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn outcome_row(outcome: &OcclusionOutcome) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        outcome.model_id,
        outcome.pair_id,
        outcome.mode_name(),
        fmt_sig(outcome.percent),
        outcome.seed,
        fmt_sig(outcome.baseline_cosine),
        fmt_sig(outcome.occluded_cosine),
        fmt_sig(outcome.drop),
    )
}

pub fn run(args: &OccludeArgs) -> Result<i32> {
    init_jobs(args.jobs);
    let manifest = load_manifest(&args.manifest)?;
    let seed = resolve_seed(args.seed, manifest.seed);
    let models = load_models(&manifest, &args.models)?;
    let percents = parse_f64_list(&args.percents)?;
    let modes: Vec<OcclusionMode> = args
        .modes
        .split(',')
        .map(|m| OcclusionMode::parse(m.trim()).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = match &args.seeds {
        Some(raw) => parse_u64_list(raw)?,
        None => (0..args.num_seeds.max(1)).map(|i| seed + i).collect(),
    };
    ensure_dir(&args.out)?;
    let mut errors: Vec<String> = Vec::new();

    // Resolve images into sweep pairs.
    let mut pairs: Vec<SweepPair> = Vec::new();
    for spec in manifest_pairs(&manifest) {
        let identity = manifest.identity(&spec.identity)?;
        let anchor_entry = &identity.images[spec.anchor_index];
        let positive_entry = &identity.images[spec.positive_index];
        let anchor = match load_image(&anchor_entry.image) {
            Ok(t) => t,
            Err(e) => {
                errors.push(format!("{}: {e}", anchor_entry.image.display()));
                continue;
            }
        };
        let positive = match load_image(&positive_entry.image) {
            Ok(t) => t,
            Err(e) => {
                errors.push(format!("{}: {e}", positive_entry.image.display()));
                continue;
            }
        };
        pairs.push(SweepPair {
            pair_id: spec.pair_id,
            identity: spec.identity,
            anchor,
            positive,
        });
    }
    if pairs.is_empty() {
        let _ = write_csv(
            &args.out.join("outcomes.csv"),
            "model,pair_id,mode,percent,seed,baseline,occluded,drop",
            &[],
        );
        return finish_run(&args.out, errors, 0);
    }

    let config = SweepConfig {
        models: &models,
        pairs: &pairs,
        percents: &percents,
        modes: &modes,
        seeds: &seeds,
        transfer_from: args.transfer_from.clone(),
        layer: args.layer.clone(),
    };
    let (outcomes, sweep_errors) = occlusion_sweep(&config)?;
    errors.extend(sweep_errors.into_iter().map(|e| format!("{}: {}", e.cell, e.message)));

    let rows: Vec<String> = outcomes.iter().map(outcome_row).collect();
    write_csv(
        &args.out.join("outcomes.csv"),
        "model,pair_id,mode,percent,seed,baseline,occluded,drop",
        &rows,
    )?;

    // Mode x percent summary (the shape of the similarity-drop table).
    let mut cells: BTreeMap<(u64, &str), (f64, usize)> = BTreeMap::new();
    for outcome in &outcomes {
        let cell = cells
            .entry((outcome.percent.to_bits(), outcome.mode_name()))
            .or_insert((0.0, 0));
        cell.0 += outcome.drop;
        cell.1 += 1;
    }
    let mut summary_rows: Vec<((f64, &str), (f64, usize))> = cells
        .into_iter()
        .map(|((bits, mode), v)| ((f64::from_bits(bits), mode), v))
        .collect();
    summary_rows.sort_by(|a, b| {
        a.0 .0
            .partial_cmp(&b.0 .0)
            .expect("finite percents")
            .then(a.0 .1.cmp(b.0 .1))
    });
    let summary: Vec<String> = summary_rows
        .iter()
        .map(|((percent, mode), (sum, count))| {
            format!(
                "{},{mode},{},{count}",
                fmt_sig(*percent),
                fmt_sig(sum / *count as f64),
            )
        })
        .collect();
    write_csv(
        &args.out.join("summary.csv"),
        "percent,mode,mean_drop,outcomes",
        &summary,
    )?;

    // Demographic splits, when the manifest carries attributes.
    write_grouped(&args.out, &manifest, &outcomes)?;

    finish_run(&args.out, errors, outcomes.len())
}

fn write_grouped(out: &PathBuf, manifest: &Manifest, outcomes: &[OcclusionOutcome]) -> Result<()> {
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

    for (key, file) in [
        (GroupKey::Gender, "by_gender.csv"),
        (GroupKey::Ethnicity, "by_ethnicity.csv"),
        (GroupKey::AgeDifference, "by_age_difference.csv"),
    ] {
        // Group within each (mode, percent) cell.
        let mut cells: BTreeMap<(&str, u64), Vec<&OcclusionOutcome>> = BTreeMap::new();
        for outcome in outcomes {
            cells
                .entry((outcome.mode_name(), outcome.percent.to_bits()))
                .or_default()
                .push(outcome);
        }
        let mut lines = Vec::new();
        let mut grouped_any = false;
        for ((mode, percent_bits), cell) in cells {
            let records: Vec<GroupRecord> = cell
                .iter()
                .map(|o| GroupRecord {
                    value: o.drop,
                    anchor: attributes_of(&o.pair_id, true),
                    positive: attributes_of(&o.pair_id, false),
                })
                .collect();
            let (groups, _excluded) = group_by(&records, key);
            grouped_any |= !groups.is_empty();
            for group in groups {
                lines.push(format!(
                    "{},{mode},{},{},{}",
                    group.group,
                    fmt_sig(f64::from_bits(percent_bits)),
                    fmt_sig(group.mean),
                    group.count,
                ));
            }
        }
        if grouped_any {
            write_csv(
                &out.join(file),
                "group,mode,percent,mean_drop,outcomes",
                &lines,
            )?;
        }
    }
    Ok(())
}
