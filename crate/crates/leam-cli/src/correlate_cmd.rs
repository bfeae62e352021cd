//! `leam correlate`: select relevant pixels from archived maps and count them
//! per facial-region class, with per-map rows and aggregate tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use rayon::prelude::*;

use leam_core::archive::read_index;
use leam_core::manifest::{load_manifest, Manifest};
use leam_core::regions::{
    aggregate_reports, correlate, load_mask, select_by_value_threshold, select_top_percent,
    CorrelationReport, SegmentationMask, CLASS_TABLE,
};
use leam_core::{fmt_sig, Error};

use crate::common::{ensure_dir, finish_run, init_jobs, parse_pair_id, write_csv};

#[derive(Args, Debug)]
pub struct CorrelateArgs {
    /// Map archive directory produced by `leam map`.
    #[arg(long)]
    pub maps: PathBuf,
    /// Manifest providing each anchor image's mask.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Select pixels with normalized value strictly above this threshold.
    #[arg(long, conflicts_with = "top_percent")]
    pub threshold: Option<f64>,
    /// Select the top p% highest-valued pixels.
    #[arg(long)]
    pub top_percent: Option<f64>,
    /// Output directory for the CSV reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker thread cap; output bytes are identical for any value.
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn mask_path_for<'m>(manifest: &'m Manifest, pair_id: &str) -> Result<&'m Path, String> {
    let (identity, anchor, _) =
        parse_pair_id(pair_id).ok_or_else(|| format!("{pair_id}: unparsable pair id"))?;
    let entry = manifest
        .identity(identity)
        .map_err(|e| format!("{pair_id}: {e}"))?
        .images
        .iter()
        .find(|img| img.stem() == anchor)
        .ok_or_else(|| format!("{pair_id}: anchor {anchor:?} not in manifest"))?;
    entry
        .mask
        .as_deref()
        .ok_or_else(|| format!("{pair_id}: anchor {anchor:?} has no mask"))
}

pub fn run(args: &CorrelateArgs) -> Result<i32> {
    init_jobs(args.jobs);
    let manifest = load_manifest(&args.manifest)?;
    let index = read_index(&args.maps)?;
    let (mode_name, param) = match (args.threshold, args.top_percent) {
        (Some(t), None) => ("threshold", t),
        (None, Some(p)) => ("top-percent", p),
        _ => anyhow::bail!("exactly one of --threshold or --top-percent is required"),
    };
    ensure_dir(&args.out)?;

    let mut errors: Vec<String> = Vec::new();

    // Masks loaded once per distinct path.
    let mut masks: BTreeMap<&Path, SegmentationMask> = BTreeMap::new();
    for entry in &index {
        match mask_path_for(&manifest, &entry.pair_id) {
            Ok(path) => {
                if !masks.contains_key(path) {
                    match load_mask(path) {
                        Ok(mask) => {
                            masks.insert(path, mask);
                        }
                        Err(e) => errors.push(format!("{}: {e}", path.display())),
                    }
                }
            }
            Err(e) => errors.push(e),
        }
    }

    struct Row {
        pair_id: String,
        model: String,
        layer: String,
        identity: String,
        report: CorrelationReport,
    }

    let results: Vec<std::result::Result<Row, String>> = index
        .par_iter()
        .map(|entry| {
            let mask_path = mask_path_for(&manifest, &entry.pair_id)?;
            let mask = masks
                .get(mask_path)
                .ok_or_else(|| format!("{}: mask unavailable", entry.pair_id))?;
            let (map, _) = leam_core::archive::read_map(&entry.path)
                .map_err(|e| format!("{}: {e}", entry.pair_id))?;
            let selection = match mode_name {
                "threshold" => select_by_value_threshold(&map, param),
                _ => select_top_percent(&map, param),
            }
            .map_err(|e| format!("{}: {e}", entry.pair_id))?;
            let report = correlate(&selection, mask).map_err(|e| match e {
                Error::Shape(msg) => format!("{}: dimension mismatch: {msg}", entry.pair_id),
                other => format!("{}: {other}", entry.pair_id),
            })?;
            let identity = parse_pair_id(&entry.pair_id)
                .map(|(id, _, _)| id.to_string())
                .unwrap_or_default();
            Ok(Row {
                pair_id: entry.pair_id.clone(),
                model: entry.model.clone(),
                layer: entry.layer.clone(),
                identity,
                report,
            })
        })
        .collect();

    let mut rows: Vec<Row> = Vec::new();
    for result in results {
        match result {
            Ok(row) => rows.push(row),
            Err(e) => errors.push(e),
        }
    }
    rows.sort_by(|a, b| {
        (&a.model, &a.pair_id, &a.layer).cmp(&(&b.model, &b.pair_id, &b.layer))
    });

    // Per-map long-format report, classes in fixed table order.
    let mut lines = Vec::with_capacity(rows.len() * CLASS_TABLE.len());
    for row in &rows {
        for (class_index, class) in CLASS_TABLE.iter().enumerate() {
            lines.push(format!(
                "{},{},{},{mode_name},{},{},{},{class},{},{},{}",
                row.pair_id,
                row.model,
                row.layer,
                fmt_sig(param),
                fmt_sig(row.report.selection_size),
                row.report.empty_selection,
                fmt_sig(row.report.counts[class_index]),
                fmt_sig(row.report.absolute_percent[class_index]),
                fmt_sig(row.report.relative_percent[class_index]),
            ));
        }
    }
    write_csv(
        &args.out.join("reports.csv"),
        "pair_id,model,layer,mode,param,selected_pixels,empty_selection,class,pixels,absolute_percent,relative_percent",
        &lines,
    )?;

    // Aggregates per (model, layer) and per identity.
    let mut by_layer: BTreeMap<(String, String), Vec<&CorrelationReport>> = BTreeMap::new();
    let mut by_identity: BTreeMap<String, Vec<&CorrelationReport>> = BTreeMap::new();
    for row in &rows {
        by_layer
            .entry((row.model.clone(), row.layer.clone()))
            .or_default()
            .push(&row.report);
        by_identity
            .entry(row.identity.clone())
            .or_default()
            .push(&row.report);
    }
    let mut layer_lines = Vec::new();
    for ((model, layer), reports) in &by_layer {
        let cloned: Vec<CorrelationReport> = reports.iter().map(|&r| r.clone()).collect();
        let agg = aggregate_reports(&cloned)?;
        for (class_index, class) in CLASS_TABLE.iter().enumerate() {
            layer_lines.push(format!(
                "{model},{layer},{},{class},{},{},{}",
                agg.report_count,
                fmt_sig(agg.counts[class_index]),
                fmt_sig(agg.absolute_percent[class_index]),
                fmt_sig(agg.relative_percent[class_index]),
            ));
        }
    }
    write_csv(
        &args.out.join("aggregate_by_layer.csv"),
        "model,layer,reports,class,mean_pixels,mean_absolute_percent,mean_relative_percent",
        &layer_lines,
    )?;

    let mut identity_lines = Vec::new();
    for (identity, reports) in &by_identity {
        let cloned: Vec<CorrelationReport> = reports.iter().map(|&r| r.clone()).collect();
        let agg = aggregate_reports(&cloned)?;
        for (class_index, class) in CLASS_TABLE.iter().enumerate() {
            identity_lines.push(format!(
                "{identity},{},{class},{},{},{}",
                agg.report_count,
                fmt_sig(agg.counts[class_index]),
                fmt_sig(agg.absolute_percent[class_index]),
                fmt_sig(agg.relative_percent[class_index]),
            ));
        }
    }
    write_csv(
        &args.out.join("aggregate_by_identity.csv"),
        "identity,reports,class,mean_pixels,mean_absolute_percent,mean_relative_percent",
        &identity_lines,
    )?;

    finish_run(&args.out, errors, rows.len())
}
