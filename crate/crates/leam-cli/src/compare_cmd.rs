//! `leam compare`: treat archived maps as 2-D distributions and tabulate mean
//! Bhattacharyya coefficient and EMD per layer and model, for same-identity
//! and different-identity pairs, optionally after landmark alignment.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;

use leam_core::archive::{read_index, read_map};
use leam_core::manifest::{load_manifest, Manifest};
use leam_core::mapsim::{
    apply_transform, estimate_similarity_transform, load_landmarks, normalize_distribution,
    rotation_from_eye_corners, LandmarkSet, SimilarityTransform,
};
use leam_core::stats::{pairwise_bc_emd_table, BcEmdOptions, MapEntry, PairKind};
use leam_core::{fmt_sig, Error};

use crate::common::{ensure_dir, finish_run, init_jobs, parse_pair_id, resolve_seed, write_csv};

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Map archive directory produced by `leam map`.
    #[arg(long)]
    pub maps: PathBuf,
    /// Manifest providing landmarks and reference flags.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Align maps onto each identity's reference geometry before comparing.
    #[arg(long)]
    pub align: bool,
    /// EMD working grid side (box-average downsampling bound).
    #[arg(long, default_value_t = 32)]
    pub emd_grid: usize,
    /// Which table(s) to produce.
    #[arg(long, default_value = "both", value_parser = ["same", "different", "both"])]
    pub kind: String,
    /// Counterpart identities sampled per identity for the different table.
    #[arg(long, default_value_t = 10)]
    pub sample_size: usize,
    /// Sampling seed (default: LEAM_SEED, then the manifest).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker thread cap; kept for interface parity, comparisons are cheap.
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// The image-level map: the archive holds one map per ordered pair, so an
/// image is represented by the pair in which it is the anchor with the
/// lexicographically smallest positive counterpart.
fn image_map_entries(
    index: &[leam_core::archive::IndexEntry],
) -> BTreeMap<(String, String, String, String), &leam_core::archive::IndexEntry> {
    let mut chosen: BTreeMap<(String, String, String, String), &leam_core::archive::IndexEntry> =
        BTreeMap::new();
    for entry in index {
        let Some((identity, anchor, positive)) = parse_pair_id(&entry.pair_id) else {
            continue;
        };
        let key = (
            entry.model.clone(),
            entry.layer.clone(),
            identity.to_string(),
            anchor.to_string(),
        );
        match chosen.get(&key) {
            Some(existing) => {
                let existing_positive = parse_pair_id(&existing.pair_id)
                    .map(|(_, _, p)| p)
                    .unwrap_or("");
                if positive < existing_positive {
                    chosen.insert(key, entry);
                }
            }
            None => {
                chosen.insert(key, entry);
            }
        }
    }
    chosen
}

struct AlignmentPlan {
    /// identity -> (image stem -> transform onto the reference geometry).
    transforms: BTreeMap<String, BTreeMap<String, SimilarityTransform>>,
}

fn alignment_plan(manifest: &Manifest, errors: &mut Vec<String>) -> Result<AlignmentPlan> {
    manifest.validate_references()?;
    let mut transforms = BTreeMap::new();
    for identity in &manifest.identities {
        let reference = identity
            .reference_image()
            .expect("validated references above");
        let Some(reference_lm_path) = reference.landmarks.as_ref() else {
            errors.push(format!(
                "{}: reference image has no landmarks; identity skipped",
                identity.id
            ));
            continue;
        };
        let reference_lm: LandmarkSet = match load_landmarks(reference_lm_path) {
            Ok(lm) => lm,
            Err(e) => {
                errors.push(format!("{}: {e}", reference_lm_path.display()));
                continue;
            }
        };
        let upright = match rotation_from_eye_corners(&reference_lm) {
            Ok(t) => t,
            Err(e) => {
                errors.push(format!("{}: {e}", identity.id));
                continue;
            }
        };
        let mut per_image = BTreeMap::new();
        for image in &identity.images {
            let Some(lm_path) = image.landmarks.as_ref() else {
                errors.push(format!(
                    "{}:{}: no landmarks; image skipped",
                    identity.id,
                    image.stem()
                ));
                continue;
            };
            match load_landmarks(lm_path).and_then(|lm| {
                estimate_similarity_transform(&lm, &reference_lm)
            }) {
                Ok(to_reference) => {
                    per_image.insert(image.stem(), to_reference.then(&upright));
                }
                Err(e) => errors.push(format!("{}:{}: {e}", identity.id, image.stem())),
            }
        }
        transforms.insert(identity.id.clone(), per_image);
    }
    Ok(AlignmentPlan { transforms })
}

pub fn run(args: &CompareArgs) -> Result<i32> {
    init_jobs(args.jobs);
    let manifest = load_manifest(&args.manifest)?;
    let seed = resolve_seed(args.seed, manifest.seed);
    let index = read_index(&args.maps)?;
    ensure_dir(&args.out)?;
    let mut errors: Vec<String> = Vec::new();

    let plan = if args.align {
        Some(alignment_plan(&manifest, &mut errors)?)
    } else {
        None
    };

    let mut entries: Vec<MapEntry> = Vec::new();
    for ((model, layer, identity, image_id), index_entry) in image_map_entries(&index) {
        let map = match read_map(&index_entry.path) {
            Ok((map, _)) => map,
            Err(e) => {
                errors.push(format!("{}: {e}", index_entry.pair_id));
                continue;
            }
        };
        let map = match &plan {
            Some(plan) => {
                let Some(transform) = plan
                    .transforms
                    .get(&identity)
                    .and_then(|per_image| per_image.get(&image_id))
                else {
                    // Alignment unavailable for this image; already recorded.
                    continue;
                };
                match apply_transform(&map, transform) {
                    Ok(warped) => warped,
                    Err(e) => {
                        errors.push(format!("{}: {e}", index_entry.pair_id));
                        continue;
                    }
                }
            }
            None => map,
        };
        match normalize_distribution(&map) {
            Ok(distribution) => entries.push(MapEntry {
                identity,
                image_id,
                layer,
                model,
                map: distribution,
            }),
            Err(Error::DegenerateDistribution) => {
                errors.push(format!(
                    "{}: map has no positive mass; skipped",
                    index_entry.pair_id
                ));
            }
            Err(e) => errors.push(format!("{}: {e}", index_entry.pair_id)),
        }
    }

    let options = BcEmdOptions {
        emd_grid: args.emd_grid,
        seed,
        sample_size: args.sample_size,
    };
    let kinds: Vec<PairKind> = match args.kind.as_str() {
        "same" => vec![PairKind::SameIdentity],
        "different" => vec![PairKind::DifferentIdentity],
        _ => vec![PairKind::SameIdentity, PairKind::DifferentIdentity],
    };
    let mut lines = Vec::new();
    for kind in kinds {
        let (rows, warnings) = pairwise_bc_emd_table(&entries, kind, &options)?;
        errors.extend(warnings);
        for row in rows {
            lines.push(format!(
                "{},{},{},{},{},{},{},{}",
                row.kind.name(),
                row.layer,
                row.model,
                fmt_sig(row.mean_bc),
                fmt_sig(row.mean_emd),
                row.pair_count,
                args.emd_grid,
                seed,
            ));
        }
    }
    let produced = lines.len();
    write_csv(
        &args.out.join("bc_emd.csv"),
        "kind,layer,model,mean_bc,mean_emd,pairs,emd_grid,seed",
        &lines,
    )?;
    finish_run(&args.out, errors, produced)
}
