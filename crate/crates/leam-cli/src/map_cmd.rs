//! `leam map`: run every ordered pair through every selected model and emit
//! the per-layer activation maps as an archive, optionally with heatmaps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;

use leam_core::archive::{render_pgm, render_png_warm, write_index, write_map, IndexEntry, FLAG_NORMALIZED};
use leam_core::image_io::load_image;
use leam_core::leam::generate_maps;
use leam_core::manifest::load_manifest;
use leam_core::tensor::Tensor;

use crate::common::{
    ensure_dir, finish_run, init_jobs, load_models, manifest_pairs, record_stem, resolve_seed,
};

#[derive(Args, Debug)]
pub struct MapArgs {
    /// Manifest JSON describing models, identities, and files.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the map archive.
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to these model ids (default: every manifest model).
    #[arg(long)]
    pub model: Vec<String>,
    /// Comma-separated tagged layers (default: the manifest's layer list).
    #[arg(long)]
    pub layers: Option<String>,
    /// Also render each map as a grayscale PGM and warm-colormap PNG.
    #[arg(long)]
    pub render: bool,
    /// Seed recorded in the archive (default: LEAM_SEED, then the manifest).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker thread cap; output bytes are identical for any value.
    #[arg(long)]
    pub jobs: Option<usize>,
}

struct MapRecord {
    entry: IndexEntry,
    map: Tensor,
}

pub fn run(args: &MapArgs) -> Result<i32> {
    init_jobs(args.jobs);
    let manifest = load_manifest(&args.manifest)?;
    let seed = resolve_seed(args.seed, manifest.seed);
    let models = load_models(&manifest, &args.model)?;
    let layers: Vec<String> = match &args.layers {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => manifest.layers.clone(),
    };
    for (id, net) in &models {
        for layer in &layers {
            if !net.tagged_layers().contains(layer) {
                anyhow::bail!("model {id:?} has no tagged layer {layer:?}");
            }
        }
    }

    ensure_dir(&args.out)?;
    ensure_dir(&args.out.join("maps"))?;
    if args.render {
        ensure_dir(&args.out.join("heatmaps"))?;
    }

    let pairs = manifest_pairs(&manifest);
    let mut errors: Vec<String> = Vec::new();

    // Load each image once; pairs referencing a broken file become errors.
    let mut images: BTreeMap<&Path, Tensor> = BTreeMap::new();
    for identity in &manifest.identities {
        for entry in &identity.images {
            if images.contains_key(entry.image.as_path()) {
                continue;
            }
            match load_image(&entry.image) {
                Ok(t) => {
                    images.insert(entry.image.as_path(), t);
                }
                Err(e) => errors.push(format!("{}: {e}", entry.image.display())),
            }
        }
    }

    let cells: Vec<(&str, &leam_core::Network, &crate::common::PairSpec)> = models
        .iter()
        .flat_map(|(id, net)| pairs.iter().map(move |p| (id.as_str(), net, p)))
        .collect();

    let results: Vec<std::result::Result<Vec<MapRecord>, String>> = cells
        .par_iter()
        .map(|(model_id, net, pair)| {
            let identity = manifest
                .identity(&pair.identity)
                .expect("pair comes from this manifest");
            let anchor_entry = &identity.images[pair.anchor_index];
            let positive_entry = &identity.images[pair.positive_index];
            let anchor = images
                .get(anchor_entry.image.as_path())
                .ok_or_else(|| format!("{}|{}: anchor image unavailable", model_id, pair.pair_id))?;
            let positive = images.get(positive_entry.image.as_path()).ok_or_else(|| {
                format!("{}|{}: positive image unavailable", model_id, pair.pair_id)
            })?;
            let (embedding_pair, maps) = generate_maps(net, anchor, positive)
                .map_err(|e| format!("{}|{}: {e}", model_id, pair.pair_id))?;
            let mut records = Vec::new();
            for layer in &layers {
                let map = maps
                    .iter()
                    .find(|m| &m.layer_id == layer)
                    .ok_or_else(|| format!("{}|{}: layer {layer} missing", model_id, pair.pair_id))?;
                let stem = record_stem(model_id, layer, &pair.pair_id);
                records.push(MapRecord {
                    entry: IndexEntry {
                        pair_id: pair.pair_id.clone(),
                        model: model_id.to_string(),
                        layer: layer.clone(),
                        path: PathBuf::from(format!("maps/{stem}.leam")),
                        height: map.upsampled.shape()[0],
                        width: map.upsampled.shape()[1],
                        cosine: embedding_pair.cosine,
                        loss: embedding_pair.loss,
                        seed,
                    },
                    map: map.upsampled.clone(),
                });
            }
            Ok(records)
        })
        .collect();

    let mut records: Vec<MapRecord> = Vec::new();
    for result in results {
        match result {
            Ok(list) => records.extend(list),
            Err(e) => errors.push(e),
        }
    }
    records.sort_by(|a, b| {
        (&a.entry.model, &a.entry.pair_id, &a.entry.layer).cmp(&(
            &b.entry.model,
            &b.entry.pair_id,
            &b.entry.layer,
        ))
    });

    for record in &records {
        let path = args.out.join(&record.entry.path);
        write_map(&path, &record.map, FLAG_NORMALIZED)
            .with_context(|| format!("writing {}", path.display()))?;
        if args.render {
            let stem = path
                .file_stem()
                .expect("record paths have stems")
                .to_string_lossy()
                .into_owned();
            let pgm = render_pgm(&record.map)?;
            std::fs::write(args.out.join(format!("heatmaps/{stem}.pgm")), pgm)?;
            render_png_warm(&record.map, &args.out.join(format!("heatmaps/{stem}.png")))?;
        }
    }
    let entries: Vec<IndexEntry> = records.into_iter().map(|r| r.entry).collect();
    write_index(&args.out, &entries)?;

    finish_run(&args.out, errors, entries.len())
}
