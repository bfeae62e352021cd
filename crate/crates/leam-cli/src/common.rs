//! Shared plumbing for the subcommands: seed resolution, model loading, pair
//! enumeration, deterministic output writing, and the per-item error log.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use leam_core::manifest::Manifest;
use leam_core::occlusion::fnv1a64;
use leam_core::Network;

pub const EXIT_OK: i32 = 0;
pub const EXIT_TOTAL_FAILURE: i32 = 1;
pub const EXIT_PARTIAL_FAILURE: i32 = 2;

/// Seed priority: --seed flag, then LEAM_SEED, then the manifest value.
pub fn resolve_seed(flag: Option<u64>, manifest_seed: u64) -> u64 {
    if let Some(seed) = flag {
        return seed;
    }
    if let Ok(value) = std::env::var("LEAM_SEED") {
        if let Ok(seed) = value.parse() {
            return seed;
        }
    }
    manifest_seed
}

/// Cap rayon's global pool; `--jobs 1` must byte-match any other setting, so
/// results are always collected and sorted before writing.
pub fn init_jobs(jobs: Option<usize>) {
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

/// Load the manifest models, optionally restricted to a selection.
pub fn load_models(manifest: &Manifest, selection: &[String]) -> Result<Vec<(String, Network)>> {
    let wanted: Vec<&str> = if selection.is_empty() {
        manifest.models.iter().map(|m| m.id.as_str()).collect()
    } else {
        selection.iter().map(|s| s.as_str()).collect()
    };
    let mut models = Vec::with_capacity(wanted.len());
    for id in wanted {
        let spec = manifest.model(id)?;
        let net = leam_core::desknet::load_weights(&spec.weights)
            .with_context(|| format!("loading weights for model {id:?}"))?;
        models.push((id.to_string(), net));
    }
    Ok(models)
}

/// One ordered within-identity pair, resolved to concrete file entries.
pub struct PairSpec {
    pub pair_id: String,
    pub identity: String,
    pub anchor_index: usize,
    pub positive_index: usize,
}

pub fn manifest_pairs(manifest: &Manifest) -> Vec<PairSpec> {
    let mut pairs = Vec::new();
    for identity in &manifest.identities {
        for (a, p) in identity.ordered_pairs() {
            pairs.push(PairSpec {
                pair_id: Manifest::pair_id(&identity.id, &identity.images[a], &identity.images[p]),
                identity: identity.id.clone(),
                anchor_index: a,
                positive_index: p,
            });
        }
    }
    pairs.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    pairs
}

/// `identity:anchor->positive` back into its parts.
pub fn parse_pair_id(pair_id: &str) -> Option<(&str, &str, &str)> {
    let (identity, rest) = pair_id.split_once(':')?;
    let (anchor, positive) = rest.split_once("->")?;
    Some((identity, anchor, positive))
}

/// Filesystem-safe unique stem for a (model, layer, pair) record.
pub fn record_stem(model: &str, layer: &str, pair_id: &str) -> String {
    let sanitized: String = pair_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    let tag = fnv1a64(format!("{model}|{layer}|{pair_id}").as_bytes());
    format!("{model}_{layer}_{sanitized}_{:08x}", tag as u32)
}

/// Write collected per-item errors to `errors.log` (sorted, one per line) and
/// report them on stderr. Returns the exit code given how much survived.
pub fn finish_run(out_dir: &Path, mut errors: Vec<String>, successes: usize) -> Result<i32> {
    if errors.is_empty() {
        return Ok(EXIT_OK);
    }
    errors.sort();
    let path = out_dir.join("errors.log");
    std::fs::write(&path, errors.join("\n") + "\n")?;
    for line in &errors {
        eprintln!("error: {line}");
    }
    Ok(if successes == 0 {
        EXIT_TOTAL_FAILURE
    } else {
        EXIT_PARTIAL_FAILURE
    })
}

/// Create the output directory tree.
pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(())
}

pub fn write_csv(path: &PathBuf, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Comma-separated float list (CLI argument form).
pub fn parse_f64_list(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number {s:?}"))
        })
        .collect()
}

pub fn parse_u64_list(raw: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("bad seed {s:?}"))
        })
        .collect()
}
