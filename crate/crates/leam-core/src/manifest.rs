//! The manifest: a UTF-8 JSON document mapping identities to their image,
//! mask, and landmark files, plus the models and tagged layers a run covers.
//! Relative paths are resolved against the manifest's own directory on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::stats::DemographicAttributes;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub weights: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<DemographicAttributes>,
    #[serde(default)]
    pub reference: bool,
}

impl ImageEntry {
    /// Identifier of this image inside its identity: the file stem.
    pub fn stem(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image.to_string_lossy().into_owned())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub id: String,
    pub images: Vec<ImageEntry>,
}

impl IdentityEntry {
    /// All ordered within-identity pairs (anchor index, positive index).
    pub fn ordered_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.images.len();
        let mut pairs = Vec::with_capacity(n * (n - 1));
        for a in 0..n {
            for p in 0..n {
                if a != p {
                    pairs.push((a, p));
                }
            }
        }
        pairs
    }

    pub fn reference_image(&self) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.reference)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub models: Vec<ModelSpec>,
    /// Tagged layer ids this run analyzes.
    pub layers: Vec<String>,
    pub identities: Vec<IdentityEntry>,
}

impl Manifest {
    pub fn model(&self, id: &str) -> Result<&ModelSpec> {
        self.models
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::Missing(format!("model {id:?} not in manifest")))
    }

    pub fn identity(&self, id: &str) -> Result<&IdentityEntry> {
        self.identities
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::Missing(format!("identity {id:?} not in manifest")))
    }

    /// Pair id in the canonical `identity:anchor->positive` form.
    pub fn pair_id(identity: &str, anchor: &ImageEntry, positive: &ImageEntry) -> String {
        format!("{identity}:{}->{}", anchor.stem(), positive.stem())
    }

    fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Format("manifest lists no models".into()));
        }
        if self.identities.is_empty() {
            return Err(Error::Format("manifest lists no identities".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for identity in &self.identities {
            if !seen.insert(&identity.id) {
                return Err(Error::Format(format!(
                    "duplicate identity {:?}",
                    identity.id
                )));
            }
            if identity.images.len() < 2 {
                return Err(Error::Format(format!(
                    "identity {:?} has {} image(s); pair generation needs at least 2",
                    identity.id,
                    identity.images.len()
                )));
            }
        }
        Ok(())
    }

    /// Check the alignment precondition: exactly one reference per identity.
    pub fn validate_references(&self) -> Result<()> {
        for identity in &self.identities {
            let refs = identity.images.iter().filter(|i| i.reference).count();
            if refs != 1 {
                return Err(Error::Format(format!(
                    "identity {:?} marks {refs} reference images; alignment needs exactly 1",
                    identity.id
                )));
            }
        }
        Ok(())
    }
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&path);
    }
}

/// Parse and validate a manifest, resolving relative paths against its
/// directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let mut manifest: Manifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for model in &mut manifest.models {
        resolve(base, &mut model.weights);
    }
    for identity in &mut manifest.identities {
        for image in &mut identity.images {
            resolve(base, &mut image.image);
            if let Some(mask) = &mut image.mask {
                resolve(base, mask);
            }
            if let Some(lm) = &mut image.landmarks {
                resolve(base, lm);
            }
        }
    }
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn minimal_json() -> &'static str {
        r#"{
            "seed": 7,
            "models": [{"id": "net7", "weights": "weights/net7.dnw"}],
            "layers": ["conv1", "conv3"],
            "identities": [
                {"id": "alice", "images": [
                    {"image": "img/a0.png", "mask": "masks/a0.pgm", "reference": true,
                     "attributes": {"gender": "Female", "ethnicity": "East Asian", "age": 33}},
                    {"image": "img/a1.png"}
                ]}
            ]
        }"#
    }

    #[test]
    fn manifest_parses_and_resolves_paths() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, minimal_json()).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.seed, 7);
        assert_eq!(m.layers, vec!["conv1", "conv3"]);
        assert_eq!(m.models[0].weights, dir.path().join("weights/net7.dnw"));
        let alice = m.identity("alice").unwrap();
        assert_eq!(alice.images[0].image, dir.path().join("img/a0.png"));
        let attrs = alice.images[0].attributes.as_ref().unwrap();
        assert_eq!(attrs.age, Some(33));
        assert!(m.validate_references().is_ok());
        assert_eq!(alice.ordered_pairs(), vec![(0, 1), (1, 0)]);
        assert_eq!(
            Manifest::pair_id("alice", &alice.images[0], &alice.images[1]),
            "alice:a0->a1"
        );
    }

    #[test]
    fn single_image_identities_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(
            &path,
            r#"{"seed": 0, "models": [{"id": "m", "weights": "w"}], "layers": [],
               "identities": [{"id": "solo", "images": [{"image": "x.png"}]}]}"#,
        )
        .unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Format(_))));
    }

    #[test]
    fn reference_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(
            &path,
            r#"{"seed": 0, "models": [{"id": "m", "weights": "w"}], "layers": ["conv1"],
               "identities": [{"id": "a", "images": [{"image": "x.png"}, {"image": "y.png"}]}]}"#,
        )
        .unwrap();
        let m = load_manifest(&path).unwrap();
        assert!(m.validate_references().is_err());
    }
}
