//! Deterministic fixture generation: the packaged region-correlation fixture,
//! synthetic occlusion benchmark pairs, and a small demo dataset exercising
//! every file format the pipeline reads.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::desknet::{assemble, normalize_pixel, save_weights, DeskNetParams};
use crate::image_io::{save_png_rgb, save_raw_planar};
use crate::leam::{generate_maps, upsample};
use crate::manifest::{save_manifest, IdentityEntry, ImageEntry, Manifest, ModelSpec};
use crate::mapsim::{save_landmarks, LandmarkSet};
use crate::occlusion::SweepPair;
use crate::regions::select_by_value_threshold;
use crate::stats::{DemographicAttributes, Ethnicity, Gender};
use crate::tensor::Tensor;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Region-correlation fixture (512x512, 515 nose + 69 face pixels)
// ---------------------------------------------------------------------------

const LATTICE: usize = 128;
const IMG: usize = 512;
const TARGET_SELECTED: usize = 584;
const TARGET_NOSE: usize = 515;
const TARGET_FACE: usize = 69;
const BACKDROP_GREEN: u8 = 192;

/// What the packaged fixture is built to produce.
#[derive(Debug, Clone)]
pub struct Fig3Fixture {
    pub manifest_path: PathBuf,
    pub model_id: String,
    pub layer: String,
    /// Pair whose conv3 map carries the calibrated selection.
    pub pair_id: String,
    pub selected_pixels: usize,
    pub nose_pixels: usize,
    pub face_pixels: usize,
}

/// Delta-kernel parameter set: channel 0 samples the red plane on a stride-4
/// lattice, channel 1 the green plane; the embedding head forwards the two
/// pooled channels unchanged. Every other weight is zero.
fn crafted_params() -> DeskNetParams {
    let mut conv1 = Tensor::zeros(vec![16, 3, 3, 3]);
    let mut conv2 = Tensor::zeros(vec![32, 16, 3, 3]);
    let mut conv3 = Tensor::zeros(vec![64, 32, 3, 3]);
    let mut dense = Tensor::zeros(vec![128, 64]);
    // Center taps: kernel position (1, 1).
    for ch in 0..2 {
        conv1.data_mut()[((ch * 3 + ch) * 3 + 1) * 3 + 1] = 1.0;
        conv2.data_mut()[((ch * 16 + ch) * 3 + 1) * 3 + 1] = 1.0;
        conv3.data_mut()[((ch * 32 + ch) * 3 + 1) * 3 + 1] = 1.0;
        dense.data_mut()[ch * 64 + ch] = 1.0;
    }
    DeskNetParams {
        tensors: vec![
            ("conv1.weight".into(), conv1),
            ("conv1.bias".into(), Tensor::zeros(vec![16])),
            ("conv2.weight".into(), conv2),
            ("conv2.bias".into(), Tensor::zeros(vec![32])),
            ("conv3.weight".into(), conv3),
            ("conv3.bias".into(), Tensor::zeros(vec![64])),
            ("dense.weight".into(), dense),
            ("dense.bias".into(), Tensor::zeros(vec![128])),
        ],
    }
}

fn lattice_value(byte: u8) -> f64 {
    normalize_pixel(byte).max(0.0)
}

/// Bilinear weight the upsampler assigns to an isolated lattice cell at each
/// image pixel of its influence window, mirroring `upsample`'s arithmetic.
fn spike_pixel_values(cell: (usize, usize), byte: u8) -> Vec<f64> {
    let scale = (LATTICE - 1) as f64 / (IMG - 1) as f64;
    let val = lattice_value(byte);
    let (ci, cj) = cell;
    let lo = |c: usize| (((c as f64 - 1.0) / scale).ceil().max(0.0)) as usize;
    let hi = |c: usize| ((((c + 1) as f64) / scale).floor() as usize).min(IMG - 1);
    let mut values = Vec::new();
    for r in lo(ci)..=hi(ci) {
        let sy = r as f64 * scale;
        let y0 = sy.floor() as usize;
        let fy = sy - y0 as f64;
        let wy = if y0 == ci {
            1.0 - fy
        } else if y0 + 1 == ci {
            fy
        } else {
            continue;
        };
        for c in lo(cj)..=hi(cj) {
            let sx = c as f64 * scale;
            let x0 = sx.floor() as usize;
            let fx = sx - x0 as f64;
            let wx = if x0 == cj {
                1.0 - fx
            } else if x0 + 1 == cj {
                fx
            } else {
                continue;
            };
            values.push(val * wy * wx);
        }
    }
    values
}

fn spike_count(cell: (usize, usize), byte: u8) -> usize {
    spike_pixel_values(cell, byte)
        .iter()
        .filter(|&&v| v > 0.5)
        .count()
}

/// Margin check: no pixel may sit close enough to the 0.5 threshold for f32
/// archive rounding or normalization roundoff to flip it.
fn margin_ok(values: &[f64]) -> bool {
    values.iter().all(|&v| (v - 0.5).abs() > 1e-6)
}

/// Calibrate the lattice byte pattern whose upsampled form exceeds 0.5 on
/// exactly [`TARGET_SELECTED`] pixels: a 255-plateau plus byte-tuned isolated
/// spikes.
fn calibrate_pattern() -> Result<Vec<(usize, usize, u8)>> {
    let count_of = |cells: &[(usize, usize, u8)]| -> Result<usize> {
        let mut design = Tensor::zeros(vec![LATTICE, LATTICE]);
        for &(r, c, b) in cells {
            design.data_mut()[r * LATTICE + c] = lattice_value(b);
        }
        let up = upsample(&design, (IMG, IMG))?;
        Ok(select_by_value_threshold(&up, 0.5)?.len())
    };

    // Largest centered plateau that stays under the target.
    let mut cells: Vec<(usize, usize, u8)> = Vec::new();
    for side in (2..=7).rev() {
        let mut candidate = Vec::new();
        for r in 60..60 + side {
            for c in 60..60 + side {
                candidate.push((r, c, 255u8));
            }
        }
        if count_of(&candidate)? <= TARGET_SELECTED {
            cells = candidate;
            break;
        }
    }
    if cells.is_empty() {
        return Err(Error::Format("no plateau fits under the target".into()));
    }
    let mut count = count_of(&cells)?;

    // Isolated spike sites, well away from the plateau and each other.
    let mut candidates = Vec::new();
    for &r in &[20usize, 28, 36, 44, 96, 104, 112] {
        for &c in &[20usize, 28, 36, 44, 52, 96, 104, 112] {
            candidates.push((r, c));
        }
    }
    for site in candidates {
        if count == TARGET_SELECTED {
            break;
        }
        let deficit = TARGET_SELECTED - count;
        // Exact finish if some byte lands the deficit with a safe margin.
        let exact = (129..=255u16).map(|b| b as u8).find(|&b| {
            spike_count(site, b) == deficit && margin_ok(&spike_pixel_values(site, b))
        });
        if let Some(byte) = exact {
            cells.push((site.0, site.1, byte));
            count += deficit;
            continue;
        }
        // Otherwise take the site at full strength if it keeps us under.
        let full = spike_count(site, 255);
        if full > 0 && full < deficit && margin_ok(&spike_pixel_values(site, 255)) {
            cells.push((site.0, site.1, 255));
            count += full;
        }
    }
    if count != TARGET_SELECTED {
        return Err(Error::Format(format!(
            "calibration reached {count} of {TARGET_SELECTED} pixels"
        )));
    }
    Ok(cells)
}

fn pattern_design(cells: &[(usize, usize, u8)]) -> Tensor {
    let mut design = Tensor::zeros(vec![LATTICE, LATTICE]);
    for &(r, c, b) in cells {
        design.data_mut()[r * LATTICE + c] = lattice_value(b);
    }
    design
}

/// Paint the anchor red plane: each lattice cell owns a 4x4 pixel block.
fn anchor_planes(cells: &[(usize, usize, u8)]) -> Vec<u8> {
    let mut planes = vec![0u8; 3 * IMG * IMG];
    for &(r, c, b) in cells {
        for y in 4 * r..4 * r + 4 {
            for x in 4 * c..4 * c + 4 {
                planes[y * IMG + x] = b;
            }
        }
    }
    for v in &mut planes[IMG * IMG..2 * IMG * IMG] {
        *v = BACKDROP_GREEN;
    }
    planes
}

fn positive_planes() -> Vec<u8> {
    let mut planes = vec![0u8; 3 * IMG * IMG];
    for v in &mut planes[IMG * IMG..2 * IMG * IMG] {
        *v = BACKDROP_GREEN;
    }
    planes
}

/// Generate the packaged 512x512 fixture into `dir`: crafted weights, the
/// image pair, a mask labelling the calibrated selection 515 nose + 69 face,
/// and a manifest wiring them together. The construction is verified against
/// the real pipeline before returning.
pub fn fig3_fixture(dir: &Path) -> Result<Fig3Fixture> {
    std::fs::create_dir_all(dir.join("weights"))?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;

    let cells = calibrate_pattern()?;
    let design = pattern_design(&cells);
    let upsampled = upsample(&design, (IMG, IMG))?;
    if !margin_ok(upsampled.data()) {
        return Err(Error::Format(
            "fixture pattern has pixels too close to the threshold".into(),
        ));
    }
    let selection = select_by_value_threshold(&upsampled, 0.5)?;
    if selection.len() != TARGET_SELECTED {
        return Err(Error::Format(format!(
            "fixture selects {} pixels, wanted {TARGET_SELECTED}",
            selection.len()
        )));
    }

    // Mask: first 515 selected pixels (row-major) are nose, the rest face.
    let mut labels = vec![0u8; IMG * IMG];
    for (i, &(r, c)) in selection.coords.iter().enumerate() {
        labels[r * IMG + c] = if i < TARGET_NOSE { 2 } else { 1 };
    }
    let mask_path = dir.join("masks/fig3.pgm");
    let mask_img =
        image::GrayImage::from_raw(IMG as u32, IMG as u32, labels).expect("sized buffer");
    mask_img.save(&mask_path)?;

    let anchor_path = dir.join("images/anchor.png");
    save_png_rgb(&anchor_path, IMG, IMG, &anchor_planes(&cells))?;
    let positive_path = dir.join("images/positive.png");
    save_png_rgb(&positive_path, IMG, IMG, &positive_planes())?;

    let net = assemble(crafted_params())?;
    let weights_path = dir.join("weights/fig3net.dnw");
    save_weights(&net, &weights_path)?;

    // End-to-end verification against the real pipeline.
    let anchor = crate::image_io::load_image(&anchor_path)?;
    let positive = crate::image_io::load_image(&positive_path)?;
    let (_, maps) = generate_maps(&net, &anchor, &positive)?;
    let conv3 = maps
        .iter()
        .find(|m| m.layer_id == "conv3")
        .ok_or_else(|| Error::Missing("conv3 map".into()))?;
    let lived = select_by_value_threshold(&conv3.upsampled, 0.5)?;
    if lived.coords != selection.coords {
        return Err(Error::Format(
            "pipeline selection drifted from the calibrated pattern".into(),
        ));
    }

    let manifest = Manifest {
        seed: 7,
        models: vec![ModelSpec {
            id: "fig3net".into(),
            weights: PathBuf::from("weights/fig3net.dnw"),
        }],
        layers: vec!["conv3".into()],
        identities: vec![IdentityEntry {
            id: "fig3".into(),
            images: vec![
                ImageEntry {
                    image: PathBuf::from("images/anchor.png"),
                    mask: Some(PathBuf::from("masks/fig3.pgm")),
                    landmarks: None,
                    attributes: None,
                    reference: true,
                },
                ImageEntry {
                    image: PathBuf::from("images/positive.png"),
                    mask: Some(PathBuf::from("masks/fig3.pgm")),
                    landmarks: None,
                    attributes: None,
                    reference: false,
                },
            ],
        }],
    };
    let manifest_path = dir.join("manifest.json");
    save_manifest(&manifest, &manifest_path)?;

    Ok(Fig3Fixture {
        manifest_path,
        model_id: "fig3net".into(),
        layer: "conv3".into(),
        pair_id: "fig3:anchor->positive".into(),
        selected_pixels: TARGET_SELECTED,
        nose_pixels: TARGET_NOSE,
        face_pixels: TARGET_FACE,
    })
}

// ---------------------------------------------------------------------------
// Occlusion benchmark pairs
// ---------------------------------------------------------------------------

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amplitude: [f64; 3],
}

fn render_blobs(blobs: &[Blob], side: usize, noise: &mut Xoshiro256StarStar) -> Tensor {
    let mut tensor = Tensor::zeros(vec![3, side, side]);
    for y in 0..side {
        for x in 0..side {
            let mut rgb = [40.0, 40.0, 40.0];
            for blob in blobs {
                let d2 = (y as f64 - blob.cy).powi(2) + (x as f64 - blob.cx).powi(2);
                let w = (-d2 / (2.0 * blob.sigma * blob.sigma)).exp();
                for (v, a) in rgb.iter_mut().zip(blob.amplitude) {
                    *v += a * w;
                }
            }
            for (ch, v) in rgb.into_iter().enumerate() {
                let byte = (v + noise.gen_range(-4.0..4.0)).clamp(0.0, 255.0) as u8;
                tensor.set3(ch, y, x, normalize_pixel(byte));
            }
        }
    }
    tensor
}

/// Structured synthetic image pairs for occlusion benchmarks: each pair is a
/// blob composition plus a lightly jittered second view of it.
pub fn occlusion_bench_pairs(count: usize, side: usize, seed: u64) -> Vec<SweepPair> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for index in 0..count {
        let blobs: Vec<Blob> = (0..5)
            .map(|_| Blob {
                cy: rng.gen_range(0.2..0.8) * side as f64,
                cx: rng.gen_range(0.2..0.8) * side as f64,
                sigma: rng.gen_range(0.06..0.16) * side as f64,
                amplitude: [
                    rng.gen_range(60.0..215.0),
                    rng.gen_range(60.0..215.0),
                    rng.gen_range(60.0..215.0),
                ],
            })
            .collect();
        let anchor = render_blobs(&blobs, side, &mut rng);
        let jittered: Vec<Blob> = blobs
            .iter()
            .map(|b| Blob {
                cy: b.cy + rng.gen_range(-1.5..1.5),
                cx: b.cx + rng.gen_range(-1.5..1.5),
                sigma: b.sigma,
                amplitude: b.amplitude,
            })
            .collect();
        let positive = render_blobs(&jittered, side, &mut rng);
        pairs.push(SweepPair {
            pair_id: format!("bench{index:03}:a->b"),
            identity: format!("bench{index:03}"),
            anchor,
            positive,
        });
    }
    pairs
}

// ---------------------------------------------------------------------------
// Demo dataset
// ---------------------------------------------------------------------------

struct FaceGeometry {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    nose_hw: f64,
    nose_bottom: f64,
    mouth_hw: f64,
    mouth_y: f64,
}

impl FaceGeometry {
    fn new(side: usize, jx: f64, jy: f64) -> Self {
        let s = side as f64;
        Self {
            cx: 0.5 * s + jx,
            cy: 0.5 * s + jy,
            rx: 0.30 * s,
            ry: 0.40 * s,
            eye_dx: 0.12 * s,
            eye_y: 0.5 * s + jy - 0.08 * s,
            eye_r: 0.045 * s,
            nose_hw: 0.035 * s,
            nose_bottom: 0.5 * s + jy + 0.10 * s,
            mouth_hw: 0.08 * s,
            mouth_y: 0.5 * s + jy + 0.21 * s,
        }
    }

    fn in_ellipse(&self, x: f64, y: f64) -> bool {
        ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2) <= 1.0
    }

    fn label(&self, x: f64, y: f64, side: usize) -> u8 {
        let s = side as f64;
        if !self.in_ellipse(x, y) {
            if y > 0.92 * s {
                return 14; // clothes
            }
            if y > self.cy + 0.5 * self.ry && (x - self.cx).abs() < 0.12 * s {
                return 13; // neck
            }
            return 0;
        }
        // Features, innermost first.
        let left_eye = (x - (self.cx - self.eye_dx)).powi(2) + (y - self.eye_y).powi(2)
            <= self.eye_r * self.eye_r;
        let right_eye = (x - (self.cx + self.eye_dx)).powi(2) + (y - self.eye_y).powi(2)
            <= self.eye_r * self.eye_r;
        if left_eye {
            return 6;
        }
        if right_eye {
            return 7;
        }
        let brow_y = self.eye_y - 0.07 * s;
        if (y - brow_y).abs() <= 0.015 * s {
            if (x - (self.cx - self.eye_dx)).abs() <= 0.06 * s {
                return 8;
            }
            if (x - (self.cx + self.eye_dx)).abs() <= 0.06 * s {
                return 9;
            }
        }
        if (x - self.cx).abs() <= self.nose_hw
            && y >= self.cy - 0.02 * s
            && y <= self.nose_bottom
        {
            return 2;
        }
        if (x - self.cx).abs() <= self.mouth_hw {
            if (y - (self.mouth_y - 0.025 * s)).abs() <= 0.012 * s {
                return 4; // upper lip
            }
            if (y - self.mouth_y).abs() <= 0.012 * s {
                return 3; // inner mouth
            }
            if (y - (self.mouth_y + 0.025 * s)).abs() <= 0.012 * s {
                return 5; // lower lip
            }
        }
        if y < self.cy - 0.22 * s {
            return 12; // hair
        }
        1 // face
    }

    fn landmarks(&self, side: usize) -> LandmarkSet {
        let mut points = std::collections::BTreeMap::new();
        let lx = self.cx - self.eye_dx;
        let rx = self.cx + self.eye_dx;
        points.insert("left-eye-outer".into(), [lx - self.eye_r, self.eye_y]);
        points.insert("left-eye-inner".into(), [lx + self.eye_r, self.eye_y]);
        points.insert("right-eye-inner".into(), [rx - self.eye_r, self.eye_y]);
        points.insert("right-eye-outer".into(), [rx + self.eye_r, self.eye_y]);
        points.insert("nose-tip".into(), [self.cx, self.nose_bottom]);
        points.insert("mouth-left".into(), [self.cx - self.mouth_hw, self.mouth_y]);
        points.insert("mouth-right".into(), [self.cx + self.mouth_hw, self.mouth_y]);
        LandmarkSet {
            width: side,
            height: side,
            points,
        }
    }
}

const LABEL_COLORS: [[f64; 3]; 19] = [
    [62.0, 74.0, 96.0],    // background
    [206.0, 168.0, 140.0], // face
    [222.0, 178.0, 146.0], // nose
    [96.0, 40.0, 44.0],    // inner mouth
    [176.0, 92.0, 96.0],   // upper lip
    [182.0, 96.0, 100.0],  // lower lip
    [52.0, 42.0, 40.0],    // left eye
    [52.0, 42.0, 40.0],    // right eye
    [88.0, 64.0, 48.0],    // left eyebrow
    [88.0, 64.0, 48.0],    // right eyebrow
    [198.0, 158.0, 132.0], // left ear
    [198.0, 158.0, 132.0], // right ear
    [70.0, 52.0, 36.0],    // hair
    [198.0, 162.0, 136.0], // neck
    [90.0, 102.0, 140.0],  // clothes
    [30.0, 30.0, 34.0],    // eyeglasses
    [120.0, 70.0, 50.0],   // hat
    [210.0, 190.0, 90.0],  // earrings
    [200.0, 200.0, 210.0], // necklace
];

/// Write a synthetic face-like dataset (images, masks, landmarks, manifest,
/// seeded weights) into `dir` and return the manifest path. Images are PNG
/// except the last image of each identity, written in the raw planar format
/// so both ingestion paths stay exercised.
pub fn demo_dataset(
    dir: &Path,
    identities: usize,
    images_per_identity: usize,
    side: usize,
    seed: u64,
) -> Result<PathBuf> {
    if identities == 0 || images_per_identity < 2 {
        return Err(Error::Empty(
            "demo dataset needs identities with at least 2 images".into(),
        ));
    }
    std::fs::create_dir_all(dir.join("weights"))?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    std::fs::create_dir_all(dir.join("landmarks"))?;

    let net = crate::desknet::build_desknet(seed);
    let weights_rel = PathBuf::from(format!("weights/desknet{seed}.dnw"));
    save_weights(&net, &dir.join(&weights_rel))?;

    let mut manifest_identities = Vec::new();
    for id_index in 0..identities {
        let identity = format!("id{id_index:03}");
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed ^ fnv_mix(id_index as u64));
        let skin_shift = rng.gen_range(-30.0..30.0);
        let mut images = Vec::new();
        for img_index in 0..images_per_identity {
            let jx = rng.gen_range(-0.02..0.02) * side as f64;
            let jy = rng.gen_range(-0.02..0.02) * side as f64;
            let geometry = FaceGeometry::new(side, jx, jy);

            let mut planes = vec![0u8; 3 * side * side];
            let mut labels = vec![0u8; side * side];
            for y in 0..side {
                for x in 0..side {
                    let label = geometry.label(x as f64, y as f64, side);
                    labels[y * side + x] = label;
                    let base = LABEL_COLORS[label as usize];
                    for ch in 0..3 {
                        let tone = if label == 1 || label == 2 || label == 13 {
                            skin_shift
                        } else {
                            0.0
                        };
                        let v = base[ch] + tone + rng.gen_range(-6.0..6.0);
                        planes[ch * side * side + y * side + x] = v.clamp(0.0, 255.0) as u8;
                    }
                }
            }

            let stem = format!("{identity}_{img_index}");
            let raw_format = img_index + 1 == images_per_identity;
            let image_rel = if raw_format {
                PathBuf::from(format!("images/{stem}.raw"))
            } else {
                PathBuf::from(format!("images/{stem}.png"))
            };
            if raw_format {
                save_raw_planar(&dir.join(&image_rel), side, side, &planes)?;
            } else {
                save_png_rgb(&dir.join(&image_rel), side, side, &planes)?;
            }

            let mask_rel = PathBuf::from(format!("masks/{stem}.png"));
            image::GrayImage::from_raw(side as u32, side as u32, labels)
                .expect("sized buffer")
                .save(dir.join(&mask_rel))?;

            let landmarks_rel = PathBuf::from(format!("landmarks/{stem}.json"));
            save_landmarks(&geometry.landmarks(side), &dir.join(&landmarks_rel))?;

            images.push(ImageEntry {
                image: image_rel,
                mask: Some(mask_rel),
                landmarks: Some(landmarks_rel),
                attributes: Some(DemographicAttributes {
                    gender: if id_index % 2 == 0 {
                        Gender::Female
                    } else {
                        Gender::Male
                    },
                    ethnicity: match id_index % 4 {
                        0 => Ethnicity::Caucasian,
                        1 => Ethnicity::African,
                        2 => Ethnicity::EastAsian,
                        _ => Ethnicity::SouthAsian,
                    },
                    age: Some(25 + ((id_index * 5 + img_index * 3) % 20) as u32),
                }),
                reference: img_index == 0,
            });
        }
        manifest_identities.push(IdentityEntry {
            id: identity,
            images,
        });
    }

    let manifest = Manifest {
        seed,
        models: vec![ModelSpec {
            id: format!("desknet{seed}"),
            weights: weights_rel,
        }],
        layers: vec!["conv1".into(), "conv2".into(), "conv3".into()],
        identities: manifest_identities,
    };
    let manifest_path = dir.join("manifest.json");
    save_manifest(&manifest, &manifest_path)?;
    Ok(manifest_path)
}

fn fnv_mix(v: u64) -> u64 {
    crate::occlusion::fnv1a64(&v.to_le_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::load_manifest;

    #[test]
    fn calibration_hits_the_target_exactly() {
        let cells = calibrate_pattern().unwrap();
        let design = pattern_design(&cells);
        let up = upsample(&design, (IMG, IMG)).unwrap();
        let selection = select_by_value_threshold(&up, 0.5).unwrap();
        assert_eq!(selection.len(), TARGET_SELECTED);
        assert!(margin_ok(up.data()));
    }

    #[test]
    fn spike_counts_match_global_upsampling() {
        for byte in [180u8, 220, 255] {
            let cell = (36, 104);
            let local = spike_count(cell, byte);
            let mut design = Tensor::zeros(vec![LATTICE, LATTICE]);
            design.data_mut()[cell.0 * LATTICE + cell.1] = lattice_value(byte);
            let up = upsample(&design, (IMG, IMG)).unwrap();
            let global = select_by_value_threshold(&up, 0.5).unwrap().len();
            assert_eq!(local, global, "byte {byte}");
        }
    }

    #[test]
    fn demo_dataset_is_loadable_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let path = demo_dataset(dir.path(), 2, 2, 48, 11).unwrap();
        let manifest = load_manifest(&path).unwrap();
        assert_eq!(manifest.identities.len(), 2);
        manifest.validate_references().unwrap();
        for identity in &manifest.identities {
            for entry in &identity.images {
                let image = crate::image_io::load_image(&entry.image).unwrap();
                assert_eq!(image.shape(), &[3, 48, 48]);
                let mask = crate::regions::load_mask(entry.mask.as_ref().unwrap()).unwrap();
                assert_eq!((mask.height, mask.width), (48, 48));
                let lm =
                    crate::mapsim::load_landmarks(entry.landmarks.as_ref().unwrap()).unwrap();
                lm.validate().unwrap();
            }
        }
    }

    #[test]
    fn bench_pairs_are_deterministic() {
        let a = occlusion_bench_pairs(2, 32, 5);
        let b = occlusion_bench_pairs(2, 32, 5);
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.anchor, y.anchor);
            assert_eq!(x.positive, y.positive);
        }
        assert_ne!(a[0].anchor, a[0].positive);
    }
}
