//! Facial-region segmentation masks and map/region correlation.
//!
//! Masks carry one of 19 class labels per pixel. Relevant pixels are selected
//! from a normalized activation map either by a strict value threshold or by
//! taking the top p% of pixels (denominator: the whole image; ties broken in
//! row-major order; capped at the number of strictly positive pixels). The
//! correlation report counts selected pixels per class.

use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// The 19 facial-region classes, in fixed report order. The pixel value in a
/// mask file is an index into this table.
pub const CLASS_TABLE: [&str; 19] = [
    "background",
    "face",
    "nose",
    "inner mouth",
    "upper lip",
    "lower lip",
    "left eye",
    "right eye",
    "left eyebrow",
    "right eyebrow",
    "left ear",
    "right ear",
    "hair",
    "neck",
    "clothes",
    "eyeglasses",
    "hat",
    "earrings",
    "necklace",
];

pub const NUM_CLASSES: usize = CLASS_TABLE.len();

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_TABLE.iter().position(|&c| c == name)
}

/// Per-pixel class labels at image resolution.
#[derive(Debug, Clone)]
pub struct SegmentationMask {
    pub height: usize,
    pub width: usize,
    labels: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Format(format!(
                "mask payload {} does not match {height}x{width}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Format(format!(
                "mask label {bad} is outside the {NUM_CLASSES}-class table"
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn label(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// Load a mask from an 8-bit single-channel PNG or PGM file whose pixel
/// values are class indices.
pub fn load_mask(path: &Path) -> Result<SegmentationMask> {
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => other.into_luma8(),
    };
    let (width, height) = (gray.width() as usize, gray.height() as usize);
    SegmentationMask::new(height, width, gray.into_raw())
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectionMode {
    ValueThreshold(f64),
    TopPercent(f64),
}

/// A deduplicated, in-bounds set of selected pixels, kept in row-major order.
#[derive(Debug, Clone)]
pub struct PixelSelection {
    pub coords: Vec<(usize, usize)>,
    pub source_map: String,
    pub mode: SelectionMode,
    pub height: usize,
    pub width: usize,
}

impl PixelSelection {
    pub fn total_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Pixels with value strictly greater than `t` on a `[0, 1]`-normalized map.
pub fn select_by_value_threshold(map: &Tensor, t: f64) -> Result<PixelSelection> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!(
            "selection wants a rank-2 map, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let coords = map
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > t)
        .map(|(i, _)| (i / w, i % w))
        .collect();
    Ok(PixelSelection {
        coords,
        source_map: String::new(),
        mode: SelectionMode::ValueThreshold(t),
        height: h,
        width: w,
    })
}

/// The `ceil(p/100 * H*W)` highest-valued pixels, ties broken by row-major
/// coordinate order, capped at the number of strictly positive pixels.
pub fn select_top_percent(map: &Tensor, p: f64) -> Result<PixelSelection> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!(
            "selection wants a rank-2 map, got {:?}",
            map.shape()
        )));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Shape(format!("top-percent p={p} outside (0, 100]")));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let total = h * w;
    let nominal = ((p / 100.0) * total as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        map.data()[b]
            .partial_cmp(&map.data()[a])
            .expect("finite map values")
            .then(a.cmp(&b))
    });
    let positives = map.data().iter().filter(|&&v| v > 0.0).count();
    let k = nominal.min(positives);
    let mut coords: Vec<(usize, usize)> = order[..k].iter().map(|&i| (i / w, i % w)).collect();
    coords.sort_unstable();
    Ok(PixelSelection {
        coords,
        source_map: String::new(),
        mode: SelectionMode::TopPercent(p),
        height: h,
        width: w,
    })
}

/// Selected-pixel counts per facial class with absolute percentages (of the
/// whole image) and relative percentages (of the selection).
#[derive(Debug, Clone)]
pub struct CorrelationReport {
    /// Count per class; exact integers for single reports, means after
    /// aggregation.
    pub counts: Vec<f64>,
    pub absolute_percent: Vec<f64>,
    pub relative_percent: Vec<f64>,
    pub selection_size: f64,
    pub total_pixels: usize,
    /// Set when the selection was empty and relative percentages are
    /// reported as zeros by convention.
    pub empty_selection: bool,
    /// Number of underlying reports (1 until aggregated).
    pub report_count: usize,
}

/// Count selected pixels per mask class.
pub fn correlate(selection: &PixelSelection, mask: &SegmentationMask) -> Result<CorrelationReport> {
    if selection.height != mask.height || selection.width != mask.width {
        return Err(Error::Shape(format!(
            "selection {}x{} vs mask {}x{}",
            selection.height, selection.width, mask.height, mask.width
        )));
    }
    let mut counts = vec![0u64; NUM_CLASSES];
    for &(r, c) in &selection.coords {
        counts[mask.label(r, c) as usize] += 1;
    }
    let total = selection.total_pixels() as f64;
    let selected = selection.len() as f64;
    let empty = selection.is_empty();
    let absolute = counts
        .iter()
        .map(|&n| n as f64 / total * 100.0)
        .collect();
    let relative = counts
        .iter()
        .map(|&n| if empty { 0.0 } else { n as f64 / selected * 100.0 })
        .collect();
    Ok(CorrelationReport {
        counts: counts.iter().map(|&n| n as f64).collect(),
        absolute_percent: absolute,
        relative_percent: relative,
        selection_size: selected,
        total_pixels: selection.total_pixels(),
        empty_selection: empty,
        report_count: 1,
    })
}

/// Unweighted arithmetic mean of reports, class by class.
pub fn aggregate_reports(reports: &[CorrelationReport]) -> Result<CorrelationReport> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mut counts = vec![0.0; NUM_CLASSES];
    let mut absolute = vec![0.0; NUM_CLASSES];
    let mut relative = vec![0.0; NUM_CLASSES];
    let mut selection = 0.0;
    let mut report_count = 0;
    for r in reports {
        for i in 0..NUM_CLASSES {
            counts[i] += r.counts[i];
            absolute[i] += r.absolute_percent[i];
            relative[i] += r.relative_percent[i];
        }
        selection += r.selection_size;
        report_count += r.report_count;
    }
    for i in 0..NUM_CLASSES {
        counts[i] /= n;
        absolute[i] /= n;
        relative[i] /= n;
    }
    Ok(CorrelationReport {
        counts,
        absolute_percent: absolute,
        relative_percent: relative,
        selection_size: selection / n,
        total_pixels: reports[0].total_pixels,
        empty_selection: reports.iter().all(|r| r.empty_selection),
        report_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn map_2x2(values: [f64; 4]) -> Tensor {
        Tensor::new(vec![2, 2], values.to_vec()).unwrap()
    }

    #[test]
    fn threshold_selection_hand_cases() {
        let m = map_2x2([0.6, 0.2, 0.9, 0.0]);
        let sel = select_by_value_threshold(&m, 0.5).unwrap();
        assert_eq!(sel.coords, vec![(0, 0), (1, 0)]);

        // t = 0 keeps exactly the strictly positive pixels.
        let sel = select_by_value_threshold(&m, 0.0).unwrap();
        assert_eq!(sel.coords, vec![(0, 0), (0, 1), (1, 0)]);

        // Nothing exceeds 1 on a normalized map.
        let ones = map_2x2([1.0, 1.0, 1.0, 1.0]);
        assert!(select_by_value_threshold(&ones, 1.0).unwrap().is_empty());
    }

    #[test]
    fn top_percent_hand_cases() {
        // Unique values, p covering one pixel.
        let m = Tensor::from_fn(vec![10, 10], |i| i as f64 + 1.0);
        let sel = select_top_percent(&m, 1.0).unwrap();
        assert_eq!(sel.coords, vec![(9, 9)]);

        // All-equal positive map: row-major tie break.
        let flat = Tensor::from_fn(vec![10, 10], |_| 3.0);
        let sel = select_top_percent(&flat, 2.0).unwrap();
        assert_eq!(sel.coords, vec![(0, 0), (0, 1)]);

        // All-zero map: capped at zero positives.
        let zeros = Tensor::zeros(vec![10, 10]);
        assert!(select_top_percent(&zeros, 50.0).unwrap().is_empty());
    }

    #[test]
    fn top_percent_ceil_counts() {
        // ceil(0.01 * 4096) = 41 on a 64x64 all-positive map.
        let m = Tensor::from_fn(vec![64, 64], |i| (i + 1) as f64);
        let sel = select_top_percent(&m, 1.0).unwrap();
        assert_eq!(sel.len(), 41);
    }

    proptest! {
        #[test]
        fn top_percent_is_monotone_in_p(values in proptest::collection::vec(0.0f64..5.0, 36),
                                        p1 in 1.0f64..50.0, extra in 1.0f64..49.0) {
            let m = Tensor::new(vec![6, 6], values).unwrap();
            let p2 = (p1 + extra).min(100.0);
            let s1 = select_top_percent(&m, p1).unwrap();
            let s2 = select_top_percent(&m, p2).unwrap();
            let set2: std::collections::HashSet<_> = s2.coords.iter().collect();
            prop_assert!(s1.coords.iter().all(|c| set2.contains(c)));
        }

        #[test]
        fn relative_percent_sums_to_100(values in proptest::collection::vec(0.0f64..1.0, 25),
                                        labels in proptest::collection::vec(0u8..19, 25)) {
            let m = Tensor::new(vec![5, 5], values).unwrap();
            let mask = SegmentationMask::new(5, 5, labels).unwrap();
            let sel = select_by_value_threshold(&m, 0.3).unwrap();
            let report = correlate(&sel, &mask).unwrap();
            if !report.empty_selection {
                let sum: f64 = report.relative_percent.iter().sum();
                prop_assert!((sum - 100.0).abs() <= 0.01);
            }
            let count_sum: f64 = report.counts.iter().sum();
            prop_assert!((count_sum - report.selection_size).abs() < 1e-9);
        }
    }

    /// Brute-force per-pixel oracle for correlate.
    #[test]
    fn correlate_matches_per_pixel_scan() {
        let m = Tensor::from_fn(vec![8, 8], |i| ((i * 37) % 11) as f64 / 10.0);
        let mask =
            SegmentationMask::new(8, 8, (0..64).map(|i| ((i * 7) % 19) as u8).collect()).unwrap();
        let sel = select_by_value_threshold(&m, 0.4).unwrap();
        let report = correlate(&sel, &mask).unwrap();
        let mut oracle = vec![0u64; NUM_CLASSES];
        for r in 0..8 {
            for c in 0..8 {
                if m.at2(r, c) > 0.4 {
                    oracle[mask.label(r, c) as usize] += 1;
                }
            }
        }
        for (got, want) in report.counts.iter().zip(&oracle) {
            assert_eq!(*got, *want as f64);
        }
    }

    #[test]
    fn correlate_edge_cases() {
        let mask = SegmentationMask::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        // Empty selection: all zero, flagged.
        let zeros = Tensor::zeros(vec![2, 2]);
        let sel = select_by_value_threshold(&zeros, 0.5).unwrap();
        let report = correlate(&sel, &mask).unwrap();
        assert!(report.empty_selection);
        assert!(report.relative_percent.iter().all(|&v| v == 0.0));

        // Whole image of a single class: 100% absolute and relative.
        let ones = Tensor::from_fn(vec![2, 2], |_| 1.0);
        let sel = select_by_value_threshold(&ones, 0.5).unwrap();
        let report = correlate(&sel, &mask).unwrap();
        assert_eq!(report.relative_percent[1], 100.0);
        assert_eq!(report.absolute_percent[1], 100.0);

        // Dimension mismatch is an error.
        let tall = SegmentationMask::new(3, 2, vec![0; 6]).unwrap();
        assert!(correlate(&sel, &tall).is_err());
    }

    #[test]
    fn aggregate_hand_cases() {
        let mask = SegmentationMask::new(2, 2, vec![1, 1, 2, 2]).unwrap();
        let full = select_by_value_threshold(&Tensor::from_fn(vec![2, 2], |_| 1.0), 0.0).unwrap();
        let half = select_by_value_threshold(
            &Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap(),
            0.0,
        )
        .unwrap();
        let a = correlate(&full, &mask).unwrap(); // face 50%, nose 50%
        let b = correlate(&half, &mask).unwrap(); // face 100%

        // Identity on a single report.
        let single = aggregate_reports(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.relative_percent, a.relative_percent);

        let agg = aggregate_reports(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(agg.relative_percent[1], 75.0);
        assert_eq!(agg.relative_percent[2], 25.0);
        assert_eq!(agg.report_count, 2);

        // Permutation invariance.
        let swapped = aggregate_reports(&[b, a]).unwrap();
        assert_eq!(agg.relative_percent, swapped.relative_percent);

        assert!(aggregate_reports(&[]).is_err());
    }

    #[test]
    fn mask_files_roundtrip_and_validate() {
        let dir = tempdir().unwrap();

        // A PGM of all 1s loads as an all-face mask.
        let pgm = dir.path().join("face.pgm");
        let buf = image::GrayImage::from_pixel(4, 3, image::Luma([1u8]));
        buf.save(&pgm).unwrap();
        let mask = load_mask(&pgm).unwrap();
        assert_eq!((mask.height, mask.width), (3, 4));
        assert!(mask.labels().iter().all(|&l| l == 1));

        // A pixel value of 19 is out of table range.
        let bad = dir.path().join("bad.pgm");
        let buf = image::GrayImage::from_pixel(2, 2, image::Luma([19u8]));
        buf.save(&bad).unwrap();
        assert!(matches!(load_mask(&bad), Err(Error::Format(_))));

        // PNG masks load the same way.
        let png = dir.path().join("mask.png");
        let mut buf = image::GrayImage::new(2, 2);
        buf.put_pixel(0, 0, image::Luma([2]));
        buf.put_pixel(1, 0, image::Luma([12]));
        buf.save(&png).unwrap();
        let mask = load_mask(&png).unwrap();
        assert_eq!(mask.label(0, 0), 2);
        assert_eq!(mask.label(0, 1), 12);
    }
}
