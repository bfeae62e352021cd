//! End-to-end check of the packaged region-correlation fixture: the crafted
//! weights plus calibrated images must drive the real pipeline to exactly the
//! published pixel split.

use leam_core::desknet::load_weights;
use leam_core::fixtures::fig3_fixture;
use leam_core::image_io::load_image;
use leam_core::leam::generate_maps;
use leam_core::manifest::load_manifest;
use leam_core::regions::{correlate, load_mask, select_by_value_threshold};

#[test]
fn fixture_reproduces_published_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = fig3_fixture(dir.path()).unwrap();
    assert_eq!(fixture.selected_pixels, 584);

    let manifest = load_manifest(&fixture.manifest_path).unwrap();
    let model = manifest.model(&fixture.model_id).unwrap();
    let net = load_weights(&model.weights).unwrap();
    let identity = manifest.identity("fig3").unwrap();
    let anchor = load_image(&identity.images[0].image).unwrap();
    let positive = load_image(&identity.images[1].image).unwrap();

    let (pair, maps) = generate_maps(&net, &anchor, &positive).unwrap();
    assert!(pair.loss > 0.0, "distinct images must have positive loss");
    let conv3 = maps.iter().find(|m| m.layer_id == "conv3").unwrap();
    let selection = select_by_value_threshold(&conv3.upsampled, 0.5).unwrap();
    assert_eq!(selection.len(), 584);

    let mask = load_mask(identity.images[0].mask.as_ref().unwrap()).unwrap();
    let report = correlate(&selection, &mask).unwrap();
    assert_eq!(report.counts[2], 515.0, "nose pixels");
    assert_eq!(report.counts[1], 69.0, "face pixels");
    assert!((report.relative_percent[2] - 88.18).abs() <= 0.01);
    assert!((report.relative_percent[1] - 11.82).abs() <= 0.01);
    assert!((report.absolute_percent[2] - 0.20).abs() <= 0.01);
    assert!((report.absolute_percent[1] - 0.03).abs() <= 0.01);

    // The reverse ordered pair is degenerate by construction: its anchor
    // never activates channel 0, so the map is identically zero.
    let (_, reverse) = generate_maps(&net, &positive, &anchor).unwrap();
    let conv3_rev = reverse.iter().find(|m| m.layer_id == "conv3").unwrap();
    assert!(conv3_rev.raw.data().iter().all(|&v| v == 0.0));
}
