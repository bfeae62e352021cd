//! Activation mapping for embedding-based recognition networks.
//!
//! The crate covers the full desk-scale pipeline: a small differentiable
//! reference CNN with per-layer activation/gradient recording, gradient-weighted
//! activation maps for image pairs under a cosine loss, correlation of those
//! maps with facial-region segmentation masks, map-similarity metrics
//! (Bhattacharyya coefficient and exact earth mover's distance), occlusion
//! evaluation, and the statistical reporting that goes with all of it.

pub mod archive;
pub mod desknet;
pub mod fixtures;
pub mod image_io;
pub mod leam;
pub mod manifest;
pub mod mapsim;
pub mod occlusion;
pub mod regions;
pub mod stats;
pub mod tensor;
pub mod transport;

mod network;

pub use network::{backward, forward, ForwardTrace, GradientTrace, Layer, Network};
pub use tensor::Tensor;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate embedding: L2 norm {norm:e} is below {min:e}")]
    DegenerateEmbedding { norm: f64, min: f64 },
    #[error("degenerate distribution: total mass is not positive")]
    DegenerateDistribution,
    #[error("format error: {0}")]
    Format(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("missing data: {0}")]
    Missing(String),
    #[error("degenerate geometry: {0}")]
    Geometry(String),
    #[error("transport solution failed optimality certification: {0}")]
    Certification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Format a float with 6 significant digits, the precision used by every CSV
/// this crate emits. Values round-trip through `f64` display, so the output is
/// deterministic for identical bit patterns.
pub fn fmt_sig(value: f64) -> String {
    if value == 0.0 {
        return "0".to_string();
    }
    if !value.is_finite() {
        return value.to_string();
    }
    let exponent = value.abs().log10().floor() as i32;
    let scale = 10f64.powi(exponent - 5);
    let rounded_value = (value / scale).round() * scale;
    // Rounding can carry into the next decade (999999.5 -> 1000000).
    let exponent = rounded_value.abs().log10().floor() as i32;
    let decimals = (5 - exponent).max(0) as usize;
    let rounded = format!("{rounded_value:.decimals$}");
    // Trim trailing zeros but keep at least one digit before losing the point.
    if rounded.contains('.') {
        let trimmed = rounded.trim_end_matches('0').trim_end_matches('.');
        trimmed.to_string()
    } else {
        rounded
    }
}

/// Scientific notation with 6 significant digits, used for p-values.
pub fn fmt_sci(value: f64) -> String {
    format!("{value:.5e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_sig_six_significant_digits() {
        assert_eq!(fmt_sig(88.18493150684931), "88.1849");
        assert_eq!(fmt_sig(0.19645690917968750), "0.196457");
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(-2.5), "-2.5");
        assert_eq!(fmt_sig(123456789.0), "123457000");
    }

    #[test]
    fn fmt_sci_pvalues() {
        assert_eq!(fmt_sci(0.3333333333333333), "3.33333e-1");
        assert_eq!(fmt_sci(0.00009999), "9.99900e-5");
    }
}
