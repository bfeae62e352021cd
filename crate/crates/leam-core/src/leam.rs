//! Gradient-weighted layer activation maps for embedding pairs.
//!
//! For an ordered (anchor, positive) pair the cosine loss `1 - cos` is
//! differentiated with respect to the anchor embedding and backpropagated
//! through the anchor's forward trace. At each tagged layer the map is
//!
//! ```text
//! M = ReLU( sum_k ReLU(g_k) * A_k )
//! ```
//!
//! elementwise over channels `k`: only positively contributing activations
//! survive. Maps are kept raw, max-normalized to `[0, 1]`, and bilinearly
//! upsampled to image resolution.

use crate::network::{backward, forward, Network};
use crate::tensor::{Tensor, NORM_EPSILON};
use crate::{Error, Result};

/// Cosine similarity of two equal-length vectors, clamped into `[-1, 1]`
/// against rounding.
pub fn cosine_similarity(x1: &Tensor, x2: &Tensor) -> Result<f64> {
    if x1.shape() != x2.shape() {
        return Err(Error::Shape(format!(
            "cosine: {:?} vs {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    let (n1, n2) = (x1.norm2(), x2.norm2());
    if !(n1 > NORM_EPSILON) || !(n2 > NORM_EPSILON) {
        return Err(Error::DegenerateEmbedding {
            norm: n1.min(n2),
            min: NORM_EPSILON,
        });
    }
    Ok((x1.dot(x2)? / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Same-identity loss `1 - cos(x1, x2)`, in `[0, 2]`.
pub fn cosine_loss(x1: &Tensor, x2: &Tensor) -> Result<f64> {
    Ok(1.0 - cosine_similarity(x1, x2)?)
}

/// Gradient of `1 - cos(x1, x2)` with respect to `x1`, from the algebraic
/// quotient form. Finite for any non-degenerate inputs, including `x1 == x2`
/// (where it is the zero vector).
pub fn cosine_loss_gradient(x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
    if x1.shape() != x2.shape() {
        return Err(Error::Shape(format!(
            "cosine gradient: {:?} vs {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    let (n1, n2) = (x1.norm2(), x2.norm2());
    if !(n1 > NORM_EPSILON) || !(n2 > NORM_EPSILON) {
        return Err(Error::DegenerateEmbedding {
            norm: n1.min(n2),
            min: NORM_EPSILON,
        });
    }
    let cos = x1.dot(x2)? / (n1 * n2);
    // d(1-cos)/dx1 = cos * x1/|x1|^2 - x2/(|x1||x2|)
    let data = x1
        .data()
        .iter()
        .zip(x2.data())
        .map(|(&a, &b)| cos * a / (n1 * n1) - b / (n1 * n2))
        .collect();
    Tensor::new(x1.shape().to_vec(), data)
}

/// The two roles of an ordered pair plus their similarity and loss.
#[derive(Debug, Clone)]
pub struct EmbeddingPair {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub cosine: f64,
    pub loss: f64,
}

/// A single-layer activation map in its three forms.
#[derive(Debug, Clone)]
pub struct LayerActivationMap {
    pub layer_id: String,
    /// Map at native layer resolution, nonnegative.
    pub raw: Tensor,
    /// `raw / max(raw)` when the maximum is positive, all zeros otherwise.
    pub normalized: Tensor,
    /// Bilinear upsampling of `normalized` to image resolution.
    pub upsampled: Tensor,
}

/// Channel aggregation of gradients and activations into one map.
pub fn leam_layer_map(activations: &Tensor, gradients: &Tensor) -> Result<Tensor> {
    if activations.shape() != gradients.shape() {
        return Err(Error::Shape(format!(
            "layer map: activations {:?} vs gradients {:?}",
            activations.shape(),
            gradients.shape()
        )));
    }
    if activations.rank() != 3 {
        return Err(Error::Shape(format!(
            "layer map input must be [K, H, W], got {:?}",
            activations.shape()
        )));
    }
    let (k, h, w) = (
        activations.shape()[0],
        activations.shape()[1],
        activations.shape()[2],
    );
    let mut out = Tensor::zeros(vec![h, w]);
    let plane = h * w;
    for ch in 0..k {
        let a = &activations.data()[ch * plane..(ch + 1) * plane];
        let g = &gradients.data()[ch * plane..(ch + 1) * plane];
        for (o, (&av, &gv)) in out.data_mut().iter_mut().zip(a.iter().zip(g)) {
            *o += gv.max(0.0) * av;
        }
    }
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    Ok(out)
}

/// Max-normalize a nonnegative map into `[0, 1]`; identically-zero maps stay
/// all zeros.
pub fn max_normalize(map: &Tensor) -> Tensor {
    let max = map.max_value();
    if max > 0.0 {
        map.scale(1.0 / max)
    } else {
        Tensor::zeros(map.shape().to_vec())
    }
}

/// Corner-aligned bilinear resampling of a rank-2 map to `(height, width)`.
/// Constant maps stay constant; values stay nonnegative.
pub fn upsample(map: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!(
            "upsample wants a rank-2 map, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Shape("upsample target must be positive".into()));
    }
    let row_scale = if th > 1 && h > 1 {
        (h - 1) as f64 / (th - 1) as f64
    } else {
        0.0
    };
    let col_scale = if tw > 1 && w > 1 {
        (w - 1) as f64 / (tw - 1) as f64
    } else {
        0.0
    };
    let mut out = Tensor::zeros(vec![th, tw]);
    for r in 0..th {
        let sy = r as f64 * row_scale;
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for c in 0..tw {
            let sx = c as f64 * col_scale;
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let v = map.at2(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + map.at2(y0, x1) * (1.0 - fy) * fx
                + map.at2(y1, x0) * fy * (1.0 - fx)
                + map.at2(y1, x1) * fy * fx;
            out.data_mut()[r * tw + c] = v;
        }
    }
    Ok(out)
}

/// Run the full per-pair map generation: forward both images, differentiate
/// the pair loss with respect to the anchor embedding, backpropagate through
/// the anchor's trace, and aggregate one map per tagged layer.
pub fn generate_maps(
    net: &Network,
    anchor_image: &Tensor,
    positive_image: &Tensor,
) -> Result<(EmbeddingPair, Vec<LayerActivationMap>)> {
    let anchor_trace = forward(net, anchor_image)?;
    let positive_trace = forward(net, positive_image)?;
    let cosine = cosine_similarity(&anchor_trace.embedding, &positive_trace.embedding)?;
    let pair = EmbeddingPair {
        anchor: anchor_trace.embedding.clone(),
        positive: positive_trace.embedding.clone(),
        cosine,
        loss: 1.0 - cosine,
    };
    let loss_grad = cosine_loss_gradient(&anchor_trace.embedding, &positive_trace.embedding)?;
    let grads = backward(net, &anchor_trace, &loss_grad)?;
    let image_res = (anchor_image.shape()[1], anchor_image.shape()[2]);
    let mut maps = Vec::with_capacity(anchor_trace.recorded.len());
    for (layer_id, activation) in &anchor_trace.recorded {
        let gradient = grads
            .grad_for(layer_id)
            .ok_or_else(|| Error::Missing(format!("gradient for layer {layer_id}")))?;
        let raw = leam_layer_map(activation, gradient)?;
        let normalized = max_normalize(&raw);
        let upsampled = upsample(&normalized, image_res)?;
        maps.push(LayerActivationMap {
            layer_id: layer_id.clone(),
            raw,
            normalized,
            upsampled,
        });
    }
    Ok((pair, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::desknet::build_desknet;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    #[test]
    fn cosine_hand_cases() {
        let e1 = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let d = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(cosine_similarity(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let c = cosine_similarity(&d, &e1).unwrap();
        assert!((c - 0.7071067811865475).abs() <= 1e-15);

        assert_eq!(cosine_loss(&e1, &e1).unwrap(), 0.0);
        let opposite = e1.scale(-1.0);
        assert_eq!(cosine_loss(&e1, &opposite).unwrap(), 2.0);
        assert!((cosine_loss(&d, &e1).unwrap() - 0.2928932188134525).abs() <= 1e-15);

        let zero = Tensor::zeros(vec![2]);
        assert!(cosine_similarity(&zero, &e1).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(77);
        let h = 1e-6;
        for _ in 0..20 {
            let x1 = Tensor::from_fn(vec![6], |_| rng.gen_range(-1.0..1.0));
            let x2 = Tensor::from_fn(vec![6], |_| rng.gen_range(-1.0..1.0));
            if x1.norm2() < 0.1 || x2.norm2() < 0.1 {
                continue;
            }
            let grad = cosine_loss_gradient(&x1, &x2).unwrap();
            for idx in 0..6 {
                let mut plus = x1.clone();
                plus.data_mut()[idx] += h;
                let mut minus = x1.clone();
                minus.data_mut()[idx] -= h;
                let fd = (cosine_loss(&plus, &x2).unwrap()
                    - cosine_loss(&minus, &x2).unwrap())
                    / (2.0 * h);
                let an = grad.data()[idx];
                assert!((fd - an).abs() <= 1e-5_f64.max(1e-4 * an.abs()));
            }
        }
    }

    #[test]
    fn layer_map_hand_case() {
        // One channel: g = [[1,-1],[2,0]], A = [[3,4],[5,6]] -> [[3,0],[10,0]].
        let g = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, 2.0, 0.0]).unwrap();
        let a = Tensor::new(vec![1, 2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = leam_layer_map(&a, &g).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[3.0, 0.0, 10.0, 0.0]);
    }

    #[test]
    fn layer_map_negative_gradients_annihilate() {
        let g = Tensor::new(vec![2, 2, 2], vec![-1.0; 8]).unwrap();
        let a = Tensor::from_fn(vec![2, 2, 2], |i| i as f64);
        let m = leam_layer_map(&a, &g).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_map_outer_relu_clips_negative_sums() {
        // Two channels whose weighted sum is negative at pixel (0,0).
        let a = Tensor::new(vec![2, 1, 1], vec![-5.0, 1.0]).unwrap();
        let g = Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap();
        // sum = 1*(-5) + 2*1 = -3 -> clipped to 0.
        let m = leam_layer_map(&a, &g).unwrap();
        assert_eq!(m.data(), &[0.0]);
    }

    proptest! {
        #[test]
        fn layer_maps_are_nonnegative(values in proptest::collection::vec(-10.0f64..10.0, 2 * 9),
                                      grads in proptest::collection::vec(-10.0f64..10.0, 2 * 9)) {
            let a = Tensor::new(vec![2, 3, 3], values).unwrap();
            let g = Tensor::new(vec![2, 3, 3], grads).unwrap();
            let m = leam_layer_map(&a, &g).unwrap();
            prop_assert!(m.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn gradient_scaling_is_covariant(values in proptest::collection::vec(-4.0f64..4.0, 9),
                                         grads in proptest::collection::vec(-4.0f64..4.0, 9),
                                         lambda in 0.1f64..8.0) {
            let a = Tensor::new(vec![1, 3, 3], values).unwrap();
            let g = Tensor::new(vec![1, 3, 3], grads).unwrap();
            let m = leam_layer_map(&a, &g).unwrap();
            let m_scaled = leam_layer_map(&a, &g.scale(lambda)).unwrap();
            for (x, y) in m.data().iter().zip(m_scaled.data()) {
                prop_assert!((lambda * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
            // The normalized map is invariant under positive gradient scaling.
            let n = max_normalize(&m);
            let n_scaled = max_normalize(&m_scaled);
            for (x, y) in n.data().iter().zip(n_scaled.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn upsample_hand_cases() {
        let constant = Tensor::new(vec![2, 3], vec![2.5; 6]).unwrap();
        let up = upsample(&constant, (7, 5)).unwrap();
        assert!(up.data().iter().all(|&v| (v - 2.5).abs() <= 1e-12));

        let single = Tensor::new(vec![1, 1], vec![4.0]).unwrap();
        let up = upsample(&single, (3, 4)).unwrap();
        assert!(up.data().iter().all(|&v| v == 4.0));

        // 2x2 checker to 3x3: center is the mean of the four corners.
        let checker = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = upsample(&checker, (3, 3)).unwrap();
        assert!((up.at2(1, 1) - 0.5).abs() <= 1e-12);
        // Corners are preserved exactly under corner alignment.
        assert_eq!(up.at2(0, 0), 0.0);
        assert_eq!(up.at2(0, 2), 1.0);
        assert_eq!(up.at2(2, 0), 1.0);
        assert_eq!(up.at2(2, 2), 0.0);

        assert_eq!(up.len(), 9);
        assert!(up.all_finite());
        assert!(up.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn generate_maps_self_pair_has_zero_loss() {
        let net = build_desknet(7);
        let mut rng = Xoshiro256StarStar::seed_from_u64(1);
        let image = Tensor::from_fn(vec![3, 32, 32], |_| rng.gen_range(-1.0..1.0));
        let (pair, maps) = generate_maps(&net, &image, &image).unwrap();
        assert!(pair.loss.abs() <= 1e-12);
        assert!((pair.loss - (1.0 - pair.cosine)).abs() <= 1e-12);
        assert_eq!(maps.len(), 3);
        for map in &maps {
            assert!(map.raw.data().iter().all(|&v| v >= 0.0));
            assert!(map.upsampled.data().iter().all(|&v| v >= 0.0));
            assert_eq!(map.upsampled.shape(), &[32, 32]);
        }
    }

    #[test]
    fn generate_maps_is_order_sensitive() {
        let net = build_desknet(7);
        let mut rng = Xoshiro256StarStar::seed_from_u64(2);
        let a = Tensor::from_fn(vec![3, 32, 32], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(vec![3, 32, 32], |_| rng.gen_range(-1.0..1.0));
        let (_, ab) = generate_maps(&net, &a, &b).unwrap();
        let (_, ba) = generate_maps(&net, &b, &a).unwrap();
        let differs = ab
            .iter()
            .zip(&ba)
            .any(|(x, y)| x.raw.data() != y.raw.data());
        assert!(differs, "ordered pairs should not produce identical maps");
    }

    #[test]
    fn normalized_maps_peak_at_one() {
        let net = build_desknet(7);
        let mut rng = Xoshiro256StarStar::seed_from_u64(3);
        let a = Tensor::from_fn(vec![3, 32, 32], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(vec![3, 32, 32], |_| rng.gen_range(-1.0..1.0));
        let (_, maps) = generate_maps(&net, &a, &b).unwrap();
        for map in &maps {
            if map.raw.max_value() > 0.0 {
                assert!((map.normalized.max_value() - 1.0).abs() <= 1e-12);
            } else {
                assert!(map.normalized.data().iter().all(|&v| v == 0.0));
            }
        }
    }
}
