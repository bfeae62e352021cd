//! Layer chains with activation recording and reverse-mode gradients.
//!
//! A [`Network`] is a straight-line sequence of layers. Selected convolution
//! layers are "tagged": their outputs are recorded during the forward pass and
//! their gradients are what [`backward`] reports. Networks are immutable after
//! construction and safe to share across threads.

use crate::tensor::{
    avgpool_global, avgpool_global_backward, conv2d, conv2d_backward_input, dense,
    dense_backward_input, l2_normalize, l2_normalize_backward, relu, relu_backward, Tensor,
};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub enum Layer {
    Conv {
        name: String,
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    GlobalAvgPool,
    Dense {
        weights: Tensor,
        bias: Tensor,
    },
    L2Normalize,
}

impl Layer {
    fn conv_name(&self) -> Option<&str> {
        match self {
            Layer::Conv { name, .. } => Some(name),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    tagged: Vec<String>,
    input_channels: usize,
    /// Canonical spatial input size; the chain itself accepts any spatial
    /// extent >= [`Network::MIN_SIDE`] thanks to global pooling.
    input_size: (usize, usize),
}

impl Network {
    pub const MIN_SIDE: usize = 4;

    pub fn new(
        layers: Vec<Layer>,
        tagged: Vec<String>,
        input_channels: usize,
        input_size: (usize, usize),
    ) -> Result<Self> {
        for tag in &tagged {
            if !layers.iter().any(|l| l.conv_name() == Some(tag)) {
                return Err(Error::Shape(format!(
                    "tagged layer {tag:?} is not a convolution layer of this network"
                )));
            }
        }
        Ok(Self {
            layers,
            tagged,
            input_channels,
            input_size,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn tagged_layers(&self) -> &[String] {
        &self.tagged
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    fn validate_input(&self, image: &Tensor) -> Result<()> {
        if image.rank() != 3 {
            return Err(Error::Shape(format!(
                "network input must be [C, H, W], got {:?}",
                image.shape()
            )));
        }
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        if c != self.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} channels, got {c}",
                self.input_channels
            )));
        }
        if h < Self::MIN_SIDE || w < Self::MIN_SIDE {
            return Err(Error::Shape(format!(
                "network input {h}x{w} is below the minimum side {}",
                Self::MIN_SIDE
            )));
        }
        Ok(())
    }

    fn index_of_tagged(&self, layer_id: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.conv_name() == Some(layer_id))
            .ok_or_else(|| Error::Missing(format!("no convolution layer named {layer_id:?}")))
    }

    /// Run the layers *after* `layer_id` on a replacement for that layer's
    /// output and return the resulting embedding. This is the resume path the
    /// finite-difference gradient checks are built on.
    pub fn embed_from_activation(&self, layer_id: &str, activation: &Tensor) -> Result<Tensor> {
        let start = self.index_of_tagged(layer_id)?;
        let mut value = activation.clone();
        for layer in &self.layers[start + 1..] {
            value = apply_layer(layer, &value)?;
        }
        Ok(value)
    }
}

fn apply_layer(layer: &Layer, input: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Conv {
            kernels,
            bias,
            stride,
            padding,
            ..
        } => conv2d(input, kernels, bias, *stride, *padding),
        Layer::Relu => Ok(relu(input)),
        Layer::GlobalAvgPool => avgpool_global(input),
        Layer::Dense { weights, bias } => dense(input, weights, bias),
        Layer::L2Normalize => l2_normalize(input),
    }
}

/// Unit-norm embedding plus the recorded activations of every tagged layer.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub embedding: Tensor,
    /// `(layer-id, activation)` in network order, one entry per tagged layer.
    pub recorded: Vec<(String, Tensor)>,
    pub input_shape: Vec<usize>,
    /// Full tape of layer inputs (`values[i]` feeds layer `i`); the last entry
    /// is the embedding. Needed by [`backward`].
    values: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn recorded_for(&self, layer_id: &str) -> Option<&Tensor> {
        self.recorded
            .iter()
            .find(|(id, _)| id == layer_id)
            .map(|(_, t)| t)
    }
}

/// Gradients of a scalar loss with respect to each tagged activation.
#[derive(Debug, Clone)]
pub struct GradientTrace {
    /// `(layer-id, gradient)` in the same order as `ForwardTrace::recorded`.
    pub grads: Vec<(String, Tensor)>,
}

impl GradientTrace {
    pub fn grad_for(&self, layer_id: &str) -> Option<&Tensor> {
        self.grads
            .iter()
            .find(|(id, _)| id == layer_id)
            .map(|(_, t)| t)
    }
}

/// Forward pass keeping only the running value; used where traces are not
/// needed (embedding-only evaluation in occlusion sweeps).
pub(crate) fn run_embedding(net: &Network, image: &Tensor) -> Result<Tensor> {
    net.validate_input(image)?;
    let mut value = image.clone();
    for layer in &net.layers {
        value = apply_layer(layer, &value)?;
    }
    Ok(value)
}

/// Forward pass recording tagged activations; the embedding comes out of the
/// final layer with unit L2 norm.
pub fn forward(net: &Network, image: &Tensor) -> Result<ForwardTrace> {
    net.validate_input(image)?;
    let mut values = Vec::with_capacity(net.layers.len() + 1);
    values.push(image.clone());
    let mut recorded = Vec::with_capacity(net.tagged.len());
    for layer in &net.layers {
        let out = apply_layer(layer, values.last().expect("nonempty tape"))?;
        if let Some(name) = layer.conv_name() {
            if net.tagged.iter().any(|t| t == name) {
                recorded.push((name.to_string(), out.clone()));
            }
        }
        values.push(out);
    }
    let embedding = values.last().expect("nonempty tape").clone();
    debug_assert!((embedding.norm2() - 1.0).abs() <= 1e-9);
    Ok(ForwardTrace {
        embedding,
        recorded,
        input_shape: image.shape().to_vec(),
        values,
    })
}

/// Reverse-mode sweep from a loss gradient at the embedding down to every
/// tagged activation.
pub fn backward(
    net: &Network,
    trace: &ForwardTrace,
    loss_gradient: &Tensor,
) -> Result<GradientTrace> {
    if loss_gradient.shape() != trace.embedding.shape() {
        return Err(Error::Shape(format!(
            "loss gradient shape {:?} vs embedding {:?}",
            loss_gradient.shape(),
            trace.embedding.shape()
        )));
    }
    if trace.values.len() != net.layers.len() + 1 {
        return Err(Error::Shape(
            "forward trace does not belong to this network".into(),
        ));
    }
    let mut grad = loss_gradient.clone();
    let mut tagged_grads: Vec<(String, Tensor)> = Vec::with_capacity(net.tagged.len());
    for (i, layer) in net.layers.iter().enumerate().rev() {
        // `grad` currently holds dL/d(output of layer i).
        if let Some(name) = layer.conv_name() {
            if net.tagged.iter().any(|t| t == name) {
                tagged_grads.push((name.to_string(), grad.clone()));
            }
        }
        let input = &trace.values[i];
        grad = match layer {
            Layer::Conv {
                kernels,
                stride,
                padding,
                ..
            } => conv2d_backward_input(&grad, kernels, *stride, *padding, input.shape())?,
            Layer::Relu => relu_backward(&grad, input)?,
            Layer::GlobalAvgPool => avgpool_global_backward(&grad, input.shape())?,
            Layer::Dense { weights, .. } => dense_backward_input(&grad, weights)?,
            Layer::L2Normalize => l2_normalize_backward(&grad, input)?,
        };
    }
    tagged_grads.reverse();
    debug_assert_eq!(tagged_grads.len(), trace.recorded.len());
    for ((id, g), (rid, a)) in tagged_grads.iter().zip(&trace.recorded) {
        debug_assert_eq!(id, rid);
        debug_assert_eq!(g.shape(), a.shape());
        let _ = (g, a);
    }
    Ok(GradientTrace {
        grads: tagged_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::desknet;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn random_image(side: usize, seed: u64) -> Tensor {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        Tensor::from_fn(vec![3, side, side], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn forward_records_all_tagged_layers_once() {
        let net = desknet::build_desknet(7);
        let image = Tensor::from_fn(vec![3, 64, 64], |_| -1.0);
        let trace = forward(&net, &image).unwrap();
        assert_eq!(trace.recorded.len(), 3);
        let ids: Vec<_> = trace.recorded.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["conv1", "conv2", "conv3"]);
        assert!((trace.embedding.norm2() - 1.0).abs() <= 1e-9);
        assert_eq!(trace.embedding.len(), 128);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = desknet::build_desknet(7);
        let image = random_image(64, 3);
        let a = forward(&net, &image).unwrap();
        let b = forward(&net, &image).unwrap();
        assert_eq!(a.embedding, b.embedding);
        for (x, y) in a.recorded.iter().zip(&b.recorded) {
            assert_eq!(x.1, y.1);
        }
    }

    #[test]
    fn forward_rejects_wrong_shapes() {
        let net = desknet::build_desknet(7);
        assert!(forward(&net, &Tensor::zeros(vec![1, 64, 64])).is_err());
        assert!(forward(&net, &Tensor::zeros(vec![64, 64])).is_err());
        assert!(forward(&net, &Tensor::zeros(vec![3, 2, 2])).is_err());
    }

    #[test]
    fn backward_zero_gradient_gives_zero_trace() {
        let net = desknet::build_desknet(7);
        let image = random_image(16, 1);
        let trace = forward(&net, &image).unwrap();
        let zero = Tensor::zeros(vec![128]);
        let grads = backward(&net, &trace, &zero).unwrap();
        assert_eq!(grads.grads.len(), 3);
        for (_, g) in &grads.grads {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_is_linear_in_loss_gradient() {
        let net = desknet::build_desknet(7);
        let image = random_image(16, 2);
        let trace = forward(&net, &image).unwrap();
        let mut rng = Xoshiro256StarStar::seed_from_u64(9);
        let cot = Tensor::from_fn(vec![128], |_| rng.gen_range(-1.0..1.0));
        let g1 = backward(&net, &trace, &cot).unwrap();
        let g2 = backward(&net, &trace, &cot.scale(2.0)).unwrap();
        for ((_, a), (_, b)) in g1.grads.iter().zip(&g2.grads) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((2.0 * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }

    /// Central finite differences through the resume path agree with the
    /// reverse sweep at every tagged layer.
    #[test]
    fn backward_matches_finite_differences() {
        let net = desknet::build_desknet(7);
        let image = random_image(8, 4);
        let trace = forward(&net, &image).unwrap();
        let mut rng = Xoshiro256StarStar::seed_from_u64(10);
        let cot = Tensor::from_fn(vec![128], |_| rng.gen_range(-1.0..1.0));
        let grads = backward(&net, &trace, &cot).unwrap();
        let h = 1e-5;
        for (layer_id, activation) in &trace.recorded {
            let analytic = grads.grad_for(layer_id).unwrap();
            for _ in 0..25 {
                let idx = rng.gen_range(0..activation.len());
                let mut plus = activation.clone();
                plus.data_mut()[idx] += h;
                let mut minus = activation.clone();
                minus.data_mut()[idx] -= h;
                let f_plus = net
                    .embed_from_activation(layer_id, &plus)
                    .unwrap()
                    .dot(&cot)
                    .unwrap();
                let f_minus = net
                    .embed_from_activation(layer_id, &minus)
                    .unwrap()
                    .dot(&cot)
                    .unwrap();
                let fd = (f_plus - f_minus) / (2.0 * h);
                let an = analytic.data()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6_f64.max(1e-3 * fd.abs().max(an.abs())),
                    "{layer_id}[{idx}]: fd={fd} analytic={an}"
                );
            }
        }
    }
}
