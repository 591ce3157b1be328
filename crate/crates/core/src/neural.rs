//! Feed-forward networks with amplitude-scaled logistic units.
//!
//! Every layer computes `y = λ · σ(W x + b)` where `σ` is the logistic
//! sigmoid and `λ > 0` is a single trainable amplitude shared by the whole
//! layer. The output layer has exactly one unit, so the network realizes a
//! nonnegative scalar function bounded by the output amplitude.
//!
//! Parameters are exposed as one flat vector in a canonical order:
//! layer by layer, each layer contributing its weights (row-major, one row
//! per output unit), then its biases, then its amplitude when the layer is
//! adaptive. [`ParamGradient`] uses the same order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DnmmError, Result};

/// Smallest amplitude kept after an update.
pub const AMPLITUDE_FLOOR: f64 = 1e-6;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `λ / (1 + e^{-a})` with trainable `λ`.
    AdaptiveLogistic,
    /// `1 / (1 + e^{-a})`, no amplitude parameter.
    Logistic,
}

/// Hidden-layer layout shared by every component of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
}

impl Architecture {
    pub fn new(hidden: Vec<usize>) -> Self {
        Self {
            hidden,
            hidden_activation: Activation::AdaptiveLogistic,
        }
    }

    /// Layer sizes for a network on `input_dim` inputs.
    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(1);
        sizes
    }

    pub fn param_count(&self, input_dim: usize) -> usize {
        let sizes = self.layer_sizes(input_dim);
        let mut count = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            count += w[0] * w[1] + w[1];
            let last = l == sizes.len() - 2;
            if last || self.hidden_activation == Activation::AdaptiveLogistic {
                count += 1;
            }
        }
        count
    }

    pub fn describe(&self) -> String {
        let widths: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let act = match self.hidden_activation {
            Activation::AdaptiveLogistic => "adaptive",
            Activation::Logistic => "logistic",
        };
        format!("{}:{}", widths.join("-"), act)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Weights and biases are drawn from `U(-half_width, half_width) / sqrt(fan_in)`.
    pub half_width: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { half_width: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    amplitude: f64,
    activation: Activation,
}

impl Layer {
    fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs + self.has_amplitude() as usize
    }

    fn has_amplitude(&self) -> bool {
        self.activation == Activation::AdaptiveLogistic
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

/// Flat gradient of the network output with respect to every parameter,
/// in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient(pub Vec<f64>);

impl ParamGradient {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Reusable buffers for forward and backward passes.
#[derive(Debug, Clone)]
pub struct Scratch {
    // acts[0] is the input, acts[l + 1] the output of layer l
    acts: Vec<Vec<f64>>,
    sig: Vec<Vec<f64>>,
    sig_c: Vec<Vec<f64>>,
    back: Vec<f64>,
    back_next: Vec<f64>,
}

#[inline]
pub(crate) fn logistic(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepNet {
    layers: Vec<Layer>,
}

impl DeepNet {
    /// Builds a network from explicit layer sizes, all parameters zero and all amplitudes 1.
    pub fn zeros(layer_sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(DnmmError::Input("a network needs at least two layer sizes".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(DnmmError::Input("layer sizes must be positive".into()));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(DnmmError::Input("output layer must have exactly one unit".into()));
        }
        check_dim(layer_sizes.len() - 1, activations.len())?;
        let layers = layer_sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Layer {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                biases: vec![0.0; w[1]],
                amplitude: 1.0,
                activation,
            })
            .collect();
        Ok(Self { layers })
    }

    /// Random network for `arch` on `input_dim` inputs. The output layer is always adaptive.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, arch: &Architecture, init: InitConfig, rng: &mut R) -> Result<Self> {
        let sizes = arch.layer_sizes(input_dim);
        let mut acts = vec![arch.hidden_activation; arch.hidden.len()];
        acts.push(Activation::AdaptiveLogistic);
        let mut net = Self::zeros(&sizes, &acts)?;
        for layer in &mut net.layers {
            let scale = init.half_width / (layer.inputs as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = if scale > 0.0 {
                    rng.random_range(-scale..scale)
                } else {
                    0.0
                };
            }
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn output_amplitude(&self) -> f64 {
        self.layers.last().unwrap().amplitude
    }

    pub fn set_amplitude(&mut self, layer: usize, value: f64) -> Result<()> {
        if !(value > 0.0) {
            return Err(DnmmError::Input(format!("amplitude must be positive, got {value}")));
        }
        let l = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| DnmmError::Input(format!("no layer {layer}")))?;
        l.amplitude = value;
        Ok(())
    }

    /// Parameters in canonical order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
            if l.has_amplitude() {
                out.push(l.amplitude);
            }
        }
        out
    }

    /// Overwrites all parameters; amplitudes are projected onto `[AMPLITUDE_FLOOR, ∞)`.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.param_count(), params.len())?;
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *w = it.next().unwrap();
            }
            if l.has_amplitude() {
                l.amplitude = it.next().unwrap().max(AMPLITUDE_FLOOR);
            }
        }
        Ok(())
    }

    /// Adds `delta` to the parameters, then projects amplitudes.
    pub fn apply_delta(&mut self, delta: &[f64]) -> Result<()> {
        check_dim(self.param_count(), delta.len())?;
        let mut it = delta.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *w += it.next().unwrap();
            }
            if l.has_amplitude() {
                l.amplitude = (l.amplitude + it.next().unwrap()).max(AMPLITUDE_FLOOR);
            }
        }
        Ok(())
    }

    pub fn scratch(&self) -> Scratch {
        let mut acts = vec![vec![0.0; self.input_dim()]];
        acts.extend(self.layers.iter().map(|l| vec![0.0; l.outputs]));
        let sig = self.layers.iter().map(|l| vec![0.0; l.outputs]).collect();
        let sig_c = self.layers.iter().map(|l| vec![0.0; l.outputs]).collect();
        let widest = self.layer_sizes().into_iter().max().unwrap_or(1);
        Scratch {
            acts,
            sig,
            sig_c,
            back: vec![0.0; widest],
            back_next: vec![0.0; widest],
        }
    }

    /// Network output `φ(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.input_dim(), x.len())?;
        let mut scratch = self.scratch();
        Ok(self.forward_with(x, &mut scratch))
    }

    /// Forward pass reusing `scratch`. Panics in debug builds on dimension mismatch.
    pub fn forward_with(&self, x: &[f64], scratch: &mut Scratch) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim());
        scratch.acts[0].copy_from_slice(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = scratch.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            let sig = &mut scratch.sig[l];
            let sig_c = &mut scratch.sig_c[l];
            for j in 0..layer.outputs {
                let row = &layer.weights[j * layer.inputs..(j + 1) * layer.inputs];
                let a = layer.biases[j] + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
                let s = logistic(a);
                sig[j] = s;
                sig_c[j] = logistic(-a);
                out[j] = if layer.has_amplitude() { layer.amplitude * s } else { s };
            }
        }
        scratch.acts[self.layers.len()][0]
    }

    /// `∂φ(x)/∂w` for every parameter `w`.
    pub fn param_gradient(&self, x: &[f64]) -> Result<ParamGradient> {
        check_dim(self.input_dim(), x.len())?;
        let mut scratch = self.scratch();
        let mut grad = ParamGradient::zeros(self.param_count());
        self.value_and_gradient(x, &mut scratch, &mut grad.0);
        Ok(grad)
    }

    /// Forward plus backward pass; writes the gradient into `grad` and returns `φ(x)`.
    pub fn value_and_gradient(&self, x: &[f64], scratch: &mut Scratch, grad: &mut [f64]) -> f64 {
        debug_assert_eq!(grad.len(), self.param_count());
        let value = self.forward_with(x, scratch);

        // offsets of each layer's block in canonical order
        let mut end = grad.len();
        scratch.back[0] = 1.0;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let start = end - layer.param_count();
            let block = &mut grad[start..end];
            let (w_part, rest) = block.split_at_mut(layer.inputs * layer.outputs);
            let (b_part, amp_part) = rest.split_at_mut(layer.outputs);
            let input = &scratch.acts[l];
            let sig = &scratch.sig[l];
            let sig_c = &scratch.sig_c[l];
            let scale = if layer.has_amplitude() { layer.amplitude } else { 1.0 };

            let mut d_amp = 0.0;
            for v in scratch.back_next[..layer.inputs].iter_mut() {
                *v = 0.0;
            }
            for j in 0..layer.outputs {
                let upstream = scratch.back[j];
                d_amp += upstream * sig[j];
                let d_pre = upstream * scale * sig[j] * sig_c[j];
                b_part[j] = d_pre;
                let row = &layer.weights[j * layer.inputs..(j + 1) * layer.inputs];
                let g_row = &mut w_part[j * layer.inputs..(j + 1) * layer.inputs];
                for i in 0..layer.inputs {
                    g_row[i] = d_pre * input[i];
                    scratch.back_next[i] += row[i] * d_pre;
                }
            }
            if layer.has_amplitude() {
                amp_part[0] = d_amp;
            }
            std::mem::swap(&mut scratch.back, &mut scratch.back_next);
            end = start;
        }
        value
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkDoc {
    format_version: u32,
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    amplitudes: Vec<f64>,
    params: Vec<f64>,
}

impl Serialize for DeepNet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NetworkDoc {
            format_version: FORMAT_VERSION,
            layer_sizes: self.layer_sizes(),
            activations: self.activations(),
            amplitudes: self.layers.iter().map(|l| l.amplitude).collect(),
            params: self.params(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DeepNet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let doc = NetworkDoc::deserialize(d)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(D::Error::custom(format!(
                "unsupported network format version {}",
                doc.format_version
            )));
        }
        let mut net = DeepNet::zeros(&doc.layer_sizes, &doc.activations).map_err(D::Error::custom)?;
        net.set_params(&doc.params).map_err(D::Error::custom)?;
        if doc.amplitudes.len() != net.layers.len() {
            return Err(D::Error::custom("amplitude count does not match layer count"));
        }
        for (l, &a) in net.layers.iter_mut().zip(&doc.amplitudes) {
            if l.has_amplitude() {
                if (l.amplitude - a).abs() > 0.0 {
                    return Err(D::Error::custom("amplitudes disagree with parameter array"));
                }
            } else {
                l.amplitude = 1.0;
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn adaptive(n: usize) -> Vec<Activation> {
        vec![Activation::AdaptiveLogistic; n]
    }

    fn small_net(seed: u64) -> DeepNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = DeepNet::new(1, &Architecture::new(vec![4]), InitConfig { half_width: 2.0 }, &mut rng).unwrap();
        net.set_amplitude(0, rng.random_range(0.5..2.0)).unwrap();
        net.set_amplitude(1, rng.random_range(0.5..2.0)).unwrap();
        net
    }

    // Written out by hand for a 1-H-1 network, independent of the layer loop.
    fn hand_forward(net: &DeepNet, x: f64) -> f64 {
        let hidden = &net.layers()[0];
        let out = &net.layers()[1];
        let mut acc = out.biases()[0];
        for j in 0..hidden.weights().len() {
            let h = hidden.amplitude() / (1.0 + (-(hidden.weights()[j] * x + hidden.biases()[j])).exp());
            acc += out.weights()[j] * h;
        }
        out.amplitude() / (1.0 + (-acc).exp())
    }

    #[test]
    fn zero_net_outputs_half() {
        let net = DeepNet::zeros(&[3, 5, 1], &adaptive(2)).unwrap();
        assert_eq!(net.forward(&[0.3, -7.0, 100.0]).unwrap(), 0.5);
    }

    #[test]
    fn output_amplitude_scales_codomain() {
        let mut net = DeepNet::zeros(&[1, 2, 1], &adaptive(2)).unwrap();
        net.set_amplitude(1, 2.0).unwrap();
        assert_eq!(net.forward(&[4.0]).unwrap(), 1.0);
    }

    #[test]
    fn forward_matches_hand_coded_pass() {
        for seed in 0..5 {
            let net = small_net(seed);
            let a = net.forward(&[0.3]).unwrap();
            let b = hand_forward(&net, 0.3);
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn output_amplitude_gradient_is_value_over_amplitude() {
        let net = DeepNet::zeros(&[1, 4, 1], &adaptive(2)).unwrap();
        let g = net.param_gradient(&[0.7]).unwrap();
        assert_eq!(*g.0.last().unwrap(), 0.5);
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..10 {
            let net = small_net(seed);
            let x = [0.3];
            let g = net.param_gradient(&x).unwrap();
            let p = net.params();
            for i in 0..p.len() {
                let h = 1e-6;
                let mut plus = net.clone();
                let mut q = p.clone();
                q[i] += h;
                plus.set_params(&q).unwrap();
                let mut minus = net.clone();
                q[i] -= 2.0 * h;
                minus.set_params(&q).unwrap();
                let fd = (plus.forward(&x).unwrap() - minus.forward(&x).unwrap()) / (2.0 * h);
                let err = (fd - g.0[i]).abs();
                if g.0[i].abs() < 1e-8 && fd.abs() < 1e-8 {
                    assert!(err < 1e-8);
                } else {
                    assert!(err / fd.abs().max(g.0[i].abs()) < 1e-5, "param {i}: {} vs {fd}", g.0[i]);
                }
            }
        }
    }

    #[test]
    fn saturated_hidden_unit_has_vanishing_weight_gradient() {
        let mut net = DeepNet::zeros(&[1, 1, 1], &adaptive(2)).unwrap();
        // hidden pre-activation = 40 at x = 1
        let mut p = net.params();
        p[0] = 30.0;
        p[1] = 10.0;
        p[3] = 1.0;
        net.set_params(&p).unwrap();
        let g = net.param_gradient(&[1.0]).unwrap();
        assert!(g.0[0].abs() < 1e-10);
        assert!(g.0[1].abs() < 1e-10);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = DeepNet::zeros(&[2, 3, 1], &adaptive(2)).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(DnmmError::Dimension { .. })));
        assert!(net.param_gradient(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn output_layer_must_be_scalar() {
        assert!(DeepNet::zeros(&[2, 3, 2], &adaptive(2)).is_err());
    }

    #[test]
    fn plain_logistic_layers_have_no_amplitude() {
        let arch = Architecture {
            hidden: vec![3, 2],
            hidden_activation: Activation::Logistic,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DeepNet::new(2, &arch, InitConfig::default(), &mut rng).unwrap();
        assert_eq!(net.param_count(), arch.param_count(2));
        assert_eq!(net.param_count(), (2 * 3 + 3) + (3 * 2 + 2) + (2 + 1 + 1));
    }

    #[test]
    fn amplitudes_are_projected() {
        let mut net = DeepNet::zeros(&[1, 2, 1], &adaptive(2)).unwrap();
        let mut delta = vec![0.0; net.param_count()];
        *delta.last_mut().unwrap() = -5.0;
        net.apply_delta(&delta).unwrap();
        assert_eq!(net.output_amplitude(), AMPLITUDE_FLOOR);
    }

    #[test]
    fn json_round_trip() {
        let net = small_net(3);
        let text = serde_json::to_string(&net).unwrap();
        assert!(text.contains("\"format_version\":1"));
        let back: DeepNet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, net);
    }
}
