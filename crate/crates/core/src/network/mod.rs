//! The Q-network: a residual convolutional trunk, adaptive max pooling, and a
//! noisy dueling head, with optional spectral normalization on the residual
//! convolutions and exact reverse-mode gradients.
//!
//! ```text
//! input [C,H,W]
//!   └─ per stage: conv3x3 → maxpool3x3/2 → residual block × blocks_per_stage
//!        residual block: x + conv(relu(conv(relu(x))))
//!   └─ relu → adaptive maxpool P×P → flatten
//!   └─ noisy dense (hidden, relu) → value (1) and advantage (A) → v + a − mean(a)
//! ```
//!
//! Architecture ([`QNetwork`]) and parameters ([`ParameterStore`]) are kept
//! apart so a frozen [`Weights`] copy can be handed to an actor while the
//! learner keeps training.

mod layers;
mod spectral;
mod tensor;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

pub use layers::{dueling_backward, dueling_combine, Plane};
pub use spectral::{power_iteration, PowerIteration};
pub use tensor::{gemm, MatMut, MatRef, Real, Tensor};

use crate::error::{Error, Result};
use crate::observation::Shape3;

/// Power-iteration rounds used to seed `σ̂` when a network is initialized.
const SN_INIT_ITERS: usize = 15;

/// Which convolutions are spectrally normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SnVariant {
    None,
    /// Both convolutions of every residual block.
    All,
    /// Both convolutions of the final two residual blocks.
    Last,
}

impl fmt::Display for SnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SnVariant::None => "none",
            SnVariant::All => "all",
            SnVariant::Last => "last",
        })
    }
}

impl FromStr for SnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(SnVariant::None),
            "all" => Ok(SnVariant::All),
            "last" => Ok(SnVariant::Last),
            other => Err(Error::Config(format!("unknown spectral-norm variant `{other}` (none|all|last)"))),
        }
    }
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Per-stage channel counts before the multiplier.
    pub base_channels: Vec<usize>,
    pub channel_multiplier: usize,
    pub blocks_per_stage: usize,
    pub sn_variant: SnVariant,
    pub dueling: bool,
    pub noisy: bool,
    pub sigma0: f64,
    pub hidden_units: usize,
    /// Side of the adaptive max-pool output.
    pub adaptive_pool: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            base_channels: vec![16, 32, 32],
            channel_multiplier: 2,
            blocks_per_stage: 2,
            sn_variant: SnVariant::All,
            dueling: true,
            noisy: true,
            sigma0: 0.5,
            hidden_units: 256,
            adaptive_pool: 6,
        }
    }
}

impl NetworkSpec {
    pub fn stage_channels(&self) -> Vec<usize> {
        self.base_channels
            .iter()
            .map(|c| c * self.channel_multiplier)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels.is_empty() || self.base_channels.contains(&0) {
            return bad(format!("stage channels must be positive, got {:?}", self.base_channels));
        }
        if self.channel_multiplier == 0 {
            return bad("channel multiplier must be positive".into());
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks per stage must be positive".into());
        }
        if !(self.sigma0 >= 0.0) {
            return bad(format!("sigma0 must be non-negative, got {}", self.sigma0));
        }
        if self.hidden_units == 0 || self.adaptive_pool == 0 {
            return bad("hidden units and adaptive pool size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    c_in: usize,
    c_out: usize,
    plane: Plane,
    weight: usize,
    bias: usize,
    sn: Option<usize>,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
    /// σ tensors of a noisy layer.
    sigma: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct Stage {
    conv: usize,
    pooled: Plane,
    blocks: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Copy)]
enum Heads {
    Dueling { value: usize, advantage: usize },
    Single { q: usize },
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// A spectrally normalized convolution's matrix view.
#[derive(Debug, Clone, PartialEq)]
pub struct SnInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub param: usize,
}

/// Power-iteration state of one normalized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SnState<T> {
    pub u: Vec<T>,
    pub sigma: T,
}

/// One full parameter set θ (or θ⁻) with its spectral-norm state.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub tensors: Vec<Tensor<T>>,
    pub sn: Vec<SnState<T>>,
}

impl<T: Real> Weights<T> {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn fill(&mut self, value: T) {
        self.tensors.iter_mut().for_each(|t| t.fill(value));
    }
}

/// Factorized noise for one noisy layer, already passed through `sgn(x)·√|x|`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseFactors<T> {
    pub eps_in: Vec<T>,
    pub eps_out: Vec<T>,
}

/// Noise for every dense layer; `None` entries run on μ alone.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<T> {
    pub layers: Vec<Option<NoiseFactors<T>>>,
}

impl<T> NoiseDraw<T> {
    pub fn zero(dense_layers: usize) -> Self {
        Self {
            layers: (0..dense_layers).map(|_| None).collect(),
        }
    }
}

/// `sgn(x)·√|x|`.
pub fn noise_transform(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().sqrt()
    }
}

struct Tape<T> {
    batch: usize,
    noise: Option<NoiseDraw<T>>,
    conv_weights: Vec<Vec<T>>,
    conv_scale: Vec<T>,
    stage_inputs: Vec<Vec<T>>,
    pool_argmax: Vec<Vec<u32>>,
    block_acts: Vec<Vec<[Vec<T>; 2]>>,
    trunk_out: Vec<T>,
    adaptive_argmax: Vec<u32>,
    flat: Vec<T>,
    hidden_out: Vec<T>,
    dense_weights: Vec<Vec<T>>,
}

/// Online and target parameters, gradients, and the recorded forward pass.
pub struct ParameterStore<T> {
    pub online: Weights<T>,
    pub target: Weights<T>,
    pub grads: Vec<Tensor<T>>,
    tape: Option<Tape<T>>,
}

impl<T: Real> ParameterStore<T> {
    fn new(online: Weights<T>) -> Self {
        let grads = online
            .tensors
            .iter()
            .map(|t| Tensor::zeros(&t.shape))
            .collect();
        Self {
            target: online.clone(),
            online,
            grads,
            tape: None,
        }
    }

    /// θ⁻ ← θ, including spectral-norm state.
    pub fn sync_target(&mut self) {
        self.target.clone_from(&self.online);
    }

    pub fn param_count(&self) -> usize {
        self.online.param_count()
    }

    pub fn grad_norm(&self) -> T {
        self.grads.iter().map(Tensor::sum_squares).sum::<T>().sqrt()
    }

    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }
}

/// Architecture bound to an input shape and action count.
#[derive(Debug, Clone)]
pub struct QNetwork {
    spec: NetworkSpec,
    input: Shape3,
    num_actions: usize,
    convs: Vec<ConvLayer>,
    stages: Vec<Stage>,
    trunk_channels: usize,
    trunk_plane: Plane,
    flat: usize,
    dense: Vec<DenseLayer>,
    heads: Heads,
    params: Vec<ParamInfo>,
    sn: Vec<SnInfo>,
}

impl QNetwork {
    /// Lays out the architecture for `input` observations and `num_actions` actions.
    pub fn build(spec: &NetworkSpec, input: Shape3, num_actions: usize) -> Result<Self> {
        spec.validate()?;
        if input.channels == 0 || input.height == 0 || input.width == 0 {
            return Err(Error::Config(format!("input shape {input} has a zero dimension")));
        }
        if num_actions < 2 {
            return Err(Error::Config(format!("need at least 2 actions, got {num_actions}")));
        }
        let mut params = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            params.push(ParamInfo { name, shape });
            params.len() - 1
        };

        let channels = spec.stage_channels();
        let total_blocks = channels.len() * spec.blocks_per_stage;
        let mut convs = Vec::new();
        let mut stages = Vec::new();
        let mut sn = Vec::new();
        let mut c_in = input.channels;
        let mut plane = Plane {
            height: input.height,
            width: input.width,
        };
        let mut block_index = 0;
        for (s, &c_out) in channels.iter().enumerate() {
            let mut conv = |name: String, c_in: usize, plane: Plane, normalized: bool, convs: &mut Vec<ConvLayer>| {
                let weight = add(format!("{name}.weight"), vec![c_out, c_in, 3, 3]);
                let bias = add(format!("{name}.bias"), vec![c_out]);
                let sn_index = normalized.then(|| {
                    sn.push(SnInfo {
                        name: name.clone(),
                        rows: c_out,
                        cols: c_in * 9,
                        param: weight,
                    });
                    sn.len() - 1
                });
                convs.push(ConvLayer {
                    c_in,
                    c_out,
                    plane,
                    weight,
                    bias,
                    sn: sn_index,
                });
                convs.len() - 1
            };
            let stage_conv = conv(format!("stage{s}.conv"), c_in, plane, false, &mut convs);
            let pooled = layers::pool_plane(plane);
            let mut blocks = Vec::new();
            for b in 0..spec.blocks_per_stage {
                let normalized = match spec.sn_variant {
                    SnVariant::None => false,
                    SnVariant::All => true,
                    SnVariant::Last => block_index + 2 >= total_blocks,
                };
                let c0 = conv(format!("stage{s}.block{b}.conv0"), c_out, pooled, normalized, &mut convs);
                let c1 = conv(format!("stage{s}.block{b}.conv1"), c_out, pooled, normalized, &mut convs);
                blocks.push([c0, c1]);
                block_index += 1;
            }
            stages.push(Stage {
                conv: stage_conv,
                pooled,
                blocks,
            });
            c_in = c_out;
            plane = pooled;
        }

        let pool = spec.adaptive_pool;
        let flat = c_in * pool * pool;
        let mut dense = Vec::new();
        let mut dense_layer = |name: &str, fan_in: usize, fan_out: usize| {
            let (weight, bias, sigma) = if spec.noisy {
                let w = add(format!("{name}.weight_mu"), vec![fan_out, fan_in]);
                let ws = add(format!("{name}.weight_sigma"), vec![fan_out, fan_in]);
                let b = add(format!("{name}.bias_mu"), vec![fan_out]);
                let bs = add(format!("{name}.bias_sigma"), vec![fan_out]);
                (w, b, Some((ws, bs)))
            } else {
                let w = add(format!("{name}.weight"), vec![fan_out, fan_in]);
                let b = add(format!("{name}.bias"), vec![fan_out]);
                (w, b, None)
            };
            dense.push(DenseLayer {
                fan_in,
                fan_out,
                weight,
                bias,
                sigma,
            });
            dense.len() - 1
        };
        dense_layer("hidden", flat, spec.hidden_units);
        let heads = if spec.dueling {
            let value = dense_layer("value", spec.hidden_units, 1);
            let advantage = dense_layer("advantage", spec.hidden_units, num_actions);
            Heads::Dueling { value, advantage }
        } else {
            Heads::Single {
                q: dense_layer("q", spec.hidden_units, num_actions),
            }
        };

        Ok(Self {
            spec: spec.clone(),
            input,
            num_actions,
            convs,
            stages,
            trunk_channels: c_in,
            trunk_plane: plane,
            flat,
            dense,
            heads,
            params,
            sn,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Width of the flattened adaptive-pool output.
    pub fn flatten_width(&self) -> usize {
        self.flat
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn sn_layers(&self) -> &[SnInfo] {
        &self.sn
    }

    pub fn dense_layers(&self) -> usize {
        self.dense.len()
    }

    /// Total scalar parameter count (excluding spectral-norm state).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    /// Freshly initialized parameters with θ⁻ = θ.
    ///
    /// Convolutions and plain dense layers draw weights and biases from
    /// `U(±1/√fan_in)`; noisy layers draw μ the same way and set
    /// `σ = σ₀/√fan_in`. Spectral-norm vectors start unit-norm random and
    /// `σ̂` is seeded with a few power-iteration rounds.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterStore<T> {
        let mut tensors: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        let uniform = |t: &mut Tensor<T>, bound: f64, rng: &mut R| {
            if bound > 0.0 {
                let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                t.data.iter_mut().for_each(|x| *x = T::of(d.sample(rng)));
            }
        };
        for conv in &self.convs {
            let bound = 1.0 / ((conv.c_in * 9) as f64).sqrt();
            uniform(&mut tensors[conv.weight], bound, rng);
            uniform(&mut tensors[conv.bias], bound, rng);
        }
        for layer in &self.dense {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            uniform(&mut tensors[layer.weight], bound, rng);
            uniform(&mut tensors[layer.bias], bound, rng);
            if let Some((ws, bs)) = layer.sigma {
                let s = T::of(self.spec.sigma0 / (layer.fan_in as f64).sqrt());
                tensors[ws].fill(s);
                tensors[bs].fill(s);
            }
        }
        let sn = self
            .sn
            .iter()
            .map(|info| {
                let u = random_unit::<T, R>(info.rows, rng);
                let pi = power_iteration(&tensors[info.param].data, info.rows, info.cols, &u, SN_INIT_ITERS);
                if pi.degenerate {
                    SnState { u, sigma: T::zero() }
                } else {
                    SnState {
                        u: pi.u,
                        sigma: pi.sigma,
                    }
                }
            })
            .collect();
        ParameterStore::new(Weights { tensors, sn })
    }

    /// All-zero parameters (spectral-norm vectors stay unit-norm).
    pub fn zeroed<T: Real>(&self) -> ParameterStore<T> {
        let tensors = self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        let sn = self
            .sn
            .iter()
            .map(|info| {
                let mut u = vec![T::zero(); info.rows];
                u[0] = T::one();
                SnState { u, sigma: T::zero() }
            })
            .collect();
        ParameterStore::new(Weights { tensors, sn })
    }

    /// Fresh factorized Gaussian noise for every noisy layer.
    pub fn sample_noise<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseDraw<T> {
        let draw = |n: usize, rng: &mut R| -> Vec<T> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::of(noise_transform(z))
                })
                .collect()
        };
        NoiseDraw {
            layers: self
                .dense
                .iter()
                .map(|l| {
                    l.sigma.map(|_| NoiseFactors {
                        eps_in: draw(l.fan_in, rng),
                        eps_out: draw(l.fan_out, rng),
                    })
                })
                .collect(),
        }
    }

    fn check_input<T>(&self, x: &[T], batch: usize) -> Result<()> {
        if batch == 0 || x.len() != batch * self.input.len() {
            return Err(Error::Input(format!(
                "expected a batch of {batch} observations of shape {} ({} values), got {} values",
                self.input,
                batch * self.input.len(),
                x.len()
            )));
        }
        Ok(())
    }

    fn check_noise<T>(&self, noise: Option<&NoiseDraw<T>>) -> Result<()> {
        if let Some(n) = noise {
            if n.layers.len() != self.dense.len() {
                return Err(Error::Input("noise draw does not match this network".into()));
            }
            for (l, f) in self.dense.iter().zip(&n.layers) {
                if let Some(f) = f {
                    if f.eps_in.len() != l.fan_in || f.eps_out.len() != l.fan_out {
                        return Err(Error::Input("noise factor shapes do not match the layer".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Q-values `[batch × A]` for a `[batch × C × H × W]` input, using the
    /// stored `σ̂` of each normalized layer. Does not modify anything.
    pub fn forward<T: Real>(&self, weights: &Weights<T>, x: &[T], batch: usize, noise: Option<&NoiseDraw<T>>) -> Result<Vec<T>> {
        self.check_input(x, batch)?;
        self.check_noise(noise)?;
        Ok(self.run(weights, x, batch, noise.map(Noise::Shared), false).0)
    }

    /// Like [`QNetwork::forward`] but with an independent noise draw per
    /// batch row, as used when several environments act at once.
    pub fn forward_row_noise<T: Real>(&self, weights: &Weights<T>, x: &[T], batch: usize, draws: &[NoiseDraw<T>]) -> Result<Vec<T>> {
        self.check_input(x, batch)?;
        if draws.len() != batch {
            return Err(Error::Input(format!("{} noise draws for a batch of {batch}", draws.len())));
        }
        for d in draws {
            self.check_noise(Some(d))?;
        }
        Ok(self.run(weights, x, batch, Some(Noise::PerRow(draws)), false).0)
    }

    /// Training forward pass on θ: advances each spectral-norm state by one
    /// power-iteration step, then records everything [`QNetwork::backward`] needs.
    pub fn forward_train<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        x: &[T],
        batch: usize,
        noise: Option<&NoiseDraw<T>>,
    ) -> Result<Vec<T>> {
        self.check_input(x, batch)?;
        self.check_noise(noise)?;
        for (info, state) in self.sn.iter().zip(store.online.sn.iter_mut()) {
            let pi = power_iteration(&store.online.tensors[info.param].data, info.rows, info.cols, &state.u, 1);
            if !pi.degenerate {
                state.u = pi.u;
                state.sigma = pi.sigma;
            }
        }
        let (q, tape) = self.run(&store.online, x, batch, noise.map(Noise::Shared), true);
        store.tape = tape;
        Ok(q)
    }

    fn conv_scale<T: Real>(&self, weights: &Weights<T>, conv: &ConvLayer) -> T {
        match conv.sn {
            Some(i) if weights.sn[i].sigma > T::zero() => T::one() / weights.sn[i].sigma,
            _ => T::one(),
        }
    }

    fn dense_params<'a, T: Real>(&self, weights: &'a Weights<T>, index: usize, noise: Option<&NoiseDraw<T>>) -> (Cow<'a, [T]>, Cow<'a, [T]>) {
        let layer = &self.dense[index];
        let mu_w = &weights.tensors[layer.weight].data;
        let mu_b = &weights.tensors[layer.bias].data;
        match (layer.sigma, noise.and_then(|n| n.layers[index].as_ref())) {
            (Some((ws, bs)), Some(f)) => {
                let (w, b) = noisy_effective(mu_w, &weights.tensors[ws].data, mu_b, &weights.tensors[bs].data, f);
                (Cow::Owned(w), Cow::Owned(b))
            }
            _ => (Cow::Borrowed(mu_w.as_slice()), Cow::Borrowed(mu_b.as_slice())),
        }
    }

    fn run<T: Real>(
        &self,
        weights: &Weights<T>,
        x: &[T],
        batch: usize,
        noise: Option<Noise<'_, T>>,
        record: bool,
    ) -> (Vec<T>, Option<Tape<T>>) {
        let shared = match noise {
            Some(Noise::Shared(n)) => Some(n),
            _ => None,
        };
        let rows = match noise {
            Some(Noise::PerRow(d)) => Some(d),
            _ => None,
        };
        let eff_weights: Vec<Cow<'_, [T]>> = self
            .convs
            .iter()
            .map(|c| {
                let raw = &weights.tensors[c.weight].data;
                let scale = self.conv_scale(weights, c);
                if scale == T::one() {
                    Cow::Borrowed(raw.as_slice())
                } else {
                    Cow::Owned(raw.iter().map(|&w| w * scale).collect())
                }
            })
            .collect();
        let conv = |i: usize, input: &[T]| {
            let c = &self.convs[i];
            layers::conv3x3_forward(input, c.c_in, batch, c.plane, &eff_weights[i], &weights.tensors[c.bias].data, c.c_out)
        };

        let mut stage_inputs = Vec::new();
        let mut pool_argmax = Vec::new();
        let mut block_acts = Vec::new();

        let mut h = layers::to_channel_major(x, batch, self.input.channels, self.input.height * self.input.width);
        for stage in &self.stages {
            let c = &self.convs[stage.conv];
            let y = conv(stage.conv, &h);
            let (mut r, argmax) = layers::maxpool3x3s2_forward(&y, c.c_out * batch, c.plane);
            drop(y);
            if record {
                stage_inputs.push(std::mem::take(&mut h));
                pool_argmax.push(argmax);
            }
            let mut acts = Vec::new();
            for &[c0, c1] in &stage.blocks {
                let a = layers::relu(&r);
                let mid = conv(c0, &a);
                let b = layers::relu(&mid);
                drop(mid);
                let out = conv(c1, &b);
                for (ri, oi) in r.iter_mut().zip(&out) {
                    *ri += *oi;
                }
                if record {
                    acts.push([a, b]);
                }
            }
            block_acts.push(acts);
            h = r;
        }

        let trunk_out = layers::relu(&h);
        drop(h);
        let pool = self.spec.adaptive_pool;
        let (pooled, adaptive_argmax) =
            layers::adaptive_maxpool_forward(&trunk_out, self.trunk_channels * batch, self.trunk_plane, pool);
        let area = pool * pool;
        let mut flat = vec![T::zero(); batch * self.flat];
        for c in 0..self.trunk_channels {
            for b in 0..batch {
                flat[b * self.flat + c * area..][..area].copy_from_slice(&pooled[(c * batch + b) * area..][..area]);
            }
        }

        let dense_eff: Vec<_> = (0..self.dense.len())
            .map(|i| self.dense_params(weights, i, shared))
            .collect();
        let apply = |i: usize, input: &[T]| {
            let l = &self.dense[i];
            let mut y = layers::dense_forward(input, batch, l.fan_in, &dense_eff[i].0, &dense_eff[i].1, l.fan_out);
            if let (Some(draws), Some((ws, bs))) = (rows, l.sigma) {
                add_row_noise(&mut y, input, batch, l, i, &weights.tensors[ws].data, &weights.tensors[bs].data, draws);
            }
            y
        };
        let hidden_out = layers::relu(&apply(0, &flat));
        let q = match self.heads {
            Heads::Dueling { value, advantage } => {
                let v = apply(value, &hidden_out);
                let a = apply(advantage, &hidden_out);
                dueling_combine(&v, &a, batch, self.num_actions)
            }
            Heads::Single { q } => apply(q, &hidden_out),
        };

        let tape = record.then(|| Tape {
            batch,
            noise: shared.cloned(),
            conv_weights: eff_weights.iter().map(|w| w.to_vec()).collect(),
            conv_scale: self.convs.iter().map(|c| self.conv_scale(weights, c)).collect(),
            stage_inputs,
            pool_argmax,
            block_acts,
            trunk_out,
            adaptive_argmax,
            flat,
            hidden_out,
            dense_weights: dense_eff.iter().map(|(w, _)| w.to_vec()).collect(),
        });
        (q, tape)
    }

    /// Writes `∂L/∂θ` into `store.grads` given `dq = ∂L/∂Q` for the batch
    /// recorded by the last [`QNetwork::forward_train`]. Noise is a constant,
    /// and so is `σ̂` of every normalized layer.
    pub fn backward<T: Real>(&self, store: &mut ParameterStore<T>, dq: &[T]) -> Result<()> {
        let tape = store
            .tape
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let batch = tape.batch;
        if dq.len() != batch * self.num_actions {
            return Err(Error::Input(format!(
                "output gradient has {} values, expected {}",
                dq.len(),
                batch * self.num_actions
            )));
        }
        for g in store.grads.iter_mut() {
            g.fill(T::zero());
        }
        let grads = &mut store.grads;

        let dense_back = |i: usize, input: &[T], dy: &[T], want_dx: bool, grads: &mut Vec<Tensor<T>>| {
            let l = &self.dense[i];
            let (dw, db, dx) = layers::dense_backward(input, batch, l.fan_in, &tape.dense_weights[i], l.fan_out, dy, want_dx);
            if let (Some((ws, bs)), Some(f)) = (l.sigma, tape.noise.as_ref().and_then(|n| n.layers[i].as_ref())) {
                let gws = &mut grads[ws].data;
                for (o, &eo) in f.eps_out.iter().enumerate() {
                    let row = &dw[o * l.fan_in..(o + 1) * l.fan_in];
                    let grow = &mut gws[o * l.fan_in..(o + 1) * l.fan_in];
                    for ((g, &d), &ei) in grow.iter_mut().zip(row).zip(&f.eps_in) {
                        *g += d * eo * ei;
                    }
                }
                for ((g, &d), &eo) in grads[bs].data.iter_mut().zip(&db).zip(&f.eps_out) {
                    *g += d * eo;
                }
            }
            for (g, d) in grads[l.weight].data.iter_mut().zip(dw) {
                *g += d;
            }
            for (g, d) in grads[l.bias].data.iter_mut().zip(db) {
                *g += d;
            }
            dx
        };

        let mut dhidden = match self.heads {
            Heads::Dueling { value, advantage } => {
                let (dv, da) = dueling_backward(dq, batch, self.num_actions);
                let gv = dense_back(value, &tape.hidden_out, &dv, true, grads).expect("requested");
                let mut ga = dense_back(advantage, &tape.hidden_out, &da, true, grads).expect("requested");
                for (a, v) in ga.iter_mut().zip(gv) {
                    *a += v;
                }
                ga
            }
            Heads::Single { q } => dense_back(q, &tape.hidden_out, dq, true, grads).expect("requested"),
        };
        layers::relu_mask_in_place(&mut dhidden, &tape.hidden_out);
        let dflat = dense_back(0, &tape.flat, &dhidden, true, grads).expect("requested");

        let pool = self.spec.adaptive_pool;
        let area = pool * pool;
        let mut dpooled = vec![T::zero(); self.trunk_channels * batch * area];
        for c in 0..self.trunk_channels {
            for b in 0..batch {
                dpooled[(c * batch + b) * area..][..area].copy_from_slice(&dflat[b * self.flat + c * area..][..area]);
            }
        }
        let mut dh = layers::pool_backward(
            &dpooled,
            &tape.adaptive_argmax,
            self.trunk_channels * batch,
            self.trunk_plane.area(),
            area,
        );
        layers::relu_mask_in_place(&mut dh, &tape.trunk_out);

        let conv_back = |i: usize, input: &[T], dy: &[T], want_dx: bool, grads: &mut Vec<Tensor<T>>| -> Option<Vec<T>> {
            let c = &self.convs[i];
            let mut dw = vec![T::zero(); c.c_out * c.c_in * 9];
            let mut dx = want_dx.then(|| vec![T::zero(); c.c_in * batch * c.plane.area()]);
            layers::conv3x3_backward(
                input,
                c.c_in,
                batch,
                c.plane,
                &tape.conv_weights[i],
                c.c_out,
                dy,
                &mut dw,
                &mut grads[c.bias].data,
                dx.as_deref_mut(),
            );
            let scale = tape.conv_scale[i];
            for (g, d) in grads[c.weight].data.iter_mut().zip(dw) {
                *g += d * scale;
            }
            dx
        };

        for (s, stage) in self.stages.iter().enumerate().rev() {
            for (k, &[c0, c1]) in stage.blocks.iter().enumerate().rev() {
                let [a, b] = &tape.block_acts[s][k];
                let mut db = conv_back(c1, b, &dh, true, grads).expect("requested");
                layers::relu_mask_in_place(&mut db, b);
                let mut da = conv_back(c0, a, &db, true, grads).expect("requested");
                layers::relu_mask_in_place(&mut da, a);
                for (d, x) in dh.iter_mut().zip(da) {
                    *d += x;
                }
            }
            let c = &self.convs[stage.conv];
            let dy = layers::pool_backward(&dh, &tape.pool_argmax[s], c.c_out * batch, c.plane.area(), stage.pooled.area());
            match conv_back(stage.conv, &tape.stage_inputs[s], &dy, s > 0, grads) {
                Some(dx) => dh = dx,
                None => break,
            }
        }
        Ok(())
    }
}

/// Effective noisy-layer parameters `(μ_w + σ_w ⊙ ε_out ε_inᵀ, μ_b + σ_b ⊙ ε_out)`
/// for a row-major `[fan_out × fan_in]` weight.
pub fn noisy_effective<T: Real>(mu_w: &[T], sigma_w: &[T], mu_b: &[T], sigma_b: &[T], f: &NoiseFactors<T>) -> (Vec<T>, Vec<T>) {
    let fan_in = f.eps_in.len();
    let mut w = mu_w.to_vec();
    for (o, &eo) in f.eps_out.iter().enumerate() {
        let row = &mut w[o * fan_in..(o + 1) * fan_in];
        let srow = &sigma_w[o * fan_in..(o + 1) * fan_in];
        for ((x, &s), &ei) in row.iter_mut().zip(srow).zip(&f.eps_in) {
            *x += s * eo * ei;
        }
    }
    let b = mu_b
        .iter()
        .zip(sigma_b)
        .zip(&f.eps_out)
        .map(|((&m, &s), &e)| m + s * e)
        .collect();
    (w, b)
}

#[derive(Clone, Copy)]
enum Noise<'a, T> {
    Shared(&'a NoiseDraw<T>),
    PerRow(&'a [NoiseDraw<T>]),
}

/// Adds `(σ_w ⊙ ε_out ε_inᵀ) x + σ_b ⊙ ε_out` row by row, using
/// `ε_out ⊙ (σ_w (ε_in ⊙ x))` so no per-row weight matrix is formed.
#[allow(clippy::too_many_arguments)]
fn add_row_noise<T: Real>(
    y: &mut [T],
    x: &[T],
    batch: usize,
    layer: &DenseLayer,
    index: usize,
    sigma_w: &[T],
    sigma_b: &[T],
    draws: &[NoiseDraw<T>],
) {
    let mut z = vec![T::zero(); batch * layer.fan_in];
    for (b, d) in draws.iter().enumerate() {
        if let Some(f) = &d.layers[index] {
            let row = &x[b * layer.fan_in..(b + 1) * layer.fan_in];
            for ((zi, &xi), &ei) in z[b * layer.fan_in..].iter_mut().zip(row).zip(&f.eps_in) {
                *zi = xi * ei;
            }
        }
    }
    let t = layers::dense_forward(&z, batch, layer.fan_in, sigma_w, sigma_b, layer.fan_out);
    for (b, d) in draws.iter().enumerate() {
        if let Some(f) = &d.layers[index] {
            let out = &mut y[b * layer.fan_out..(b + 1) * layer.fan_out];
            for ((o, &ti), &eo) in out.iter_mut().zip(&t[b * layer.fan_out..]).zip(&f.eps_out) {
                *o += ti * eo;
            }
        }
    }
}

fn random_unit<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| T::of(x / norm)).collect();
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
