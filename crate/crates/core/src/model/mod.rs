//! Generator (convolutional autoencoder) and critic networks.
//!
//! The encoder is a stack of five stride-2 4×4 convolutions taking a
//! 128×128 patch down to 4×4 with widths `c, 2c, 4c, 8c, 16c`, followed by a
//! valid 4×4 convolution to the latent vector. The decoder mirrors it with
//! transposed convolutions and a `tanh` output. The critic repeats the
//! encoder stack and replaces the latent projection with a depth-wise 4×4
//! convolution whose `16c` outputs form the embedding; the critic value is
//! the embedding mean.

mod layers;

use aegan_autograd::{numel, ConvSpec, Shape, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use layers::{
    channel_stats, normalize, ChannelStats, Mode, NormKind, Probe, RunningStats, NORM_EPS,
};

use crate::config::SEGMENT_SIZE;
pub use crate::config::{ModelConfig, NormScheme};
use crate::error::{Error, Result};
use crate::frontend::SpectrogramSegment;

/// Number of stride-2 stages between 128×128 and 4×4.
pub const STAGES: usize = 5;
const KERNEL: usize = 4;
const INFERENCE_CHUNK: usize = 32;

fn down() -> ConvSpec {
    ConvSpec::new(KERNEL, 2, 1)
}

fn valid() -> ConvSpec {
    ConvSpec::new(KERNEL, 1, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    init: Init,
}

fn weight(name: String, shape: Shape) -> ParamSpec {
    ParamSpec {
        name,
        shape,
        init: Init::Normal,
    }
}

fn norm_pair(prefix: &str, channels: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{prefix}.norm.gain"),
            shape: [1, channels, 1, 1],
            init: Init::Ones,
        },
        ParamSpec {
            name: format!("{prefix}.norm.bias"),
            shape: [1, channels, 1, 1],
            init: Init::Zeros,
        },
    ]
}

/// Widths of the five down-sampling stages.
pub fn stage_widths(base: usize) -> [usize; STAGES] {
    [base, 2 * base, 4 * base, 8 * base, 16 * base]
}

fn encoder_stack(prefix: &str, base: usize) -> Vec<ParamSpec> {
    let widths = stage_widths(base);
    let mut specs = vec![weight(
        format!("{prefix}.0.weight"),
        [widths[0], 1, KERNEL, KERNEL],
    )];
    for i in 1..STAGES {
        specs.push(weight(
            format!("{prefix}.{i}.weight"),
            [widths[i], widths[i - 1], KERNEL, KERNEL],
        ));
        specs.extend(norm_pair(&format!("{prefix}.{i}"), widths[i]));
    }
    specs
}

pub fn generator_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let widths = stage_widths(cfg.base_channels);
    let mut specs = encoder_stack("enc", cfg.base_channels);
    specs.push(weight(
        "enc.latent.weight".into(),
        [cfg.latent_dim, widths[4], KERNEL, KERNEL],
    ));
    specs.push(weight(
        "dec.0.weight".into(),
        [cfg.latent_dim, widths[4], KERNEL, KERNEL],
    ));
    specs.extend(norm_pair("dec.0", widths[4]));
    for j in 1..STAGES {
        let (from, to) = (widths[STAGES - j], widths[STAGES - 1 - j]);
        specs.push(weight(
            format!("dec.{j}.weight"),
            [from, to, KERNEL, KERNEL],
        ));
        specs.extend(norm_pair(&format!("dec.{j}"), to));
    }
    specs.push(weight(
        "dec.out.weight".into(),
        [widths[0], 1, KERNEL, KERNEL],
    ));
    specs
}

pub fn critic_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = encoder_stack("critic", cfg.base_channels);
    specs.push(weight(
        "critic.head.weight".into(),
        [cfg.embedding_dim, 1, KERNEL, KERNEL],
    ));
    specs
}

/// Named parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn init(layout: &[ParamSpec], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("init std is validated positive");
        let tensors = layout
            .iter()
            .map(|p| match p.init {
                Init::Normal => Tensor::new(
                    p.shape,
                    (0..numel(&p.shape)).map(|_| normal.sample(rng)).collect(),
                ),
                Init::Ones => Tensor::ones(p.shape),
                Init::Zeros => Tensor::zeros(p.shape),
            })
            .collect();
        ParamSet {
            names: layout.iter().map(|p| p.name.clone()).collect(),
            tensors,
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    fn check_layout(&self, layout: &[ParamSpec]) -> Result<()> {
        if self.tensors.len() != layout.len() {
            return Err(Error::shape(layout.len(), self.tensors.len()));
        }
        for ((spec, name), t) in layout.iter().zip(&self.names).zip(&self.tensors) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::shape((&spec.name, spec.shape), (name, t.shape())));
            }
        }
        Ok(())
    }

    fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Stacks segments into a `[n, 1, 128, 128]` batch.
pub fn segments_to_tensor(segments: &[SpectrogramSegment]) -> Tensor {
    let mut data = Vec::with_capacity(segments.len() * SEGMENT_SIZE * SEGMENT_SIZE);
    for s in segments {
        data.extend_from_slice(&s.values);
    }
    Tensor::new([segments.len(), 1, SEGMENT_SIZE, SEGMENT_SIZE], data)
}

fn check_input(x: &Tensor) -> Result<()> {
    let [_, c, h, w] = x.shape();
    if [c, h, w] != [1, SEGMENT_SIZE, SEGMENT_SIZE] {
        return Err(Error::shape([1, SEGMENT_SIZE, SEGMENT_SIZE], [c, h, w]));
    }
    Ok(())
}

/// Autoencoder operations recorded on a tape.
pub trait AutoEncoder {
    fn encode(&self, x: &Var) -> Var;
    fn decode(&self, z: &Var) -> Var;
    fn reconstruct(&self, x: &Var) -> Var {
        self.decode(&self.encode(x))
    }
}

/// Critic operations recorded on a tape.
pub trait Embedder {
    /// `[n, embedding_dim, 1, 1]`
    fn embed(&self, x: &Var) -> Var;

    /// `[n, 1, 1, 1]`: the mean of each sample's embedding.
    fn critic_value(&self, x: &Var) -> Var {
        critic_readout(&self.embed(x))
    }
}

pub fn critic_readout(embedding: &Var) -> Var {
    let n = embedding.shape()[0];
    embedding.mean_to([n, 1, 1, 1])
}

/// Plain-tensor inference interface of a generator.
pub trait Reconstructor {
    fn encode_tensor(&self, x: &Tensor) -> Result<Tensor>;
    fn reconstruct_tensor(&self, x: &Tensor) -> Result<Tensor>;
}

/// Plain-tensor inference interface of a critic.
pub trait EmbeddingModel {
    fn embed_tensor(&self, x: &Tensor) -> Result<Tensor>;
}

/// Generator whose reconstruction is its input and whose code is the
/// flattened input.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityReconstructor;

impl Reconstructor for IdentityReconstructor {
    fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        Ok(x.clone().reshape([n, c * h * w, 1, 1]))
    }

    fn reconstruct_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

fn chunked(x: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> Tensor {
    let n = x.shape()[0];
    if n <= INFERENCE_CHUNK {
        return f(x);
    }
    let parts: Vec<Tensor> = (0..n)
        .step_by(INFERENCE_CHUNK)
        .map(|start| {
            let idx: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
            f(&x.select_batch(&idx))
        })
        .collect();
    Tensor::stack(&parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    /// One entry per normalization layer when the generator uses batch norm.
    pub running: Vec<RunningStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

/// Builds both networks from one seeded stream; identical seeds give
/// bit-identical parameters.
pub fn init_models(cfg: &ModelConfig, seed: u64) -> Result<(Generator, Critic)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen_params = ParamSet::init(&generator_layout(cfg), cfg.init_std, &mut rng);
    let critic_params = ParamSet::init(&critic_layout(cfg), cfg.init_std, &mut rng);
    let running = match cfg.norm_scheme {
        NormScheme::LnBoth => Vec::new(),
        NormScheme::BnGeneratorLnCritic => generator_norm_widths(cfg)
            .into_iter()
            .map(RunningStats::new)
            .collect(),
    };
    Ok((
        Generator {
            cfg: cfg.clone(),
            params: gen_params,
            running,
        },
        Critic {
            cfg: cfg.clone(),
            params: critic_params,
        },
    ))
}

/// Widths of the generator's normalization layers in forward order.
fn generator_norm_widths(cfg: &ModelConfig) -> Vec<usize> {
    let w = stage_widths(cfg.base_channels);
    vec![w[1], w[2], w[3], w[4], w[4], w[3], w[2], w[1], w[0]]
}

impl Generator {
    pub fn from_parts(
        cfg: ModelConfig,
        params: ParamSet,
        running: Vec<RunningStats>,
    ) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&generator_layout(&cfg))?;
        let expected = match cfg.norm_scheme {
            NormScheme::LnBoth => 0,
            NormScheme::BnGeneratorLnCritic => generator_norm_widths(&cfg).len(),
        };
        if running.len() != expected {
            return Err(Error::shape(expected, running.len()));
        }
        Ok(Generator {
            cfg,
            params,
            running,
        })
    }

    pub fn norm_kind(&self) -> NormKind {
        match self.cfg.norm_scheme {
            NormScheme::LnBoth => NormKind::Layer,
            NormScheme::BnGeneratorLnCritic => NormKind::Batch,
        }
    }

    pub fn bind<'a>(
        &'a self,
        tape: &Tape,
        trainable: bool,
        mode: Mode,
        probe: Option<&'a Probe>,
    ) -> BoundGenerator<'a> {
        BoundGenerator {
            net: self,
            vars: self.params.bind(tape, trainable),
            mode,
            probe,
        }
    }

    fn infer(&self, x: &Tensor, f: impl Fn(&BoundGenerator, &Var) -> Var) -> Result<Tensor> {
        check_input(x)?;
        Ok(chunked(x, |chunk| {
            let tape = Tape::new();
            tape.no_grad(|| {
                let g = self.bind(&tape, false, Mode::Eval, None);
                let xv = tape.constant(chunk.clone());
                (*f(&g, &xv).value()).clone()
            })
        }))
    }

    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x, |g, xv| g.encode(xv))
    }

    pub fn reconstruct_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x, |g, xv| g.reconstruct(xv))
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        let [_, c, h, w] = z.shape();
        if [c, h, w] != [self.cfg.latent_dim, 1, 1] {
            return Err(Error::shape([self.cfg.latent_dim, 1, 1], [c, h, w]));
        }
        Ok(chunked(z, |chunk| {
            let tape = Tape::new();
            tape.no_grad(|| {
                let g = self.bind(&tape, false, Mode::Eval, None);
                (*g.decode(&tape.constant(chunk.clone())).value()).clone()
            })
        }))
    }

    /// Folds the batch statistics a training forward pass observed into the
    /// running estimates.
    pub fn absorb_batch_moments(&mut self, probe: &Probe) {
        for (layer, mean, var, count) in probe.batch_moments.borrow().iter() {
            self.running[*layer].update(mean, var, *count);
        }
    }
}

impl Reconstructor for Generator {
    fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.encode_batch(x)
    }

    fn reconstruct_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.reconstruct_batch(x)
    }
}

pub struct BoundGenerator<'a> {
    net: &'a Generator,
    pub vars: Vec<Var>,
    mode: Mode,
    probe: Option<&'a Probe>,
}

impl BoundGenerator<'_> {
    fn norm(&self, h: &Var, at: usize, norm_layer: usize, name: &str) -> Var {
        layers::normalize(
            h,
            self.net.norm_kind(),
            &self.vars[at],
            &self.vars[at + 1],
            self.mode,
            self.net.running.get(norm_layer),
            norm_layer,
            name,
            self.probe,
        )
    }

    fn decoder_start(&self) -> usize {
        1 + 3 * (STAGES - 1) + 1
    }
}

impl AutoEncoder for BoundGenerator<'_> {
    fn encode(&self, x: &Var) -> Var {
        let slope = self.net.cfg.leaky_slope;
        let mut h = x.conv2d(&self.vars[0], down()).leaky_relu(slope);
        let mut at = 1;
        for i in 1..STAGES {
            h = h.conv2d(&self.vars[at], down());
            h = self.norm(&h, at + 1, i - 1, &format!("enc.{i}"));
            h = h.leaky_relu(slope);
            at += 3;
        }
        h.conv2d(&self.vars[at], valid())
    }

    fn decode(&self, z: &Var) -> Var {
        let mut at = self.decoder_start();
        let mut h = z.conv_transpose2d(&self.vars[at], valid(), (KERNEL, KERNEL));
        h = self.norm(&h, at + 1, STAGES - 1, "dec.0").relu();
        at += 3;
        let mut size = KERNEL;
        for j in 1..STAGES {
            size *= 2;
            h = h.conv_transpose2d(&self.vars[at], down(), (size, size));
            h = self
                .norm(&h, at + 1, STAGES - 1 + j, &format!("dec.{j}"))
                .relu();
            at += 3;
        }
        h.conv_transpose2d(&self.vars[at], down(), (SEGMENT_SIZE, SEGMENT_SIZE))
            .tanh()
    }
}

impl Critic {
    pub fn from_parts(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&critic_layout(&cfg))?;
        Ok(Critic { cfg, params })
    }

    pub fn bind<'a>(
        &'a self,
        tape: &Tape,
        trainable: bool,
        probe: Option<&'a Probe>,
    ) -> BoundCritic<'a> {
        BoundCritic {
            net: self,
            vars: self.params.bind(tape, trainable),
            probe,
        }
    }

    pub fn embed_batch(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x)?;
        Ok(chunked(x, |chunk| {
            let tape = Tape::new();
            tape.no_grad(|| {
                let d = self.bind(&tape, false, None);
                (*d.embed(&tape.constant(chunk.clone())).value()).clone()
            })
        }))
    }

    /// Returns `(critic values [n], embeddings [n, e, 1, 1])`.
    pub fn discriminate(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let emb = self.embed_batch(x)?;
        let [n, e, _, _] = emb.shape();
        let values = (0..n)
            .map(|i| emb.sample(i).iter().sum::<f64>() / e as f64)
            .collect();
        Ok((values, emb))
    }
}

impl EmbeddingModel for Critic {
    fn embed_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.embed_batch(x)
    }
}

pub struct BoundCritic<'a> {
    net: &'a Critic,
    pub vars: Vec<Var>,
    probe: Option<&'a Probe>,
}

impl Embedder for BoundCritic<'_> {
    fn embed(&self, x: &Var) -> Var {
        let slope = self.net.cfg.leaky_slope;
        let mut h = x.conv2d(&self.vars[0], down()).leaky_relu(slope);
        let mut at = 1;
        for i in 1..STAGES {
            h = h.conv2d(&self.vars[at], down());
            h = layers::normalize(
                &h,
                NormKind::Layer,
                &self.vars[at + 1],
                &self.vars[at + 2],
                Mode::Train,
                None,
                i - 1,
                &format!("critic.{i}"),
                self.probe,
            );
            h = h.leaky_relu(slope);
            at += 3;
        }
        h.conv2d(
            &self.vars[at],
            ConvSpec::depthwise(KERNEL, self.net.cfg.embedding_dim),
        )
    }
}

/// Layer-norm statistics of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LnStats {
    pub layers: Vec<ChannelStats>,
}

impl LnStats {
    /// `[μ(layer 0), σ(layer 0), μ(layer 1), ...]` for one sample.
    pub fn flat(&self, sample: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.mean[sample]);
            out.extend_from_slice(&l.std[sample]);
        }
        out
    }

    pub fn samples(&self) -> usize {
        self.layers.first().map_or(0, |l| l.mean.len())
    }
}

/// Network whose layer-norm statistics can be exported.
pub enum StatsSource<'a> {
    Generator(&'a Generator),
    Critic(&'a Critic),
}

/// Per-sample, per-channel statistics entering every layer-norm layer.
pub fn export_ln_stats(net: StatsSource<'_>, x: &Tensor) -> Result<LnStats> {
    check_input(x)?;
    let probe = Probe {
        capture_stats: true,
        ..Probe::default()
    };
    let tape = Tape::new();
    tape.no_grad(|| match net {
        StatsSource::Generator(g) => {
            if g.norm_kind() != NormKind::Layer {
                return Err(Error::Config(
                    "layer-norm statistics requested from a batch-norm generator".into(),
                ));
            }
            let bound = g.bind(&tape, false, Mode::Eval, Some(&probe));
            bound.reconstruct(&tape.constant(x.clone()));
            Ok(())
        }
        StatsSource::Critic(d) => {
            let bound = d.bind(&tape, false, Some(&probe));
            bound.embed(&tape.constant(x.clone()));
            Ok(())
        }
    })?;
    Ok(LnStats {
        layers: probe.stats.into_inner(),
    })
}
