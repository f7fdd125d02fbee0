use std::cell::RefCell;

use aegan_autograd::{Tensor, Var};

/// Which statistic a normalization layer standardizes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per sample, over channels and positions.
    Layer,
    /// Per channel, over batch and positions.
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Variance floor. Small enough that per-sample affine invariance holds to
/// 1e-5 for inputs with standard deviation above about 0.03.
pub const NORM_EPS: f64 = 1e-8;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one batch-norm layer, shape `[1, C, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros([1, channels, 1, 1]),
            var: Tensor::ones([1, channels, 1, 1]),
        }
    }

    /// Exponential update with the unbiased batch variance.
    pub fn update(&mut self, batch_mean: &Tensor, batch_var: &Tensor, count: usize) {
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in self.mean.data_mut().iter_mut().zip(batch_mean.data()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.data_mut().iter_mut().zip(batch_var.data()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
        }
    }
}

/// Per-sample, per-channel mean and standard deviation of a layer's input,
/// as seen by a normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub layer: String,
    /// `[n][c]`
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

pub fn channel_stats(layer: &str, x: &Tensor) -> ChannelStats {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut mean = vec![vec![0.0; c]; n];
    let mut std = vec![vec![0.0; c]; n];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            let vals = &x.data()[start..start + plane];
            let mu = vals.iter().sum::<f64>() / plane as f64;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / plane as f64;
            mean[b][ch] = mu;
            std[b][ch] = var.sqrt();
        }
    }
    ChannelStats {
        layer: layer.to_string(),
        mean,
        std,
    }
}

/// Observers attached to one forward pass.
#[derive(Default)]
pub struct Probe {
    pub stats: RefCell<Vec<ChannelStats>>,
    /// Batch statistics of BN layers, `(layer index, mean, var, count)`.
    pub batch_moments: RefCell<Vec<(usize, Tensor, Tensor, usize)>>,
    pub capture_stats: bool,
}

/// `x` standardized over the axes that collapse into `reduced`.
fn standardize(x: &Var, reduced: [usize; 4]) -> (Var, Var, Var) {
    let shape = x.shape();
    let mean = x.mean_to(reduced);
    let centered = x.sub(&mean.broadcast_to(shape));
    let var = centered.square().mean_to(reduced);
    let inv_std = var.add_scalar(NORM_EPS).powf(-0.5);
    (centered.mul(&inv_std.broadcast_to(shape)), mean, var)
}

#[allow(clippy::too_many_arguments)]
pub fn normalize(
    x: &Var,
    kind: NormKind,
    gain: &Var,
    bias: &Var,
    mode: Mode,
    running: Option<&RunningStats>,
    layer_index: usize,
    layer_name: &str,
    probe: Option<&Probe>,
) -> Var {
    let shape = x.shape();
    let [n, c, _, _] = shape;
    if let Some(p) = probe {
        if p.capture_stats && kind == NormKind::Layer {
            p.stats
                .borrow_mut()
                .push(channel_stats(layer_name, &x.value()));
        }
    }
    let normed = match (kind, mode) {
        (NormKind::Layer, _) => standardize(x, [n, 1, 1, 1]).0,
        (NormKind::Batch, Mode::Train) => {
            let (normed, mean, var) = standardize(x, [1, c, 1, 1]);
            if let Some(p) = probe {
                let count = n * shape[2] * shape[3];
                p.batch_moments.borrow_mut().push((
                    layer_index,
                    (*mean.value()).clone(),
                    (*var.value()).clone(),
                    count,
                ));
            }
            normed
        }
        (NormKind::Batch, Mode::Eval) => {
            let stats = running.expect("batch norm in eval mode needs running statistics");
            let tape = x.tape();
            let mean = tape.constant(stats.mean.clone()).broadcast_to(shape);
            let inv_std = tape
                .constant(stats.var.map(|v| 1.0 / (v + NORM_EPS).sqrt()))
                .broadcast_to(shape);
            x.sub(&mean).mul(&inv_std)
        }
    };
    normed
        .mul(&gain.broadcast_to(shape))
        .add(&bias.broadcast_to(shape))
}
