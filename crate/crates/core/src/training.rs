//! Adversarial training: WGAN-GP critic updates alternating with
//! feature-matching + MSE generator updates.

use std::io::Write;
use std::path::Path;

use aegan_autograd::{Adam, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{AutoEncoder, Critic, Embedder, Generator, Mode, Probe};

/// Added under the square roots of the gradient norm and embedding standard
/// deviation so their derivatives stay finite at zero.
const SQRT_EPS: f64 = 1e-12;

fn scalar(v: &Var) -> f64 {
    v.value().sum()
}

/// `lambda · mean_i (‖∇D(x̂_i)‖₂ − 1)²` with `x̂ = ε·real + (1−ε)·fake`.
///
/// `eps` holds one mixing weight per sample. The returned variable is
/// differentiable with respect to the critic's parameters.
pub fn gradient_penalty(
    tape: &Tape,
    critic: &dyn Embedder,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
    lambda: f64,
) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(Error::shape(real.shape(), fake.shape()));
    }
    let [n, c, h, w] = real.shape();
    if eps.len() != n {
        return Err(Error::shape(n, eps.len()));
    }
    let plane = c * h * w;
    let mut mixed = Vec::with_capacity(n * plane);
    for (i, &e) in eps.iter().enumerate() {
        let r = &real.data()[i * plane..(i + 1) * plane];
        let f = &fake.data()[i * plane..(i + 1) * plane];
        mixed.extend(r.iter().zip(f).map(|(r, f)| e * r + (1.0 - e) * f));
    }
    let x_hat = tape.param(Tensor::new(real.shape(), mixed));
    let d = critic.critic_value(&x_hat);
    let grad = tape.grad(&d, &[&x_hat], true).remove(0);
    if !grad.value().is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite critic gradient at interpolates (max |g| = {})",
            grad.value().max_abs()
        )));
    }
    let norms = grad
        .square()
        .sum_to([n, 1, 1, 1])
        .add_scalar(SQRT_EPS)
        .sqrt();
    Ok(norms.add_scalar(-1.0).square().mean().scale(lambda))
}

/// Critic objective terms, all scalar variables.
pub struct CriticLoss {
    pub total: Var,
    pub d_real: Var,
    pub d_fake: Var,
    pub gp: Var,
}

pub fn critic_loss(
    tape: &Tape,
    critic: &dyn Embedder,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
    lambda: f64,
) -> Result<CriticLoss> {
    let d_real = critic.critic_value(&tape.constant(real.clone())).mean();
    let d_fake = critic.critic_value(&tape.constant(fake.clone())).mean();
    let gp = gradient_penalty(tape, critic, real, fake, eps, lambda)?;
    let total = d_fake.sub(&d_real).add(&gp);
    Ok(CriticLoss {
        total,
        d_real,
        d_fake,
        gp,
    })
}

/// Per-channel batch mean and population standard deviation of `[n, e, 1, 1]`
/// embeddings, each `[1, e, 1, 1]`.
pub fn embedding_moments(emb: &Var) -> (Var, Var) {
    let shape = emb.shape();
    let reduced = [1, shape[1], shape[2], shape[3]];
    let mean = emb.mean_to(reduced);
    let var = emb.sub(&mean.broadcast_to(shape)).square().mean_to(reduced);
    (mean, var.add_scalar(SQRT_EPS).sqrt())
}

/// Generator objective terms, all scalar variables.
pub struct GeneratorLoss {
    pub total: Var,
    pub fm: Var,
    pub mse: Var,
}

/// `alpha·(‖μ_r − μ_f‖² + ‖σ_r − σ_f‖²) + beta·mean((real − fake)²)`.
pub fn generator_loss(
    critic: &dyn Embedder,
    real: &Var,
    fake: &Var,
    alpha_fm: f64,
    beta_mse: f64,
) -> Result<GeneratorLoss> {
    if real.shape()[0] < 2 {
        return Err(Error::Config(
            "embedding standard deviation needs a batch of at least 2".into(),
        ));
    }
    let (mu_r, sd_r) = embedding_moments(&critic.embed(real));
    let (mu_f, sd_f) = embedding_moments(&critic.embed(fake));
    let fm = mu_r
        .sub(&mu_f)
        .square()
        .sum()
        .add(&sd_r.sub(&sd_f).square().sum());
    let mse = real.sub(fake).square().mean();
    let total = fm.scale(alpha_fm).add(&mse.scale(beta_mse));
    Ok(GeneratorLoss { total, fm, mse })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticReport {
    pub loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub gp: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub loss: f64,
    pub fm: f64,
    pub mse: f64,
}

fn params_grads(tape: &Tape, loss: &Var, vars: &[Var]) -> Vec<Tensor> {
    let refs: Vec<&Var> = vars.iter().collect();
    tape.grad(loss, &refs, false)
        .into_iter()
        .map(|g| (*g.value()).clone())
        .collect()
}

fn check_finite(what: &str, values: &[f64], step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite {what} at step {step}: {values:?}"
        )))
    }
}

/// Reconstructions of `real` from a frozen generator.
pub fn reconstruct_detached(g: &Generator, real: &Tensor) -> Tensor {
    let tape = Tape::new();
    tape.no_grad(|| {
        let bound = g.bind(&tape, false, Mode::Train, None);
        (*bound.reconstruct(&tape.constant(real.clone())).value()).clone()
    })
}

/// One critic update against detached reconstructions. The generator is
/// only read.
pub fn critic_step(
    d: &mut Critic,
    g: &Generator,
    opt: &mut Adam,
    real: &Tensor,
    eps: &[f64],
    cfg: &TrainConfig,
) -> Result<CriticReport> {
    let fake = reconstruct_detached(g, real);
    let tape = Tape::new();
    let bound = d.bind(&tape, true, None);
    let loss = critic_loss(&tape, &bound, real, &fake, eps, cfg.lambda_gp)?;
    let report = CriticReport {
        loss: scalar(&loss.total),
        d_real: scalar(&loss.d_real),
        d_fake: scalar(&loss.d_fake),
        gp: scalar(&loss.gp),
    };
    check_finite(
        "critic loss",
        &[report.loss, report.gp],
        opt.steps_taken() as usize,
    )?;
    let grads = params_grads(&tape, &loss.total, &bound.vars);
    drop(bound);
    opt.step(&mut d.params.tensors, &grads);
    Ok(report)
}

/// One generator update through the frozen critic. The critic is only read.
pub fn generator_step(
    g: &mut Generator,
    d: &Critic,
    opt: &mut Adam,
    real: &Tensor,
    cfg: &TrainConfig,
) -> Result<GeneratorReport> {
    if real.shape()[0] < 2 {
        return Err(Error::Config(
            "generator_step needs a batch of at least 2 for embedding statistics".into(),
        ));
    }
    let probe = Probe::default();
    let tape = Tape::new();
    let (report, grads) = {
        let gen = g.bind(&tape, true, Mode::Train, Some(&probe));
        let critic = d.bind(&tape, false, None);
        let real_v = tape.constant(real.clone());
        let fake = gen.reconstruct(&real_v);
        let loss = generator_loss(&critic, &real_v, &fake, cfg.alpha_fm, cfg.beta_mse)?;
        let report = GeneratorReport {
            loss: scalar(&loss.total),
            fm: scalar(&loss.fm),
            mse: scalar(&loss.mse),
        };
        check_finite(
            "generator loss",
            &[report.loss, report.fm, report.mse],
            opt.steps_taken() as usize,
        )?;
        (report, params_grads(&tape, &loss.total, &gen.vars))
    };
    opt.step(&mut g.params.tensors, &grads);
    if !g.running.is_empty() {
        g.absorb_batch_moments(&probe);
    }
    Ok(report)
}

/// Loss components of one iteration (`n_critic` critic updates, one
/// generator update); critic fields are from the last critic update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub critic: CriticReport,
    pub generator: GeneratorReport,
}

/// Epoch means of the loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub critic_loss: f64,
    pub gp: f64,
    pub fm: f64,
    pub mse: f64,
}

impl EpochLog {
    fn from_steps(epoch: usize, steps: &[StepLog]) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: fn(&StepLog) -> f64| steps.iter().map(f).sum::<f64>() / n;
        EpochLog {
            epoch,
            critic_loss: mean(|s| s.critic.loss),
            gp: mean(|s| s.critic.gp),
            fm: mean(|s| s.generator.fm),
            mse: mean(|s| s.generator.mse),
        }
    }
}

/// Batches of one epoch: a seeded permutation cut into `batch_size` chunks.
/// A one-sample tail is merged into the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    batches
}

/// Both networks, their optimizers and the training counters.
pub struct Trainer {
    pub generator: Generator,
    pub critic: Critic,
    pub cfg: TrainConfig,
    gen_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha8Rng,
    pub step: usize,
    pub epoch: usize,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(generator: Generator, critic: Critic, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            gen_opt: Adam::new(cfg.learning_rate, cfg.adam_betas),
            critic_opt: Adam::new(cfg.learning_rate, cfg.adam_betas),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            generator,
            critic,
            cfg,
            step: 0,
            epoch: 0,
            steps: Vec::new(),
            epochs: Vec::new(),
        })
    }

    /// `n_critic` critic updates followed by one generator update.
    pub fn iteration(&mut self, batch: &Tensor) -> Result<StepLog> {
        let n = batch.shape()[0];
        if n < 2 {
            return Err(Error::Config(
                "training batches need at least 2 segments".into(),
            ));
        }
        let mut critic = CriticReport::default();
        for _ in 0..self.cfg.n_critic {
            let eps: Vec<f64> = (0..n).map(|_| self.rng.random::<f64>()).collect();
            critic = critic_step(
                &mut self.critic,
                &self.generator,
                &mut self.critic_opt,
                batch,
                &eps,
                &self.cfg,
            )?;
        }
        let generator = generator_step(
            &mut self.generator,
            &self.critic,
            &mut self.gen_opt,
            batch,
            &self.cfg,
        )?;
        self.step += 1;
        let log = StepLog {
            step: self.step,
            epoch: self.epoch,
            critic,
            generator,
        };
        self.steps.push(log);
        Ok(log)
    }

    pub fn run_epoch(&mut self, data: &Tensor) -> Result<EpochLog> {
        let n = data.shape()[0];
        if n < 2 {
            return Err(Error::Dataset(format!(
                "training needs at least 2 segments, got {n}"
            )));
        }
        let first = self.steps.len();
        for idx in epoch_batches(n, self.cfg.batch_size, self.cfg.seed, self.epoch) {
            self.iteration(&data.select_batch(&idx))?;
        }
        let log = EpochLog::from_steps(self.epoch, &self.steps[first..]);
        log::info!(
            "epoch {}: critic {:.4} gp {:.4} fm {:.4} mse {:.5}",
            log.epoch,
            log.critic_loss,
            log.gp,
            log.fm,
            log.mse
        );
        self.epochs.push(log);
        self.epoch += 1;
        Ok(log)
    }

    /// Runs `cfg.epochs` epochs over `data` (`[n, 1, 128, 128]`).
    pub fn fit(&mut self, data: &Tensor) -> Result<()> {
        if data.shape()[0] == 0 {
            return Err(Error::Dataset("empty training set".into()));
        }
        for _ in 0..self.cfg.epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }
}

/// Writes the per-epoch loss log as CSV.
pub fn write_loss_log(path: &Path, epochs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in epochs {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes the per-step loss log as CSV.
pub fn write_step_log(path: &Path, steps: &[StepLog]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(
        out,
        "step,epoch,critic_loss,d_real,d_fake,gp,generator_loss,fm,mse"
    )
    .map_err(io)?;
    for s in steps {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.step,
            s.epoch,
            s.critic.loss,
            s.critic.d_real,
            s.critic.d_fake,
            s.critic.gp,
            s.generator.loss,
            s.generator.fm,
            s.generator.mse
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::init_models;

    #[test]
    fn batches_cover_everything_once() {
        for (n, b) in [(64, 32), (65, 32), (66, 32), (5, 8), (1, 4)] {
            let batches = epoch_batches(n, b, 3, 0);
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            if n > b {
                assert!(batches.iter().all(|x| x.len() >= 2));
            }
        }
        assert_eq!(epoch_batches(64, 32, 3, 0).len(), 2);
        assert_eq!(epoch_batches(66, 32, 3, 0).len(), 3);
        assert_eq!(epoch_batches(65, 32, 3, 0).len(), 2);
        assert_ne!(epoch_batches(64, 32, 3, 0), epoch_batches(64, 32, 3, 1));
    }

    #[test]
    fn generator_step_rejects_single_sample() {
        let (mut g, d) = init_models(&ModelConfig::with_width(1, 4), 0).unwrap();
        let mut opt = Adam::new(1e-3, (0.5, 0.9));
        let err = generator_step(
            &mut g,
            &d,
            &mut opt,
            &Tensor::zeros([1, 1, 128, 128]),
            &TrainConfig::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn steps_touch_only_their_network() {
        let (mut g, mut d) = init_models(&ModelConfig::with_width(1, 4), 1).unwrap();
        let x = Tensor::new(
            [2, 1, 128, 128],
            (0..2 * 128 * 128)
                .map(|i| ((i % 97) as f64 / 48.0) - 1.0)
                .collect(),
        );
        let cfg = TrainConfig::default();
        let (g0, d0) = (g.clone(), d.clone());
        let mut opt = Adam::new(1e-3, (0.5, 0.9));
        critic_step(&mut d, &g, &mut opt, &x, &[0.3, 0.7], &cfg).unwrap();
        assert_eq!(g, g0);
        assert_ne!(d, d0);
        let d1 = d.clone();
        let mut opt = Adam::new(1e-3, (0.5, 0.9));
        generator_step(&mut g, &d, &mut opt, &x, &cfg).unwrap();
        assert_eq!(d, d1);
        assert_ne!(g, g0);
    }
}
