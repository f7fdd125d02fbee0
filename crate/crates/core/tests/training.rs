use aegan_core::autograd::{Tape, Tensor, Var};
use aegan_core::model::{init_models, Embedder, ModelConfig};
use aegan_core::training::{critic_loss, generator_loss, gradient_penalty};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(
        [n, 1, 128, 128],
        (0..n * 128 * 128)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

/// Ignores its input entirely.
struct ConstantCritic;

impl Embedder for ConstantCritic {
    fn embed(&self, x: &Var) -> Var {
        let n = x.shape()[0];
        x.scale(0.0)
            .sum_to([n, 1, 1, 1])
            .add_scalar(0.7)
            .broadcast_to([n, 3, 1, 1])
    }
}

/// Mean and population deviation per column, two passes.
fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let e = rows[0].len();
    let mean: Vec<f64> = (0..e)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let sd = (0..e)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, sd)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.sample(i).to_vec()).collect()
}

#[test]
fn feature_matching_agrees_with_two_pass_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, d) = init_models(&ModelConfig::with_width(1, 4), 1).unwrap();
    let (real, fake) = (batch(&mut rng, 4), batch(&mut rng, 4));
    let tape = Tape::new();
    let critic = d.bind(&tape, false, None);
    let loss = generator_loss(
        &critic,
        &tape.constant(real.clone()),
        &tape.constant(fake.clone()),
        1.0,
        0.0,
    )
    .unwrap();

    let (mr, sr) = moments(&rows(&d.embed_batch(&real).unwrap()));
    let (mf, sf) = moments(&rows(&d.embed_batch(&fake).unwrap()));
    let oracle: f64 = mr
        .iter()
        .zip(&mf)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        + sr.iter()
            .zip(&sf)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    assert!((loss.fm.value().item() - oracle).abs() <= 1e-6 * oracle.max(1.0));
    assert_eq!(loss.total.value().item(), loss.fm.value().item());
}

#[test]
fn perfect_reconstruction_costs_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, d) = init_models(&ModelConfig::with_width(1, 4), 2).unwrap();
    let real = batch(&mut rng, 3);
    let tape = Tape::new();
    let critic = d.bind(&tape, false, None);
    let x = tape.constant(real);
    let loss = generator_loss(&critic, &x, &x, 1.0, 1.0).unwrap();
    assert!(loss.total.value().item().abs() <= 1e-12);
}

#[test]
fn constant_embedding_without_mse_costs_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let (real, fake) = (
        tape.constant(batch(&mut rng, 3)),
        tape.constant(batch(&mut rng, 3)),
    );
    let loss = generator_loss(&ConstantCritic, &real, &fake, 1.0, 0.0).unwrap();
    assert!(loss.total.value().item().abs() <= 1e-12);
    assert!(
        generator_loss(&ConstantCritic, &real, &fake, 1.0, 1.0)
            .unwrap()
            .mse
            .value()
            .item()
            > 0.0
    );
}

#[test]
fn critic_loss_is_the_sum_of_its_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (_, d) = init_models(&ModelConfig::with_width(1, 4), 4).unwrap();
    let (real, fake) = (batch(&mut rng, 3), batch(&mut rng, 3));
    let eps = [0.2, 0.5, 0.9];
    let tape = Tape::new();
    let critic = d.bind(&tape, false, None);
    let loss = critic_loss(&tape, &critic, &real, &fake, &eps, 10.0).unwrap();

    let (d_real, _) = d.discriminate(&real).unwrap();
    let (d_fake, _) = d.discriminate(&fake).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gp = gradient_penalty(&tape, &critic, &real, &fake, &eps, 10.0)
        .unwrap()
        .value()
        .item();
    let assembled = mean(&d_fake) - mean(&d_real) + gp;
    assert!((loss.total.value().item() - assembled).abs() <= 1e-6);
    assert!(gp >= 0.0);
}
