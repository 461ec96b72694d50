//! The analytic backend's noise prediction against a dense linear-Gaussian
//! oracle and a Monte Carlo regression estimate.

use std::f64::consts::PI;

use latent_compose::backend::{
    AnalyticGaussianBackend, AnalyticGaussianConfig, DiffusionBackend, EmbeddingTag, MeanSpec, PromptRole,
};
use latent_compose::tensor::{Latent, LatentSpace};
use nalgebra::{DMatrix, DVector};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const BETA: f64 = 1.5;

fn wrapped(k: usize, n: usize) -> f64 {
    if 2 * k <= n { k as f64 } else { k as f64 - n as f64 }
}

/// Dense covariance of one channel: circulant with spectrum `1/(1+β|k|²)`.
fn dense_sigma(h: usize, w: usize) -> DMatrix<f64> {
    let n = h * w;
    DMatrix::from_fn(n, n, |i, j| {
        let (dy, dx) = ((i / w) as f64 - (j / w) as f64, (i % w) as f64 - (j % w) as f64);
        let mut acc = 0.0;
        for ky in 0..h {
            for kx in 0..w {
                let k2 = wrapped(ky, h).powi(2) + wrapped(kx, w).powi(2);
                let phase = 2.0 * PI * (ky as f64 * dy / h as f64 + kx as f64 * dx / w as f64);
                acc += phase.cos() / (1.0 + BETA * k2);
            }
        }
        acc / n as f64
    })
}

fn mean_field(shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(shape, |(c, y, x)| 0.2 + 0.1 * c as f64 + 0.05 * y as f64 - 0.03 * x as f64)
}

fn backend(shape: (usize, usize, usize)) -> AnalyticGaussianBackend {
    let cfg = AnalyticGaussianConfig::default()
        .with_smoothness(BETA)
        .with_mean(EmbeddingTag::Unconditional, MeanSpec::Field(mean_field(shape)));
    AnalyticGaussianBackend::new(cfg).unwrap()
}

#[test]
fn prediction_matches_dense_closed_form() {
    let shape = (2, 3, 4);
    let (c, h, w) = shape;
    let b = backend(shape);
    let emb = b.embed_prompt("", PromptRole::Unconditional);
    let sigma = dense_sigma(h, w);
    let mu = mean_field(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in [1, 90, 500, 999] {
        let ab = b.scheduler().alpha_bar(t).unwrap();
        let op = (&sigma * ab + DMatrix::identity(h * w, h * w) * (1.0 - ab))
            .try_inverse()
            .unwrap()
            * (1.0 - ab).sqrt();
        let z_t = Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
        let pred = b
            .predict_noise(&Latent::new(z_t.clone(), LatentSpace::PixelIdentity), t, &emb, None, None)
            .unwrap();
        for ch in 0..c {
            let r = DVector::from_iterator(
                h * w,
                (0..h * w).map(|i| z_t[[ch, i / w, i % w]] - ab.sqrt() * mu[[ch, i / w, i % w]]),
            );
            let expected = &op * r;
            for i in 0..h * w {
                let got = pred.data[[ch, i / w, i % w]];
                assert!((got - expected[i]).abs() < 1e-10, "t={t} ch={ch} i={i}: {got} vs {}", expected[i]);
            }
        }
    }
}

/// `E[ε | z_t]` estimated by least-squares regression of `ε` on `z_t` over
/// joint samples of the forward process.
#[test]
fn prediction_matches_monte_carlo_posterior_mean() {
    let shape = (1, 2, 4);
    let (_, h, w) = shape;
    let n = h * w;
    let b = backend(shape);
    let emb = b.embed_prompt("", PromptRole::Unconditional);
    let mu = mean_field(shape);
    let mu = DVector::from_iterator(n, mu.iter().copied());
    let chol = dense_sigma(h, w).cholesky().expect("positive definite");
    let t = 400;
    let ab = b.scheduler().alpha_bar(t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples = 200_000;

    // design matrix [z_t, 1] against targets ε
    let mut xtx = DMatrix::<f64>::zeros(n + 1, n + 1);
    let mut xty = DMatrix::<f64>::zeros(n + 1, n);
    for _ in 0..samples {
        let xi = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let eps = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let z0 = &mu + chol.l() * xi;
        let zt = z0 * ab.sqrt() + &eps * (1.0 - ab).sqrt();
        let x = DVector::from_fn(n + 1, |i, _| if i < n { zt[i] } else { 1.0 });
        xtx += &x * x.transpose();
        xty += &x * eps.transpose();
    }
    let coef = xtx.cholesky().unwrap().solve(&xty);

    for k in 0..5 {
        let z_t = DVector::from_fn(n, |i, _| 0.4 * ((i + k) as f64).sin());
        let x = DVector::from_fn(n + 1, |i, _| if i < n { z_t[i] } else { 1.0 });
        let estimate = coef.transpose() * x;
        let latent = Latent::new(
            Array3::from_shape_fn(shape, |(_, y, xx)| z_t[y * w + xx]),
            LatentSpace::PixelIdentity,
        );
        let pred = b.predict_noise(&latent, t, &emb, None, None).unwrap();
        for i in 0..n {
            let got = pred.data[[0, i / w, i % w]];
            assert!((got - estimate[i]).abs() < 0.02, "probe {k} i={i}: {got} vs {}", estimate[i]);
        }
    }
}

#[test]
fn prior_samples_have_the_prior_covariance() {
    let shape = (1, 2, 4);
    let (_, h, w) = shape;
    let n = h * w;
    let b = backend(shape);
    let sigma = dense_sigma(h, w);
    let mu = mean_field(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples = 50_000;
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for _ in 0..samples {
        let s = b.sample_prior(EmbeddingTag::Unconditional, shape, &mut rng).unwrap();
        let d = DVector::from_iterator(n, s.data.iter().zip(mu.iter()).map(|(a, m)| a - m));
        cov += &d * d.transpose();
    }
    cov /= samples as f64;
    let worst = (cov - sigma).abs().max();
    assert!(worst < 0.02, "covariance error {worst}");
}
