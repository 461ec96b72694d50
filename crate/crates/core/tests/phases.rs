use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use latent_compose::attention::{AttentionControlState, KvProbe, ReplacementGate};
use latent_compose::backend::{
    add_noise, AnalyticGaussianBackend, AnalyticGaussianConfig, DiffusionBackend, EmbeddingTag, MeanSpec,
    NoiseSample, PromptEmbedding, ToyAttentionBackend, ToyAttentionConfig,
};
use latent_compose::guidance::{
    cfg_combine, loss_composition_gradient, CfgWeight, CompositionTerms, DdsInputs, GradMode, PromptSet, StepSample,
    ToyPyramid,
};
use latent_compose::pipeline::{
    harmonize, remove_object, run_pipeline, CompositionRequest, Conditions, PhaseConfig, PipelineConfig,
    PlacementSpec,
};
use latent_compose::tensor::{ImageTensor, Latent, PixelMask};
use ndarray::Array3;

fn toy() -> ToyAttentionBackend {
    ToyAttentionBackend::new(ToyAttentionConfig::default()).unwrap()
}

fn background(h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, |y, x, c| {
        0.35 + 0.2 * (y as f64 / h as f64) + 0.08 * (x as f64 / 5.0).sin() + 0.04 * c as f64
    })
}

fn square(h: usize, w: usize, lo: usize, hi: usize) -> PixelMask {
    PixelMask::from_fn(h, w, |y, x| (lo..hi).contains(&y) && (lo..hi).contains(&x))
}

fn mean_abs_diff_where(a: &ImageTensor, b: &ImageTensor, keep: impl Fn(usize, usize) -> bool) -> f64 {
    let (mut acc, mut n) = (0.0, 0);
    for ((y, x, c), v) in a.data.indexed_iter() {
        if keep(y, x) {
            acc += (v - b.data[[y, x, c]]).abs();
            n += 1;
        }
    }
    acc / n as f64
}

fn to_field(img: &ImageTensor) -> Array3<f64> {
    let (h, w) = img.resolution();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| img.data[[y, x, c]])
}

#[test]
fn removal_with_empty_mask_is_near_identity() {
    let (h, w) = (32, 32);
    let source = background(h, w);
    let out = remove_object(&toy(), &ToyPyramid::default(), &source, &PixelMask::zeros(h, w), &PhaseConfig::removal())
        .unwrap();
    // a perceptual-only run starts at its optimum and never moves
    let change = out.image.mean_abs_diff(&source);
    assert!(change <= 1e-3, "mean abs change {change}");
}

/// Guided source prediction explains the source image exactly and the
/// guided target prediction explains the smooth background, so the DDS
/// fixed point inside the mask is the smooth field itself.
#[test]
fn analytic_removal_recovers_the_smooth_field_at_the_boundary() {
    let (h, w) = (32, 32);
    let smooth = ImageTensor::from_fn(h, w, |y, x, c| {
        0.08 + 0.06 * (y as f64 / h as f64) + 0.03 * (x as f64 / 6.0).sin() + 0.02 * c as f64
    });
    let bump = square(h, w, 11, 21);
    let source = ImageTensor::from_fn(h, w, |y, x, c| smooth.data[[y, x, c]] + 0.8 * bump.data[[y, x]]);
    let mask = square(h, w, 9, 23);
    let cfg = PhaseConfig::removal();
    let weight = cfg.cfg_weight.value();
    let smooth_field = to_field(&smooth);
    let source_field = &smooth_field + &((to_field(&source) - &smooth_field) / weight);
    let backend = AnalyticGaussianBackend::new(
        AnalyticGaussianConfig::default()
            .with_mean(EmbeddingTag::Unconditional, MeanSpec::Field(smooth_field.clone()))
            .with_mean(EmbeddingTag::Source, MeanSpec::Field(source_field))
            .with_mean(EmbeddingTag::Target, MeanSpec::Field(smooth_field)),
    )
    .unwrap();
    let out = remove_object(&backend, &ToyPyramid::default(), &source, &mask, &cfg).unwrap();
    // two pixels either side of the bump's edge
    let band = |y: usize, x: usize| {
        let d = |v: usize| (v as i64 - 11).abs().min((v as i64 - 20).abs());
        let inside = (11..21).contains(&y) && (11..21).contains(&x);
        let ring = (9..23).contains(&y) && (9..23).contains(&x);
        ring && (!inside || d(y) < 2 || d(x) < 2)
    };
    let before = mean_abs_diff_where(&source, &smooth, band);
    let after = mean_abs_diff_where(&out.image, &smooth, band);
    assert!(source.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(after <= 0.5 * before, "boundary band error {before:.4} -> {after:.4}");
}

#[test]
fn toy_removal_moves_the_object_toward_its_surroundings() {
    let (h, w) = (32, 32);
    let clean = background(h, w);
    let object = square(h, w, 10, 22);
    let source = ImageTensor::from_fn(h, w, |y, x, c| {
        if object.data[[y, x]] > 0.0 { 0.95 - 0.4 * c as f64 } else { clean.data[[y, x, c]] }
    });
    let mask = square(h, w, 8, 24);
    let out = remove_object(&toy(), &ToyPyramid::default(), &source, &mask, &PhaseConfig::removal()).unwrap();
    let inside = |y: usize, x: usize| mask.data[[y, x]] > 0.0;
    let before = mean_abs_diff_where(&source, &clean, inside);
    let after = mean_abs_diff_where(&out.image, &clean, inside);
    let outside = mean_abs_diff_where(&out.image, &clean, |y, x| !inside(y, x));
    assert!(after < before, "error inside the mask {before:.4} -> {after:.4}");
    assert!(outside < 0.01, "background drift {outside:.4}");
}

#[test]
fn harmonization_with_identical_prompts_is_a_control_run() {
    let (h, w) = (16, 16);
    let paste = ImageTensor::from_fn(h, w, |y, x, c| if (4..10).contains(&y) && (5..12).contains(&x) { 0.9 } else { 0.2 + 0.01 * (y + x + c) as f64 });
    let mask = PixelMask::from_fn(h, w, |y, x| (4..10).contains(&y) && (5..12).contains(&x));
    let cfg = PhaseConfig {
        steps: 20,
        source_prompt: "A harmonious scene.".into(),
        target_prompt: "A harmonious scene.".into(),
        ..PhaseConfig::harmonization()
    };
    let out = harmonize(&toy(), &ToyPyramid::default(), &paste, &mask, &cfg).unwrap();
    assert_eq!(out.image, paste);
    assert!(out.log.rows().iter().all(|r| r.total == 0.0 && r.grad_norm == 0.0));
    assert_eq!(out.log.rows().len(), 20);
}

#[test]
fn harmonization_changes_the_object_more_than_the_background() {
    let (h, w) = (32, 32);
    let inside = |y: usize, x: usize| (10..22).contains(&y) && (8..20).contains(&x);
    let paste = ImageTensor::from_fn(h, w, |y, x, c| if inside(y, x) { 0.95 - 0.3 * c as f64 } else { background(h, w).data[[y, x, c]] });
    let mask = PixelMask::from_fn(h, w, inside);
    let out = harmonize(&toy(), &ToyPyramid::default(), &paste, &mask, &PhaseConfig::harmonization()).unwrap();
    let fore = mean_abs_diff_where(&out.image, &paste, inside);
    let back = mean_abs_diff_where(&out.image, &paste, |y, x| !inside(y, x));
    assert!(fore > back, "foreground change {fore:.4} vs background {back:.4}");
    assert!(back < 0.1, "background change {back:.4}");
}

type Captured = Arc<Mutex<HashMap<usize, (ndarray::Array2<f64>, ndarray::Array2<f64>)>>>;

/// One branch evaluated with a probe that records every layer's keys/values.
fn recorded(backend: &ToyAttentionBackend, z_t: &Latent, t: i64, emb: &PromptEmbedding) -> (Latent, Captured) {
    let store: Captured = Arc::default();
    let sink = store.clone();
    let probe: KvProbe = Arc::new(move |site, k, v| {
        sink.lock().unwrap().insert(site.layer, (k.clone(), v.clone()));
    });
    let mut state = AttentionControlState::default().with_probe(probe);
    let eps = backend.predict_noise(z_t, t, emb, None, Some(&mut state)).unwrap();
    (eps, store)
}

/// One branch evaluated with a probe that overwrites keys/values of layers
/// above `min_layer` with the recorded ones.
fn substituted(
    backend: &ToyAttentionBackend,
    z_t: &Latent,
    t: i64,
    emb: &PromptEmbedding,
    source: Captured,
    min_layer: usize,
) -> Latent {
    let probe: KvProbe = Arc::new(move |site, k, v| {
        if site.layer > min_layer {
            let store = source.lock().unwrap();
            let (sk, sv) = &store[&site.layer];
            k.assign(sk);
            v.assign(sv);
        }
    });
    let mut state = AttentionControlState::default().with_probe(probe);
    backend.predict_noise(z_t, t, emb, None, Some(&mut state)).unwrap()
}

#[test]
fn composition_replacement_matches_manual_substitution() {
    let backend = ToyAttentionBackend::new(ToyAttentionConfig {
        layer_count: 6,
        ..ToyAttentionConfig::default()
    })
    .unwrap();
    let shape = (3, 16, 16);
    let zhat = Latent::new(
        Array3::from_shape_fn(shape, |(c, y, x)| 0.3 + 0.04 * ((y * 3 + x * 5 + c) % 9) as f64),
        latent_compose::tensor::LatentSpace::PixelIdentity,
    );
    let z = Latent::new(
        zhat.data.mapv(|v| 1.0 - v),
        latent_compose::tensor::LatentSpace::PixelIdentity,
    );
    let prompts = PromptSet::embed(&backend, "a red chair", "a blue sofa");
    let w = CfgWeight::DEFAULT;
    let inputs = DdsInputs {
        backend: &backend,
        prompts: &prompts,
        cfg_weight: w,
        mode: GradMode::Difference,
    };
    let gate = ReplacementGate { step: 3, layer: 2 };
    let terms = CompositionTerms {
        source_features: None,
        target_features: None,
        gate,
    };
    let t = 300;
    let sample = StepSample {
        step: 4,
        t,
        noise: NoiseSample::draw(shape, 5),
    };
    let mut state = AttentionControlState::default();
    let got = loss_composition_gradient(&inputs, &zhat, &z, &terms, &sample, &mut state).unwrap();

    let scheduler = backend.scheduler();
    let src_t = add_noise(&zhat, &sample.noise, t, scheduler).unwrap();
    let z_t = add_noise(&z, &sample.noise, t, scheduler).unwrap();
    let (src_u, kv_u) = recorded(&backend, &src_t, t, &prompts.unconditional);
    let (src_c, kv_c) = recorded(&backend, &src_t, t, &prompts.source);
    let tgt_u = substituted(&backend, &z_t, t, &prompts.unconditional, kv_u, gate.layer);
    let tgt_c = substituted(&backend, &z_t, t, &prompts.target, kv_c, gate.layer);
    let eps_src = cfg_combine(&src_c, &src_u, w).unwrap();
    let eps_tgt = cfg_combine(&tgt_c, &tgt_u, w).unwrap();
    let alpha_bar = scheduler.alpha_bar(t).unwrap();
    let expected = (&eps_tgt.data - &eps_src.data) * alpha_bar.sqrt();
    let worst = got
        .gradient
        .data
        .iter()
        .zip(expected.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-12, "max deviation {worst}");

    // below the step threshold nothing is substituted
    let plain = StepSample { step: 3, ..sample };
    let mut state = AttentionControlState::default();
    let early = loss_composition_gradient(&inputs, &zhat, &z, &terms, &plain, &mut state).unwrap();
    assert!(early.gradient.data.iter().zip(got.gradient.data.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
}

fn small_request() -> CompositionRequest {
    let (h, w) = (16, 16);
    CompositionRequest {
        source_image: background(h, w),
        source_mask: square(h, w, 4, 12),
        object_image: ImageTensor::from_fn(h, w, |y, x, c| 0.1 + 0.05 * ((y + 2 * x + c) % 13) as f64),
        object_mask: PixelMask::from_fn(h, w, |y, x| (y as f64 - 8.0).powi(2) + (x as f64 - 7.0).powi(2) < 20.0),
        conditions: Some(Conditions::Text {
            source: "a cat".into(),
            target: "a cat wearing a hat".into(),
        }),
        placement: PlacementSpec::BboxFit,
    }
}

fn short_pipeline() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.removal.steps = 10;
    cfg.harmonization.steps = 10;
    cfg.composition.steps = 12;
    cfg.composition.late_range = None;
    cfg.composition.gate = Some(ReplacementGate { step: 6, layer: 10 });
    cfg
}

#[test]
fn pipeline_runs_are_reproducible() {
    let backend = toy();
    let fx = ToyPyramid::default();
    let request = small_request();
    let cfg = short_pipeline();
    let a = run_pipeline(&request, &cfg, &backend, &fx, None).unwrap();
    let b = run_pipeline(&request, &cfg, &backend, &fx, None).unwrap();
    assert_eq!(a.result, b.result);
    assert_eq!(a.logs, b.logs);
    assert!(a.result.is_some() && a.result != a.harmonized);

    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&request, &cfg, &backend, &fx, Some(dir.path())).unwrap();
    let first = std::fs::read(dir.path().join("result.png")).unwrap();
    run_pipeline(&request, &cfg, &backend, &fx, Some(dir.path())).unwrap();
    assert_eq!(std::fs::read(dir.path().join("result.png")).unwrap(), first);
    assert!(dir.path().join("composition_loss.csv").exists());

    let mut other = cfg.clone();
    other.removal.seed += 1;
    let c = run_pipeline(&request, &other, &backend, &fx, None).unwrap();
    assert_ne!(c.background, a.background);
}
