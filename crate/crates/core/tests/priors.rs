use std::sync::Arc;

use featinv_core::assets;
use featinv_core::data::synthetic_dataset;
use featinv_core::metrics::psnr;
use featinv_core::priors::toy_decoder::ToyDecoder;
use featinv_core::priors::ldm::ConvDenoiser;
use featinv_core::priors::*;
use featinv_core::splitnet::{split, zoo};
use featinv_tensor::gradcheck::check_gradient;
use featinv_tensor::{Ctx, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

fn probes(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..10).map(|_| rng.random_range(0..n)).collect()
}

#[test]
fn ldm_adapter_runs_the_configured_number_of_steps() {
    let prior = LdmAdapter::untrained(3, 20).unwrap();
    assert_eq!(prior.sampling_steps(), 20);
    let v = LatentVariable::new(gaussian(prior.latent_shape().to_vec(), 1));
    let v = normalize_latent(&v).unwrap();
    let img = decode(&prior, &v, &TextEmbedding::zeros(prior.text_dim())).unwrap();
    assert_eq!(prior.reverse_steps_executed(), 20);
    assert_eq!(img.shape(), prior.output_shape());
    prior.reset_step_counter();
    let five = LdmAdapter::untrained(3, 5).unwrap();
    decode(&five, &v, &TextEmbedding::zeros(five.text_dim())).unwrap();
    assert_eq!(five.reverse_steps_executed(), 5);
    assert!(LdmAdapter::untrained(3, 0).is_err());
}

#[test]
fn ldm_adapter_loads_saved_parts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ldm.finv");
    let shape = toy_decoder::DecoderShape::default();
    let den = ConvDenoiser::new(1, shape.latent_channels, 8, shape.text_dim);
    let dec = ToyDecoder::new(&mut ChaCha8Rng::seed_from_u64(2), shape);
    LdmAdapter::save_parts(&den, &dec, &path).unwrap();
    let spec = PriorSpec {
        name: "ldm_adapter".into(),
        weights_path: Some(path),
        sampling_steps: 4,
        guidance_scale: 2.0,
        scheduler: Scheduler::Linear,
    };
    let p = load_prior(&spec, [3, 32, 32]).unwrap();
    assert_eq!(p.sampling_steps(), 4);
    assert!(p.supports_text());
}

#[test]
fn ldm_adapter_without_weights_is_a_capability_error() {
    let spec = PriorSpec {
        name: "ldm_adapter".into(),
        weights_path: None,
        sampling_steps: 20,
        guidance_scale: 1.0,
        scheduler: Scheduler::Linear,
    };
    assert_eq!(load_prior(&spec, [3, 32, 32]).err().unwrap().exit_code(), 4);
}

#[test]
fn decoding_is_deterministic() {
    let e = HashTextEncoder::new(16).embed("blue sky").unwrap();
    let priors: Vec<Arc<dyn GenerativePrior>> = vec![
        Arc::new(assets::toy_decoder_prior().unwrap()),
        Arc::new(LdmAdapter::untrained(0, 3).unwrap()),
    ];
    for p in priors {
        let v = normalize_latent(&LatentVariable::new(gaussian(p.latent_shape().to_vec(), 4))).unwrap();
        let a = decode(p.as_ref(), &v, &e).unwrap();
        let b = decode(p.as_ref(), &v, &e).unwrap();
        assert_eq!(a, b);
        let (lo, hi) = p.pixel_range();
        assert!(a.data().iter().all(|&x| x >= lo && x <= hi));
    }
}

#[test]
fn decode_gradients_match_finite_differences() {
    let priors: Vec<Box<dyn GenerativePrior>> = vec![
        Box::new(IdentityPrior::new([3, 6, 6])),
        Box::new(assets::toy_decoder_prior().unwrap()),
    ];
    for p in priors {
        let mut shape = vec![1];
        shape.extend_from_slice(p.latent_shape());
        let v = gaussian(shape, 7);
        let c = check_gradient(&v, &probes(v.numel(), 8), 1e-5, |g, x| {
            let mut ctx = Ctx::frozen(g);
            p.decode_var(&mut ctx, x, None).square().sum()
        });
        let err = c.max_relative_error(1e-8);
        assert!(err < 1e-3, "{}: {err}", p.name());
    }
}

#[test]
fn f1_gradients_match_finite_differences() {
    for name in ["toy_cnn", "toy_vit"] {
        let model = Arc::new(zoo::load_model(name, None).unwrap());
        let sm = split(model, 2).unwrap();
        let x = gaussian(vec![1, 3, 32, 32], 9).map(|v| 0.5 + 0.2 * v);
        let target = sm.extract_batch(&[featinv_core::image::Image::filled(3, 32, 32, 0.3)]).unwrap();
        let t = sm.stack_features(&target).unwrap();
        let c = check_gradient(&x, &probes(x.numel(), 10), 1e-5, |g, xv| {
            let mut ctx = Ctx::frozen(g);
            sm.f1(&mut ctx, xv).mse(g.constant(t.clone()))
        });
        let err = c.max_relative_error(1e-8);
        assert!(err < 1e-3, "{name}: {err}");
    }
}

#[test]
fn bundled_autoencoder_reconstructs_held_out_images() {
    let ae = assets::toy_autoencoder().unwrap();
    let prior = assets::toy_decoder_prior().unwrap();
    let imgs: Vec<_> = synthetic_dataset(20, 4242).into_iter().map(|d| d.image).collect();
    let latents: Vec<LatentVariable> = ae.encode(&imgs).unwrap().into_iter().map(LatentVariable::new).collect();
    let recon = decode_batch(&prior, &latents, &TextEmbedding::zeros(prior.text_dim())).unwrap();
    let mean = imgs.iter().zip(&recon).map(|(a, b)| psnr(a, b).unwrap()).sum::<f64>() / imgs.len() as f64;
    assert!(mean > 25.0, "{mean}");
}

#[test]
fn registry_knows_its_priors() {
    let mut spec = PriorSpec {
        name: "identity".into(),
        weights_path: None,
        sampling_steps: 20,
        guidance_scale: 1.0,
        scheduler: Scheduler::Linear,
    };
    assert_eq!(load_prior(&spec, [3, 8, 8]).unwrap().latent_shape(), &[3, 8, 8]);
    spec.name = "toy_decoder".into();
    assert!(load_prior(&spec, [3, 32, 32]).is_ok());
    assert!(load_prior(&spec, [3, 16, 16]).is_err());
    spec.name = "stable_diffusion".into();
    assert_eq!(load_prior(&spec, [3, 32, 32]).err().unwrap().exit_code(), 2);
}
