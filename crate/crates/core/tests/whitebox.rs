use std::sync::Arc;

use featinv_core::assets;
use featinv_core::data::synthetic_dataset;
use featinv_core::image::Image;
use featinv_core::metrics::psnr;
use featinv_core::priors::{text_encoder_for, GenerativePrior, HashTextEncoder, IdentityPrior, TextEmbedding, TextEncoder};
use featinv_core::splitnet::blocks::{Block, IdentityBlock, MeanPoolBlock};
use featinv_core::splitnet::{split, zoo, Preprocessing, SplitModel, TargetModel};
use featinv_core::whitebox::*;

fn images(n: usize, seed: u64) -> Vec<Image> {
    synthetic_dataset(n, seed).into_iter().map(|d| d.image).collect()
}

fn cnn_split(l: usize) -> SplitModel {
    split(Arc::new(zoo::toy_cnn(0)), l).unwrap()
}

fn short(iterations: usize) -> InversionConfig {
    InversionConfig {
        iterations,
        ..Default::default()
    }
}

#[test]
fn mean_pool_inversion_matches_features() {
    let blocks: Vec<Box<dyn Block>> = vec![Box::new(MeanPoolBlock { k: 2 }), Box::new(IdentityBlock)];
    let model = TargetModel::new("pool", blocks, [3, 4, 4], Preprocessing::identity(3)).unwrap();
    let sm = split(Arc::new(model), 1).unwrap();
    let x = Image::new(3, 4, 4, (0..48).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
    let z = sm.extract_features(&x).unwrap();
    let mut cfg = short(500);
    cfg.weights.lambda_s = 0.0;
    let r = invert(&sm, &z, &IdentityPrior::new([3, 4, 4]), &cfg).unwrap();
    assert!(r.loss_trace.last().unwrap().reconstruction < 1e-4);
}

#[test]
fn trace_has_one_entry_per_iteration_and_descends() {
    let sm = cnn_split(2);
    let z = sm.extract_features(&images(1, 1)[0]).unwrap();
    let cfg = short(60);
    let r = invert(&sm, &z, &IdentityPrior::new([3, 32, 32]), &cfg).unwrap();
    assert_eq!(r.loss_trace.len(), 60);
    assert!(r.loss_trace.last().unwrap().total <= r.loss_trace[0].total);
    for b in &r.loss_trace {
        assert!(b.accounting_error(&cfg.weights) < 1e-9);
    }
    assert_eq!(r.manifest.status, AttackStatus::Completed);
    assert_eq!(r.manifest.config_hash, cfg.hash());
}

#[test]
fn runs_are_bit_identical() {
    let sm = cnn_split(1);
    let z = sm.extract_features(&images(1, 2)[0]).unwrap();
    let prior = assets::toy_decoder_prior().unwrap();
    let a = invert(&sm, &z, &prior, &short(15)).unwrap();
    let b = invert(&sm, &z, &prior, &short(15)).unwrap();
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.image, b.image);
}

#[test]
fn zero_text_without_weight_is_plain_inversion() {
    let sm = cnn_split(2);
    let z = sm.extract_features(&images(1, 3)[0]).unwrap();
    let prior = assets::toy_decoder_prior().unwrap();
    let plain = invert(&sm, &z, &prior, &short(20)).unwrap();
    let text = invert_with_text(&sm, &z, &prior, &TextEmbedding::zeros(prior.text_dim()), &short(20)).unwrap();
    assert_eq!(plain.loss_trace, text.loss_trace);
}

#[test]
fn text_weights_are_echoed() {
    let sm = cnn_split(2);
    let z = sm.extract_features(&images(1, 4)[0]).unwrap();
    let prior = assets::toy_decoder_prior().unwrap();
    let mut cfg = short(5);
    cfg.weights.lambda_s = 1.0;
    cfg.weights.lambda_txt = 10.0;
    let e = text_encoder_for(&prior).embed("blue sky").unwrap();
    let r = invert_with_text(&sm, &z, &prior, &e, &cfg).unwrap();
    assert_eq!(r.manifest.config.weights.lambda_s, 1.0);
    assert_eq!(r.manifest.config.weights.lambda_txt, 10.0);
    assert_eq!(r.manifest.text.as_deref(), Some("blue sky"));
    assert!(r.loss_trace.iter().all(|b| b.negentropy != 0.0));
}

#[test]
fn text_to_identity_prior_is_a_capability_error() {
    let sm = cnn_split(1);
    let z = sm.extract_features(&images(1, 5)[0]).unwrap();
    let e = HashTextEncoder::new(16).embed("circle").unwrap();
    let err = invert_with_text(&sm, &z, &IdentityPrior::new([3, 32, 32]), &e, &short(3)).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn matching_class_tag_helps() {
    let sm = cnn_split(2);
    let prior = assets::toy_decoder_prior().unwrap();
    let enc = text_encoder_for(&prior);
    let data = synthetic_dataset(10, 77);
    let mut cfg = short(200);
    cfg.weights.lambda_s = 0.01;
    let (mut matched, mut mismatched) = (0.0, 0.0);
    for (i, d) in data.iter().enumerate() {
        let z = sm.extract_features(&d.image).unwrap();
        let wrong = &data[(i + 5) % data.len()].caption;
        assert_ne!(wrong, &d.caption);
        let good = invert_with_text(&sm, &z, &prior, &enc.embed(&d.caption).unwrap(), &cfg).unwrap();
        let bad = invert_with_text(&sm, &z, &prior, &enc.embed(wrong).unwrap(), &cfg).unwrap();
        matched += psnr(&d.image, &good.image).unwrap();
        mismatched += psnr(&d.image, &bad.image).unwrap();
    }
    assert!(matched >= mismatched, "matched {matched} mismatched {mismatched}");
}

#[test]
fn single_frame_group_equals_plain_inversion() {
    let sm = cnn_split(2);
    let z = sm.extract_features(&images(1, 6)[0]).unwrap();
    let prior = IdentityPrior::new([3, 32, 32]);
    let mut cfg = short(25);
    cfg.weights.lambda_c = 5.0;
    let plain = invert(&sm, &z, &prior, &cfg).unwrap();
    let multi = invert_multiframe(&sm, &FrameGroup::new(vec![z]).unwrap(), &prior, &cfg).unwrap();
    assert_eq!(multi.len(), 1);
    assert_eq!(multi[0].loss_trace, plain.loss_trace);
    assert_eq!(multi[0].image, plain.image);
}

fn spread(results: &[AttackResult]) -> f64 {
    let mut s = 0.0;
    for a in results {
        for b in results {
            s += a
                .latent
                .values
                .data()
                .iter()
                .zip(b.latent.values.data())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>();
        }
    }
    s
}

#[test]
fn temporal_term_pulls_identical_frames_together() {
    let sm = cnn_split(3);
    let x = &images(1, 7)[0];
    let z = sm.extract_features(x).unwrap();
    let group = FrameGroup::new(vec![z; 4]).unwrap();
    let prior = IdentityPrior::new([3, 32, 32]);
    let mut cfg = short(80);
    let free = invert_multiframe(&sm, &group, &prior, &cfg).unwrap();
    cfg.weights.lambda_c = 5.0;
    let tied = invert_multiframe(&sm, &group, &prior, &cfg).unwrap();
    assert!(spread(&tied) < spread(&free));
    assert!(tied.iter().all(|r| r.manifest.frames == 4));
}

#[test]
fn frames_must_share_a_shape() {
    let a = cnn_split(1).extract_features(&images(1, 8)[0]).unwrap();
    let b = cnn_split(2).extract_features(&images(1, 8)[0]).unwrap();
    assert_eq!(FrameGroup::new(vec![a, b]).unwrap_err().exit_code(), 1);
    assert!(FrameGroup::new(vec![]).is_err());
}

#[test]
fn degenerate_start_aborts_with_last_state() {
    let sm = cnn_split(1);
    let z = sm.extract_features(&images(1, 9)[0]).unwrap();
    let prior = assets::toy_decoder_prior().unwrap();
    let mut cfg = short(10);
    cfg.init_std = 1e-14;
    let r = invert(&sm, &z, &prior, &cfg).unwrap();
    assert!(matches!(r.manifest.status, AttackStatus::Aborted { iteration: 0, .. }));
    assert!(r.loss_trace.is_empty());
}

#[test]
fn diverging_run_reports_the_iteration() {
    let sm = cnn_split(1);
    let z = sm.extract_features(&images(1, 10)[0]).unwrap();
    let mut cfg = short(10);
    cfg.learning_rate = 1e300;
    let err = invert(&sm, &z, &IdentityPrior::new([3, 32, 32]), &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("iteration"), "{err}");
}

#[test]
fn wrong_prior_shape_is_rejected() {
    let sm = cnn_split(1);
    let z = sm.extract_features(&images(1, 11)[0]).unwrap();
    assert!(invert(&sm, &z, &IdentityPrior::new([3, 16, 16]), &short(2)).is_err());
}
