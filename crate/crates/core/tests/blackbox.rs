use std::sync::Arc;

use featinv_core::assets;
use featinv_core::blackbox::*;
use featinv_core::data::synthetic_dataset;
use featinv_core::image::Image;
use featinv_core::losses::LossWeights;
use featinv_core::priors::{IdentityPrior, TextEmbedding};
use featinv_core::splitnet::{split, zoo, SplitModel};

fn probe_split() -> SplitModel {
    split(Arc::new(zoo::identity_probe(&zoo::toy_cnn(0))), 1).unwrap()
}

fn images(n: usize, seed: u64) -> Vec<Image> {
    synthetic_dataset(n, seed).into_iter().map(|d| d.image).collect()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 0.01,
        weights: LossWeights {
            lambda_s: 0.0,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn tiny_spec(feature: &[usize], latent: &[usize], k: usize, normalize: bool) -> InverterNetSpec {
    let opts = InverterOptions {
        width: 4,
        normalize_output: normalize,
        unet_depth: Some(1),
        ..Default::default()
    };
    build_inverter_with(feature, latent, k, None, &opts).unwrap()
}

#[test]
fn dataset_round_trips_through_disk() {
    let sm = probe_split();
    let imgs = images(5, 3);
    let texts: Vec<String> = (0..5).map(|i| format!("shape {i}")).collect();
    let ds = collect_queries_with_text(&sm, &imgs, Some(&texts)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = QueryDataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.pairs[2].id, "q_00002");
}

#[test]
fn grouped_dataset_keeps_groups() {
    let sm = probe_split();
    let g: Vec<Vec<Image>> = (0..3).map(|i| images(2, 10 + i)).collect();
    let ds = collect_query_groups(&sm, &g).unwrap();
    assert_eq!(ds.frames_per_group().unwrap(), 2);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    assert_eq!(QueryDataset::load(dir.path()).unwrap().groups, ds.groups);
}

#[test]
fn trained_inverter_saves_and_decodes_deterministically() {
    let sm = probe_split();
    let prior = IdentityPrior::new([3, 32, 32]);
    let ds = collect_queries(&sm, &images(12, 4)).unwrap();
    let spec = tiny_spec(sm.feature_shape(), &[3, 32, 32], 1, false);
    let inv = train_inverter(&ds, &spec, &prior, &tiny_config()).unwrap();
    assert_eq!(inv.manifest.train_loss.len(), 2);
    assert_eq!(inv.manifest.validation_size, 1);

    let zs = sm.extract_batch(&images(3, 5)).unwrap();
    let a = run_inverter_batch(&inv, &prior, &zs).unwrap();
    let b = run_inverter_batch(&inv, &prior, &zs).unwrap();
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inv.finv");
    inv.save(&path).unwrap();
    let back = TrainedInverter::load(&path).unwrap();
    assert_eq!(back.manifest, inv.manifest);
    assert_eq!(back.spec(), inv.spec());
    assert_eq!(run_inverter_batch(&back, &prior, &zs).unwrap(), a);
}

#[test]
fn training_is_reproducible() {
    let sm = probe_split();
    let prior = IdentityPrior::new([3, 32, 32]);
    let ds = collect_queries(&sm, &images(8, 6)).unwrap();
    let spec = tiny_spec(sm.feature_shape(), &[3, 32, 32], 1, false);
    let a = train_inverter(&ds, &spec, &prior, &tiny_config()).unwrap();
    let b = train_inverter(&ds, &spec, &prior, &tiny_config()).unwrap();
    assert_eq!(a.manifest.train_loss, b.manifest.train_loss);
}

#[test]
fn wide_features_are_resized_to_the_latent_grid() {
    let spec = build_inverter(&[64, 56, 56], &[4, 64, 64], 1, None).unwrap();
    assert!(spec.block_plan.contains(&Stage::Resize {
        from: [56, 56],
        to: [64, 64]
    }));
    let net = InverterNet::new(&spec, 0);
    let g = featinv_tensor::Graph::new();
    let mut ctx = featinv_tensor::Ctx::frozen(&g);
    let y = g.constant(featinv_tensor::Tensor::zeros(vec![1, 1, 64, 56, 56]));
    assert_eq!(net.forward(&mut ctx, y).shape(), vec![1, 4, 64, 64]);
}

#[test]
fn token_features_are_accepted() {
    let spec = build_inverter(&[64, 32], &[4, 8, 8], 1, None).unwrap();
    assert_eq!(spec.input_feature_shape, vec![64, 32]);
    assert_eq!(spatial_shape(&[64, 32]).unwrap(), [32, 8, 8]);
    assert!(spatial_shape(&[60, 32]).is_err());
}

#[test]
fn single_frame_fusion_is_a_no_op() {
    let on = InverterOptions::default();
    let off = InverterOptions {
        fusion: false,
        ..Default::default()
    };
    let a = build_inverter_with(&[16, 32, 32], &[4, 8, 8], 1, None, &on).unwrap();
    let b = build_inverter_with(&[16, 32, 32], &[4, 8, 8], 1, None, &off).unwrap();
    assert_eq!(a.block_plan, b.block_plan);
    assert_eq!(a.parameter_count, b.parameter_count);
}

#[test]
fn frames_share_one_branch() {
    let spec = tiny_spec(&[16, 32, 32], &[4, 8, 8], 3, true);
    assert!(matches!(spec.block_plan[0], Stage::Fusion { channels: 16, frames: 3 }));
    let net = InverterNet::new(&spec, 1);
    assert!(std::ptr::eq(net.branch(0), net.branch(2)));
}

#[test]
fn fused_and_unfused_meet_the_same_budget() {
    for fusion in [true, false] {
        let opts = InverterOptions {
            fusion,
            ..Default::default()
        };
        let spec = build_inverter_with(&[32, 16, 16], &[3, 32, 32], 4, Some(60_000), &opts).unwrap();
        let p = spec.parameter_count as f64;
        assert!((p - 60_000.0).abs() <= 3_000.0, "fusion {fusion}: {p}");
    }
}

#[test]
fn multiframe_inverter_runs_on_groups() {
    let sm = probe_split();
    let prior = IdentityPrior::new([3, 32, 32]);
    let groups: Vec<Vec<Image>> = (0..6).map(|i| images(2, 20 + i)).collect();
    let ds = collect_query_groups(&sm, &groups).unwrap();
    let spec = tiny_spec(sm.feature_shape(), &[3, 32, 32], 2, false);
    let inv = train_inverter_multiframe(&ds, &spec, &prior, &tiny_config()).unwrap();
    let zs = sm.extract_batch(&groups[0]).unwrap();
    assert_eq!(run_inverter_frames(&inv, &prior, &zs).unwrap().len(), 2);
    assert_eq!(run_inverter_frames(&inv, &prior, &zs[..1]).unwrap_err().exit_code(), 1);
}

#[test]
fn zero_text_weight_with_empty_prompts_matches_plain_training() {
    let sm = split(Arc::new(zoo::toy_cnn(0)), 2).unwrap();
    let prior = assets::toy_decoder_prior().unwrap();
    let imgs = images(6, 30);
    let empty = vec![String::new(); imgs.len()];
    let plain_ds = collect_queries(&sm, &imgs).unwrap();
    let text_ds = collect_queries_with_text(&sm, &imgs, Some(&empty)).unwrap();
    let spec = tiny_spec(sm.feature_shape(), &[4, 8, 8], 1, true);
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    let plain = train_inverter(&plain_ds, &spec, &prior, &cfg).unwrap();
    let text = train_inverter_with_text(&text_ds, &spec, &prior, &cfg).unwrap();
    assert_eq!(plain.manifest.train_loss, text.manifest.train_loss);
    assert!(text.manifest.text_conditioned);

    // A text-trained inverter needs a prompt.
    let z = sm.extract_features(&imgs[0]).unwrap();
    assert!(run_inverter(&text, &prior, &z).is_err());
    let e = TextEmbedding::zeros(16);
    run_inverter_with_text(&text, &prior, &z, &e).unwrap();
}

#[test]
fn text_training_needs_a_text_prior() {
    let sm = probe_split();
    let prior = IdentityPrior::new([3, 32, 32]);
    let imgs = images(4, 40);
    let t: Vec<String> = vec!["circle".into(); 4];
    let ds = collect_queries_with_text(&sm, &imgs, Some(&t)).unwrap();
    let spec = tiny_spec(sm.feature_shape(), &[3, 32, 32], 1, false);
    let err = train_inverter_with_text(&ds, &spec, &prior, &tiny_config()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn mismatched_prior_is_rejected() {
    let sm = probe_split();
    let ds = collect_queries(&sm, &images(4, 50)).unwrap();
    let spec = tiny_spec(sm.feature_shape(), &[3, 32, 32], 1, false);
    let prior = assets::toy_decoder_prior().unwrap();
    assert!(train_inverter(&ds, &spec, &prior, &tiny_config()).is_err());
}
