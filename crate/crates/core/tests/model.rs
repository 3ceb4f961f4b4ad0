mod common;

use cdseg::autograd::{Graph, Tensor};
use cdseg::domain::{Availability, GridShape, Modality, NUM_CLASSES};
use cdseg::eval::argmax_labels;
use cdseg::eval::region_masks;
use cdseg::model::{layers, Checkpoint, CheckpointKind, Heads, Model, ModelConfig, SampleInputs};
use common::checks::{prune_parity, random_volumes, sentinel_changes, small_model};
use common::rng;

fn model_on(grid: usize, seed: u64) -> Model {
    Model::new(ModelConfig { grid: GridShape::cube(grid), ..ModelConfig::default() }, seed).unwrap()
}

#[test]
fn bottleneck_is_four_cubed_for_32_grid() {
    let model = model_on(32, 0);
    let mut r = rng(1);
    let vols = random_volumes(&mut r, 32 * 32 * 32);
    let mut g = Graph::new();
    let x = model.volume_input(&mut g, &vols[0]).unwrap();
    let f = model.encode_causal(&mut g, x, Modality::Flair);
    assert_eq!(g.shape(f.bottleneck), &[64, 4, 4, 4]);
    let skip_shapes: Vec<Vec<usize>> = f.skips.iter().map(|&s| g.shape(s).to_vec()).collect();
    assert_eq!(skip_shapes, vec![vec![8, 32, 32, 32], vec![16, 16, 16, 16], vec![32, 8, 8, 8]]);
}

#[test]
fn wrong_grid_is_rejected() {
    let model = small_model(0);
    let mut g = Graph::new();
    assert!(model.volume_input(&mut g, &[0.0; 10]).is_err());
}

#[test]
fn causal_encoding_is_deterministic_and_continuous() {
    let model = small_model(3);
    let mut r = rng(2);
    let vols = random_volumes(&mut r, 16 * 16 * 16);
    let encode = |v: &[f32]| {
        let mut g = Graph::new();
        let x = model.volume_input(&mut g, v).unwrap();
        let f = model.encode_causal(&mut g, x, Modality::T2);
        g.value(f.bottleneck).clone()
    };
    let a = encode(&vols[3]);
    assert_eq!(a.max_abs_diff(&encode(&vols[3])), 0.0);
    let mut nudged = vols[3].clone();
    nudged[100] += 1e-6;
    assert!(a.max_abs_diff(&encode(&nudged)) < 1e-3);
}

#[test]
fn zero_noise_bias_sample_is_the_mean() {
    let model = small_model(4);
    let mut r = rng(3);
    let vols = random_volumes(&mut r, 16 * 16 * 16);
    let mut g = Graph::new();
    let x = model.volume_input(&mut g, &vols[1]).unwrap();
    let post = model.encode_bias(&mut g, x, Modality::T1ce, vec![0.0; 16]).unwrap();
    assert_eq!(g.value(post.sample).data(), g.value(post.mu).data());
    let noisy = model.encode_bias(&mut g, x, Modality::T1ce, vec![1.0; 16]).unwrap();
    assert_ne!(g.value(noisy.sample).data(), g.value(post.mu).data());
}

#[test]
fn bias_dimension_does_not_depend_on_grid() {
    for grid in [32, 48] {
        let model = model_on(grid, 0);
        let mut g = Graph::new();
        let x = model.volume_input(&mut g, &vec![0.5; grid * grid * grid]).unwrap();
        let post = model.encode_bias(&mut g, x, Modality::Flair, vec![0.0; 16]).unwrap();
        assert_eq!(g.shape(post.sample), &[16]);
    }
}

#[test]
fn eps_of_wrong_length_is_rejected() {
    let model = small_model(0);
    let mut g = Graph::new();
    let x = model.volume_input(&mut g, &vec![0.0; 4096]).unwrap();
    assert!(model.encode_bias(&mut g, x, Modality::Flair, vec![0.0; 3]).is_err());
}

#[test]
fn fusion_mean_edge_cases() {
    let model = small_model(5);
    let mut r = rng(4);
    let vols = random_volumes(&mut r, 4096);
    let mut g = Graph::new();
    let feats: Vec<_> = Modality::ALL
        .iter()
        .map(|&m| {
            let x = model.volume_input(&mut g, &vols[m.index()]).unwrap();
            (m, model.encode_causal(&mut g, x, m))
        })
        .collect();

    // One available modality: the masked mean is that modality's bottleneck.
    let single =
        model.fuse(&mut g, &[(Modality::T1, &feats[2].1)], Availability::from_modalities(&[Modality::T1])).unwrap();
    assert_eq!(g.value(single.mean).data(), g.value(feats[2].1.bottleneck).data());

    // The same features offered twice average to themselves.
    let t1 = &feats[2].1;
    let same = model
        .fuse(
            &mut g,
            &[(Modality::T1, t1), (Modality::T2, t1)],
            Availability::from_modalities(&[Modality::T1, Modality::T2]),
        )
        .unwrap();
    assert_eq!(g.value(same.mean).data(), g.value(t1.bottleneck).data());

    // Presentation order does not matter, bit for bit.
    let avail = Availability::from_modalities(&[Modality::T1, Modality::T2]);
    let ab = model.fuse(&mut g, &[(Modality::T1, &feats[2].1), (Modality::T2, &feats[3].1)], avail).unwrap();
    let ba = model.fuse(&mut g, &[(Modality::T2, &feats[3].1), (Modality::T1, &feats[2].1)], avail).unwrap();
    assert_eq!(g.value(ab.mediator).data(), g.value(ba.mediator).data());

    assert!(model.fuse(&mut g, &[(Modality::T1, t1)], Availability::from_bits(0)).is_err());
    // An available modality without features is an error.
    assert!(model.fuse(&mut g, &[(Modality::T1, t1)], avail).is_err());
}

#[test]
fn adain_with_identity_affine_is_standardization() {
    let mut r = rng(5);
    let data: Vec<f32> = (0..2 * 27).map(|_| rand::Rng::random_range(&mut r, -3.0f32..3.0)).collect();
    let mut g = Graph::new();
    let f = g.input(Tensor::new(vec![2, 3, 3, 3], data.clone()));
    let gamma = g.input(Tensor::new(vec![2], vec![1.0, 1.0]));
    let beta = g.input(Tensor::new(vec![2], vec![0.0, 0.0]));
    let y = layers::adain(&mut g, f, gamma, beta);
    for ch in 0..2 {
        let xs: Vec<f64> = data[ch * 27..(ch + 1) * 27].iter().map(|&v| v as f64).collect();
        let mean = xs.iter().sum::<f64>() / 27.0;
        let std = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 27.0).sqrt();
        for (i, v) in xs.iter().enumerate() {
            let expected = (v - mean) / (std + 1e-5);
            assert!((g.value(y).data()[ch * 27 + i] as f64 - expected).abs() < 1e-5);
        }
    }
}

#[test]
fn adain_of_constant_zero_features_is_beta() {
    let mut g = Graph::new();
    let f = g.input(Tensor::zeros(vec![3, 2, 2, 2]));
    let gamma = g.input(Tensor::new(vec![3], vec![2.0, -1.0, 0.5]));
    let beta = g.input(Tensor::new(vec![3], vec![0.25, -0.75, 1.5]));
    let y = layers::adain(&mut g, f, gamma, beta);
    let expected: Vec<f32> = [0.25f32, -0.75, 1.5].iter().flat_map(|&b| std::iter::repeat_n(b, 8)).collect();
    assert_eq!(g.value(y).data(), &expected[..]);
}

#[test]
fn reconstruction_has_input_shape() {
    let model = small_model(6);
    let mut r = rng(6);
    let vols = random_volumes(&mut r, 4096);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &SampleInputs::new(&vols, Availability::ALL), Heads::ALL).unwrap();
    assert_eq!(out.recon.len(), 4);
    for (_, x) in &out.recon {
        assert_eq!(g.shape(*x), &[1, 16, 16, 16]);
    }
}

#[test]
fn causality_map_range_and_zero_weights() {
    let mut model = small_model(7);
    let mut r = rng(7);
    let vols = random_volumes(&mut r, 4096);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &SampleInputs::new(&vols, Availability::ALL), Heads::ALL).unwrap();
    let a = out.causality.unwrap();
    assert_eq!(g.shape(a), &[1, 16, 16, 16]);
    assert!(g.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));

    for name in ["causality_head.conv.weight", "causality_head.conv.bias"] {
        let id = model.params.lookup(name).unwrap();
        model.params.value_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let out = model.forward(&mut g, &SampleInputs::new(&vols, Availability::ALL), Heads::ALL).unwrap();
    assert!(g.value(out.causality.unwrap()).data().iter().all(|&v| v == 0.5));
}

#[test]
fn counterfactual_shapes_and_constant_input() {
    let model = small_model(8);
    let mut g = Graph::new();
    let zero = |g: &mut Graph| g.input(Tensor::zeros(vec![16]));
    let codes: Vec<(Modality, _)> = Modality::ALL.iter().map(|&m| (m, zero(&mut g))).collect();
    let a = model.counterfactual_predict(&mut g, &codes, Availability::ALL).unwrap();
    let b = model.counterfactual_predict(&mut g, &codes, Availability::ALL).unwrap();
    assert_eq!(g.shape(a.logits), &[NUM_CLASSES, 16, 16, 16]);
    assert_eq!(g.value(a.logits).data(), g.value(b.logits).data());
    assert!(g.value(a.foreground).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(model.counterfactual_predict(&mut g, &codes, Availability::from_bits(0)).is_err());
}

#[test]
fn segmentation_logits_shape_and_labels() {
    let model = small_model(9);
    let mut r = rng(9);
    let vols = random_volumes(&mut r, 4096);
    let logits = model.predict(&vols, Availability::from_modalities(&[Modality::T1ce])).unwrap();
    assert_eq!(logits.shape(), &[NUM_CLASSES, 16, 16, 16]);
    assert_eq!(
        logits.max_abs_diff(&model.predict(&vols, Availability::from_modalities(&[Modality::T1ce])).unwrap()),
        0.0
    );
    let labels = argmax_labels(logits.data(), NUM_CLASSES);
    assert!(region_masks(&labels).is_ok());
    assert!(model.predict(&vols, Availability::from_bits(0)).is_err());
}

#[test]
fn heads_ignore_the_other_stream() {
    let [seg, cf, cf_control, seg_control] = sentinel_changes(11, 4);
    assert_eq!(seg, 0.0, "segmentation moved with the bias stream");
    assert_eq!(cf, 0.0, "counterfactual moved with the causal stream");
    assert!(cf_control > 0.0 && seg_control > 0.0, "sentinels had no effect at all");
}

#[test]
fn pruned_checkpoint_matches_full_model() {
    assert_eq!(prune_parity(12, 6), 0.0);
}

#[test]
fn checkpoint_round_trips_through_a_file() {
    let model = small_model(13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = model.to_checkpoint(CheckpointKind::Full, serde_json::json!({ "epoch": 3 }));
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let restored = Model::from_checkpoint(&back).unwrap();
    assert!(restored.has_training_branches());
    for id in model.params.ids() {
        assert_eq!(model.params.value(id), restored.params.value(id));
    }
}

#[test]
fn inference_export_drops_training_branches() {
    let model = small_model(14);
    let full = model.to_checkpoint(CheckpointKind::Full, serde_json::Value::Null);
    let pruned = full.pruned();
    assert_eq!(pruned.kind, CheckpointKind::Inference);
    assert!(pruned.tensors.len() < full.tensors.len());
    for prefix in ["bias_encoder.", "recon_decoder.", "counterfactual."] {
        assert!(pruned.tensors.iter().all(|(n, _)| !n.starts_with(prefix)), "{prefix} survived pruning");
    }
    let restored = Model::from_checkpoint(&pruned).unwrap();
    let mut g = Graph::new();
    let x = restored.volume_input(&mut g, &vec![0.0; 4096]).unwrap();
    assert!(restored.encode_bias(&mut g, x, Modality::Flair, vec![0.0; 16]).is_err());
}

#[test]
fn corrupt_checkpoint_bytes_are_rejected() {
    let model = small_model(15);
    let mut bytes = model.to_checkpoint(CheckpointKind::Full, serde_json::Value::Null).to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn initialization_depends_only_on_seed() {
    let a = small_model(16);
    let b = small_model(16);
    let c = small_model(17);
    let same = a.params.ids().all(|id| a.params.value(id) == b.params.value(id));
    let differ = a.params.ids().any(|id| a.params.value(id) != c.params.value(id));
    assert!(same && differ);
}
