mod common;

use collab_ff::analysis::{self, GoodnessCache, LayerSet};
use collab_ff::baselines::{self, ClassicConfig, ClassicModel};
use collab_ff::data::{self, Dataset};
use collab_ff::ff::{self, FfConfig, GammaMode, LossKind, Polarity, Schedule, INIT_STREAM};
use collab_ff::linalg::Rng;
use collab_ff::nn::{self, init_network, AdamConfig, AdamState, MlpNetwork};

use common::*;

fn config(schedule: Schedule, gamma_mode: GammaMode, loss_kind: LossKind, depth: usize) -> FfConfig {
    FfConfig {
        theta: 2.0,
        gamma_mode,
        schedule,
        loss_kind,
        epochs: 3,
        batch_size: 16,
        negatives_per_positive: 1,
        seed: 42,
        inference_layer_mask: (0..depth).collect(),
        adam: AdamConfig::default(),
    }
}

fn fresh_net(ds: &Dataset, hidden: &[usize], seed: u64) -> MlpNetwork {
    let mut dims = vec![ds.dim() + ds.num_labels()];
    dims.extend_from_slice(hidden);
    init_network(&dims, &mut Rng::stream(seed, INIT_STREAM)).unwrap()
}

#[test]
fn depth_one_schedules_are_bitwise_equal() {
    let ds = toy_dataset(90, 20, 1);
    for gamma_mode in [GammaMode::None, GammaMode::AllOtherLayers, GammaMode::PredecessorsOnly] {
        for loss_kind in [LossKind::SigmoidGoodness, LossKind::Entropy] {
            let mut a = fresh_net(&ds, &[12], 42);
            let mut b = a.clone();
            let ha = ff::train(&mut a, &ds, &config(Schedule::Layerwise, gamma_mode, loss_kind, 1)).unwrap();
            let hb = ff::train(&mut b, &ds, &config(Schedule::Alternating, gamma_mode, loss_kind, 1)).unwrap();
            assert_eq!(a, b, "{gamma_mode} {loss_kind}");
            assert_eq!(ha, hb);
            assert_ne!(a, fresh_net(&ds, &[12], 42), "training changed nothing");
        }
    }
}

#[test]
fn fixed_seed_runs_are_reproducible() {
    let ds = toy_dataset(70, 20, 2);
    for schedule in Schedule::ALL {
        for gamma_mode in GammaMode::ALL {
            for loss_kind in LossKind::ALL {
                let cfg = config(*schedule, *gamma_mode, *loss_kind, 3);
                let run = || {
                    let mut net = fresh_net(&ds, &[10, 8, 6], 42);
                    let h = ff::train(&mut net, &ds, &cfg).unwrap();
                    (net, h)
                };
                assert_eq!(run(), run(), "{schedule} {gamma_mode} {loss_kind}");
            }
        }
    }
    let cfg = config(Schedule::Alternating, GammaMode::None, LossKind::SigmoidGoodness, 3);
    let pairwise = || {
        let mut net = fresh_net(&ds, &[10, 8, 6], 42);
        let h = baselines::train_pairwise(&mut net, &ds, &cfg).unwrap();
        (net, h)
    };
    assert_eq!(pairwise(), pairwise());
    let classic = || {
        let mut m = ClassicModel::init(&[20, 10, 8, 10], false, &mut Rng::stream(42, INIT_STREAM)).unwrap();
        let h = baselines::train_classic(&mut m, &ds, &ClassicConfig::from_ff(&cfg)).unwrap();
        (m, h)
    };
    assert_eq!(classic(), classic());
}

#[test]
fn different_seeds_give_different_runs() {
    let ds = toy_dataset(50, 20, 3);
    let mut cfg = config(Schedule::Alternating, GammaMode::AllOtherLayers, LossKind::SigmoidGoodness, 2);
    let mut a = fresh_net(&ds, &[8, 6], 42);
    let mut b = a.clone();
    ff::train(&mut a, &ds, &cfg).unwrap();
    cfg.seed = 43;
    ff::train(&mut b, &ds, &cfg).unwrap();
    assert_ne!(a, b);
}

#[test]
fn depth_one_pairwise_training_equals_plain_ff() {
    let ds = toy_dataset(60, 20, 4);
    let cfg = config(Schedule::Layerwise, GammaMode::None, LossKind::SigmoidGoodness, 1);
    let mut a = fresh_net(&ds, &[9], 42);
    let mut b = a.clone();
    ff::train(&mut a, &ds, &cfg).unwrap();
    baselines::train_pairwise(&mut b, &ds, &cfg).unwrap();
    assert_eq!(a, b);
}

/// Label with the largest summed goodness, computed sample by sample from
/// scratch for every candidate label.
fn brute_force_predict(net: &MlpNetwork, x: &[f64], mask: &[usize]) -> usize {
    let rows: Vec<Vec<f64>> = (0..10).map(|y| data::link(x, y, 10)).collect();
    let g = naive_goodness(net, &rows);
    let scores: Vec<f64> = (0..10).map(|y| mask.iter().map(|&l| g[l][y]).sum()).collect();
    let mut best = 0;
    for y in 1..10 {
        if scores[y] > scores[best] {
            best = y;
        }
    }
    best
}

#[test]
fn infer_matches_brute_force_oracle() {
    let ds = toy_dataset(40, 20, 5);
    let masks: Vec<Vec<usize>> = vec![vec![0], vec![1], vec![2], vec![0, 1], vec![1, 2], vec![0, 1, 2]];
    for seed in 0..4 {
        let net = fresh_net(&ds, &[10, 8, 6], seed);
        for mask in &masks {
            for s in 0..ds.len() {
                let x = ds.images.row(s);
                assert_eq!(ff::infer(&net, x, 10, mask).unwrap(), brute_force_predict(&net, x, mask));
            }
        }
    }
}

#[test]
fn goodness_cache_matches_uncached_recomputation() {
    let ds = toy_dataset(300, 20, 6);
    let mut net = fresh_net(&ds, &[10, 8, 6], 7);
    ff::train(&mut net, &ds, &config(Schedule::Alternating, GammaMode::AllOtherLayers, LossKind::SigmoidGoodness, 3))
        .unwrap();
    let cache = GoodnessCache::build(&net, &ds.images, 10).unwrap();
    for s in (0..ds.len()).step_by(37) {
        let rows: Vec<Vec<f64>> = (0..10).map(|y| data::link(ds.images.row(s), y, 10)).collect();
        let g = naive_goodness(&net, &rows);
        for y in 0..10 {
            for l in 0..3 {
                let want = g[l][y];
                assert!((cache.get(s, y, l) - want).abs() <= 1e-12 * want.max(1.0));
            }
        }
    }
    for set in analysis::default_subsets(3) {
        let mask = set.layers();
        let uncached: Vec<usize> = (0..ds.len()).map(|s| ff::infer(&net, ds.images.row(s), 10, mask).unwrap()).collect();
        assert_eq!(cache.predict(mask), uncached, "subset {set}");
        assert_eq!(
            cache.error_rate(mask, &ds.labels),
            analysis::error_rate(&uncached, &ds.labels)
        );
    }
}

#[test]
fn subset_evaluation_ignores_request_order_and_duplicates() {
    let ds = toy_dataset(120, 20, 8);
    let net = fresh_net(&ds, &[10, 8, 6], 9);
    let forward = analysis::default_subsets(3);
    let mut backward = forward.clone();
    backward.reverse();
    backward.push(forward[0].clone());
    let a = analysis::evaluate_subsets(&net, &ds, &forward).unwrap();
    let b = analysis::evaluate_subsets(&net, &ds, &backward).unwrap();
    assert_eq!(b.subsets.len(), forward.len());
    for s in &forward {
        assert_eq!(a.error_of(s), b.error_of(s));
        let e = a.error_of(s).unwrap();
        assert!((0.0..=1.0).contains(&e));
    }
    assert_eq!(a.marginals, b.marginals);
    assert!(analysis::evaluate_subsets(&net, &ds, &[LayerSet::new([3])]).is_err());
    assert!(analysis::evaluate_subsets(&net, &ds, &[]).is_err());
}

#[test]
fn argmax_is_invariant_under_increasing_rescaling() {
    let ds = toy_dataset(80, 20, 10);
    let net = fresh_net(&ds, &[10, 8, 6], 11);
    let cache = GoodnessCache::build(&net, &ds.images, 10).unwrap();
    let mask = [0, 1, 2];
    for s in 0..ds.len() {
        let scores = cache.scores(s, &mask);
        let warped: Vec<f64> = scores.iter().map(|v| 3.0 * v.powi(3) + v.sqrt() + 7.0).collect();
        assert_eq!(ff::argmax_first(&scores), ff::argmax_first(&warped));
    }
}

/// One Adam step on a single sample of a single layer.
fn goodness_after_step(net: &MlpNetwork, x: &[f64], polarity: Polarity, lr: f64) -> (f64, f64) {
    let input = to_matrix(&[x.to_vec()]);
    let trace = nn::forward_trace(net, &input).unwrap();
    let before = ff::goodness(&trace, 0)[0];
    let l = ff::ff_loss_and_coeffs(&trace, 0, &[0.0], 2.0, &[polarity]).unwrap();
    let grad = nn::layer_local_grad(net.layer(0), &input, &trace.layers[0].pre, &l.coeffs).unwrap();
    let mut stepped = net.clone();
    let config = AdamConfig { learning_rate: lr, ..AdamConfig::default() };
    AdamState::for_layer(config, net.layer(0)).step_layer(stepped.layer_mut(0), &grad).unwrap();
    let after = ff::goodness(&nn::forward_trace(&stepped, &input).unwrap(), 0)[0];
    (before, after)
}

#[test]
fn single_steps_move_goodness_in_the_loss_direction() {
    let ds = toy_dataset(200, 20, 12);
    let mut net = fresh_net(&ds, &[16], 13);
    ff::train(&mut net, &ds, &config(Schedule::Layerwise, GammaMode::None, LossKind::SigmoidGoodness, 1)).unwrap();
    let mut rng = Rng::new(14);
    let mut moved = 0;
    for s in 0..ds.len() {
        let y = ds.labels[s];
        let pos = data::link(ds.images.row(s), y, 10);
        let neg = data::link(ds.images.row(s), data::wrong_label(y, 10, &mut rng), 10);
        let (b, a) = goodness_after_step(&net, &pos, Polarity::Positive, 1e-5);
        assert!(a >= b, "positive step lowered goodness {b} -> {a}");
        let (b2, a2) = goodness_after_step(&net, &neg, Polarity::Negative, 1e-5);
        assert!(a2 <= b2, "negative step raised goodness {b2} -> {a2}");
        moved += usize::from(a > b) + usize::from(a2 < b2);
    }
    assert!(moved > ds.len(), "steps barely moved goodness");
}

#[test]
fn training_lowers_loss_and_separates_goodness() {
    let ds = toy_dataset(400, 20, 15);
    let mut cfg = config(Schedule::Layerwise, GammaMode::None, LossKind::SigmoidGoodness, 2);
    cfg.epochs = 15;
    cfg.adam.learning_rate = 1e-2;
    let mut net = fresh_net(&ds, &[32, 32], 16);
    let h = ff::train(&mut net, &ds, &cfg).unwrap();
    for layer in 1..=2 {
        let losses = h.layer_losses(layer);
        assert!(losses.last().unwrap() < losses.first().unwrap(), "layer {layer}: {losses:?}");
    }
    let last = h.rows.last().unwrap();
    assert!(last.mean_goodness_pos > last.mean_goodness_neg);
    let cache = GoodnessCache::build(&net, &ds.images, 10).unwrap();
    assert!(cache.error_rate(&[0, 1], &ds.labels) < 0.5);
}

#[test]
fn classic_training_reduces_cross_entropy() {
    let ds = toy_dataset(300, 20, 17);
    let mut model = ClassicModel::init(&[20, 24, 10], false, &mut Rng::new(18)).unwrap();
    let cfg = ClassicConfig { epochs: 10, batch_size: 20, seed: 1, adam: AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() } };
    let h = baselines::train_classic(&mut model, &ds, &cfg).unwrap();
    assert!(h.rows.last().unwrap().loss < h.rows[0].loss);
    assert!(model.error_rate(&ds).unwrap() < 0.2);
}

#[test]
fn pairwise_rejects_gamma() {
    let ds = toy_dataset(20, 20, 19);
    let mut net = fresh_net(&ds, &[6, 6], 1);
    let cfg = config(Schedule::Alternating, GammaMode::AllOtherLayers, LossKind::SigmoidGoodness, 2);
    assert!(baselines::train_pairwise(&mut net, &ds, &cfg).is_err());
}

#[test]
fn training_rejects_mismatched_network() {
    let ds = toy_dataset(20, 20, 20);
    let mut net = init_network(&[25, 6], &mut Rng::new(0)).unwrap();
    let cfg = config(Schedule::Layerwise, GammaMode::None, LossKind::SigmoidGoodness, 1);
    let err = ff::train(&mut net, &ds, &cfg).unwrap_err().to_string();
    assert!(err.contains("input dim"), "{err}");
}
