//! Channel swaps: algebraic identities, replay of the back half on hand-blended
//! activations, and sweep record counts.

use advint::attacks::AttackConfig;
use advint::cache::{build_attack_cache, AttackCache};
use advint::data::{filter_correct, synth_generate};
use advint::intervention::{
    run_intervention, swap_channels, swap_channels_masked, sweep, ChannelSet, SweepConfig,
};
use advint::stats::{ael_phi, aea_phi, l2_distance};
use advint::tensor::argmax;
use advint::train::{train_sgd, TrainConfig};
use advint::{LayerSpec, NetworkSpec, SplitModel, Tensor};
use proptest::prelude::*;

fn tensor_pair(batch: usize, channels: usize, side: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    let len = batch * channels * side * side;
    // `+ 0.0` folds negative zeros into positive ones
    let values = prop::collection::vec(-5.0f32..5.0, len).prop_map(|v| v.into_iter().map(|x| x + 0.0).collect::<Vec<_>>());
    (values.clone(), values).prop_map(move |(a, b)| {
        let shape = vec![batch, channels, side, side];
        (Tensor::new(shape.clone(), a).unwrap(), Tensor::new(shape, b).unwrap())
    })
}

fn channel_set(channels: usize) -> impl Strategy<Value = ChannelSet> {
    prop::collection::btree_set(0..channels, 0..=channels)
        .prop_map(move |s| ChannelSet::within(s.into_iter().collect(), channels).unwrap())
}

fn case() -> impl Strategy<Value = (Tensor, Tensor, ChannelSet)> {
    (1usize..4, 1usize..7, 1usize..4).prop_flat_map(|(b, c, s)| (tensor_pair(b, c, s), channel_set(c)))
        .prop_map(|((h, a), phi)| (h, a, phi))
}

proptest! {
    #[test]
    fn empty_and_full_swaps_are_identities((h, a, _) in case()) {
        let channels = h.shape()[1];
        prop_assert_eq!(swap_channels(&h, &a, &ChannelSet::empty()).unwrap(), h.clone());
        prop_assert_eq!(swap_channels(&h, &a, &ChannelSet::all(channels)).unwrap(), a.clone());
        prop_assert_eq!(swap_channels_masked(&h, &a, &ChannelSet::empty()).unwrap(), h.clone());
        prop_assert_eq!(swap_channels_masked(&h, &a, &ChannelSet::all(channels)).unwrap(), a);
    }

    #[test]
    fn mask_blend_equals_channel_copy((h, a, phi) in case()) {
        let copy = swap_channels(&h, &a, &phi).unwrap();
        let blend = swap_channels_masked(&h, &a, &phi).unwrap();
        prop_assert!(copy.data().iter().zip(blend.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn swapping_a_set_mirrors_swapping_its_complement((h, a, phi) in case()) {
        let channels = h.shape()[1];
        let comp = phi.complement(channels);
        prop_assert_eq!(comp.complement(channels), phi.clone());
        prop_assert_eq!(comp.gamma() + phi.gamma(), channels);
        prop_assert!(comp.indices().iter().all(|&c| !phi.contains(c)));
        prop_assert_eq!(swap_channels(&h, &a, &phi).unwrap(), swap_channels(&a, &h, &comp).unwrap());
    }

    #[test]
    fn every_channel_comes_from_exactly_one_side((h, a, phi) in case()) {
        let channels = h.shape()[1];
        let plane = h.item_len() / channels;
        let out = swap_channels(&h, &a, &phi).unwrap();
        for b in 0..h.batch() {
            for c in 0..channels {
                let src = if phi.contains(c) { a.item(b) } else { h.item(b) };
                prop_assert_eq!(&out.item(b)[c * plane..(c + 1) * plane], &src[c * plane..(c + 1) * plane]);
            }
        }
    }
}

fn toy() -> (SplitModel, AttackCache) {
    let centers: Vec<Vec<f32>> = vec![
        (0..64).map(|i| if i % 8 < 4 { 0.8 } else { 0.2 }).collect(),
        (0..64).map(|i| if i % 8 >= 4 { 0.8 } else { 0.2 }).collect(),
    ];
    let data = synth_generate(3, 60, &[1, 8, 8], &centers, 0.25).unwrap();
    let spec = NetworkSpec {
        input_shape: vec![1, 8, 8],
        layers: vec![
            LayerSpec::conv(1, 5, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::conv(5, 4, 2, 2, 0),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::dense(4 * 4 * 4, 2),
        ],
        split_index: 0,
        num_classes: 2,
        split_after_activation: false,
    };
    let model = train_sgd(spec, &data, &TrainConfig { epochs: 3, lr: 0.02, ..TrainConfig::default() }).unwrap();
    let correct = filter_correct(&model, &data).unwrap().take(40);
    let cache = build_attack_cache(&model, &correct, &AttackConfig::pgd(0.4, 10, 1, 1)).unwrap();
    (model, cache)
}

#[test]
fn records_match_replay_of_the_back_half_on_hand_blended_activations() {
    let (model, cache) = toy();
    let two = cache.select(&[0, 1]);
    let channels = two.h.shape()[1];
    for phi in [vec![], vec![0], vec![1, 3], vec![0, 2, 4], (0..channels).collect()] {
        let phi = ChannelSet::new(phi).unwrap();
        let recs = run_intervention(&model, &two, &phi, &[0, 1]).unwrap();
        for (i, rec) in recs.iter().enumerate() {
            let mut blended = two.h.item(i).to_vec();
            let plane = blended.len() / channels;
            for &c in phi.indices() {
                blended[c * plane..(c + 1) * plane].copy_from_slice(&two.h_adv.item(i)[c * plane..(c + 1) * plane]);
            }
            let mut shape = two.h.shape().to_vec();
            shape[0] = 1;
            let z = model.forward_from_split(&Tensor::new(shape, blended).unwrap()).unwrap();
            assert_eq!(rec.z_phi, z.item(0), "phi {{{phi}}}, sample {i}");
            assert_eq!(rec.y_hat_phi, argmax(z.item(0)));
            assert_eq!(rec.z, two.z.item(i));
        }
    }
}

#[test]
fn boundary_sets_reproduce_clean_and_adversarial_logits() {
    let (model, cache) = toy();
    let rows: Vec<usize> = (0..cache.len()).collect();
    let channels = cache.h.shape()[1];
    let none = run_intervention(&model, &cache, &ChannelSet::empty(), &rows).unwrap();
    let all = run_intervention(&model, &cache, &ChannelSet::all(channels), &rows).unwrap();
    for (i, (n, a)) in none.iter().zip(&all).enumerate() {
        assert_eq!(n.z_phi, cache.z.item(i));
        assert_eq!(a.z_phi, cache.z_adv.item(i));
    }
    assert_eq!(ael_phi(none.iter().map(|r| (r.z.as_slice(), r.z_phi.as_slice()))).unwrap(), 0.0);
    assert_eq!(aea_phi(none.iter().map(|r| (r.y, r.y_hat_phi))).unwrap(), 0.0);
    let expected = rows.iter().map(|&i| l2_distance(cache.z.item(i), cache.z_adv.item(i))).sum::<f64>() / rows.len() as f64;
    let ael_all = ael_phi(all.iter().map(|r| (r.z.as_slice(), r.z_phi.as_slice()))).unwrap();
    assert_eq!(ael_all, expected);
}

#[test]
fn sweep_emits_one_record_per_set() {
    let (model, cache) = toy();
    let h = cache.h.shape()[1];
    let full = sweep(&model, &cache, &SweepConfig { gammas: (0..=h).collect(), ..Default::default() }).unwrap();
    assert_eq!(full.records.len(), 1 << h);
    let zero = full.level(0);
    assert_eq!(zero.len(), 1);
    assert_eq!((zero[0].ael, zero[0].aea), (0.0, 0.0));

    let capped = sweep(&model, &cache, &SweepConfig { gammas: vec![2], sample_cap: 4, ..Default::default() }).unwrap();
    assert_eq!(capped.records.len(), 4);
    assert!(capped.is_sampled(2));
    let again = sweep(&model, &cache, &SweepConfig { gammas: vec![2], sample_cap: 4, ..Default::default() }).unwrap();
    assert_eq!(capped, again);
}
