use proptest::prelude::*;

use swiftpan::adapt::{adapt, AdaptConfig, Optimizer};
use swiftpan::datagen::{generate_dataset, SensorProfile};
use swiftpan::model::{prepare_all, Model, ModelConfig};
use swiftpan::sensitivity::{random_mask, SelectionMask};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn unmasked_tensors_are_bitwise_unchanged(
        picks in proptest::collection::vec(any::<bool>(), 6),
        seed in 0u64..1000,
        sgd in any::<bool>(),
    ) {
        let names = ["conv0.weight", "conv0.bias", "conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"];
        let mut selected: Vec<String> = names.iter().zip(&picks).filter(|p| *p.1).map(|p| p.0.to_string()).collect();
        if selected.is_empty() {
            selected.push(names[seed as usize % 6].to_string());
        }
        let mask = SelectionMask { selected, p_select: 0.5, sharpness: 0.0, scalar_fraction: 0.5 };
        let model = Model::build(ModelConfig { channels: 6, ..ModelConfig::default() }, seed).unwrap();
        let scenes = prepare_all(&generate_dataset(&SensorProfile::target(4), 3, 16, seed).unwrap()).unwrap();
        let cfg = AdaptConfig {
            epochs: 2,
            lr: 1e-2,
            batch: 2,
            optimizer: if sgd { Optimizer::Sgd } else { Optimizer::Adam },
            seed,
        };
        let out = adapt(&model, &mask, &scenes, &cfg).unwrap().model;
        for (a, b) in model.params().entries().iter().zip(out.params().entries()) {
            if !mask.contains(&a.name) {
                prop_assert!(a.tensor.bit_eq(&b.tensor), "{} changed", a.name);
            } else {
                prop_assert!(!a.tensor.bit_eq(&b.tensor), "{} did not move", a.name);
            }
        }
    }
}

#[test]
fn random_mask_respects_the_budget_and_freezes_the_rest() {
    let model = Model::build(ModelConfig::default(), 3).unwrap();
    let mask = random_mask(model.params(), 0.4, 9).unwrap();
    assert!(mask.scalar_fraction <= 0.4 + 1e-12 || mask.selected.len() == 1);
    let scenes = prepare_all(&generate_dataset(&SensorProfile::target(4), 2, 16, 1).unwrap()).unwrap();
    let cfg = AdaptConfig { epochs: 1, batch: 2, ..AdaptConfig::default() };
    let out = adapt(&model, &mask, &scenes, &cfg).unwrap().model;
    for (a, b) in model.params().entries().iter().zip(out.params().entries()) {
        assert_eq!(a.tensor.bit_eq(&b.tensor), !mask.contains(&a.name), "{}", a.name);
    }
}
