//! Pretrain on the source sensor, then adapt to the target sensor three ways:
//! not at all, through the sensitivity mask, and with every tensor unfrozen.

use swiftpan::adapt::{adapt, full_retrain, mean_l1, pretrain, AdaptConfig};
use swiftpan::datagen::{generate_dataset, SensorProfile};
use swiftpan::model::{prepare_all, ModelConfig};
use swiftpan::sensitivity::{analyze, SensitivityConfig};

fn main() -> swiftpan::Result<()> {
    let source = prepare_all(&generate_dataset(&SensorProfile::source(4), 48, 32, 0)?)?;
    let target = prepare_all(&generate_dataset(&SensorProfile::target(4), 16, 32, 1)?)?;
    let test = prepare_all(&generate_dataset(&SensorProfile::target(4), 16, 32, 2)?)?;

    let cfg = AdaptConfig {
        epochs: 20,
        ..AdaptConfig::default()
    };
    let base = pretrain(ModelConfig::default(), &source, &cfg)?.model;
    let analysis = analyze(&base, &target, &SensitivityConfig::default())?;
    let swift = adapt(&base, &analysis.mask, &target, &cfg)?.model;
    let full = full_retrain(&base, &target, &cfg)?.model;

    println!("mask {:?}", analysis.mask.selected);
    println!("test L1 direct       {:.5}", mean_l1(&base, &test, 16)?);
    println!("test L1 masked adapt {:.5}", mean_l1(&swift, &test, 16)?);
    println!("test L1 full retrain {:.5}", mean_l1(&full, &test, 16)?);
    Ok(())
}
