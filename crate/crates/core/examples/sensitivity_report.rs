//! Score every parameter tensor of a fresh model on a handful of target
//! scenes and print the resulting dynamic mask.

use swiftpan::datagen::{generate_dataset, SensorProfile};
use swiftpan::model::{prepare_all, Model, ModelConfig};
use swiftpan::sensitivity::{analyze, stats_csv, SensitivityConfig};

fn main() -> swiftpan::Result<()> {
    let model = Model::build(ModelConfig::default(), 1)?;
    let subset = prepare_all(&generate_dataset(&SensorProfile::target(4), 8, 32, 1)?)?;
    let analysis = analyze(&model, &subset, &SensitivityConfig::default())?;
    print!("{}", stats_csv(&analysis.stats, &analysis.mask));
    let m = &analysis.mask;
    println!(
        "sharpness {:.3}, P_select {:.3}, selected {:?} ({:.1}% of scalars)",
        m.sharpness,
        m.p_select,
        m.selected,
        100.0 * m.scalar_fraction
    );
    Ok(())
}
