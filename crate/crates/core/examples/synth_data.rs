//! Generate a few scenes from both sensor profiles and print their statistics.

use swiftpan::datagen::{generate_dataset, SensorProfile};

fn main() -> swiftpan::Result<()> {
    for profile in [SensorProfile::source(4), SensorProfile::target(4)] {
        let scenes = generate_dataset(&profile, 3, 32, 7)?;
        for s in &scenes {
            println!(
                "{} scene {}: gt {:?} lrms {:?} pan {:?}, gt range [{:.3}, {:.3}], pan mean {:.3}",
                s.sensor,
                s.id,
                s.gt.dims(),
                s.lrms.dims(),
                s.pan.dims(),
                s.gt.min(),
                s.gt.max(),
                s.pan.mean()
            );
        }
    }
    Ok(())
}
