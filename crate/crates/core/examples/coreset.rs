//! Compare density-aware farthest point sampling with random subsets on a
//! synthetic target pool, measured by MMD² to the full pool.

use swiftpan::datagen::{generate_dataset, SensorProfile};
use swiftpan::sampler::{compute_density, da_fps, featurize, random_sample, Sigma};

fn main() -> swiftpan::Result<()> {
    let scenes = generate_dataset(&SensorProfile::target(4), 200, 32, 3)?;
    let labeled = compute_density(featurize(&scenes)?, Sigma::Auto)?;
    let ids = labeled.ids();
    for r in [0.03, 0.05, 0.1] {
        let subset = da_fps(&labeled, r, 0.5)?;
        let fps = labeled.mmd_of(&subset.ids)?;
        let random = (0..10)
            .map(|s| labeled.mmd_of(&random_sample(&ids, r, s)?.ids))
            .collect::<swiftpan::Result<Vec<f64>>>()?;
        let mean = random.iter().sum::<f64>() / random.len() as f64;
        println!(
            "r = {r:.2}: {} scenes, first picks {:?}, MMD² DA-FPS {fps:.4}, random mean {mean:.4}",
            subset.ids.len(),
            &subset.ids[..subset.ids.len().min(4)]
        );
    }
    Ok(())
}
