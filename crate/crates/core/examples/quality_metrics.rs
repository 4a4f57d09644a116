//! Score a naive fusion (nearest-neighbour upsampling of the LRMS)
//! under both evaluation protocols.

use swiftpan::datagen::{generate_pair, SensorProfile};
use swiftpan::metrics::{score_image, Protocol};
use swiftpan::tensor::Tensor;

fn nearest_upsample(lrms: &Tensor, ratio: usize) -> Tensor {
    let d = lrms.dims();
    let (c, h, w) = (d[0], d[1], d[2]);
    let (oh, ow) = (h * ratio, w * ratio);
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), i / ow % oh, i % ow);
        lrms.data()[ch * h * w + (y / ratio) * w + x / ratio]
    })
}

fn main() -> swiftpan::Result<()> {
    let profile = SensorProfile::target(4);
    let scene = generate_pair(&profile, 0, 64, 5)?;
    let pred = nearest_upsample(&scene.lrms, scene.ratio());
    for protocol in [Protocol::Reduced, Protocol::Full] {
        let names = protocol.metric_names();
        let values = score_image(&pred, &scene, protocol)?;
        let line: Vec<String> = names.iter().zip(&values).map(|(n, v)| format!("{n} {v:.4}")).collect();
        println!("{protocol:?}: {}", line.join(", "));
    }
    Ok(())
}
