//! Build a small graph by hand and compare reverse-mode gradients with
//! central differences.

use swiftpan::model::ParamRegistry;
use swiftpan::tensor::Graph;
use swiftpan::tensor::Tensor;

fn loss(reg: &ParamRegistry) -> f32 {
    let mut g = graph();
    g.forward(reg, &[]).unwrap().item().unwrap()
}

fn graph() -> Graph {
    let mut g = Graph::new();
    let (x, w, b) = (g.leaf("x"), g.leaf("w"), g.leaf("b"));
    let y = g.conv2d(x, w, Some(b), 1);
    let y = g.relu(y);
    let out = g.mean(y);
    g.set_output(out);
    g
}

fn main() -> swiftpan::Result<()> {
    let mut reg = ParamRegistry::default();
    reg.push("x", Tensor::from_fn(&[1, 2, 6, 6], |i| (i as f32 * 0.7).sin()));
    reg.push("w", Tensor::from_fn(&[3, 2, 3, 3], |i| 0.3 * (i as f32 * 1.3).cos()));
    reg.push("b", Tensor::from_fn(&[3], |i| 0.1 * i as f32));

    let mut g = graph();
    g.forward(&reg, &[])?;
    let grads = g.backward()?;

    let h = 1e-3f32;
    for name in ["w", "b"] {
        let analytic = grads.get(name).unwrap().data()[1];
        let mut probe = reg.clone();
        probe.get_mut(name).unwrap().data_mut()[1] += h;
        let up = loss(&probe);
        probe.get_mut(name).unwrap().data_mut()[1] -= 2.0 * h;
        let down = loss(&probe);
        println!("d/d{name}[1]: autodiff {analytic:.6}, finite difference {:.6}", (up - down) / (2.0 * h));
    }
    Ok(())
}
