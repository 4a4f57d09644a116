mod common;

use common::{all_probes, GRAD_FLOOR};

#[test]
fn autodiff_matches_central_differences() {
    let run = all_probes();
    assert!(run.probes.len() >= 100, "only {} probes accepted", run.probes.len());
    let worst = run
        .probes
        .iter()
        .max_by(|a, b| a.rel_err(GRAD_FLOOR).total_cmp(&b.rel_err(GRAD_FLOOR)))
        .unwrap();
    eprintln!(
        "{} probes ({} rejected at kinks); worst {} ad={} fd={} rel={:e}",
        run.probes.len(),
        run.rejected,
        worst.what,
        worst.autodiff,
        worst.numeric,
        worst.rel_err(GRAD_FLOOR)
    );
    for p in &run.probes {
        assert!(p.rel_err(GRAD_FLOOR) < 1e-4, "{p:?}");
    }
}
