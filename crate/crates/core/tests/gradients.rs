mod common;

use std::time::Instant;

#[test]
fn full_network_joint_loss_gradients() {
    let t = Instant::now();
    let c = common::Composite::new(3);
    let reports = c.check(256, 6, 1e-3);
    for (name, r) in &reports {
        println!(
            "{name:45} {:.3e} {:.3e} checked={} straddling={} unresolved={}",
            r.max_error, r.fine_max_error, r.checked, r.straddling, r.unresolved
        );
    }
    println!("elapsed {:?}", t.elapsed());
    for (name, r) in &reports {
        assert!(r.passes(1e-3), "{name}: {r:?}");
    }
}
