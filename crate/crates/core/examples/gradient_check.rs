//! Compares every hand-written gradient with central differences.

use layered_radiance::gradcheck::run_gradient_checks;

fn main() {
    let seed = std::env::args().nth(1).map_or(7, |s| s.parse().expect("seed must be an integer"));
    let report = run_gradient_checks(seed, 200);
    for s in &report.suites {
        println!("{:<20} {:>3} instances {:>7} entries  max rel error {:.3e}", s.name, s.instances, s.entries_checked, s.max_rel_error);
    }
    println!("worst: {:.3e}", report.max_rel_error);
}
