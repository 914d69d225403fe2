//! Central-difference gradient checks of the 64-bit path.

use nncomp_core::gradcheck::{self, rel_err, H};
use nncomp_core::{loss, Rng, Tensor};

const TOL: f64 = 1e-4;

#[test]
fn hundred_random_architectures() {
    let report = gradcheck::run(100, 1234);
    assert!(report.checks > 300, "{report:?}");
    assert!(report.worst < TOL, "{}: relative error {:e}", report.worst_at, report.worst);
    eprintln!("worst relative error {:e} at {}", report.worst, report.worst_at);
}

#[test]
fn cross_entropy_hard_matches_finite_differences() {
    let mut rng = Rng::new(7);
    let z = Tensor::new(vec![3, 10], (0..30).map(|_| rng.uniform(-2.0, 2.0)).collect::<Vec<f64>>()).unwrap();
    let labels = [4u8, 0, 9];
    let (_, g) = loss::cross_entropy_hard(&z, &labels).unwrap();
    let numeric: Vec<f64> = (0..30)
        .map(|k| {
            let mut p = z.clone();
            p.data_mut()[k] += H;
            let mut m = z.clone();
            m.data_mut()[k] -= H;
            (loss::cross_entropy_hard(&p, &labels).unwrap().0 - loss::cross_entropy_hard(&m, &labels).unwrap().0) / (2.0 * H)
        })
        .collect();
    assert!(rel_err(g.data(), &numeric) < TOL);
}
