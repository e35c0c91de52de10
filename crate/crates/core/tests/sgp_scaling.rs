use std::time::{Duration, Instant};

use bne::gp::{place_inducing, sgp_marginal_diag, SgpFactor};
use bne::kernels::KernelSpec;
use bne::Points;
use nalgebra::{DMatrix, DVector};

fn best_of(reps: usize, mut f: impl FnMut()) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn marginal_cost_is_linear_in_n_at_fixed_m() {
    let m = 32;
    let z = place_inducing(&Points::from_1d(&(0..m).map(|i| i as f64 / (m - 1) as f64).collect::<Vec<_>>()), m);
    let f = SgpFactor::new(z, DVector::from_element(m, 0.3), DMatrix::identity(m, m) * 0.5, KernelSpec::rbf(0.1)).unwrap();
    let xs = |n: usize| Points::from_1d(&(0..n).map(|i| (i as f64 + 0.5) / n as f64).collect::<Vec<_>>());
    let (small, large) = (xs(20_000), xs(40_000));
    let t1 = best_of(5, || {
        sgp_marginal_diag(&f, &small).unwrap();
    });
    let t2 = best_of(5, || {
        sgp_marginal_diag(&f, &large).unwrap();
    });
    let ratio = t2.as_secs_f64() / t1.as_secs_f64();
    assert!(ratio < 3.0, "doubling N multiplied the time by {ratio:.2}");
}
