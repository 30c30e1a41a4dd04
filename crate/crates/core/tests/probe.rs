use mfturnpike_core::dynamics::{solve_pmp, SweepOptions};
use mfturnpike_core::lift::RandomVector;
use mfturnpike_core::model::ScalarLq;
use nalgebra::DMatrix;

#[test]
#[ignore]
fn probe_sweep_floor() {
    let model = ScalarLq { a: 0.0, b: 1.0 };
    let x0 = RandomVector::new(DMatrix::from_element(1, 1, 0.002));
    for (horizon, steps, tol) in [(20.0, 4000, 3e-12), (40.0, 4000, 3e-12), (40.0, 8000, 3e-12)] {
        let start = std::time::Instant::now();
        let result = solve_pmp(
            &model,
            &x0,
            horizon,
            steps,
            &SweepOptions { tol, ..SweepOptions::default() },
        );
        match result {
            Ok(traj) => {
                let mid = steps / 2;
                let d = traj.states[mid][(0, 0)].abs()
                    + traj.costates[mid][(0, 0)].abs()
                    + traj.controls[mid][(0, 0)].abs();
                let expected = 0.002
                    * ((horizon / 2.0).cosh() + 3.0 * (horizon / 2.0).sinh())
                    / horizon.cosh();
                println!(
                    "T={horizon} K={steps}: sweeps={} mid={d:.6e} expected={expected:.6e} ratio={:.4} ({:?})",
                    traj.sweeps,
                    d / expected,
                    start.elapsed()
                );
            }
            Err(e) => println!("T={horizon} K={steps}: FAILED {e} ({:?})", start.elapsed()),
        }
    }
}
