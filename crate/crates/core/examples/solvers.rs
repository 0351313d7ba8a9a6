//! The numerical kernels on their own: simplex projection, the simplex QP,
//! convex hull membership, HAC long-run variance and the SVT rank rule.

use gmm_sce::estimators::{estimate_rank_svt, svt_rank};
use gmm_sce::linalg::{hac_lrv_scalar, in_convex_hull, project_simplex_euclidean, solve_simplex_qp, Bandwidth, SimplexQp};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let v = DVector::from_vec(vec![0.5, 0.7]);
    println!("projection of {:?} -> {:?}", v.as_slice(), project_simplex_euclidean(&v).as_slice());

    // min ‖Xw − y‖² over the simplex, y inside the hull.
    let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let y = DVector::from_vec(vec![0.2, 0.3]);
    let q = SimplexQp::new(x.transpose() * &x, x.transpose() * &y, y.norm_squared())?;
    let sol = solve_simplex_qp(&q, 1e-12, 10_000)?;
    println!("qp weights {:.4?} objective {:.2e} unique {}", sol.weights.values(), sol.objective, sol.unique);

    let inside = in_convex_hull(&y, &x, 1e-8)?;
    let outside = in_convex_hull(&DVector::from_vec(vec![1.0, 1.0]), &x, 1e-8)?;
    println!("hull: inside={} (distance {:.1e}), outside={} (distance {:.3})", inside.inside, inside.distance, outside.inside, outside.distance);

    // AR(1) with φ = 0.5 has long-run variance 1/(1 − φ)² = 4.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut z = 0.0;
    let series: Vec<f64> = (0..20_000)
        .map(|_| {
            z = 0.5 * z + rng.sample::<f64, _>(StandardNormal);
            z
        })
        .collect();
    for bw in [Bandwidth::Auto, Bandwidth::Fixed(50)] {
        let lrv = hac_lrv_scalar(&series, bw)?;
        println!("hac lag {:>2}: {:.3}", lrv.bandwidth, lrv.matrix[(0, 0)]);
    }

    println!("svt rank of [10, 8, 1, 1, 0.5]: {}", svt_rank(&[10.0, 8.0, 1.0, 1.0, 0.5]));
    let l = DMatrix::from_fn(100, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m = DMatrix::from_fn(4, 40, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
    let noise = DMatrix::from_fn(100, 40, |_, _| rng.sample::<f64, _>(StandardNormal));
    println!("svt rank of a rank-4 panel plus noise: {}", estimate_rank_svt(&(l * m + noise)));
    Ok(())
}
