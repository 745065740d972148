//! Singular values, numerical rank and the log condition number, including
//! its gradient on a tape.
//!
//! cargo run --example svd_condition_number

use wtal::linalg::DEFAULT_RANK_TOL;
use wtal::{abs_det, svd_small, Matrix, Tape};

fn main() -> wtal::Result<()> {
    let u = Matrix::from_rows(&[[0.6, 0.1], [0.15, 0.15]]);
    let svd = svd_small(&u, DEFAULT_RANK_TOL)?;
    println!("U = {u:?}");
    println!("singular values {:?}", svd.singular_values);
    println!("rank {}, condition number {:?}", svd.numerical_rank, svd.condition_number());
    println!("|det U| = {:.6}", abs_det(&u)?);
    println!(
        "reconstruction error {:.2e}",
        svd.reconstruct().max_abs_diff(&u)
    );

    // Rank-deficient input: the ratio uses the smallest non-zero value.
    let low = Matrix::from_rows(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 1.0, 0.0]]);
    let svd = svd_small(&low, DEFAULT_RANK_TOL)?;
    println!("\nrank-2 input: sigma {:?}, rank {}", svd.singular_values, svd.numerical_rank);

    // Any scaled identity is an exact optimum.
    let mut tape = Tape::new();
    for c in [0.5, 1.0, 3.0] {
        let x = tape.leaf(Matrix::identity(3).scale(c));
        let eta = tape.log_condition_number(x, DEFAULT_RANK_TOL)?;
        println!("log cond({c} I) = {}", tape.scalar(eta));
    }

    let x = tape.leaf(u.clone());
    let eta = tape.log_condition_number(x, DEFAULT_RANK_TOL)?;
    tape.backward(eta)?;
    println!("\nlog cond(U) = {:.6}", tape.scalar(eta));
    println!("d/dU = {:?}", tape.grad(x));
    Ok(())
}
