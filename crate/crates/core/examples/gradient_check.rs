//! Finite-difference check of one attention block: keys and queries of a
//! conv layer and a dense layer, their pooled global query, the agreement
//! maps and the gain modulation, on random activations.
//!
//! `cargo run --release --example gradient_check [eps]`

use gattanet::attention::{agreement, pool_global_query};
use gattanet::gradcheck::grad_check;
use gattanet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gattanet::Result<()> {
    let eps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut random = |shape: &[usize], lo: f32, hi: f32| Tensor::from_fn(shape, |_| rng.random_range(lo..hi));

    let (batch, dim) = (2, 4);
    let conv_act = random(&[batch, 4, 4, 3], 0.0, 1.0);
    let dense_act = random(&[batch, 5], 0.0, 1.0);
    let params = vec![
        random(&[3, dim], -1.0, 1.0), // conv keys
        random(&[dim], -0.5, 0.5),
        random(&[3, dim], -1.0, 1.0), // conv queries
        random(&[dim], -0.5, 0.5),
        random(&[5, dim], -1.0, 1.0), // dense keys
        random(&[dim], -0.5, 0.5),
        random(&[5, dim], -1.0, 1.0), // dense queries
        random(&[dim], -0.5, 0.5),
        Tensor::scalar(0.2), // gain scale
    ];

    let report = grad_check(
        |tape, v| {
            let conv = tape.constant(conv_act.clone());
            let dense = tape.constant(dense_act.clone());
            let keys = [tape.linear(conv, v[0], v[1])?, tape.unit_projection(dense, v[4], v[5])?];
            let queries = [tape.linear(conv, v[2], v[3])?, tape.unit_projection(dense, v[6], v[7])?];
            let q = pool_global_query(tape, &queries)?;
            let maps = agreement(tape, &keys, q)?;
            let mut total = None;
            for (act, map) in [conv, dense].into_iter().zip(maps) {
                let gain = tape.scale_by(map, v[8])?;
                let out = tape.scale_add(act, gain, false)?;
                let s = tape.sum_squares(out)?;
                total = Some(match total {
                    Some(t) => tape.add(t, s)?,
                    None => s,
                });
            }
            Ok(total.expect("two layers"))
        },
        &params,
        eps,
    )?;
    println!(
        "{} elements checked, {} on a kink; max relative error {:.2e} at {:?} (analytic {:.5}, numeric {:.5})",
        report.checked, report.straddling, report.max_rel_error, report.worst, report.analytic, report.numeric
    );
    Ok(())
}
