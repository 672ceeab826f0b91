use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Below this magnitude the analytic gradient is compared in absolute terms.
pub const ABS_FALLBACK: f64 = 1e-6;

/// Compare analytic gradients against central differences at `probes`
/// randomly chosen parameter coordinates and return the largest error
/// (relative, or absolute where the analytic value is below
/// [`ABS_FALLBACK`]).
///
/// `loss` must build a deterministic scalar on the tape it is handed.
/// The store's gradient buffers are cleared before and after.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    probes: usize,
    h: f64,
    seed: u64,
    loss: &mut F,
) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    store.zero_grad();
    let mut tape = Tape::new();
    let out = loss(store, &mut tape)?;
    tape.backward(out, store)?;
    let analytic: Vec<_> = store.ids().map(|id| store.grad(id).clone()).collect();
    store.zero_grad();

    let coords: Vec<(usize, usize)> = store
        .ids()
        .enumerate()
        .flat_map(|(p, id)| (0..store.value(id).len()).map(move |k| (p, k)))
        .collect();
    if coords.is_empty() {
        return Ok(0.0);
    }
    let ids: Vec<_> = store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let out = loss(store, &mut tape)?;
        Ok(tape.value(out).item())
    };

    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let (p, k) = coords[rng.random_range(0..coords.len())];
        let id = ids[p];
        let orig = store.value(id).as_slice()[k];
        store.value_mut(id).as_mut_slice()[k] = orig + h;
        let plus = eval(store)?;
        store.value_mut(id).as_mut_slice()[k] = orig - h;
        let minus = eval(store)?;
        store.value_mut(id).as_mut_slice()[k] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[p].as_slice()[k];
        let err = if a.abs() < ABS_FALLBACK {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / a.abs()
        };
        worst = worst.max(err);
    }
    Ok(worst)
}
