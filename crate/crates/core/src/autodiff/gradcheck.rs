use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, NodeId, ParamSet};

/// Compares reverse-mode gradients with central finite differences.
///
/// `loss_fn` must build a scalar loss from `params` on a fresh graph and
/// register the parameters through [`Graph::params`] (all trainable).
/// Returns the maximum over `n_coords` uniformly sampled coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`; a parameter
/// set with no entries yields 0.
pub fn grad_check<F>(
    loss_fn: F,
    params: &ParamSet<f64>,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId, AutodiffError>,
{
    let total = params.num_scalars();
    if total == 0 || n_coords == 0 {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let analytic = g.backward(loss)?.dense(params);

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, (_, t)| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();

    let eval = |p: &ParamSet<f64>| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, p)?;
        Ok(g.value(l).values()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for _ in 0..n_coords {
        let flat = rng.random_range(0..total);
        let idx = offsets.partition_point(|&o| o <= flat) - 1;
        let j = flat - offsets[idx];
        let orig = params.by_index(idx).1.values()[j];

        probe.by_index_mut(idx).1.values_mut()[j] = orig + h;
        let plus = eval(&probe)?;
        probe.by_index_mut(idx).1.values_mut()[j] = orig - h;
        let minus = eval(&probe)?;
        probe.by_index_mut(idx).1.values_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[idx][j];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
