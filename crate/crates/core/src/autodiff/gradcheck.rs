//! Central finite-difference gradient checking.

use super::params::Params;

/// Relative error floor: differences between gradients smaller than this
/// magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradients already stored on `params` against central
/// differences of `loss` with step `h`, over every parameter entry.
/// Returns the maximum relative error. Parameter values are restored.
pub fn max_relative_error<F>(params: &mut Params, h: f64, mut loss: F) -> f64
where
    F: FnMut(&Params) -> f64,
{
    let ids: Vec<_> = params.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = params.get(id).len();
        let analytic: Vec<f64> = params
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(params);
            params.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}
