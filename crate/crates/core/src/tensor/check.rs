use super::ParamStore;
use crate::error::Result;

/// Worst relative error of one parameter tensor in a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
}

/// Compares `analytic` gradients against central differences of `eval`
/// with step `h`, entry by entry.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, floor)`; the
/// floor keeps entries whose true gradient is essentially zero from
/// dividing round-off by round-off.
pub fn finite_difference_check(
    params: &ParamStore<f64>,
    analytic: &ParamStore<f64>,
    h: f64,
    floor: f64,
    eval: &dyn Fn(&ParamStore<f64>) -> Result<f64>,
) -> Result<Vec<GradCheckEntry>> {
    let flat = params.flatten();
    let grads = analytic.flatten();
    let mut out = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        let mut worst: f64 = 0.0;
        for i in offset..offset + t.numel() {
            let mut probe = flat.clone();
            probe[i] = flat[i] + h;
            let up = eval(&params.unflatten(&probe)?)?;
            probe[i] = flat[i] - h;
            let down = eval(&params.unflatten(&probe)?)?;
            let num = (up - down) / (2.0 * h);
            let denom = grads[i].abs().max(num.abs()).max(floor);
            worst = worst.max((grads[i] - num).abs() / denom);
        }
        offset += t.numel();
        out.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}
