use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};

/// One scalar inside a named parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(probe, analytic, numeric, relative error)` per probe.
    pub rows: Vec<(Probe, f64, f64, f64)>,
    pub max_relative_error: f64,
}

/// Compare analytic gradients against central differences.
///
/// `f` returns the loss and the analytic gradient at the given parameters.
/// The relative error per probe is `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn finite_diff_check<F>(
    params: &ParamStore<f64>,
    probes: &[Probe],
    h: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(f64, ParamGrads<f64>)>,
{
    for p in probes {
        let t = params.get(&p.name)?;
        if p.index >= t.numel() {
            return Err(Error::arg(format!(
                "probe index {} out of range for `{}` ({} elements)",
                p.index,
                p.name,
                t.numel()
            )));
        }
    }
    let (_, grads) = f(params)?;
    let mut rows = Vec::with_capacity(probes.len());
    let mut worst = 0.0f64;
    let mut work = params.clone();
    for p in probes {
        let analytic = grads
            .get(&p.name)
            .ok_or_else(|| Error::UnknownParameter(p.name.clone()))?
            .data()[p.index];
        let orig = params.get(&p.name)?.data()[p.index];
        work.get_mut(&p.name)?.data_mut()[p.index] = orig + h;
        let (plus, _) = f(&work)?;
        work.get_mut(&p.name)?.data_mut()[p.index] = orig - h;
        let (minus, _) = f(&work)?;
        work.get_mut(&p.name)?.data_mut()[p.index] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-8);
        worst = worst.max(rel);
        rows.push((p.clone(), analytic, numeric, rel));
    }
    Ok(GradCheckReport {
        rows,
        max_relative_error: worst,
    })
}

/// The `count` scalars with the largest analytic gradient magnitude among
/// parameters accepted by `filter`, in deterministic order.
pub fn select_probes(
    grads: &ParamGrads<f64>,
    count: usize,
    filter: impl Fn(&str) -> bool,
) -> Vec<Probe> {
    let mut all: Vec<(f64, Probe)> = grads
        .iter()
        .filter(|(name, _)| filter(name))
        .flat_map(|(name, t)| {
            t.data().iter().enumerate().map(move |(index, g)| {
                (
                    g.abs(),
                    Probe {
                        name: name.clone(),
                        index,
                    },
                )
            })
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    all.into_iter().take(count).map(|(_, p)| p).collect()
}
