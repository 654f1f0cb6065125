use crate::autodiff::{AttentionEntry, AttentionLog};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::sampling::SampledPointSet;

use super::ModelConfig;

/// One head's attention row laid out on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub head: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major weights; they sum to one over the attended entries.
    pub values: Vec<f64>,
    /// Number of attended entries (tokens) behind this map.
    pub entries: usize,
}

fn entry<'a, T>(log: &'a AttentionLog<T>, label: &str) -> Result<(&'a AttentionEntry<T>, &'a [T])> {
    if !log.is_recording() {
        return Err(Error::arg("attention recording was not enabled for this forward pass"));
    }
    let e = log
        .find(label)
        .ok_or_else(|| Error::arg(format!("no attention recorded under `{}`", label)))?;
    let probs = e
        .probs
        .as_deref()
        .ok_or_else(|| Error::arg(format!("attention `{}` has no stored weights", label)))?;
    Ok((e, probs))
}

fn row<'a, T>(e: &AttentionEntry<T>, probs: &'a [T], head: usize, query: usize) -> &'a [T] {
    let start = (head * e.queries + query) * e.keys;
    &probs[start..start + e.keys]
}

/// Encoder self-attention of sampled point `point` in layer `layer`, one map
/// per head, scattered onto the mask positions of the HR grid.
pub fn encoder_attention_maps<T: Real>(
    log: &AttentionLog<T>,
    points: &SampledPointSet<T>,
    layer: usize,
    point: usize,
) -> Result<Vec<AttentionMap>> {
    let (e, probs) = entry(log, &format!("enc.{layer}.self"))?;
    if point >= e.queries {
        return Err(Error::arg(format!(
            "point index {} out of range ({} sampled points)",
            point, e.queries
        )));
    }
    if e.keys != points.len() {
        return Err(Error::dim("attention record does not match the point set"));
    }
    let (h, w) = points.dims();
    Ok((0..e.heads)
        .map(|head| {
            let mut values = vec![0.0; h * w];
            for (&(r, c), &p) in points.bins.iter().zip(row(e, probs, head, point)) {
                values[r * w + c] = p.f64();
            }
            AttentionMap {
                head,
                height: h,
                width: w,
                values,
                entries: e.keys,
            }
        })
        .collect())
}

/// HR cross-attention of HR coordinate `hr_index` (row-major bin) in layer
/// `layer`, one map per head, laid out on the LR grid.
pub fn hr_attention_maps<T: Real>(
    log: &AttentionLog<T>,
    cfg: &ModelConfig,
    layer: usize,
    hr_index: usize,
) -> Result<Vec<AttentionMap>> {
    if !cfg.use_lr_decoder {
        return Err(Error::arg("HR attention maps need the LR decoder"));
    }
    let (e, probs) = entry(log, &format!("hr.{layer}.cross"))?;
    if hr_index >= e.queries {
        return Err(Error::arg(format!(
            "HR index {} out of range ({} coordinates)",
            hr_index, e.queries
        )));
    }
    let [lh, lw] = cfg.lr_grid;
    Ok((0..e.heads)
        .map(|head| AttentionMap {
            head,
            height: lh,
            width: lw,
            values: row(e, probs, head, hr_index).iter().map(|p| p.f64()).collect(),
            entries: e.keys,
        })
        .collect())
}
