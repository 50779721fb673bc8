//! Localization evaluation over a labelled image set.

use crate::error::Result;
use crate::localization::{extract_box, loc_metrics, Box, LocMetrics, LocalizationRecord};
use crate::maps::select_class;
use crate::params::ModelParams;
use crate::pipeline::infer;
use crate::tensor::Tensor;

/// One evaluation image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub image: Tensor,
    pub label: usize,
    pub boxes: Vec<Box>,
}

/// Predicts boxes for one image from the top-1 and ground-truth class maps.
pub fn localize(
    params: &ModelParams,
    item: &EvalItem,
    use_across: bool,
    threshold: f64,
) -> Result<LocalizationRecord> {
    let out = infer(params, &item.image, use_across)?;
    let (h, w) = (item.image.dims()[1], item.image.dims()[2]);
    let pred = extract_box(&select_class(&out.m_hat, out.top1())?, h, w, threshold)?;
    let gt_map = select_class(&out.m_hat, item.label)?;
    let gt_box = if item.label == out.top1() {
        pred
    } else {
        extract_box(&gt_map, h, w, threshold)?
    };
    Ok(LocalizationRecord::new(
        item.id.clone(),
        out.ranked,
        pred,
        gt_box,
        item.label,
        item.boxes.clone(),
    ))
}

pub fn evaluate(
    params: &ModelParams,
    items: &[EvalItem],
    use_across: bool,
    threshold: f64,
) -> Result<(Vec<LocalizationRecord>, LocMetrics)> {
    let records = items
        .iter()
        .map(|it| localize(params, it, use_across, threshold))
        .collect::<Result<Vec<_>>>()?;
    let metrics = loc_metrics(&records)?;
    Ok((records, metrics))
}

/// Fixed-format metrics text, stable across runs.
pub fn metrics_text(m: &LocMetrics, n: usize) -> String {
    format!(
        "images {n}\ntop1_loc {:.6}\ntop5_loc {:.6}\ngt_known_loc {:.6}\n",
        m.top1, m.top5, m.gt_known
    )
}

/// Parses text written by [`metrics_text`].
pub fn parse_metrics(text: &str) -> Option<LocMetrics> {
    let get = |key: &str| {
        text.lines().find_map(|l| {
            l.strip_prefix(key)
                .and_then(|v| v.trim().parse::<f64>().ok())
        })
    };
    Some(LocMetrics {
        top1: get("top1_loc ")?,
        top5: get("top5_loc ")?,
        gt_known: get("gt_known_loc ")?,
    })
}
