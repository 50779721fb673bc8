//! Box extraction from activation maps and localization accuracy.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Pixel box, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Box {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Box {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Invalid(format!(
                "empty box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Box { x0, y0, x1, y1 })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Box {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

pub fn iou(a: &Box, b: &Box) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = (ix * iy) as f64;
    if inter == 0.0 {
        return 0.0;
    }
    inter / ((a.area() + b.area()) as f64 - inter)
}

/// 8-connected component labels of a row-major `height x width` mask;
/// background is 0 and components are numbered from 1 in scan order.
pub fn label_components(mask: &[bool], width: usize, height: usize) -> (Vec<usize>, usize) {
    let mut labels = vec![0usize; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(k) = stack.pop() {
            let (y, x) = ((k / width) as isize, (k % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let nk = ny as usize * width + nx as usize;
                    if mask[nk] && labels[nk] == 0 {
                        labels[nk] = count;
                        stack.push(nk);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// Tight box around the largest 8-connected component of `mask`; ties go
/// to the component found first in scan order.
pub fn largest_component_box(mask: &[bool], width: usize, height: usize) -> Option<Box> {
    let (labels, count) = label_components(mask, width, height);
    if count == 0 {
        return None;
    }
    let mut sizes = vec![0usize; count + 1];
    for &l in &labels {
        sizes[l] += 1;
    }
    let best = (1..=count).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))?;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (k, &l) in labels.iter().enumerate() {
        if l == best {
            let (y, x) = (k / width, k % width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    Some(Box { x0, y0, x1, y1 })
}

/// Upsamples `map` (corner-aligned bilinear) to `height x width`, min-max
/// normalizes, keeps pixels `>= threshold` and boxes the largest component.
/// A map with no foreground yields the full image.
pub fn extract_box(map: &Tensor, height: usize, width: usize, threshold: f64) -> Result<Box> {
    if map.rank() != 2 {
        return Err(Error::Invalid(format!(
            "map must be h x w, got {:?}",
            map.dims()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Invalid(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let up = ops::upsample_bilinear(map, height, width)?;
    let norm = ops::minmax_normalize(&up, up.numel())?;
    let mask: Vec<bool> = norm.data().iter().map(|&v| v >= threshold).collect();
    Ok(largest_component_box(&mask, width, height).unwrap_or(Box::full(width, height)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationRecord {
    pub id: String,
    pub ranked_classes: Vec<usize>,
    /// Box from the top-1 predicted class map.
    pub pred_box: Box,
    /// Box from the ground-truth class map.
    pub gt_class_box: Box,
    pub gt_class: usize,
    pub gt_boxes: Vec<Box>,
    /// Best IoU of `pred_box` against the ground truth.
    pub iou_best: f64,
    /// Best IoU of `gt_class_box` against the ground truth.
    pub iou_gt_class: f64,
}

impl LocalizationRecord {
    pub fn new(
        id: impl Into<String>,
        ranked_classes: Vec<usize>,
        pred_box: Box,
        gt_class_box: Box,
        gt_class: usize,
        gt_boxes: Vec<Box>,
    ) -> Self {
        let best = |b: &Box| gt_boxes.iter().map(|g| iou(b, g)).fold(0.0, f64::max);
        LocalizationRecord {
            id: id.into(),
            iou_best: best(&pred_box),
            iou_gt_class: best(&gt_class_box),
            ranked_classes,
            pred_box,
            gt_class_box,
            gt_class,
            gt_boxes,
        }
    }

    /// `id ranked box iou` with comma-separated classes and box coordinates.
    pub fn line(&self) -> String {
        let ranked: Vec<String> = self.ranked_classes.iter().map(usize::to_string).collect();
        let b = &self.pred_box;
        let g = &self.gt_class_box;
        format!(
            "{} {} {},{},{},{} {:.6} {},{},{},{} {:.6}",
            self.id,
            ranked.join(","),
            b.x0,
            b.y0,
            b.x1,
            b.y1,
            self.iou_best,
            g.x0,
            g.y0,
            g.x1,
            g.y1,
            self.iou_gt_class
        )
    }
}

/// Top-1, Top-5 and GT-known localization accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocMetrics {
    pub top1: f64,
    pub top5: f64,
    pub gt_known: f64,
}

pub const IOU_THRESHOLD: f64 = 0.5;

pub fn loc_metrics(records: &[LocalizationRecord]) -> Result<LocMetrics> {
    if records.is_empty() {
        return Err(Error::Invalid("no localization records".into()));
    }
    let n = records.len() as f64;
    let frac = |f: &dyn Fn(&LocalizationRecord) -> bool| {
        records.iter().filter(|r| f(r)).count() as f64 / n
    };
    Ok(LocMetrics {
        top1: frac(&|r| {
            r.ranked_classes.first() == Some(&r.gt_class) && r.iou_best > IOU_THRESHOLD
        }),
        top5: frac(&|r| {
            r.ranked_classes.iter().take(5).any(|&c| c == r.gt_class) && r.iou_best > IOU_THRESHOLD
        }),
        gt_known: frac(&|r| r.iou_gt_class > IOU_THRESHOLD),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: usize, y0: usize, x1: usize, y1: usize) -> Box {
        Box::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&b(0, 0, 10, 10), &b(0, 0, 10, 10)), 1.0);
        assert!((iou(&b(0, 0, 10, 10), &b(5, 5, 15, 15)) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&b(0, 0, 2, 2), &b(3, 3, 5, 5)), 0.0);
        assert_eq!(iou(&b(0, 0, 2, 2), &b(2, 0, 4, 2)), 0.0);
    }

    #[test]
    fn top_left_block() {
        let m = Tensor::from_fn(&[4, 4], |k| if k / 4 < 2 && k % 4 < 2 { 1.0 } else { 0.0 });
        assert_eq!(extract_box(&m, 4, 4, 0.1).unwrap(), b(0, 0, 2, 2));
        assert_eq!(
            extract_box(&Tensor::full(&[4, 4], 0.3), 8, 8, 0.1).unwrap(),
            Box::full(8, 8)
        );
    }

    #[test]
    fn metrics_by_rule() {
        let gt = vec![b(0, 0, 10, 10)];
        let good = b(0, 0, 10, 10);
        let bad = b(20, 20, 30, 30);
        let rec = |ranked: Vec<usize>, pb: Box| {
            LocalizationRecord::new("x", ranked, pb, pb, 0, gt.clone())
        };
        let recs = vec![
            rec(vec![0, 1, 2, 3, 4, 5], good),
            rec(vec![2, 1, 0, 3, 4, 5], good),
            rec(vec![0, 1, 2, 3, 4, 5], bad),
        ];
        let m = loc_metrics(&recs).unwrap();
        assert!((m.top1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.top5 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.gt_known - 2.0 / 3.0).abs() < 1e-12);
        assert!(loc_metrics(&[]).is_err());
    }

    #[test]
    fn tie_at_half_is_negative() {
        let gt = vec![b(0, 0, 4, 2)];
        let half = b(0, 0, 2, 2);
        assert_eq!(iou(&half, &gt[0]), 0.5);
        let r = LocalizationRecord::new("t", vec![0], half, half, 0, gt);
        assert_eq!(loc_metrics(&[r]).unwrap().gt_known, 0.0);
    }
}
