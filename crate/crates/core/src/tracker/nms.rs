use crate::geometry::iou;

use super::Detection;

/// Greedy non-maximum suppression within one frame.
///
/// Drops detections below `conf_threshold`, then walks the rest by descending
/// confidence and discards any box whose IoU with an already kept box exceeds
/// `iou_threshold`. Equal confidences keep their input order.
pub fn nms(detections: &[Detection], conf_threshold: f64, iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.confidence >= conf_threshold)
        .collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::with_capacity(order.len());
    for d in order {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}
