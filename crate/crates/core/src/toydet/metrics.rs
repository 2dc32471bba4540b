use std::cmp::Ordering;

use crate::error::{Error, Result};

use super::detect::Detection;
use super::scene::{SceneObject, ShapeClass};

/// 11-point interpolated average precision from a ranked TP/FP list.
fn average_precision(hits: &[bool], positives: usize) -> f64 {
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (i, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / positives as f64, tp as f64 / (i + 1) as f64));
    }
    (0..=10)
        .map(|t| {
            let r = t as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Per-class AP at the given IoU threshold, `None` for classes without
/// ground truth. Detections are taken by descending score and each claims
/// the unclaimed same-class box it overlaps most.
pub fn class_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<SceneObject>],
    iou_thresh: f64,
) -> Result<Vec<Option<f64>>> {
    if dets.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let mut out = Vec::new();
    for class in ShapeClass::ALL {
        let positives: usize = gts
            .iter()
            .map(|g| g.iter().filter(|o| o.class == class).count())
            .sum();
        if positives == 0 {
            out.push(None);
            continue;
        }
        let mut ranked: Vec<(usize, &Detection)> = dets
            .iter()
            .enumerate()
            .flat_map(|(img, d)| d.iter().filter(|d| d.class == class).map(move |d| (img, d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(Ordering::Equal));
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(img, d)| {
                let best = gts[img]
                    .iter()
                    .enumerate()
                    .filter(|&(j, o)| o.class == class && !taken[img][j])
                    .map(|(j, o)| (j, o.bbox.iou(&d.bbox)))
                    .fold(None, |acc: Option<(usize, f64)>, (j, iou)| match acc {
                        Some((_, b)) if b >= iou => acc,
                        _ => Some((j, iou)),
                    });
                match best {
                    Some((j, iou)) if iou >= iou_thresh => {
                        taken[img][j] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        out.push(Some(average_precision(&hits, positives)));
    }
    Ok(out)
}

/// Mean AP over classes that have ground truth; zero when none does.
pub fn eval_map(dets: &[Vec<Detection>], gts: &[Vec<SceneObject>], iou_thresh: f64) -> Result<f64> {
    let aps: Vec<f64> = class_ap(dets, gts, iou_thresh)?.into_iter().flatten().collect();
    if aps.is_empty() {
        return Ok(0.0);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydet::scene::BBox;
    use proptest::prelude::*;

    fn obj(class: ShapeClass, x: f64, y: f64) -> SceneObject {
        SceneObject {
            class,
            bbox: BBox::new(x, y, 10.0, 10.0),
            intensity: 1.0,
        }
    }

    fn hit(o: &SceneObject, score: f64) -> Detection {
        Detection {
            bbox: o.bbox,
            class: o.class,
            score,
        }
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![
            vec![obj(ShapeClass::Disc, 0.0, 0.0), obj(ShapeClass::Square, 20.0, 20.0)],
            vec![obj(ShapeClass::Disc, 5.0, 30.0)],
        ];
        let dets: Vec<Vec<Detection>> = gts.iter().map(|g| g.iter().map(|o| hit(o, 0.9)).collect()).collect();
        assert_eq!(eval_map(&dets, &gts, 0.5).unwrap(), 1.0);
        assert_eq!(eval_map(&[vec![], vec![]], &gts, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_three_images() {
        let a = obj(ShapeClass::Disc, 0.0, 0.0);
        let b = obj(ShapeClass::Disc, 20.0, 20.0);
        let s = obj(ShapeClass::Square, 30.0, 5.0);
        let gts = vec![vec![a], vec![b, s], vec![]];
        let dets = vec![
            vec![hit(&a, 0.9)],
            vec![hit(&b, 0.8), hit(&s, 0.7)],
            // False positive ranked first among discs.
            vec![hit(&obj(ShapeClass::Disc, 30.0, 30.0), 0.95)],
        ];
        // Disc ranking FP, TP, TP gives precision 2/3 at every recall level.
        let aps = class_ap(&dets, &gts, 0.5).unwrap();
        assert!((aps[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(aps[1], Some(1.0));
        assert!((eval_map(&dets, &gts, 0.5).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_detection_counts_once() {
        let a = obj(ShapeClass::Square, 0.0, 0.0);
        let dets = vec![vec![hit(&a, 0.9), hit(&a, 0.8)]];
        // TP then FP: precision 1 up to recall 1.
        assert_eq!(eval_map(&dets, &[vec![a]], 0.5).unwrap(), 1.0);
        let dets = vec![vec![hit(&a, 0.8), hit(&a, 0.9)]];
        assert_eq!(eval_map(&dets, &[vec![a]], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn missed_half_the_objects() {
        let a = obj(ShapeClass::Disc, 0.0, 0.0);
        let b = obj(ShapeClass::Disc, 20.0, 20.0);
        let dets = vec![vec![hit(&a, 0.9)]];
        // Recall reaches 0.5: points 0.0..=0.5 score 1, the rest 0.
        assert!((eval_map(&dets, &[vec![a, b]], 0.5).unwrap() - 6.0 / 11.0).abs() < 1e-15);
    }

    fn scenario() -> impl Strategy<Value = (Vec<Vec<SceneObject>>, Vec<Vec<Detection>>)> {
        let image = prop::collection::vec((0usize..2, 0u32..4, 0u32..4, any::<bool>(), 0.0f64..1.0), 0..5);
        prop::collection::vec(image, 1..5).prop_map(|imgs| {
            let mut gts = Vec::new();
            let mut dets = Vec::new();
            for img in imgs {
                let mut g = Vec::new();
                let mut d = Vec::new();
                for (c, gx, gy, detected, score) in img {
                    let o = obj(ShapeClass::from_index(c).unwrap(), gx as f64 * 12.0, gy as f64 * 12.0);
                    if detected {
                        d.push(hit(&o, score));
                    } else {
                        d.push(Detection {
                            bbox: BBox::new(o.bbox.x + 6.0, o.bbox.y, 10.0, 10.0),
                            ..hit(&o, score)
                        });
                    }
                    g.push(o);
                }
                gts.push(g);
                dets.push(d);
            }
            (gts, dets)
        })
    }

    proptest! {
        #[test]
        fn map_in_unit_interval_and_drops_without_true_positives((gts, dets) in scenario()) {
            let m = eval_map(&dets, &gts, 0.5).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
            // Remove the first exact-hit detection found.
            let mut fewer = dets.clone();
            'outer: for (i, d) in dets.iter().enumerate() {
                for (j, x) in d.iter().enumerate() {
                    if gts[i].iter().any(|o| o.bbox == x.bbox && o.class == x.class) {
                        fewer[i].remove(j);
                        break 'outer;
                    }
                }
            }
            prop_assert!(eval_map(&fewer, &gts, 0.5).unwrap() <= m + 1e-12);
        }
    }
}
