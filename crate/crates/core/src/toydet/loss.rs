use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::traingraph::ScalarLoss;

use super::model::{CELL, GRID, HEAD_CHANNELS, NUM_CLASSES, PRIOR};
use super::scene::SceneObject;

/// Relative weight of the box regression term against objectness.
pub const BOX_WEIGHT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    /// Centre offset within the cell, in `[0, 1)`.
    pub dx: f64,
    pub dy: f64,
    /// Log-scale of the box extent relative to the prior.
    pub tw: f64,
    pub th: f64,
    pub class: usize,
}

/// One optional target per grid cell, assigned to the cell holding the
/// object's centre.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTargets {
    cells: Vec<Option<CellTarget>>,
}

impl GridTargets {
    pub fn from_objects(objects: &[SceneObject]) -> Self {
        let mut cells = vec![None; GRID * GRID];
        for o in objects {
            let (cx, cy) = o.bbox.center();
            let col = ((cx / CELL).floor() as usize).min(GRID - 1);
            let row = ((cy / CELL).floor() as usize).min(GRID - 1);
            let slot = &mut cells[row * GRID + col];
            if slot.is_none() {
                *slot = Some(CellTarget {
                    dx: cx / CELL - col as f64,
                    dy: cy / CELL - row as f64,
                    tw: (o.bbox.w / PRIOR).ln(),
                    th: (o.bbox.h / PRIOR).ln(),
                    class: o.class.index(),
                });
            }
        }
        Self { cells }
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&CellTarget> {
        self.cells[row * GRID + col].as_ref()
    }

    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-image detection objective over a `[7, 12, 12]` head output:
/// objectness BCE on every cell, plus weighted squared box error and class
/// cross-entropy on cells that own an object.
#[derive(Debug, Clone)]
pub struct DetectionLoss {
    targets: GridTargets,
}

impl DetectionLoss {
    pub fn new(targets: GridTargets) -> Self {
        Self { targets }
    }
}

impl ScalarLoss for DetectionLoss {
    fn evaluate(&self, y: &Tensor) -> Result<(f64, Vec<f64>)> {
        if y.shape() != [HEAD_CHANNELS, GRID, GRID] {
            return Err(Error::ShapeMismatch {
                op: "DetectionLoss",
                expected: vec![HEAD_CHANNELS, GRID, GRID],
                got: y.shape().to_vec(),
            });
        }
        let plane = GRID * GRID;
        let d = y.data();
        let mut grad = vec![0.0; d.len()];
        let mut loss = 0.0;
        for cell in 0..plane {
            let target = self.targets.cells[cell];
            let o = d[cell];
            let t = if target.is_some() { 1.0 } else { 0.0 };
            loss += softplus(o) - t * o;
            grad[cell] = sigmoid(o) - t;

            let Some(ct) = target else { continue };
            let at = |ch: usize| ch * plane + cell;

            for (ch, goal) in [(1, ct.dx), (2, ct.dy)] {
                let s = sigmoid(d[at(ch)]);
                let r = s - goal;
                loss += BOX_WEIGHT * r * r;
                grad[at(ch)] = BOX_WEIGHT * 2.0 * r * s * (1.0 - s);
            }
            for (ch, goal) in [(3, ct.tw), (4, ct.th)] {
                let r = d[at(ch)] - goal;
                loss += BOX_WEIGHT * r * r;
                grad[at(ch)] = BOX_WEIGHT * 2.0 * r;
            }

            let logits: Vec<f64> = (0..NUM_CLASSES).map(|k| d[at(5 + k)]).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            loss += m + z.ln() - logits[ct.class];
            for (k, l) in logits.iter().enumerate() {
                let p = (l - m).exp() / z;
                grad[at(5 + k)] = p - if k == ct.class { 1.0 } else { 0.0 };
            }
        }
        Ok((loss, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydet::scene::{BBox, ShapeClass};

    fn one_object() -> Vec<SceneObject> {
        vec![SceneObject {
            class: ShapeClass::Square,
            bbox: BBox::new(10.0, 20.0, 12.0, 8.0),
            intensity: 1.0,
        }]
    }

    #[test]
    fn targets_land_in_the_centre_cell() {
        let t = GridTargets::from_objects(&one_object());
        // centre (16, 24) -> col 4, row 6, offsets 0 and 0
        let c = t.cell(6, 4).unwrap();
        assert_eq!((c.dx, c.dy), (0.0, 0.0));
        assert!((c.tw - (12.0f64 / 16.0).ln()).abs() < 1e-15);
        assert_eq!(c.class, 1);
        assert_eq!(t.positives(), 1);
    }

    #[test]
    fn zero_logits_loss_is_analytic() {
        let loss = DetectionLoss::new(GridTargets::from_objects(&one_object()));
        let y = Tensor::zeros(&[HEAD_CHANNELS, GRID, GRID]).unwrap();
        let (l, _) = loss.evaluate(&y).unwrap();
        let c = GridTargets::from_objects(&one_object());
        let ct = c.cell(6, 4).unwrap();
        let expect = 144.0 * std::f64::consts::LN_2
            + BOX_WEIGHT * ((0.5 - ct.dx).powi(2) + (0.5 - ct.dy).powi(2) + ct.tw.powi(2) + ct.th.powi(2))
            + std::f64::consts::LN_2;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let loss = DetectionLoss::new(GridTargets::from_objects(&one_object()));
        let y = Tensor::from_fn(&[HEAD_CHANNELS, GRID, GRID], |i| ((i * 13) % 17) as f64 / 8.0 - 1.0)
            .unwrap();
        let (_, g) = loss.evaluate(&y).unwrap();
        let h = 1e-5;
        for idx in [0, 6 * GRID + 4, 144 + 6 * GRID + 4, 3 * 144 + 76, 4 * 144 + 6 * GRID + 4, 5 * 144 + 76, 6 * 144 + 76, 500] {
            let mut p = y.data().to_vec();
            p[idx] += h;
            let lp = loss.evaluate(&Tensor::new(y.shape().to_vec(), p.clone()).unwrap()).unwrap().0;
            p[idx] -= 2.0 * h;
            let lm = loss.evaluate(&Tensor::new(y.shape().to_vec(), p).unwrap()).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6 * fd.abs().max(1.0), "idx {idx}: {fd} vs {}", g[idx]);
        }
    }
}
