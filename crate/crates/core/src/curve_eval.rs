//! Insertion and deletion curves over a concept ranking, always scored with
//! the real model, plus their trapezoidal AUC.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EacError, Result};
use crate::masking::{Coalition, DirectModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Insertion,
    Deletion,
}

/// What the x-axis counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XAxis {
    /// `j / n` after `j` concepts.
    #[default]
    Concepts,
    /// Cumulative mask area of the first `j` concepts over the total mask area.
    Pixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub kind: CurveKind,
    pub order: Vec<usize>,
    /// `(x, y)` pairs, x strictly increasing from 0 to 1.
    pub points: Vec<[f64; 2]>,
}

impl Curve {
    pub fn ys(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p[1])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for [x, y] in &self.points {
            out.push_str(&format!("{x},{y}\n"));
        }
        out
    }
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(EacError::InvalidConfig(format!(
            "order has {} entries for {n} concepts",
            order.len()
        )));
    }
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(EacError::InvalidConfig(format!(
                "order is not a permutation of 0..{n}"
            )));
        }
    }
    Ok(())
}

fn x_positions(direct: &DirectModel<'_>, order: &[usize], axis: XAxis) -> Vec<f64> {
    let n = order.len();
    match axis {
        XAxis::Concepts => (0..=n).map(|j| j as f64 / n as f64).collect(),
        XAxis::Pixels => {
            let concepts = direct.scene.concepts().concepts();
            let total: usize = concepts.iter().map(|c| c.area).sum();
            let mut acc = 0usize;
            let mut xs = vec![0.0];
            for &i in order {
                acc += concepts[i].area;
                xs.push(acc as f64 / total as f64);
            }
            xs
        }
    }
}

fn build_curve(
    direct: &DirectModel<'_>,
    order: &[usize],
    target_class: usize,
    axis: XAxis,
    kind: CurveKind,
) -> Result<Curve> {
    let n = direct.scene.n();
    check_order(order, n)?;
    let coalitions: Vec<Coalition> = (0..=n)
        .map(|j| match kind {
            CurveKind::Insertion => Coalition::from_indices(n, order[..j].iter().copied()),
            CurveKind::Deletion => Coalition::from_indices(n, order[j..].iter().copied()),
        })
        .collect();
    let ys = coalitions
        .par_iter()
        .map(|s| direct.utility(s, target_class))
        .collect::<Result<Vec<_>>>()?;
    let xs = x_positions(direct, order, axis);
    Ok(Curve {
        kind,
        order: order.to_vec(),
        points: xs.into_iter().zip(ys).map(|(x, y)| [x, y]).collect(),
    })
}

/// Point `j` reveals the first `j` concepts of `order` on a fully masked image.
pub fn insertion_curve(
    direct: &DirectModel<'_>,
    order: &[usize],
    target_class: usize,
    axis: XAxis,
) -> Result<Curve> {
    build_curve(direct, order, target_class, axis, CurveKind::Insertion)
}

/// Point `j` masks the first `j` concepts of `order` on the original image.
pub fn deletion_curve(
    direct: &DirectModel<'_>,
    order: &[usize],
    target_class: usize,
    axis: XAxis,
) -> Result<Curve> {
    build_curve(direct, order, target_class, axis, CurveKind::Deletion)
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &Curve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]) * (w[0][1] + w[1][1]) / 2.0)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::{Bitmap, ConceptSet};
    use crate::masking::{BaselineFill, Scene};
    use crate::model::ModelBundle;
    use crate::raster::Image;
    use proptest::prelude::*;

    fn curve(ys: &[f64]) -> Curve {
        let n = ys.len() - 1;
        Curve {
            kind: CurveKind::Insertion,
            order: (0..n).collect(),
            points: ys.iter().enumerate().map(|(j, &y)| [j as f64 / n as f64, y]).collect(),
        }
    }

    #[test]
    fn constant_curve() {
        assert!((auc(&curve(&[0.37; 5])) - 0.37).abs() < 1e-15);
    }

    #[test]
    fn ramp() {
        assert!((auc(&curve(&[0.0, 1.0])) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_segments() {
        // (0.1 + 0.5) / 2 * 0.5 + (0.5 + 1.0) / 2 * 0.5 = 0.15 + 0.375
        assert!((auc(&curve(&[0.1, 0.5, 1.0])) - 0.525).abs() < 1e-15);
    }

    fn stripes() -> (ModelBundle, Scene) {
        let bundle = ModelBundle::builtin_toy_model(5, 4, 3).unwrap();
        let image = Image::from_fn(32, 32, |x, y| [x as f32 / 32.0, (y % 7) as f32 / 7.0, 0.2]);
        let masks = (0..4).map(|k| (None, Bitmap::from_fn(32, 32, move |x, _| x / 8 == k)));
        let cs = ConceptSet::from_bitmaps(32, 32, masks).unwrap();
        (bundle, Scene::new(image, cs, BaselineFill::ChannelMean).unwrap())
    }

    #[test]
    fn endpoints_and_reversal() {
        let (bundle, scene) = stripes();
        let direct = DirectModel { bundle: &bundle, scene: &scene };
        let order = [2, 0, 3, 1];
        let ins = insertion_curve(&direct, &order, 1, XAxis::Concepts).unwrap();
        let del = deletion_curve(&direct, &order, 1, XAxis::Concepts).unwrap();
        let empty = direct.utility(&Coalition::empty(4), 1).unwrap();
        let full = direct.utility(&Coalition::full(4), 1).unwrap();
        assert_eq!(ins.points[0][1], empty);
        assert_eq!(ins.points[4][1], full);
        assert_eq!(del.points[0][1], full);
        assert_eq!(del.points[4][1], empty);
        // Deleting in order o visits the same coalitions as inserting reversed(o), backwards.
        let rev: Vec<usize> = order.iter().rev().copied().collect();
        let ins_rev = insertion_curve(&direct, &rev, 1, XAxis::Concepts).unwrap();
        for j in 0..=4 {
            assert_eq!(del.points[j][1], ins_rev.points[4 - j][1]);
        }
    }

    #[test]
    fn pixel_axis_ends_at_one() {
        let (bundle, scene) = stripes();
        let direct = DirectModel { bundle: &bundle, scene: &scene };
        let c = insertion_curve(&direct, &[3, 1, 0, 2], 0, XAxis::Pixels).unwrap();
        assert_eq!(c.points[0][0], 0.0);
        assert_eq!(c.points[4][0], 1.0);
        assert!(c.points.windows(2).all(|w| w[1][0] > w[0][0]));
    }

    #[test]
    fn bad_order_rejected() {
        let (bundle, scene) = stripes();
        let direct = DirectModel { bundle: &bundle, scene: &scene };
        assert!(insertion_curve(&direct, &[0, 0, 1, 2], 0, XAxis::Concepts).is_err());
        assert!(insertion_curve(&direct, &[0, 1, 2], 0, XAxis::Concepts).is_err());
    }

    proptest! {
        #[test]
        fn auc_within_range(ys in proptest::collection::vec(0.0f64..1.0, 2..12)) {
            let c = curve(&ys);
            let a = auc(&c);
            let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
        }
    }
}
