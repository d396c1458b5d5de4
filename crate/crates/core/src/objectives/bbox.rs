use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Center, width and height as fractions of the image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Requires `0 <= cx, cy <= 1`, `0 < w, h <= 1` and overlap with the unit
    /// square.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { cx, cy, w, h } = *self;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::ZeroAreaBox(format!("{self:?}")));
        }
        let ok = (0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy) && w <= 1.0 && h <= 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("box {self:?} outside the unit square")));
        }
        Ok(())
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn l1(&self, other: &BoundingBox) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Generalized IoU, in `[-1, 1]`.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    for x in [a, b] {
        if !(x.w > 0.0 && x.h > 0.0) {
            return Err(Error::ZeroAreaBox(format!("{x:?}")));
        }
    }
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosure = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    Ok(inter / union - (enclosure - union) / enclosure)
}

/// `(1 - GIoU) + L1` per row of `pred` `[n, 4]`, averaged over rows.
pub fn bbp_loss<'g>(pred: Var<'g>, truth: &[BoundingBox]) -> Result<Var<'g>> {
    let s = pred.shape();
    if s.len() != 2 || s[1] != 4 || s[0] != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "bbp_loss",
            lhs: s,
            rhs: vec![truth.len(), 4],
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("bbp_loss needs at least one box".into()));
    }
    for b in truth {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::ZeroAreaBox(format!("{b:?}")));
        }
    }
    let n = truth.len();
    let g = pred.graph();
    let t = g.constant(Tensor::from_parts(
        vec![n, 4],
        truth.iter().flat_map(BoundingBox::to_array).collect(),
    ))?;

    let col = |v: Var<'g>, i: usize| v.slice(1, i, 1);
    let corners = |v: Var<'g>| -> Result<[Var<'g>; 4]> {
        let (cx, cy, w, h) = (col(v, 0)?, col(v, 1)?, col(v, 2)?, col(v, 3)?);
        let (hw, hh) = (w.scale(0.5)?, h.scale(0.5)?);
        Ok([cx.sub(hw)?, cy.sub(hh)?, cx.add(hw)?, cy.add(hh)?])
    };
    let [px1, py1, px2, py2] = corners(pred)?;
    let [tx1, ty1, tx2, ty2] = corners(t)?;

    let iw = px2.minimum(tx2)?.sub(px1.maximum(tx1)?)?.relu()?;
    let ih = py2.minimum(ty2)?.sub(py1.maximum(ty1)?)?.relu()?;
    let inter = iw.mul(ih)?;
    let area = |v: Var<'g>| -> Result<Var<'g>> { col(v, 2)?.mul(col(v, 3)?) };
    let union = area(pred)?.add(area(t)?)?.sub(inter)?;
    let ew = px2.maximum(tx2)?.sub(px1.minimum(tx1)?)?;
    let eh = py2.maximum(ty2)?.sub(py1.minimum(ty1)?)?;
    let enclosure = ew.mul(eh)?;
    let giou = inter.div(union)?.sub(enclosure.sub(union)?.div(enclosure)?)?;

    let l1 = pred.sub(t)?.abs()?.sum()?;
    giou.neg()?.add_scalar(1.0)?.mean()?.add(l1.scale(1.0 / n as f64)?)
}
