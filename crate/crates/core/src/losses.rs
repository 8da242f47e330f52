//! Training objective: grid target assignment, the three detection terms, and
//! the domain adaptive contrastive term between clean and degraded embeddings.
//!
//! Every loss is built inside a [`Graph`] so one `backward` reaches the
//! backbone through both heads. Detection terms pool over the whole batch:
//! `l_obj` averages over every cell of every image and `l_cls`/`l_loc` average
//! over every assigned cell, so a batch of one reduces to the per-image form.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, NUM_CLASSES};
use crate::model::{CLS, HEAD_CHANNELS, OBJ, TH, TW, TX, TY};
use crate::tensor::{Graph, Shape, TensorError, Var};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contrastive loss needs a batch of at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("embedding batches differ: {hcm} clean vs {lcm} degraded")]
    BatchMismatch { hcm: usize, lcm: usize },
    #[error("zero-norm embedding at pair {0}")]
    ZeroEmbedding(usize),
    #[error("head output {got} does not match a {expected}-cell grid")]
    GridMismatch { got: Shape, expected: usize },
    #[error("{heads} head outputs for {targets} target maps")]
    TargetCount { heads: usize, targets: usize },
    #[error("invalid contrastive config: {0}")]
    InvalidConfig(&'static str),
}

/// Why a ground-truth box has no cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unassigned {
    /// Another box with a larger (or equal, earlier) area owns the cell.
    CellTaken { row: usize, col: usize, by: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Cell { row: usize, col: usize },
    Unassigned(Unassigned),
}

/// Which grid cell is responsible for which box.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMap {
    pub grid: usize,
    pub boxes: Vec<BBox>,
    /// One entry per box, in input order.
    pub per_box: Vec<Assignment>,
    /// Row-major `S×S`, the owning box index per cell.
    pub owner: Vec<Option<usize>>,
}

impl AssignmentMap {
    /// `(row, col, box index)` of every positive cell, row-major.
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let s = self.grid;
        self.owner.iter().enumerate().filter_map(move |(i, o)| o.map(|b| (i / s, i % s, b)))
    }

    pub fn n_assigned(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }
}

/// The cell containing a normalized center, `(⌊cy·S⌋, ⌊cx·S⌋)`, clamped so a
/// center on the far edge lands in the last cell.
pub fn center_cell(b: &BBox, s: usize) -> (usize, usize) {
    let idx = |v: f64| ((libm::floor(v * s as f64)).max(0.0) as usize).min(s - 1);
    (idx(b.cy), idx(b.cx))
}

/// Assigns each box to the cell holding its center. On a collision the larger
/// box keeps the cell; equal areas keep the earlier box.
pub fn assign_targets(boxes: &[BBox], s: usize) -> AssignmentMap {
    assert!(s > 0, "grid size must be positive");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].area().partial_cmp(&boxes[a].area()).unwrap_or(core::cmp::Ordering::Equal));
    let mut owner = vec![None; s * s];
    let mut per_box = vec![Assignment::Cell { row: 0, col: 0 }; boxes.len()];
    for i in order {
        let (row, col) = center_cell(&boxes[i], s);
        per_box[i] = match owner[row * s + col] {
            None => {
                owner[row * s + col] = Some(i);
                Assignment::Cell { row, col }
            }
            Some(by) => Assignment::Unassigned(Unassigned::CellTaken { row, col, by }),
        };
    }
    AssignmentMap { grid: s, boxes: boxes.to_vec(), per_box, owner }
}

fn check_heads<T: Scalar>(g: &Graph<T>, heads: &[Var], maps: &[&AssignmentMap]) -> Result<(), LossError> {
    if heads.len() != maps.len() {
        return Err(LossError::TargetCount { heads: heads.len(), targets: maps.len() });
    }
    for (&h, m) in heads.iter().zip(maps) {
        let shape = g.shape(h);
        if shape.dims() != [HEAD_CHANNELS, m.grid, m.grid] {
            return Err(LossError::GridMismatch { got: shape, expected: m.grid });
        }
    }
    Ok(())
}

#[inline]
fn flat(ch: usize, row: usize, col: usize, s: usize) -> usize {
    (ch * s + row) * s + col
}

/// Picks one value per positive cell (per channel in `chans`) across the batch.
fn gather_positive<T: Scalar>(
    g: &mut Graph<T>,
    heads: &[Var],
    maps: &[&AssignmentMap],
    chans: &[usize],
) -> Result<Option<Var>, LossError> {
    let mut parts = Vec::new();
    for (&h, m) in heads.iter().zip(maps) {
        let idx: Vec<usize> = m
            .positives()
            .flat_map(|(r, c, _)| chans.iter().map(move |&ch| flat(ch, r, c, m.grid)))
            .collect();
        if !idx.is_empty() {
            parts.push(g.gather(h, &idx)?);
        }
    }
    Ok(match parts.len() {
        0 => None,
        1 => Some(parts[0]),
        _ => Some(g.concat(&parts)?),
    })
}

fn vector<T: Scalar>(g: &mut Graph<T>, data: Vec<f64>) -> Result<Var, LossError> {
    let shape = Shape::vector(data.len())?;
    Ok(g.constant(shape, data.into_iter().map(T::of).collect())?)
}

/// Mean objectness BCE over every cell: target 1 on owned cells, else 0.
pub fn l_obj<T: Scalar>(g: &mut Graph<T>, heads: &[Var], maps: &[&AssignmentMap]) -> Result<Var, LossError> {
    check_heads(g, heads, maps)?;
    if heads.is_empty() {
        return Ok(g.scalar(T::zero()));
    }
    let mut logits = Vec::with_capacity(heads.len());
    let mut target = Vec::new();
    for (&h, m) in heads.iter().zip(maps) {
        let s2 = m.grid * m.grid;
        logits.push(g.narrow(h, OBJ, 1)?);
        target.extend(m.owner.iter().map(|o| if o.is_some() { 1.0 } else { 0.0 }));
        debug_assert_eq!(target.len() % s2, 0);
    }
    let x = if logits.len() == 1 { logits[0] } else { g.concat(&logits)? };
    let x = g.reshape(x, Shape::vector(target.len())?)?;
    let t = vector(g, target)?;
    let bce = g.bce_with_logits(x, t)?;
    Ok(g.mean(bce))
}

/// Mean per-class BCE against the one-hot life stage, over owned cells.
/// Zero when nothing is assigned.
pub fn l_cls<T: Scalar>(g: &mut Graph<T>, heads: &[Var], maps: &[&AssignmentMap]) -> Result<Var, LossError> {
    check_heads(g, heads, maps)?;
    let chans: Vec<usize> = (0..NUM_CLASSES).map(|c| CLS + c).collect();
    let Some(x) = gather_positive(g, heads, maps, &chans)? else {
        return Ok(g.scalar(T::zero()));
    };
    let target: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.positives().map(|(_, _, b)| m.boxes[b].class.id()).collect::<Vec<_>>())
        .flat_map(|id| (0..NUM_CLASSES).map(move |c| if c == id { 1.0 } else { 0.0 }))
        .collect();
    let t = vector(g, target)?;
    let bce = g.bce_with_logits(x, t)?;
    Ok(g.mean(bce))
}

/// Mean `1 − IoU` between the decoded prediction of each owned cell and its
/// box, differentiable through `σ` offsets and `exp` sizes. Zero when nothing
/// is assigned.
pub fn l_loc<T: Scalar>(g: &mut Graph<T>, heads: &[Var], maps: &[&AssignmentMap]) -> Result<Var, LossError> {
    check_heads(g, heads, maps)?;
    let mut t = [None; 4];
    for (k, ch) in [TX, TY, TW, TH].into_iter().enumerate() {
        t[k] = gather_positive(g, heads, maps, &[ch])?;
    }
    let [Some(tx), Some(ty), Some(tw), Some(th)] = t else {
        return Ok(g.scalar(T::zero()));
    };
    let (mut col, mut row, mut inv_s) = (Vec::new(), Vec::new(), Vec::new());
    let mut gt: [Vec<f64>; 5] = Default::default();
    for m in maps {
        for (r, c, b) in m.positives() {
            row.push(r as f64);
            col.push(c as f64);
            inv_s.push(1.0 / m.grid as f64);
            let [x1, y1, x2, y2] = m.boxes[b].corners();
            for (v, slot) in [x1, y1, x2, y2, m.boxes[b].area()].into_iter().zip(gt.iter_mut()) {
                slot.push(v);
            }
        }
    }
    let n = row.len();
    let col = vector(g, col)?;
    let row = vector(g, row)?;
    let inv_s = vector(g, inv_s)?;
    let [gx1, gy1, gx2, gy2, garea] = gt.map(|v| vector(g, v));
    let (gx1, gy1, gx2, gy2, garea) = (gx1?, gy1?, gx2?, gy2?, garea?);

    // decoded centre and size
    let sx = g.sigmoid(tx);
    let cx = g.add(sx, col)?;
    let cx = g.mul(cx, inv_s)?;
    let sy = g.sigmoid(ty);
    let cy = g.add(sy, row)?;
    let cy = g.mul(cy, inv_s)?;
    let w = g.exp(tw);
    let h = g.exp(th);
    let hw = g.scale(w, T::of(0.5));
    let hh = g.scale(h, T::of(0.5));
    let px1 = g.sub(cx, hw)?;
    let px2 = g.add(cx, hw)?;
    let py1 = g.sub(cy, hh)?;
    let py2 = g.add(cy, hh)?;

    let ix1 = g.maximum(px1, gx1)?;
    let ix2 = g.minimum(px2, gx2)?;
    let iy1 = g.maximum(py1, gy1)?;
    let iy2 = g.minimum(py2, gy2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let parea = g.mul(w, h)?;
    let union = g.add(parea, garea)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;
    debug_assert_eq!(g.shape(iou).numel(), n);
    let miou = g.mean(iou);
    let neg = g.neg(miou);
    Ok(g.add_scalar(neg, T::one()))
}

/// Form of the contrastive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DacVariant {
    /// Clean-anchored, degraded negatives only, positive left out of the
    /// denominator. Can go negative.
    #[default]
    Verbatim,
    /// Positive kept in the denominator and both directions averaged.
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DacConfig {
    pub tau: f64,
    pub lambda_dac: f64,
    pub dac_variant: DacVariant,
}

impl Default for DacConfig {
    fn default() -> Self {
        Self { tau: 0.1, lambda_dac: 1.0, dac_variant: DacVariant::Verbatim }
    }
}

impl DacConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig("tau must be positive and finite"));
        }
        if !(self.lambda_dac >= 0.0 && self.lambda_dac.is_finite()) {
            return Err(LossError::InvalidConfig("lambda_dac must be non-negative and finite"));
        }
        Ok(())
    }
}

/// Contrastive loss between paired embeddings `z_h[i]` ↔ `z_l[i]`.
///
/// Verbatim form, with `s_ij = cos(z_h[i], z_l[j]) / τ`:
/// `−(1/N) Σ_i [ s_ii − ln Σ_{j≠i} e^{s_ij} ]`.
pub fn l_dac<T: Scalar>(
    g: &mut Graph<T>,
    z_h: &[Var],
    z_l: &[Var],
    tau: f64,
    variant: DacVariant,
) -> Result<Var, LossError> {
    let n = z_h.len();
    if n != z_l.len() {
        return Err(LossError::BatchMismatch { hcm: n, lcm: z_l.len() });
    }
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    if !(tau > 0.0) {
        return Err(LossError::InvalidConfig("tau must be positive"));
    }
    let inv_tau = T::of(1.0 / tau);
    let mut s = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let c = g.cosine_sim(z_h[i], z_l[j]).map_err(|e| match e {
                TensorError::ZeroEmbedding => {
                    let bad_h = g.value(z_h[i]).iter().all(|v| *v == T::zero());
                    LossError::ZeroEmbedding(if bad_h { i } else { j })
                }
                e => e.into(),
            })?;
            s.push(g.scale(c, inv_tau));
        }
    }
    let mut terms = Vec::with_capacity(2 * n);
    // anchor i against row (or column) i of the similarity matrix
    let mut anchored = |g: &mut Graph<T>, by_row: bool| -> Result<(), LossError> {
        for i in 0..n {
            let at = |j: usize| if by_row { s[i * n + j] } else { s[j * n + i] };
            let others: Vec<Var> = (0..n)
                .filter(|&j| j != i || variant == DacVariant::Symmetric)
                .map(at)
                .collect();
            let denom = g.concat(&others)?;
            let lse = g.logsumexp(denom);
            terms.push(g.sub(lse, s[i * n + i])?);
        }
        Ok(())
    };
    anchored(g, true)?;
    if variant == DacVariant::Symmetric {
        anchored(g, false)?;
    }
    let all = g.concat(&terms)?;
    Ok(g.mean(all))
}

/// Scalar values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_obj: f64,
    pub l_od: f64,
    /// Zero when the contrastive branch was not evaluated.
    pub l_dac: f64,
    pub total: f64,
    pub n_assigned: usize,
}

/// Graph handles of every term, so each can be differentiated on its own.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_cls: Var,
    pub l_loc: Var,
    pub l_obj: Var,
    pub l_od: Var,
    pub l_dac: Option<Var>,
    pub total: Var,
    pub n_assigned: usize,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        LossBreakdown {
            l_cls: g.item(self.l_cls).as_f64(),
            l_loc: g.item(self.l_loc).as_f64(),
            l_obj: g.item(self.l_obj).as_f64(),
            l_od: g.item(self.l_od).as_f64(),
            l_dac: self.l_dac.map_or(0.0, |v| g.item(v).as_f64()),
            total: g.item(self.total).as_f64(),
            n_assigned: self.n_assigned,
        }
    }
}

/// `l_od = l_cls + l_loc + l_obj` and `total = l_od + λ·l_dac`. The
/// contrastive branch is skipped when `embeddings` is `None` or λ is zero, in
/// which case `total` is the very same node as `l_od`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    heads: &[Var],
    maps: &[&AssignmentMap],
    embeddings: Option<(&[Var], &[Var])>,
    cfg: &DacConfig,
) -> Result<LossVars, LossError> {
    cfg.validate()?;
    let l_cls = l_cls(g, heads, maps)?;
    let l_loc = l_loc(g, heads, maps)?;
    let l_obj = l_obj(g, heads, maps)?;
    let a = g.add(l_cls, l_loc)?;
    let l_od = g.add(a, l_obj)?;
    let n_assigned = maps.iter().map(|m| m.n_assigned()).sum();
    let (l_dac, total) = match embeddings {
        Some((z_h, z_l)) if cfg.lambda_dac != 0.0 => {
            let d = l_dac(g, z_h, z_l, cfg.tau, cfg.dac_variant)?;
            let w = g.scale(d, T::of(cfg.lambda_dac));
            (Some(d), g.add(l_od, w)?)
        }
        _ => (None, l_od),
    };
    Ok(LossVars { l_cls, l_loc, l_obj, l_od, l_dac, total, n_assigned })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::ParasiteClass;
    use crate::rng;
    use rand::Rng;

    const LN2: f64 = core::f64::consts::LN_2;

    fn head(g: &mut Graph<f64>, s: usize, fill: impl Fn(usize, usize, usize) -> f64) -> Var {
        let mut data = vec![0.0; HEAD_CHANNELS * s * s];
        for ch in 0..HEAD_CHANNELS {
            for r in 0..s {
                for c in 0..s {
                    data[flat(ch, r, c, s)] = fill(ch, r, c);
                }
            }
        }
        g.leaf(Shape::new(&[HEAD_CHANNELS, s, s]).unwrap(), data, true).unwrap()
    }

    fn bx(class: ParasiteClass, cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(class, cx, cy, w, h)
    }

    #[test]
    fn center_of_image_maps_to_middle_cell() {
        let m = assign_targets(&[bx(ParasiteClass::Ring, 0.5, 0.5, 0.1, 0.1)], 8);
        assert_eq!(m.per_box[0], Assignment::Cell { row: 4, col: 4 });
        assert_eq!(m.owner[4 * 8 + 4], Some(0));
        let edge = assign_targets(&[bx(ParasiteClass::Ring, 1.0, 0.0, 0.1, 0.1)], 8);
        assert_eq!(edge.per_box[0], Assignment::Cell { row: 0, col: 7 });
    }

    #[test]
    fn empty_assignment_is_all_negative() {
        let m = assign_targets(&[], 8);
        assert!(m.owner.iter().all(Option::is_none));
        assert_eq!(m.n_assigned(), 0);
    }

    #[test]
    fn collision_keeps_the_larger_box() {
        let small = bx(ParasiteClass::Ring, 0.3, 0.3, 0.05, 0.05);
        let large = bx(ParasiteClass::Schizont, 0.3, 0.3, 0.2, 0.1);
        for boxes in [[small, large], [large, small]] {
            let m = assign_targets(&boxes, 8);
            assert_eq!(m.n_assigned(), 1);
            let winner = m.owner.iter().flatten().next().copied().unwrap();
            assert_eq!(boxes[winner], large);
            let loser = 1 - winner;
            assert!(matches!(m.per_box[loser], Assignment::Unassigned(Unassigned::CellTaken { by, .. }) if by == winner));
        }
    }

    #[test]
    fn objectness_examples() {
        let mut g = Graph::new();
        let h = head(&mut g, 8, |_, _, _| 0.0);
        let m = assign_targets(&[], 8);
        let l = l_obj(&mut g, &[h], &[&m]).unwrap();
        assert!((g.item(l) - LN2).abs() < 1e-12);

        let b = bx(ParasiteClass::Ring, 0.3, 0.6, 0.1, 0.1);
        let m = assign_targets(&[b], 8);
        let (r, c) = center_cell(&b, 8);
        let h = head(&mut g, 8, |ch, rr, cc| if ch == OBJ && (rr, cc) == (r, c) { 100.0 } else { -100.0 });
        let l = l_obj(&mut g, &[h], &[&m]).unwrap();
        assert!(g.item(l) >= 0.0 && g.item(l) < 1e-40);
    }

    #[test]
    fn classification_examples() {
        let mut g = Graph::new();
        let h = head(&mut g, 8, |_, _, _| 0.0);
        let none = assign_targets(&[], 8);
        let z = l_cls(&mut g, &[h], &[&none]).unwrap();
        assert_eq!(g.item(z), 0.0);

        let b = bx(ParasiteClass::Gametocyte, 0.3, 0.6, 0.1, 0.1);
        let one = assign_targets(&[b], 8);
        let l = l_cls(&mut g, &[h], &[&one]).unwrap();
        assert!((g.item(l) - LN2).abs() < 1e-12);

        let want = CLS + ParasiteClass::Gametocyte.id();
        let h = head(&mut g, 8, |ch, _, _| if ch == want { 100.0 } else { -100.0 });
        let l = l_cls(&mut g, &[h], &[&one]).unwrap();
        assert!(g.item(l) < 1e-40);
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    /// Head whose cell at `b`'s center decodes to exactly `pred`.
    fn head_decoding_to(g: &mut Graph<f64>, s: usize, b: &BBox, pred: &BBox) -> Var {
        let (r, c) = center_cell(b, s);
        let tx = logit(pred.cx * s as f64 - c as f64);
        let ty = logit(pred.cy * s as f64 - r as f64);
        head(g, s, |ch, rr, cc| {
            if (rr, cc) != (r, c) {
                return 0.0;
            }
            match ch {
                TX => tx,
                TY => ty,
                TW => pred.w.ln(),
                TH => pred.h.ln(),
                _ => 0.0,
            }
        })
    }

    #[test]
    fn localization_examples() {
        let b = bx(ParasiteClass::Ring, 0.33, 0.61, 0.12, 0.08);
        let m = assign_targets(&[b], 8);
        let mut g = Graph::new();
        let h = head_decoding_to(&mut g, 8, &b, &b);
        let l = l_loc(&mut g, &[h], &[&m]).unwrap();
        assert!(g.item(l).abs() < 1e-12);

        // same cell, far corner, tiny box: no overlap
        let far = bx(ParasiteClass::Ring, 0.374, 0.624, 0.001, 0.001);
        let b2 = bx(ParasiteClass::Ring, 0.26, 0.51, 0.01, 0.01);
        let m2 = assign_targets(&[b2], 8);
        let h = head_decoding_to(&mut g, 8, &b2, &far);
        let l = l_loc(&mut g, &[h], &[&m2]).unwrap();
        assert!((g.item(l) - 1.0).abs() < 1e-12);

        let none = assign_targets(&[], 8);
        let z = l_loc(&mut g, &[h], &[&none]).unwrap();
        assert_eq!(g.item(z), 0.0);
    }

    #[test]
    fn localization_gradient_matches_finite_differences() {
        let b = bx(ParasiteClass::Trophozoite, 0.41, 0.37, 0.14, 0.1);
        let m = assign_targets(&[b], 8);
        let (r, c) = center_cell(&b, 8);
        let base = |ch: usize| match ch {
            TX => 0.3,
            TY => -0.4,
            TW => (0.11f64).ln(),
            TH => (0.13f64).ln(),
            _ => 0.0,
        };
        let eval = |d: [f64; 4], grad: bool| {
            let mut g = Graph::new();
            let h = head(&mut g, 8, |ch, rr, cc| {
                if (rr, cc) != (r, c) {
                    return 0.0;
                }
                base(ch) + if (TX..=TH).contains(&ch) { d[ch - TX] } else { 0.0 }
            });
            let l = l_loc(&mut g, &[h], &[&m]).unwrap();
            let v = g.item(l);
            let gr = if grad {
                g.backward(l).unwrap();
                [TX, TY, TW, TH].map(|ch| g.grad(h)[flat(ch, r, c, 8)])
            } else {
                [0.0; 4]
            };
            (v, gr)
        };
        let (_, analytic) = eval([0.0; 4], true);
        let step = 1e-6;
        for k in 0..4 {
            let mut up = [0.0; 4];
            up[k] = step;
            let mut dn = [0.0; 4];
            dn[k] = -step;
            let fd = (eval(up, false).0 - eval(dn, false).0) / (2.0 * step);
            let rel = (analytic[k] - fd).abs() / 1f64.max(analytic[k].abs()).max(fd.abs());
            assert!(rel < 1e-6, "coordinate {k}: {} vs {fd}", analytic[k]);
            assert!(analytic[k] != 0.0);
        }
    }

    fn embed(g: &mut Graph<f64>, rows: &[Vec<f64>]) -> Vec<Var> {
        rows.iter().map(|r| g.leaf(Shape::vector(r.len()).unwrap(), r.clone(), true).unwrap()).collect()
    }

    fn dac_value(zh: &[Vec<f64>], zl: &[Vec<f64>], tau: f64, variant: DacVariant) -> f64 {
        let mut g = Graph::new();
        let h = embed(&mut g, zh);
        let l = embed(&mut g, zl);
        let v = l_dac(&mut g, &h, &l, tau, variant).unwrap();
        g.item(v)
    }

    /// Straight double loop over pairs.
    fn oracle(zh: &[Vec<f64>], zl: &[Vec<f64>], tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let n = zh.len();
        let mut acc = 0.0;
        for i in 0..n {
            let num = (cos(&zh[i], &zl[i]) / tau).exp();
            let mut den = 0.0;
            for j in 0..n {
                if j != i {
                    den += (cos(&zh[i], &zl[j]) / tau).exp();
                }
            }
            acc += (num / den).ln();
        }
        -acc / n as f64
    }

    fn random_batch(r: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn dac_two_orthogonal_pairs() {
        let zh = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let v = dac_value(&zh, &zh, 1.0, DacVariant::Verbatim);
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn dac_identical_embeddings_give_log_n_minus_one() {
        for n in 2..=8 {
            let z = vec![vec![0.3, -1.2, 0.7]; n];
            let v = dac_value(&z, &z, 0.1, DacVariant::Verbatim);
            assert!((v - ((n - 1) as f64).ln()).abs() < 1e-9, "n={n}: {v}");
        }
    }

    #[test]
    fn dac_matches_the_double_loop() {
        let mut r = rng::stream(11, &[]);
        for _ in 0..100 {
            let n = r.random_range(2..=8);
            let d = r.random_range(2..=16);
            let tau = [0.05, 0.1, 0.5, 1.0][r.random_range(0..4)];
            let (zh, zl) = (random_batch(&mut r, n, d), random_batch(&mut r, n, d));
            let got = dac_value(&zh, &zl, tau, DacVariant::Verbatim);
            let want = oracle(&zh, &zl, tau);
            assert!((got - want).abs() <= 1e-6 * 1f64.max(want.abs()), "{got} vs {want}");
        }
    }

    #[test]
    fn dac_rejects_bad_batches() {
        let mut g = Graph::new();
        let one = embed(&mut g, &[vec![1.0, 2.0]]);
        assert_eq!(l_dac(&mut g, &one, &one, 0.1, DacVariant::Verbatim).unwrap_err(), LossError::BatchTooSmall(1));
        let zh = embed(&mut g, &[vec![1.0, 2.0], vec![0.0, 0.0]]);
        let zl = embed(&mut g, &[vec![1.0, 2.0], vec![3.0, 1.0]]);
        assert_eq!(l_dac(&mut g, &zh, &zl, 0.1, DacVariant::Verbatim).unwrap_err(), LossError::ZeroEmbedding(1));
    }

    #[test]
    fn dac_gradient_matches_finite_differences() {
        let mut r = rng::stream(3, &[]);
        let (zh, zl) = (random_batch(&mut r, 4, 8), random_batch(&mut r, 4, 8));
        let mut g = Graph::new();
        let h = embed(&mut g, &zh);
        let l = embed(&mut g, &zl);
        let v = l_dac(&mut g, &h, &l, 0.1, DacVariant::Verbatim).unwrap();
        g.backward(v).unwrap();
        let step = 1e-5;
        for side in 0..2 {
            for i in 0..4 {
                for k in 0..8 {
                    let bump = |delta: f64| {
                        let (mut a, mut b) = (zh.clone(), zl.clone());
                        if side == 0 { a[i][k] += delta } else { b[i][k] += delta }
                        oracle(&a, &b, 0.1)
                    };
                    let fd = (bump(step) - bump(-step)) / (2.0 * step);
                    let an = g.grad(if side == 0 { h[i] } else { l[i] })[k];
                    let rel = (an - fd).abs() / 1f64.max(an.abs()).max(fd.abs());
                    assert!(rel < 1e-4, "side {side} pair {i} coord {k}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn dac_properties() {
        let mut r = rng::stream(5, &[]);
        for case in 0..100 {
            let n = r.random_range(2..=8);
            let d = r.random_range(2..=16);
            let tau = [0.05, 0.1, 0.5, 1.0][case % 4];
            let (zh, zl) = (random_batch(&mut r, n, d), random_batch(&mut r, n, d));
            let base = dac_value(&zh, &zl, tau, DacVariant::Verbatim);

            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, r.random_range(0..=i));
            }
            let ph: Vec<_> = perm.iter().map(|&p| zh[p].clone()).collect();
            let pl: Vec<_> = perm.iter().map(|&p| zl[p].clone()).collect();
            assert!((dac_value(&ph, &pl, tau, DacVariant::Verbatim) - base).abs() < 1e-6);

            let mut scaled = zh.clone();
            let i = r.random_range(0..n);
            let c = r.random_range(0.01..100.0);
            scaled[i].iter_mut().for_each(|v| *v *= c);
            assert!((dac_value(&scaled, &zl, tau, DacVariant::Verbatim) - base).abs() < 1e-6);

            // raise the positive similarity of pair i with every negative fixed
            let eps = 1e-6;
            let shift = |delta: f64| {
                let cos = |a: &[f64], b: &[f64]| {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
                };
                let mut acc = 0.0;
                for a in 0..n {
                    let mut num = cos(&zh[a], &zl[a]);
                    if a == i {
                        num += delta;
                    }
                    let den: f64 = (0..n).filter(|&j| j != a).map(|j| (cos(&zh[a], &zl[j]) / tau).exp()).sum();
                    acc += num / tau - den.ln();
                }
                -acc / n as f64
            };
            let slope = (shift(eps) - shift(-eps)) / (2.0 * eps);
            assert!(slope < 0.0, "case {case}: slope {slope}");
        }
    }

    #[test]
    fn dac_can_be_negative() {
        let zh = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert!(dac_value(&zh, &zh, 0.1, DacVariant::Verbatim) < 0.0);
        // the symmetric form keeps the positive in the denominator, so it is
        // a proper cross-entropy and never negative
        assert!(dac_value(&zh, &zh, 0.1, DacVariant::Symmetric) > 0.0);
    }

    #[test]
    fn symmetric_variant_matches_its_own_double_loop() {
        let mut r = rng::stream(9, &[]);
        let (zh, zl) = (random_batch(&mut r, 5, 6), random_batch(&mut r, 5, 6));
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let tau = 0.5;
        let mut acc = 0.0;
        for i in 0..5 {
            let pos = cos(&zh[i], &zl[i]) / tau;
            let row: f64 = (0..5).map(|j| (cos(&zh[i], &zl[j]) / tau).exp()).sum();
            let col: f64 = (0..5).map(|j| (cos(&zh[j], &zl[i]) / tau).exp()).sum();
            acc += (row.ln() - pos) + (col.ln() - pos);
        }
        let want = acc / 10.0;
        assert!((dac_value(&zh, &zl, tau, DacVariant::Symmetric) - want).abs() < 1e-12);
    }

    #[test]
    fn total_composes_components() {
        let b = [bx(ParasiteClass::Ring, 0.3, 0.3, 0.1, 0.2), bx(ParasiteClass::Schizont, 0.7, 0.5, 0.2, 0.2)];
        let m = assign_targets(&b, 4);
        let mut r = rng::stream(2, &[]);
        let mut g = Graph::new();
        let vals: Vec<f64> = (0..HEAD_CHANNELS * 16).map(|_| r.random_range(-1.0..1.0)).collect();
        let h = g.leaf(Shape::new(&[HEAD_CHANNELS, 4, 4]).unwrap(), vals, true).unwrap();
        let zh = embed(&mut g, &random_batch(&mut r, 3, 4));
        let zl = embed(&mut g, &random_batch(&mut r, 3, 4));
        let cfg = DacConfig { lambda_dac: 0.7, ..DacConfig::default() };
        let lv = total_loss(&mut g, &[h], &[&m], Some((&zh, &zl)), &cfg).unwrap();
        let bd = lv.breakdown(&g);
        assert_eq!(bd.l_od, bd.l_cls + bd.l_loc + bd.l_obj);
        assert!((bd.total - (bd.l_od + 0.7 * bd.l_dac)).abs() < 1e-12);
        assert_eq!(bd.n_assigned, 2);
        assert!(bd.l_cls >= 0.0 && bd.l_loc >= 0.0 && bd.l_obj >= 0.0);

        // gradient of the total is the weighted sum of component gradients
        let grad_of = |pick: fn(&LossVars) -> Option<Var>| {
            let mut g2 = g.clone();
            g2.zero_grads();
            g2.backward(pick(&lv).unwrap()).unwrap();
            let mut out = g2.grad(h).to_vec();
            for z in zh.iter().chain(&zl) {
                out.extend_from_slice(g2.grad(*z));
            }
            out
        };
        let total = grad_of(|l| Some(l.total));
        let parts = [
            grad_of(|l| Some(l.l_cls)),
            grad_of(|l| Some(l.l_loc)),
            grad_of(|l| Some(l.l_obj)),
            grad_of(|l| l.l_dac),
        ];
        for k in 0..total.len() {
            let sum = parts[0][k] + parts[1][k] + parts[2][k] + 0.7 * parts[3][k];
            assert!((total[k] - sum).abs() < 1e-12);
        }

        let off = DacConfig { lambda_dac: 0.0, ..DacConfig::default() };
        let lv0 = total_loss(&mut g, &[h], &[&m], Some((&zh, &zl)), &off).unwrap();
        let bd0 = lv0.breakdown(&g);
        assert_eq!(bd0.total.to_bits(), bd0.l_od.to_bits());
        assert!(lv0.l_dac.is_none());
    }

    #[test]
    fn saturated_detection_leaves_only_the_contrastive_term() {
        let b = bx(ParasiteClass::Ring, 0.3, 0.3, 0.1, 0.2);
        let m = assign_targets(&[b], 4);
        let (r, c) = center_cell(&b, 4);
        let mut g = Graph::new();
        let tx = logit(b.cx * 4.0 - c as f64);
        let ty = logit(b.cy * 4.0 - r as f64);
        let h = head(&mut g, 4, |ch, rr, cc| {
            let own = (rr, cc) == (r, c);
            match ch {
                OBJ => if own { 100.0 } else { -100.0 },
                TX => tx,
                TY => ty,
                TW => b.w.ln(),
                TH => b.h.ln(),
                _ if ch == CLS + b.class.id() => 100.0,
                _ => -100.0,
            }
        });
        let zh = embed(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let lv = total_loss(&mut g, &[h], &[&m], Some((&zh, &zh)), &DacConfig::default()).unwrap();
        let bd = lv.breakdown(&g);
        assert!(bd.l_od < 1e-9);
        assert!((bd.total - bd.l_dac).abs() < 1e-9);
    }

    #[test]
    fn batch_pooling_reduces_to_single_image() {
        let b1 = [bx(ParasiteClass::Ring, 0.3, 0.3, 0.1, 0.2)];
        let b2 = [bx(ParasiteClass::Schizont, 0.6, 0.6, 0.2, 0.2), bx(ParasiteClass::Ring, 0.1, 0.8, 0.1, 0.1)];
        let (m1, m2) = (assign_targets(&b1, 4), assign_targets(&b2, 4));
        let mut r = rng::stream(4, &[]);
        let mut g = Graph::new();
        let mk = |g: &mut Graph<f64>, r: &mut rng::StreamRng| {
            let v: Vec<f64> = (0..HEAD_CHANNELS * 16).map(|_| r.random_range(-2.0..2.0)).collect();
            g.leaf(Shape::new(&[HEAD_CHANNELS, 4, 4]).unwrap(), v, true).unwrap()
        };
        let (h1, h2) = (mk(&mut g, &mut r), mk(&mut g, &mut r));
        let o1 = l_obj(&mut g, &[h1], &[&m1]).unwrap();
        let o2 = l_obj(&mut g, &[h2], &[&m2]).unwrap();
        let ob = l_obj(&mut g, &[h1, h2], &[&m1, &m2]).unwrap();
        assert!((g.item(ob) - 0.5 * (g.item(o1) + g.item(o2))).abs() < 1e-12);
        let c1 = l_cls(&mut g, &[h1], &[&m1]).unwrap();
        let c2 = l_cls(&mut g, &[h2], &[&m2]).unwrap();
        let cb = l_cls(&mut g, &[h1, h2], &[&m1, &m2]).unwrap();
        // pooled over the three owned cells
        assert!((g.item(cb) - (g.item(c1) + 2.0 * g.item(c2)) / 3.0).abs() < 1e-12);
    }
}
