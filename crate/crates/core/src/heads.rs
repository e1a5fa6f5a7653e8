//! Trajectory and class heads on the fused token, the visual student heads'
//! targets, and every training loss.
//!
//! Batch losses are means over samples; `L_pos` also averages over the three
//! coordinates, so it reads in meters per axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{fan_in, Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fully connected stack with SiLU between layers and none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    store.add(format!("{prefix}.{i}.w"), fan_in(rng, w[0], w[1])),
                    store.add(format!("{prefix}.{i}.b"), Tensor::zeros(1, w[1])),
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.matmul(h, p.var(w));
            h = g.add_row(h, p.var(b));
            if i + 1 < self.layers.len() {
                h = g.silu(h);
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub classes: usize,
    pub trajectory_hidden: usize,
    pub class_hidden: usize,
    pub center_hidden: usize,
    /// Meters per unit of trajectory-head output.
    pub position_scale: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            classes: 4,
            trajectory_hidden: 128,
            class_hidden: 128,
            center_hidden: 64,
            position_scale: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub log_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma1: 2.0,
            gamma2: 0.5,
            log_floor: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub position: [f64; 3],
    pub class_logits: Vec<f64>,
    pub class_probs: Vec<f64>,
}

impl Prediction {
    pub fn class(&self) -> usize {
        argmax(&self.class_probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentPrediction {
    pub center: [f64; 2],
    pub existence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub position: [f64; 3],
    pub class: usize,
    pub visual_center: Option<[f64; 2]>,
    pub visual_present: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_pos: f64,
    pub l_cls: f64,
    pub l_ts: f64,
    pub l_total: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl LossReport {
    /// Whether `l_total` is exactly the weighted sum of its parts.
    pub fn is_consistent(&self) -> bool {
        self.l_total == self.l_cls + self.gamma1 * self.l_pos + self.gamma2 * self.l_ts
    }
}

pub fn loss_total(l_cls: f64, l_pos: f64, l_ts: f64, gamma1: f64, gamma2: f64) -> LossReport {
    LossReport {
        l_pos,
        l_cls,
        l_ts,
        l_total: l_cls + gamma1 * l_pos + gamma2 * l_ts,
        gamma1,
        gamma2,
    }
}

fn check_batch(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{a} predictions for {b} targets")));
    }
    if a == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(())
}

/// Mean absolute error over all coordinates and samples.
pub fn loss_pos(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    check_batch(pred.len(), target.len())?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).abs()))
        .sum();
    Ok(s / (3 * pred.len()) as f64)
}

/// Mean cross-entropy with the log clamped at `ln(floor)`.
pub fn loss_cls(probs: &[Vec<f64>], classes: &[usize], floor: f64) -> Result<f64> {
    check_batch(probs.len(), classes.len())?;
    let mut s = 0.0;
    for (p, &c) in probs.iter().zip(classes) {
        let pc = *p
            .get(c)
            .ok_or_else(|| Error::Dimension(format!("class {c} out of range for {} classes", p.len())))?;
        s -= pc.max(floor).ln();
    }
    Ok(s / probs.len() as f64)
}

/// Binary cross-entropy on existence plus mean absolute center error, the
/// latter only for samples where the drone is visible.
pub fn loss_teacher_student(students: &[StudentPrediction], targets: &[Target], floor: f64) -> Result<f64> {
    check_batch(students.len(), targets.len())?;
    let mut s = 0.0;
    for (st, t) in students.iter().zip(targets) {
        let p = st.existence;
        s -= if t.visual_present {
            p.max(floor).ln()
        } else {
            (1.0 - p).max(floor).ln()
        };
        if t.visual_present {
            let c = t
                .visual_center
                .ok_or_else(|| Error::InvalidInput("visible target without a center".into()))?;
            s += ((st.center[0] - c[0]).abs() + (st.center[1] - c[1]).abs()) / 2.0;
        }
    }
    Ok(s / students.len() as f64)
}

pub fn pos_loss_on_graph(g: &mut Graph, position: Var, target: &[f64; 3]) -> Var {
    g.l1_loss(position, Tensor::row_vector(target.to_vec()))
}

pub fn cls_loss_on_graph(g: &mut Graph, logits: Var, class: usize, floor: f64) -> Var {
    g.cross_entropy(logits, class, floor)
}

pub fn ts_loss_on_graph(g: &mut Graph, student: &StudentOutputs, target: &Target) -> Result<Var> {
    let bce = g.bce_with_logits(student.existence_logit, if target.visual_present { 1.0 } else { 0.0 });
    if !target.visual_present {
        return Ok(bce);
    }
    let c = target
        .visual_center
        .ok_or_else(|| Error::InvalidInput("visible target without a center".into()))?;
    let l1 = g.l1_loss(student.center, Tensor::row_vector(c.to_vec()));
    Ok(g.add(bce, l1))
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `(1, 3)` meters
    pub position: Var,
    /// `(1, K)`
    pub logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StudentOutputs {
    /// `(1, 2)` normalized image coordinates
    pub center: Var,
    /// `(1, 1)`
    pub existence_logit: Var,
}

/// Trajectory and class heads reading the last (token) row.
#[derive(Clone, Debug)]
pub struct Heads {
    trajectory: Mlp,
    class: Mlp,
    position_scale: f64,
}

impl Heads {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.trajectory_hidden;
        Heads {
            trajectory: Mlp::new(store, &format!("{prefix}.trajectory"), &[d_model, h, h, 3], rng),
            class: Mlp::new(
                store,
                &format!("{prefix}.class"),
                &[d_model, cfg.class_hidden, cfg.classes],
                rng,
            ),
            position_scale: cfg.position_scale,
        }
    }

    pub fn trajectory(&self) -> &Mlp {
        &self.trajectory
    }

    pub fn class(&self) -> &Mlp {
        &self.class
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, fused: Var) -> HeadOutputs {
        let rows = g.shape(fused).0;
        let token = g.slice_rows(fused, rows - 1, 1);
        let raw = self.trajectory.forward(g, p, token);
        HeadOutputs {
            position: g.scale(raw, self.position_scale),
            logits: self.class.forward(g, p, token),
        }
    }
}

/// Reads the value-level prediction off graph outputs.
pub fn prediction(g: &Graph, out: &HeadOutputs) -> Prediction {
    let pos = g.value(out.position).data();
    let logits = g.value(out.logits).data().to_vec();
    Prediction {
        position: [pos[0], pos[1], pos[2]],
        class_probs: softmax(&logits),
        class_logits: logits,
    }
}

/// Evaluates the heads on a fused token matrix.
pub fn predict(fused: &Tensor, heads: &Heads, store: &ParamStore) -> Result<Prediction> {
    if fused.rows() == 0 {
        return Err(Error::Dimension("fused features have no token row".into()));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(fused.clone());
    let out = heads.forward(&mut g, &p, x);
    Ok(prediction(&g, &out))
}
