//! Multi-head cross-attention, the two-stage residual enhancement module and
//! the existence-weighted audio/visual fusion built from it.
//!
//! ```text
//! q2       = Attn(M Wq1, L Wk1, L Wv1)
//! Phi(M,L) = M + Attn(q2, L Wk2, L Wv2) W
//! F        = Phi_a(Psi_T, Psi_S) + Phi_v(Phi_a(Psi_T, Psi_S), alpha * Upsilon)
//! ```
//!
//! Every projection is bias-free, so `Phi(M, 0) == M` bit for bit. Attention
//! logits are divided by `sqrt(d_k)` using the full key width.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{fan_in, Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

static ALPHA_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times an out-of-range `alpha` has been clamped in this process.
pub fn alpha_clamp_count() -> u64 {
    ALPHA_CLAMPS.load(Ordering::Relaxed)
}

/// Clamps `alpha` into `[0, 1]`, counting and logging every correction.
/// NaN maps to 0.
pub fn clamp_alpha(alpha: f64) -> f64 {
    if (0.0..=1.0).contains(&alpha) {
        return alpha;
    }
    ALPHA_CLAMPS.fetch_add(1, Ordering::Relaxed);
    log::warn!("fusion weight {alpha} outside [0, 1], clamped");
    if alpha > 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Multi-head scaled dot-product attention over already projected operands.
/// `q` is `(Jq, d_k)`, `k` and `v` are `(Jk, d_k)`.
pub fn attention_on_graph(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (_, dq) = g.shape(q);
    let (jk, dk) = g.shape(k);
    let (jv, dv) = g.shape(v);
    if heads == 0 || dk % heads != 0 {
        return Err(Error::Config(format!("key width {dk} is not divisible by {heads} heads")));
    }
    if dq != dk || dv != dk || jk != jv {
        return Err(Error::Fusion(format!(
            "attention operands disagree: q width {dq}, k {jk}x{dk}, v {jv}x{dv}"
        )));
    }
    let width = dk / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * width, width),
                g.slice_cols(k, h * width, width),
                g.slice_cols(v, h * width, width),
            )
        };
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt);
        let logits = g.scale(logits, scale);
        let weights = g.softmax_rows(logits);
        outs.push(g.matmul(weights, vh));
    }
    Ok(if heads == 1 { outs[0] } else { g.concat_cols(&outs) })
}

pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = attention_on_graph(&mut g, q, k, v, heads)?;
    Ok(g.value(out).clone())
}

/// Graph handles of the six enhancement-module matrices.
#[derive(Clone, Copy, Debug)]
pub struct FemVars {
    pub wq1: Var,
    pub wk1: Var,
    pub wv1: Var,
    pub wk2: Var,
    pub wv2: Var,
    pub w: Var,
}

pub fn fem_on_graph(g: &mut Graph, m: Var, l: Var, w: &FemVars, heads: usize) -> Result<Var> {
    let (jm, dm) = g.shape(m);
    let (_, dl) = g.shape(l);
    if dl != dm {
        return Err(Error::Fusion(format!(
            "primary width {dm} and auxiliary width {dl} differ"
        )));
    }
    for (name, v) in [("Wq1", w.wq1), ("Wk1", w.wk1), ("Wv1", w.wv1), ("Wk2", w.wk2), ("Wv2", w.wv2)] {
        if g.shape(v).0 != dm {
            return Err(Error::Fusion(format!("{name} has {} rows, expected {dm}", g.shape(v).0)));
        }
    }
    if g.shape(w.w) != (g.shape(w.wq1).1, dm) {
        return Err(Error::Fusion(format!("output projection has shape {:?}", g.shape(w.w))));
    }
    let q1 = g.matmul(m, w.wq1);
    let k1 = g.matmul(l, w.wk1);
    let v1 = g.matmul(l, w.wv1);
    let q2 = attention_on_graph(g, q1, k1, v1, heads)?;
    let k2 = g.matmul(l, w.wk2);
    let v2 = g.matmul(l, w.wv2);
    let a2 = attention_on_graph(g, q2, k2, v2, heads)?;
    let proj = g.matmul(a2, w.w);
    debug_assert_eq!(g.shape(proj), (jm, dm));
    Ok(g.add(m, proj))
}

/// Value-level enhancement-module weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FemParams {
    pub wq1: Tensor,
    pub wk1: Tensor,
    pub wv1: Tensor,
    pub wk2: Tensor,
    pub wv2: Tensor,
    pub w: Tensor,
    pub heads: usize,
}

impl FemParams {
    pub fn random(rng: &mut impl Rng, d_m: usize, d_k: usize, heads: usize) -> Self {
        FemParams {
            wq1: fan_in(rng, d_m, d_k),
            wk1: fan_in(rng, d_m, d_k),
            wv1: fan_in(rng, d_m, d_k),
            wk2: fan_in(rng, d_m, d_k),
            wv2: fan_in(rng, d_m, d_k),
            w: fan_in(rng, d_k, d_m),
            heads,
        }
    }

    fn on_graph(&self, g: &mut Graph) -> FemVars {
        FemVars {
            wq1: g.constant(self.wq1.clone()),
            wk1: g.constant(self.wk1.clone()),
            wv1: g.constant(self.wv1.clone()),
            wk2: g.constant(self.wk2.clone()),
            wv2: g.constant(self.wv2.clone()),
            w: g.constant(self.w.clone()),
        }
    }
}

pub fn fem(m: &Tensor, l: &Tensor, params: &FemParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let (mv, lv) = (g.constant(m.clone()), g.constant(l.clone()));
    let w = params.on_graph(&mut g);
    let out = fem_on_graph(&mut g, mv, lv, &w, params.heads)?;
    Ok(g.value(out).clone())
}

fn aam_on_graph(
    g: &mut Graph,
    psi_t: Var,
    psi_s: Var,
    upsilon: Var,
    alpha: f64,
    audio: &FemVars,
    visual: &FemVars,
    heads: usize,
    outer_residual: bool,
) -> Result<Var> {
    let alpha = clamp_alpha(alpha);
    let phi_a = fem_on_graph(g, psi_t, psi_s, audio, heads)?;
    let scaled = g.scale(upsilon, alpha);
    let phi_v = fem_on_graph(g, phi_a, scaled, visual, heads)?;
    Ok(if outer_residual { g.add(phi_a, phi_v) } else { phi_v })
}

/// Existence-weighted fusion on tensors; `alpha` outside `[0, 1]` is clamped.
pub fn aam_fuse(
    psi_t: &Tensor,
    psi_s: &Tensor,
    upsilon: &Tensor,
    alpha: f64,
    audio: &FemParams,
    visual: &FemParams,
    outer_residual: bool,
) -> Result<Tensor> {
    if audio.heads != visual.heads {
        return Err(Error::Config("audio and visual stages use different head counts".into()));
    }
    let mut g = Graph::new();
    let (t, s, u) = (
        g.constant(psi_t.clone()),
        g.constant(psi_s.clone()),
        g.constant(upsilon.clone()),
    );
    let (a, v) = (audio.on_graph(&mut g), visual.on_graph(&mut g));
    let out = aam_on_graph(&mut g, t, s, u, alpha, &a, &v, audio.heads, outer_residual)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub heads: usize,
    /// Attention width `d_k`; the model width `d_m` is the encoder width.
    pub d_k: usize,
    /// Keep the first term of the fused sum.
    pub aam_outer_residual: bool,
    pub alpha_source: AlphaSource,
    /// Used when `alpha_source = "fixed"`.
    pub fixed_alpha: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            heads: 6,
            d_k: 96,
            aam_outer_residual: true,
            alpha_source: AlphaSource::Student,
            fixed_alpha: 1.0,
        }
    }
}

/// Where the visual weight comes from during training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaSource {
    /// Detached existence probability of the visual student head.
    Student,
    /// Ground-truth visibility (training only; falls back to the student at
    /// evaluation time).
    Teacher,
    Fixed,
}

/// Trainable enhancement module.
#[derive(Clone, Debug)]
pub struct Fem {
    ids: [ParamId; 6],
    heads: usize,
}

impl Fem {
    pub fn new(store: &mut ParamStore, prefix: &str, d_m: usize, d_k: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let mut proj = |name: &str, rows: usize, cols: usize| {
            store.add(format!("{prefix}.{name}"), fan_in(rng, rows, cols))
        };
        let ids = [
            proj("wq1", d_m, d_k),
            proj("wk1", d_m, d_k),
            proj("wv1", d_m, d_k),
            proj("wk2", d_m, d_k),
            proj("wv2", d_m, d_k),
            proj("w", d_k, d_m),
        ];
        Fem { ids, heads }
    }

    pub fn vars(&self, p: &Binding) -> FemVars {
        let [wq1, wk1, wv1, wk2, wv2, w] = self.ids.map(|id| p.var(id));
        FemVars {
            wq1,
            wk1,
            wv1,
            wk2,
            wv2,
            w,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, m: Var, l: Var) -> Result<Var> {
        fem_on_graph(g, m, l, &self.vars(p), self.heads)
    }

    pub fn params(&self, store: &ParamStore) -> FemParams {
        let t = |i: usize| store.get(self.ids[i]).clone();
        FemParams {
            wq1: t(0),
            wk1: t(1),
            wv1: t(2),
            wk2: t(3),
            wv2: t(4),
            w: t(5),
            heads: self.heads,
        }
    }
}

/// Trainable audio/visual fusion: one audio-stage and one visual-stage module.
#[derive(Clone, Debug)]
pub struct Aam {
    pub audio: Fem,
    pub visual: Fem,
    outer_residual: bool,
}

impl Aam {
    pub fn new(store: &mut ParamStore, prefix: &str, d_m: usize, cfg: &FusionConfig, rng: &mut impl Rng) -> Self {
        Aam {
            audio: Fem::new(store, &format!("{prefix}.audio"), d_m, cfg.d_k, cfg.heads, rng),
            visual: Fem::new(store, &format!("{prefix}.visual"), d_m, cfg.d_k, cfg.heads, rng),
            outer_residual: cfg.aam_outer_residual,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, psi_t: Var, psi_s: Var, upsilon: Var, alpha: f64) -> Result<Var> {
        let (a, v) = (self.audio.vars(p), self.visual.vars(p));
        aam_on_graph(g, psi_t, psi_s, upsilon, alpha, &a, &v, self.audio.heads, self.outer_residual)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fd;
    use crate::params::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_values_give_zero_output() {
        let mut r = rng(1);
        let q = uniform(&mut r, 3, 6, 2.0);
        let k = uniform(&mut r, 5, 6, 2.0);
        let out = attention(&q, &k, &Tensor::zeros(5, 6), 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_softmax_selects_the_matching_value() {
        // d_k = 2, scale 1/sqrt(2). Query matches key 0 with logit 40/sqrt(2);
        // key 1 gets -40/sqrt(2).
        let q = Tensor::from_vec(1, 2, vec![20.0, 20.0]).unwrap();
        let k = Tensor::from_vec(2, 2, vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let v = Tensor::from_vec(2, 2, vec![3.0, -2.0, 100.0, 100.0]).unwrap();
        let out = attention(&q, &k, &v, 1).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-9);
        assert!((out.get(0, 1) + 2.0).abs() < 1e-9);
    }

    #[test]
    fn head_count_must_divide_key_width() {
        let t = Tensor::zeros(2, 6);
        assert!(matches!(attention(&t, &t, &t, 4), Err(Error::Config(_))));
    }

    #[test]
    fn zero_auxiliary_is_exact_identity() {
        let mut r = rng(2);
        let params = FemParams::random(&mut r, 12, 12, 3);
        let m = uniform(&mut r, 5, 12, 3.0);
        assert_eq!(fem(&m, &Tensor::zeros(7, 12), &params).unwrap(), m);
    }

    /// Two-stage attention worked by hand for n=1, d_m=d_k=2, two tokens.
    #[test]
    fn hand_computed_two_stage_attention() {
        let id = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let params = FemParams {
            wq1: id.clone(),
            wk1: id.clone(),
            wv1: id.clone(),
            wk2: Tensor::zeros(2, 2),
            wv2: id.clone(),
            w: id.scale(2.0),
            heads: 1,
        };
        let m = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // Stage 2 keys are zero, so its weights are uniform: every row of the
        // second attention is the mean value row (2, 3), whatever q2 is.
        // Output = M + 2 * (2, 3).
        let out = fem(&m, &l, &params).unwrap();
        let expect = [5.0, 6.0, 4.0, 7.0];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        // Stage 1 by hand with nonzero stage-2 keys. Row 0 of M is (1, 0):
        // logits (1, 3)/sqrt(2), weights s = softmax; q2 row 0 = s0*(1,2) + s1*(3,4).
        let params = FemParams {
            wk2: id.clone(),
            w: id.clone(),
            ..params
        };
        let sm = |a: f64, b: f64| {
            let (ea, eb) = (a.exp(), b.exp());
            (ea / (ea + eb), eb / (ea + eb))
        };
        let r2 = 2f64.sqrt();
        let mut expect = Vec::new();
        for row in [[1.0, 0.0], [0.0, 1.0]] {
            let (s0, s1) = sm(row[0] * 1.0 / r2 + row[1] * 2.0 / r2, row[0] * 3.0 / r2 + row[1] * 4.0 / r2);
            let q2 = [s0 * 1.0 + s1 * 3.0, s0 * 2.0 + s1 * 4.0];
            let (t0, t1) = sm((q2[0] + 2.0 * q2[1]) / r2, (3.0 * q2[0] + 4.0 * q2[1]) / r2);
            expect.push(row[0] + t0 * 1.0 + t1 * 3.0);
            expect.push(row[1] + t0 * 2.0 + t1 * 4.0);
        }
        let out = fem(&m, &l, &params).unwrap();
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn auxiliary_null_space_perturbation_changes_nothing() {
        let mut r = rng(3);
        let mut params = FemParams::random(&mut r, 4, 4, 2);
        // Zero the last input row of every L-projection; e_3 is then in their
        // common null space.
        for w in [&mut params.wk1, &mut params.wv1, &mut params.wk2, &mut params.wv2] {
            w.row_mut(3).iter_mut().for_each(|v| *v = 0.0);
        }
        let m = uniform(&mut r, 3, 4, 1.0);
        let l = uniform(&mut r, 5, 4, 1.0);
        let mut l2 = l.clone();
        for j in 0..5 {
            l2.set(j, 3, l2.get(j, 3) + 7.5 * j as f64);
        }
        let a = fem(&m, &l, &params).unwrap();
        let b = fem(&m, &l2, &params).unwrap();
        assert_eq!(a, b);
    }

    fn aam_fixture(seed: u64) -> (Tensor, Tensor, Tensor, FemParams, FemParams) {
        let mut r = rng(seed);
        let psi_t = uniform(&mut r, 5, 6, 1.0);
        let psi_s = uniform(&mut r, 5, 6, 1.0);
        let ups = uniform(&mut r, 4, 6, 1.0);
        let a = FemParams::random(&mut r, 6, 6, 2);
        let v = FemParams::random(&mut r, 6, 6, 2);
        (psi_t, psi_s, ups, a, v)
    }

    #[test]
    fn alpha_zero_doubles_the_audio_term() {
        let (t, s, u, a, v) = aam_fixture(4);
        let phi = fem(&t, &s, &a).unwrap();
        let f = aam_fuse(&t, &s, &u, 0.0, &a, &v, true).unwrap();
        assert_eq!(f, phi.scale(2.0));
    }

    #[test]
    fn alpha_one_matches_straight_line_evaluation() {
        let (t, s, u, a, v) = aam_fixture(5);
        let phi = fem(&t, &s, &a).unwrap();
        let mut expect = fem(&phi, &u, &v).unwrap();
        expect.add_assign(&phi);
        let f = aam_fuse(&t, &s, &u, 1.0, &a, &v, true).unwrap();
        assert!(f.data().iter().zip(expect.data()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn alpha_inside_equals_prescaled_input() {
        let (t, s, u, a, v) = aam_fixture(6);
        let x = aam_fuse(&t, &s, &u, 0.5, &a, &v, true).unwrap();
        let y = aam_fuse(&t, &s, &u.scale(0.5), 1.0, &a, &v, true).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn out_of_range_alpha_is_clamped_and_counted() {
        let (t, s, u, a, v) = aam_fixture(7);
        let before = alpha_clamp_count();
        let hi = aam_fuse(&t, &s, &u, 1.7, &a, &v, true).unwrap();
        let lo = aam_fuse(&t, &s, &u, -0.2, &a, &v, true).unwrap();
        assert!(alpha_clamp_count() >= before + 2);
        assert_eq!(hi, aam_fuse(&t, &s, &u, 1.0, &a, &v, true).unwrap());
        assert_eq!(lo, aam_fuse(&t, &s, &u, 0.0, &a, &v, true).unwrap());
    }

    #[test]
    fn single_term_variant_drops_the_outer_residual() {
        let (t, s, u, a, v) = aam_fixture(8);
        let phi = fem(&t, &s, &a).unwrap();
        let f = aam_fuse(&t, &s, &u, 0.0, &a, &v, false).unwrap();
        assert_eq!(f, phi);
    }

    #[test]
    fn fem_and_aam_gradients_match_finite_differences() {
        let mut r = rng(9);
        let m = uniform(&mut r, 3, 4, 1.0);
        let l = uniform(&mut r, 4, 4, 1.0);
        let mut inputs = vec![m, l];
        for _ in 0..6 {
            inputs.push(uniform(&mut r, 4, 4, 0.8));
        }
        let err = fd::check(&inputs, |g, v| {
            let w = FemVars {
                wq1: v[2],
                wk1: v[3],
                wv1: v[4],
                wk2: v[5],
                wv2: v[6],
                w: v[7],
            };
            let out = fem_on_graph(g, v[0], v[1], &w, 2).unwrap();
            let sq = g.mul(out, out);
            g.sum(sq)
        });
        assert!(err < 1e-4, "fem relative error {err}");

        let mut inputs = vec![
            uniform(&mut r, 3, 4, 1.0),
            uniform(&mut r, 3, 4, 1.0),
            uniform(&mut r, 5, 4, 1.0),
        ];
        for _ in 0..12 {
            inputs.push(uniform(&mut r, 4, 4, 0.8));
        }
        let err = fd::check(&inputs, |g, v| {
            let fv = |o: usize| FemVars {
                wq1: v[o],
                wk1: v[o + 1],
                wv1: v[o + 2],
                wk2: v[o + 3],
                wv2: v[o + 4],
                w: v[o + 5],
            };
            let (a, b) = (fv(3), fv(9));
            let out = aam_on_graph(g, v[0], v[1], v[2], 0.6, &a, &b, 2, true).unwrap();
            let sq = g.mul(out, out);
            g.sum(sq)
        });
        assert!(err < 1e-4, "aam relative error {err}");
    }
}
