//! Selective state-space scan and the Mamba-style blocks built on it.
//!
//! The recurrence, per channel `e` and state index `n`:
//!
//! ```text
//! h[t] = exp(delta[t,e] * A[e,n]) * h[t-1] + Bbar[t,e,n] * u[t,e]
//! y[t,e] = sum_n C[t,n] * h[t,e,n] + D[e] * u[t,e]
//! ```
//!
//! with `h[-1] = 0`. `Bbar` is the zero-order-hold coefficient
//! `(exp(delta*A) - 1) / A * B` or the Euler shortcut `delta * B`.
//! `A` is diagonal and strictly negative, so `exp(delta*A)` lies in `(0, 1)`.

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{fan_in, uniform, Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    #[default]
    Zoh,
    Euler,
}

/// Borrowed operands of one scan, all row-major.
pub struct ScanInputs<'a, T> {
    /// `(len, channels)`
    pub u: &'a [T],
    /// `(len, channels)`, strictly positive
    pub delta: &'a [T],
    /// `(channels, state)`, strictly negative
    pub a: &'a [T],
    /// `(len, state)`
    pub b: &'a [T],
    /// `(len, state)`
    pub c: &'a [T],
    /// `(channels)`
    pub d_skip: Option<&'a [T]>,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

pub struct ScanOutput<T> {
    /// `(len, channels)`
    pub y: Vec<T>,
    /// `(len, channels, state)` hidden states; empty unless requested.
    pub states: Vec<T>,
}

impl<T: Float> ScanInputs<'_, T> {
    fn validate(&self) -> Result<()> {
        let (l, e, n) = (self.len, self.channels, self.state);
        let ok = self.u.len() == l * e
            && self.delta.len() == l * e
            && self.a.len() == e * n
            && self.b.len() == l * n
            && self.c.len() == l * n
            && self.d_skip.map_or(true, |d| d.len() == e);
        if !ok {
            return Err(Error::Dimension(format!(
                "scan operands inconsistent with len={l} channels={e} state={n}"
            )));
        }
        if let Some(bad) = self.delta.iter().position(|d| !(*d > T::zero())) {
            return Err(Error::NumericalGuard(format!(
                "time step at flat index {bad} is not positive"
            )));
        }
        if self.a.iter().any(|a| !(*a < T::zero())) {
            return Err(Error::NumericalGuard("state matrix has non-negative entries".into()));
        }
        Ok(())
    }
}

/// Input coefficient `Bbar / B` for one `(delta, a)` pair.
#[inline]
fn input_coeff<T: Float>(rule: Discretization, delta: T, a: T) -> T {
    match rule {
        Discretization::Zoh => (delta * a).exp_m1() / a,
        Discretization::Euler => delta,
    }
}

/// Sequential selective scan starting from a zero state.
pub fn scan<T: Float>(
    inp: &ScanInputs<'_, T>,
    rule: Discretization,
    keep_states: bool,
) -> Result<ScanOutput<T>> {
    inp.validate()?;
    let (l, e, n) = (inp.len, inp.channels, inp.state);
    let mut h = vec![T::zero(); e * n];
    let mut y = vec![T::zero(); l * e];
    let mut states = if keep_states {
        Vec::with_capacity(l * e * n)
    } else {
        Vec::new()
    };
    for t in 0..l {
        let b_t = &inp.b[t * n..(t + 1) * n];
        let c_t = &inp.c[t * n..(t + 1) * n];
        for ch in 0..e {
            let u = inp.u[t * e + ch];
            let dl = inp.delta[t * e + ch];
            let a_row = &inp.a[ch * n..(ch + 1) * n];
            let h_row = &mut h[ch * n..(ch + 1) * n];
            let mut acc = T::zero();
            for k in 0..n {
                let a = a_row[k];
                let abar = (dl * a).exp();
                h_row[k] = abar * h_row[k] + input_coeff(rule, dl, a) * b_t[k] * u;
                acc = acc + c_t[k] * h_row[k];
            }
            if let Some(d) = inp.d_skip {
                acc = acc + d[ch] * u;
            }
            if !acc.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite scan output at position {t}, channel {ch}"
                )));
            }
            y[t * e + ch] = acc;
        }
        if keep_states {
            states.extend_from_slice(&h);
        }
    }
    Ok(ScanOutput { y, states })
}

/// Gradients of a scan with respect to each operand (`da` is w.r.t. `A`).
pub struct ScanGrads {
    pub du: Vec<f64>,
    pub ddelta: Vec<f64>,
    pub da: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
    pub dd: Vec<f64>,
}

/// Reverse-mode adjoint of [`scan`]; `states` must come from the forward pass.
pub fn scan_backward(
    inp: &ScanInputs<'_, f64>,
    rule: Discretization,
    states: &[f64],
    gy: &[f64],
) -> ScanGrads {
    let (l, e, n) = (inp.len, inp.channels, inp.state);
    debug_assert_eq!(states.len(), l * e * n);
    let mut g = ScanGrads {
        du: vec![0.0; l * e],
        ddelta: vec![0.0; l * e],
        da: vec![0.0; e * n],
        db: vec![0.0; l * n],
        dc: vec![0.0; l * n],
        dd: vec![0.0; e],
    };
    let mut dh = vec![0.0; e * n];
    for t in (0..l).rev() {
        let b_t = &inp.b[t * n..(t + 1) * n];
        let c_t = &inp.c[t * n..(t + 1) * n];
        let h_t = &states[t * e * n..(t + 1) * e * n];
        for ch in 0..e {
            let gy_te = gy[t * e + ch];
            let u = inp.u[t * e + ch];
            let dl = inp.delta[t * e + ch];
            let mut du = 0.0;
            let mut ddl = 0.0;
            if let Some(d) = inp.d_skip {
                g.dd[ch] += gy_te * u;
                du += gy_te * d[ch];
            }
            for k in 0..n {
                let idx = ch * n + k;
                let h = h_t[idx];
                g.dc[t * n + k] += gy_te * h;
                let dh_tot = dh[idx] + gy_te * c_t[k];
                let a = inp.a[idx];
                let abar = (dl * a).exp();
                let h_prev = if t > 0 { states[(t - 1) * e * n + idx] } else { 0.0 };

                let g_abar = dh_tot * h_prev;
                ddl += g_abar * abar * a;
                g.da[idx] += g_abar * abar * dl;

                let g_coeff = dh_tot * u * b_t[k];
                match rule {
                    Discretization::Zoh => {
                        let em1 = (dl * a).exp_m1();
                        let q = em1 / a;
                        du += dh_tot * q * b_t[k];
                        g.db[t * n + k] += dh_tot * u * q;
                        ddl += g_coeff * abar;
                        g.da[idx] += g_coeff * (abar * dl * a - em1) / (a * a);
                    }
                    Discretization::Euler => {
                        du += dh_tot * dl * b_t[k];
                        g.db[t * n + k] += dh_tot * u * dl;
                        ddl += g_coeff;
                    }
                }
                dh[idx] = dh_tot * abar;
            }
            g.du[t * e + ch] += du;
            g.ddelta[t * e + ch] += ddl;
        }
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub dt_rank: usize,
    pub rule: Discretization,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_model: 96,
            d_state: 16,
            expand: 2,
            conv_kernel: 4,
            dt_rank: 6,
            rule: Discretization::Zoh,
        }
    }
}

impl SsmConfig {
    pub fn inner(&self) -> usize {
        self.d_model * self.expand
    }
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Input-dependent SSM: derives `delta`, `B`, `C` from each token and scans.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    x_proj: ParamId,
    dt_proj: ParamId,
    dt_bias: ParamId,
    a_log: ParamId,
    d_skip: ParamId,
    dt_rank: usize,
    d_state: usize,
    rule: Discretization,
}

impl SelectiveSsm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &SsmConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let inner = cfg.inner();
        let x_proj = store.add(
            format!("{prefix}.x_proj"),
            fan_in(rng, inner, cfg.dt_rank + 2 * cfg.d_state),
        );
        let dt_proj = store.add(
            format!("{prefix}.dt_proj"),
            uniform(rng, cfg.dt_rank, inner, 1.0 / (cfg.dt_rank as f64).sqrt()),
        );
        let (dt_min, dt_max) = (1e-3f64, 1e-1f64);
        let dt_bias = Tensor::from_fn(1, inner, |_, _| {
            let dt = (rng.gen_range(0.0..1.0) * (dt_max.ln() - dt_min.ln()) + dt_min.ln()).exp();
            inv_softplus(dt)
        });
        let dt_bias = store.add(format!("{prefix}.dt_bias"), dt_bias);
        // A = -exp(a_log) = -(1..=d_state) per channel
        let a_log = Tensor::from_fn(inner, cfg.d_state, |_, k| ((k + 1) as f64).ln());
        let a_log = store.add(format!("{prefix}.a_log"), a_log);
        let d_skip = store.add(format!("{prefix}.d_skip"), Tensor::full(1, inner, 1.0));
        SelectiveSsm {
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            d_skip,
            dt_rank: cfg.dt_rank,
            d_state: cfg.d_state,
            rule: cfg.rule,
        }
    }

    /// `x` is `(len, inner)`; returns `(len, inner)`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let dbc = g.matmul(x, p.var(self.x_proj));
        let dt_low = g.slice_cols(dbc, 0, self.dt_rank);
        let b = g.slice_cols(dbc, self.dt_rank, self.d_state);
        let c = g.slice_cols(dbc, self.dt_rank + self.d_state, self.d_state);
        let dt = g.matmul(dt_low, p.var(self.dt_proj));
        let dt = g.add_row(dt, p.var(self.dt_bias));
        let delta = g.softplus(dt);
        g.selective_scan(
            x,
            delta,
            p.var(self.a_log),
            b,
            c,
            p.var(self.d_skip),
            self.rule,
        )
    }
}

/// Convolution + SSM path of one scan direction.
#[derive(Clone, Debug)]
struct ScanBranch {
    conv_w: ParamId,
    conv_b: ParamId,
    ssm: SelectiveSsm,
}

impl ScanBranch {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &SsmConfig, rng: &mut impl Rng) -> Self {
        let inner = cfg.inner();
        let bound = 1.0 / (cfg.conv_kernel as f64).sqrt();
        let conv_w = store.add(
            format!("{prefix}.conv_w"),
            uniform(rng, cfg.conv_kernel, inner, bound),
        );
        let conv_b = store.add(format!("{prefix}.conv_b"), uniform(rng, 1, inner, bound));
        let ssm = SelectiveSsm::new(store, prefix, cfg, rng);
        ScanBranch {
            conv_w,
            conv_b,
            ssm,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let xc = g.causal_conv(x, p.var(self.conv_w), p.var(self.conv_b));
        let xc = g.silu(xc);
        self.ssm.forward(g, p, xc)
    }
}

/// Residual Mamba block. Unidirectional blocks scan first row to last;
/// bidirectional blocks add a second branch over the reversed sequence.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    norm: ParamId,
    in_proj: ParamId,
    out_proj: ParamId,
    forward_branch: ScanBranch,
    backward_branch: Option<ScanBranch>,
    inner: usize,
}

impl MambaBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &SsmConfig,
        bidirectional: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let inner = cfg.inner();
        let norm = store.add(format!("{prefix}.norm"), Tensor::full(1, cfg.d_model, 1.0));
        let in_proj = store.add(format!("{prefix}.in_proj"), fan_in(rng, cfg.d_model, 2 * inner));
        let forward_branch = ScanBranch::new(store, &format!("{prefix}.fwd"), cfg, rng);
        let backward_branch =
            bidirectional.then(|| ScanBranch::new(store, &format!("{prefix}.bwd"), cfg, rng));
        let out_proj = store.add(format!("{prefix}.out_proj"), fan_in(rng, inner, cfg.d_model));
        MambaBlock {
            norm,
            in_proj,
            out_proj,
            forward_branch,
            backward_branch,
            inner,
        }
    }

    pub fn out_proj(&self) -> ParamId {
        self.out_proj
    }

    /// `x` is `(len, d_model)`; output has the same shape.
    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        if g.shape(x).0 == 0 {
            return Err(Error::Dimension("mamba block needs at least one row".into()));
        }
        let xn = g.rms_norm(x, p.var(self.norm), 1e-6);
        let xz = g.matmul(xn, p.var(self.in_proj));
        let xi = g.slice_cols(xz, 0, self.inner);
        let z = g.slice_cols(xz, self.inner, self.inner);
        let mut y = self.forward_branch.forward(g, p, xi)?;
        if let Some(bwd) = &self.backward_branch {
            let xr = g.reverse_rows(xi);
            let yr = bwd.forward(g, p, xr)?;
            let yb = g.reverse_rows(yr);
            y = g.add(y, yb);
        }
        let gate = g.silu(z);
        let y = g.mul(y, gate);
        let out = g.matmul(y, p.var(self.out_proj));
        Ok(g.add(x, out))
    }
}

/// `depth` blocks followed by a final RMS norm.
#[derive(Clone, Debug)]
pub struct MambaStack {
    blocks: Vec<MambaBlock>,
    norm_f: ParamId,
}

impl MambaStack {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &SsmConfig,
        depth: usize,
        bidirectional: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| MambaBlock::new(store, &format!("{prefix}.blocks.{i}"), cfg, bidirectional, rng))
            .collect();
        let norm_f = store.add(format!("{prefix}.norm_f"), Tensor::full(1, cfg.d_model, 1.0));
        MambaStack { blocks, norm_f }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[MambaBlock] {
        &self.blocks
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
        }
        Ok(g.rms_norm(h, p.var(self.norm_f), 1e-6))
    }
}

/// Temporal and spectral block stacks of the audio encoder.
#[derive(Clone, Debug)]
pub struct AudioMamba {
    pub temporal: MambaStack,
    pub spectral: MambaStack,
}

impl AudioMamba {
    pub fn new(store: &mut ParamStore, cfg: &SsmConfig, depth: usize, rng: &mut impl Rng) -> Self {
        AudioMamba {
            temporal: MambaStack::new(store, "tmamba", cfg, depth, false, rng),
            spectral: MambaStack::new(store, "smamba", cfg, depth, false, rng),
        }
    }

    /// Returns `(psi_t, psi_s)`; each stack scans its embedding first row to last.
    pub fn forward(&self, g: &mut Graph, p: &Binding, temporal: Var, spectral: Var) -> Result<(Var, Var)> {
        let psi_t = self.temporal.forward(g, p, temporal)?;
        let psi_s = self.spectral.forward(g, p, spectral)?;
        Ok((psi_t, psi_s))
    }
}
