//! Multi-channel audio to log-mel spectrograms, patch sequences and patch
//! embeddings.
//!
//! Spectrogram layout is `[channel][frame][mel]`, row-major. Patches are
//! flattened channel-major: a temporal patch of width `w` stores element
//! `(c, t, s)` at `c*w*S + t*S + s`; a spectral patch of height `h` stores
//! `(c, t, s)` at `c*R*h + t*h + s`. Temporal patches run left to right over
//! frames, spectral patches top to bottom over mel bins.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{fan_in, normal, Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Raw multi-channel samples, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioWindow {
    channels: usize,
    sample_rate: u32,
    samples: Vec<f32>,
}

impl AudioWindow {
    pub fn new(channels: usize, sample_rate: u32, samples: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidInput("audio needs at least one channel".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.len() % channels != 0 {
            return Err(Error::InvalidInput(format!(
                "{} samples do not split evenly over {channels} channels",
                samples.len()
            )));
        }
        Ok(AudioWindow {
            channels,
            sample_rate,
            samples,
        })
    }

    pub fn from_channels(sample_rate: u32, channels: &[Vec<f32>]) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidInput("channels differ in length".into()));
        }
        Self::new(channels.len(), sample_rate, channels.concat())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.len();
        &self.samples[c * n..(c + 1) * n]
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    /// Seconds of audio per frame sample.
    pub window_seconds: f64,
    pub n_fft: usize,
    pub hop: usize,
    /// Temporal frames `R`.
    pub frames: usize,
    /// Mel bins `S`.
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            sample_rate: 48_000,
            window_seconds: 1.0,
            n_fft: 1024,
            hop: 745,
            frames: 64,
            n_mels: 64,
            f_min: 50.0,
            f_max: 16_000.0,
            log_floor: 1e-10,
        }
    }
}

impl SpectrogramConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_seconds * self.sample_rate as f64).round() as usize
    }

    /// Samples consumed by `frames` hops of an `n_fft` frame.
    pub fn required_samples(&self) -> usize {
        self.hop * (self.frames.saturating_sub(1)) + self.n_fft
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.hop == 0 || self.frames == 0 || self.n_mels == 0 {
            return Err(Error::Config("spectrogram sizes must be positive".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::Config(format!(
                "mel range [{}, {}] must lie within [0, {nyquist}]",
                self.f_min, self.f_max
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        if self.required_samples() > self.window_samples() {
            return Err(Error::Config(format!(
                "hop {} x {} frames + {} exceeds the {}-sample window",
                self.hop,
                self.frames - 1,
                self.n_fft,
                self.window_samples()
            )));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_centers(cfg: &SpectrogramConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    (1..=cfg.n_mels).map(|i| mel_to_hz(lo + step * i as f64)).collect()
}

/// Triangular HTK-style filterbank, `(n_mels, n_fft/2 + 1)`, peak weight 1.
/// A filter narrower than one FFT bin falls back to its nearest bin.
pub fn mel_filterbank(cfg: &SpectrogramConfig) -> Tensor {
    let n_freqs = cfg.n_fft / 2 + 1;
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect();
    let mut fb = Tensor::zeros(cfg.n_mels, n_freqs);
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = fb.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w == 0.0) {
            let k = ((center / bin_hz).round() as usize).min(n_freqs - 1);
            row[k] = 1.0;
        }
    }
    fb
}

/// `[channels x frames x mels]` log-mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    channels: usize,
    frames: usize,
    mels: usize,
    values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(channels: usize, frames: usize, mels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || frames == 0 || mels == 0 {
            return Err(Error::InvalidInput("spectrogram dimensions must be positive".into()));
        }
        if values.len() != channels * frames * mels {
            return Err(Error::Dimension(format!(
                "{} values for a {channels}x{frames}x{mels} spectrogram",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("spectrogram has non-finite values".into()));
        }
        Ok(MelSpectrogram {
            channels,
            frames,
            mels,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn mels(&self) -> usize {
        self.mels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.frames, self.mels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, s: usize) -> f64 {
        self.values[(c * self.frames + t) * self.mels + s]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> MelSpectrogram {
        MelSpectrogram {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Reusable FFT plan, window and filterbank for one [`SpectrogramConfig`].
pub struct MelExtractor {
    cfg: SpectrogramConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    window_energy: f64,
    filterbank: Tensor,
}

impl MelExtractor {
    pub fn new(cfg: &SpectrogramConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_fft;
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let window_energy = window.iter().map(|w| w * w).sum();
        Ok(MelExtractor {
            cfg: cfg.clone(),
            fft: FftPlanner::new().plan_fft_forward(n),
            window,
            window_energy,
            filterbank: mel_filterbank(cfg),
        })
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Tensor {
        &self.filterbank
    }

    /// Power spectrum of one Hann-windowed frame, normalised by window energy.
    pub fn power_spectrum(&self, frame: &[f32]) -> Vec<f64> {
        let n = self.cfg.n_fft;
        let mut buf: Vec<Complex<f64>> = frame[..n]
            .iter()
            .zip(&self.window)
            .map(|(&x, &w)| Complex::new(x as f64 * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf[..n / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr() / self.window_energy)
            .collect()
    }

    pub fn compute(&self, window: &AudioWindow) -> Result<MelSpectrogram> {
        let cfg = &self.cfg;
        if window.sample_rate() != cfg.sample_rate {
            return Err(Error::InvalidInput(format!(
                "audio at {} Hz, spectrogram configured for {} Hz",
                window.sample_rate(),
                cfg.sample_rate
            )));
        }
        if window.len() < cfg.n_fft {
            return Err(Error::InputTooShort(format!(
                "{} samples per channel, one frame needs {}",
                window.len(),
                cfg.n_fft
            )));
        }
        if window.len() < cfg.required_samples() {
            return Err(Error::InputTooShort(format!(
                "{} samples per channel, {} frames need {}",
                window.len(),
                cfg.frames,
                cfg.required_samples()
            )));
        }
        if window.samples().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("audio contains non-finite samples".into()));
        }
        let (r, s) = (cfg.frames, cfg.n_mels);
        let mut values = Vec::with_capacity(window.channels() * r * s);
        for c in 0..window.channels() {
            let x = window.channel(c);
            for t in 0..r {
                let p = self.power_spectrum(&x[t * cfg.hop..]);
                for m in 0..s {
                    let e: f64 = self.filterbank.row(m).iter().zip(&p).map(|(w, v)| w * v).sum();
                    values.push(e.max(cfg.log_floor).ln());
                }
            }
        }
        MelSpectrogram::new(window.channels(), r, s, values)
    }
}

pub fn compute_melspectrogram(window: &AudioWindow, cfg: &SpectrogramConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(cfg)?.compute(window)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchAxis {
    Temporal,
    Spectral,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub axis: PatchAxis,
    /// `(J, P_dim)`
    pub patches: Tensor,
}

impl PatchSequence {
    pub fn count(&self) -> usize {
        self.patches.rows()
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.cols()
    }
}

/// Non-overlapping split along `axis`; `width` is `w` (frames) for temporal
/// patches and `h` (mel bins) for spectral ones.
pub fn split_patches(spec: &MelSpectrogram, axis: PatchAxis, width: usize) -> Result<PatchSequence> {
    let [z, r, s] = spec.shape();
    let extent = match axis {
        PatchAxis::Temporal => r,
        PatchAxis::Spectral => s,
    };
    if width == 0 || extent % width != 0 {
        return Err(Error::Patching(format!(
            "{axis:?} extent {extent} is not divisible by patch size {width}"
        )));
    }
    let j = extent / width;
    let patches = match axis {
        PatchAxis::Temporal => Tensor::from_fn(j, z * width * s, |p, k| {
            let (c, rem) = (k / (width * s), k % (width * s));
            spec.get(c, p * width + rem / s, rem % s)
        }),
        PatchAxis::Spectral => Tensor::from_fn(j, z * r * width, |p, k| {
            let (c, rem) = (k / (r * width), k % (r * width));
            spec.get(c, rem / width, p * width + rem % width)
        }),
    };
    Ok(PatchSequence { axis, patches })
}

/// Inverse of [`split_patches`].
pub fn reconstruct(seq: &PatchSequence, channels: usize, frames: usize, mels: usize) -> Result<MelSpectrogram> {
    let j = seq.count();
    let mut values = vec![0.0; channels * frames * mels];
    match seq.axis {
        PatchAxis::Temporal => {
            if j == 0 || frames % j != 0 || seq.patch_dim() != channels * (frames / j) * mels {
                return Err(Error::Patching("temporal patches do not tile the spectrogram".into()));
            }
            let w = frames / j;
            for p in 0..j {
                for (k, v) in seq.patches.row(p).iter().enumerate() {
                    let (c, rem) = (k / (w * mels), k % (w * mels));
                    values[(c * frames + p * w + rem / mels) * mels + rem % mels] = *v;
                }
            }
        }
        PatchAxis::Spectral => {
            if j == 0 || mels % j != 0 || seq.patch_dim() != channels * frames * (mels / j) {
                return Err(Error::Patching("spectral patches do not tile the spectrogram".into()));
            }
            let h = mels / j;
            for p in 0..j {
                for (k, v) in seq.patches.row(p).iter().enumerate() {
                    let (c, rem) = (k / (frames * h), k % (frames * h));
                    values[(c * frames + rem / h) * mels + p * h + rem % h] = *v;
                }
            }
        }
    }
    MelSpectrogram::new(channels, frames, mels, values)
}

/// Value-level embedding parameters: projection `(P_dim, D)`, learnable token
/// `(1, D)` and positional table `(J+1, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub projection: Tensor,
    pub token: Tensor,
    pub positional: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    /// `(J+1, D)`; the learnable token is the last row.
    pub tokens: Tensor,
}

fn check_embedding_shapes(j: usize, p_dim: usize, w: (usize, usize), t: (usize, usize), pos: (usize, usize)) -> Result<()> {
    let d = w.1;
    if w.0 != p_dim || t != (1, d) || pos != (j + 1, d) {
        return Err(Error::Dimension(format!(
            "embedding expects W ({p_dim}, D), token (1, D), positions ({}, D); got {w:?}, {t:?}, {pos:?}",
            j + 1
        )));
    }
    Ok(())
}

/// `[p1 W; ...; pJ W; token] + E_pos` on a graph.
pub fn embed_on_graph(g: &mut Graph, patches: Var, projection: Var, token: Var, positional: Var) -> Result<Var> {
    let (j, p_dim) = g.shape(patches);
    check_embedding_shapes(j, p_dim, g.shape(projection), g.shape(token), g.shape(positional))?;
    let projected = g.matmul(patches, projection);
    let stacked = g.concat_rows(&[projected, token]);
    Ok(g.add(stacked, positional))
}

pub fn embed_patches(seq: &PatchSequence, params: &EmbeddingParams) -> Result<PatchEmbedding> {
    let mut g = Graph::new();
    let p = g.constant(seq.patches.clone());
    let w = g.constant(params.projection.clone());
    let t = g.constant(params.token.clone());
    let e = g.constant(params.positional.clone());
    let out = embed_on_graph(&mut g, p, w, t, e)?;
    Ok(PatchEmbedding {
        tokens: g.value(out).clone(),
    })
}

/// Trainable patch embedding layer.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    projection: ParamId,
    token: ParamId,
    positional: ParamId,
    patches: usize,
    patch_dim: usize,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        patches: usize,
        patch_dim: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Self {
        PatchEmbed {
            projection: store.add(format!("{prefix}.proj"), fan_in(rng, patch_dim, d_model)),
            token: store.add(format!("{prefix}.token"), normal(rng, 1, d_model, 0.02)),
            positional: store.add(format!("{prefix}.pos"), normal(rng, patches + 1, d_model, 0.02)),
            patches,
            patch_dim,
        }
    }

    pub fn projection(&self) -> ParamId {
        self.projection
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, patches: &Tensor) -> Result<Var> {
        if patches.shape() != (self.patches, self.patch_dim) {
            return Err(Error::Dimension(format!(
                "expected {}x{} patches, got {:?}",
                self.patches,
                self.patch_dim,
                patches.shape()
            )));
        }
        let x = g.constant(patches.clone());
        embed_on_graph(g, x, p.var(self.projection), p.var(self.token), p.var(self.positional))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fd;
    use crate::params::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, cfg: &SpectrogramConfig, channels: usize) -> AudioWindow {
        let n = cfg.window_samples();
        let ch: Vec<f32> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / cfg.sample_rate as f64).sin() as f32)
            .collect();
        AudioWindow::from_channels(cfg.sample_rate, &vec![ch; channels]).unwrap()
    }

    #[test]
    fn silence_hits_the_log_floor_everywhere() {
        let cfg = SpectrogramConfig::default();
        let w = AudioWindow::new(2, cfg.sample_rate, vec![0.0; 2 * cfg.window_samples()]).unwrap();
        let spec = compute_melspectrogram(&w, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(spec.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn default_config_yields_four_by_sixty_four_by_sixty_four() {
        let cfg = SpectrogramConfig::default();
        let spec = compute_melspectrogram(&sine(440.0, &cfg, 4), &cfg).unwrap();
        assert_eq!(spec.shape(), [4, 64, 64]);
        assert!(spec.values().iter().all(|v| v.is_finite()));
    }

    /// Direct O(N^2) DFT of a Hann-windowed frame, independent of the FFT.
    fn direct_power(frame: &[f32], n: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let energy: f64 = w.iter().map(|x| x * x).sum();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..n {
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    let x = frame[i] as f64 * w[i];
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                (re * re + im * im) / energy
            })
            .collect()
    }

    #[test]
    fn sine_at_mel_centre_peaks_in_that_bin_for_every_frame() {
        let cfg = SpectrogramConfig::default();
        let ex = MelExtractor::new(&cfg).unwrap();
        let centres = mel_centers(&cfg);
        for bin in [12usize, 24, 40, 58] {
            let w = sine(centres[bin], &cfg, 1);
            let direct = direct_power(&w.channel(0)[..cfg.n_fft], cfg.n_fft);
            let oracle: Vec<f64> = (0..cfg.n_mels)
                .map(|m| ex.filterbank().row(m).iter().zip(&direct).map(|(a, b)| a * b).sum())
                .collect();
            let oracle_arg = (0..cfg.n_mels)
                .max_by(|&a, &b| oracle[a].partial_cmp(&oracle[b]).unwrap())
                .unwrap();
            assert_eq!(oracle_arg, bin, "closed-form spectrum peaks elsewhere");
            let spec = ex.compute(&w).unwrap();
            for t in 0..cfg.frames {
                let arg = (0..cfg.n_mels)
                    .max_by(|&a, &b| spec.get(0, t, a).partial_cmp(&spec.get(0, t, b)).unwrap())
                    .unwrap();
                assert_eq!(arg, bin, "frame {t}");
            }
            let first_frame: Vec<f64> = (0..cfg.n_mels).map(|m| spec.get(0, 0, m)).collect();
            for m in 0..cfg.n_mels {
                let o = oracle[m].max(cfg.log_floor).ln();
                assert!((first_frame[m] - o).abs() < 1e-6, "bin {m}: {} vs {o}", first_frame[m]);
            }
        }
    }

    #[test]
    fn short_and_non_finite_inputs_are_rejected() {
        let cfg = SpectrogramConfig::default();
        let short = AudioWindow::new(1, cfg.sample_rate, vec![0.0; 1000]).unwrap();
        assert!(matches!(compute_melspectrogram(&short, &cfg), Err(Error::InputTooShort(_))));
        let mut samples = vec![0.0f32; cfg.window_samples()];
        samples[10] = f32::NAN;
        let bad = AudioWindow::new(1, cfg.sample_rate, samples).unwrap();
        assert!(matches!(compute_melspectrogram(&bad, &cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn every_filter_has_support() {
        let fb = mel_filterbank(&SpectrogramConfig::default());
        for m in 0..fb.rows() {
            assert!(fb.row(m).iter().any(|&w| w > 0.0), "filter {m} is empty");
        }
    }

    fn ramp(z: usize, r: usize, s: usize) -> MelSpectrogram {
        MelSpectrogram::new(z, r, s, (0..z * r * s).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn patch_shapes_follow_the_split_arithmetic() {
        let spec = ramp(4, 64, 64);
        let t = split_patches(&spec, PatchAxis::Temporal, 4).unwrap();
        assert_eq!((t.count(), t.patch_dim()), (16, 1024));
        let s = split_patches(&spec, PatchAxis::Spectral, 1).unwrap();
        assert_eq!((s.count(), s.patch_dim()), (64, 256));
        assert!(matches!(split_patches(&spec, PatchAxis::Temporal, 5), Err(Error::Patching(_))));
    }

    #[test]
    fn flattening_order_is_channel_major() {
        let spec = ramp(2, 4, 3);
        let t = split_patches(&spec, PatchAxis::Temporal, 2).unwrap();
        // patch 1, channel 1, local frame 0, mel 2 => (c=1, t=2, s=2)
        assert_eq!(t.patches.get(1, 6 + 2), spec.get(1, 2, 2));
        let s = split_patches(&spec, PatchAxis::Spectral, 1).unwrap();
        // patch 2 (mel 2), channel 1, frame 3
        assert_eq!(s.patches.get(2, 4 + 3), spec.get(1, 3, 2));
    }

    #[test]
    fn zero_projection_leaves_only_the_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = split_patches(&ramp(1, 4, 2), PatchAxis::Temporal, 2).unwrap();
        let token = uniform(&mut rng, 1, 3, 1.0);
        let params = EmbeddingParams {
            projection: Tensor::zeros(4, 3),
            token: token.clone(),
            positional: Tensor::zeros(3, 3),
        };
        let out = embed_patches(&seq, &params).unwrap();
        assert_eq!(out.tokens.shape(), (3, 3));
        assert!(out.tokens.row(0).iter().chain(out.tokens.row(1)).all(|&v| v == 0.0));
        assert_eq!(out.tokens.row(2), token.data());
    }

    #[test]
    fn hand_computed_embedding() {
        // p1 = [1, 2], p2 = [3, 4], W = [[0.5], [-1]], t = [7], E = [[0.1], [0.2], [0.3]]
        let seq = PatchSequence {
            axis: PatchAxis::Temporal,
            patches: Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        };
        let params = EmbeddingParams {
            projection: Tensor::from_vec(2, 1, vec![0.5, -1.0]).unwrap(),
            token: Tensor::scalar(7.0),
            positional: Tensor::from_vec(3, 1, vec![0.1, 0.2, 0.3]).unwrap(),
        };
        let out = embed_patches(&seq, &params).unwrap();
        let expect = [0.5 - 2.0 + 0.1, 1.5 - 4.0 + 0.2, 7.0 + 0.3];
        for (a, b) in out.tokens.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = EmbeddingParams {
            projection: Tensor::zeros(3, 1),
            ..params
        };
        assert!(matches!(embed_patches(&seq, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let patches = uniform(&mut rng, 3, 5, 1.0);
        let w = uniform(&mut rng, 5, 4, 1.0);
        let t = uniform(&mut rng, 1, 4, 1.0);
        let e = uniform(&mut rng, 4, 4, 1.0);
        let err = fd::check(&[w, t, e], |g, v| {
            let p = g.constant(patches.clone());
            let out = embed_on_graph(g, p, v[0], v[1], v[2]).unwrap();
            let sq = g.mul(out, out);
            g.sum(sq)
        });
        assert!(err < 1e-4, "relative error {err}");
    }
}
