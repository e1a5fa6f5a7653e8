//! Synthetic scenes: a drone flying a smooth path over a ground rig with a
//! square four-microphone array, an upward camera and a LiDAR.
//!
//! World frame: origin at the array centre, `z` up. The camera sits at the
//! origin looking along `+z`; image column follows `+x`, image row follows
//! `+y`. Audio windows end at the frame timestamp and the drone is held at
//! the frame position for the whole window.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioWindow, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::pseudo_label::PointCloud;
use crate::vision::ImageFrame;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Fundamental frequency (Hz), harmonic decay exponent, body size (m) and
/// broadband share of each synthetic class.
pub const CLASS_SIGNATURES: [(f64, f64, f64, f64); 4] = [
    (95.0, 0.6, 0.30, 0.05),
    (140.0, 1.0, 0.40, 0.10),
    (205.0, 1.4, 0.50, 0.03),
    (300.0, 0.8, 0.60, 0.15),
];

fn signature(class: usize) -> (f64, f64, f64, f64) {
    CLASS_SIGNATURES[class % CLASS_SIGNATURES.len()]
}

pub fn class_size(class: usize) -> f64 {
    signature(class).2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub scenes: usize,
    pub frames_per_scene: usize,
    /// Seconds between frames.
    pub frame_period: f64,
    pub classes: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Largest azimuth rate (rad/s).
    pub azimuth_rate_max: f64,
    /// Side of the square microphone array (m).
    pub mic_spacing: f64,
    pub snr_db: f64,
    pub harmonics: usize,
    pub image_size: usize,
    pub half_fov_deg: f64,
    /// Read noise added after exposure scaling.
    pub sensor_noise: f64,
    /// Below this brightness the drone counts as not visible.
    pub visibility_floor: f64,
    /// Exposure of the stored images.
    pub brightness: f64,
    /// Drone surface returns per square meter.
    pub lidar_density: f64,
    pub lidar_noise: f64,
    pub clutter_points: usize,
    /// Chance that a scene contains a building wall in the LiDAR view.
    pub wall_probability: f64,
    pub train_fraction: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            scenes: 10,
            frames_per_scene: 60,
            frame_period: 1.0,
            classes: 4,
            radius_min: 3.0,
            radius_max: 8.0,
            elevation_min_deg: 35.0,
            elevation_max_deg: 85.0,
            azimuth_rate_max: 0.2,
            mic_spacing: 0.5,
            snr_db: 20.0,
            harmonics: 10,
            image_size: 64,
            half_fov_deg: 50.0,
            sensor_noise: 0.04,
            visibility_floor: 0.15,
            brightness: 1.0,
            lidar_density: 60.0,
            lidar_noise: 0.02,
            clutter_points: 40,
            wall_probability: 0.5,
            train_fraction: 0.7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("simulator: {m}")));
        if self.scenes == 0 || self.frames_per_scene == 0 {
            return bad("need at least one scene and one frame");
        }
        if !(self.frame_period > 0.0) {
            return bad("frame period must be positive");
        }
        if self.classes == 0 || self.classes > CLASS_SIGNATURES.len() {
            return bad(&format!("classes must be in 1..={}", CLASS_SIGNATURES.len()));
        }
        if !(0.0 < self.radius_min && self.radius_min + 2.0 <= self.radius_max) {
            return bad("radius range must be positive and at least 2 m wide");
        }
        if !(0.0 < self.elevation_min_deg
            && self.elevation_min_deg + 10.0 <= self.elevation_max_deg
            && self.elevation_max_deg < 90.0)
        {
            return bad("elevation range must lie in (0, 90) and span at least 10 degrees");
        }
        if !(self.brightness > 0.0 && self.brightness <= 1.0) {
            return bad("brightness must be in (0, 1]");
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return bad("train fraction must be in (0, 1)");
        }
        if self.image_size == 0 || !(0.0 < self.half_fov_deg && self.half_fov_deg < 90.0) {
            return bad("camera needs a positive image size and a half field of view in (0, 90)");
        }
        Ok(())
    }

    pub fn microphones(&self) -> Vec<[f64; 3]> {
        let h = self.mic_spacing / 2.0;
        vec![[h, h, 0.0], [-h, h, 0.0], [-h, -h, 0.0], [h, -h, 0.0]]
    }

    pub fn camera(&self) -> Camera {
        Camera::new(self.image_size, self.half_fov_deg)
    }
}

/// Pinhole camera at the origin looking along `+z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub size: usize,
    /// Focal length in pixels.
    pub focal: f64,
}

impl Camera {
    pub fn new(size: usize, half_fov_deg: f64) -> Self {
        Camera {
            size,
            focal: size as f64 / 2.0 / half_fov_deg.to_radians().tan(),
        }
    }

    /// Pixel coordinates `(u, v)`; `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        if p[2] <= 0.0 {
            return None;
        }
        let c = self.size as f64 / 2.0;
        Some((c + self.focal * p[0] / p[2], c + self.focal * p[1] / p[2]))
    }

    /// Normalized image center if the point projects inside the image.
    pub fn in_view(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let s = self.size as f64;
        self.project(p)
            .filter(|&(u, v)| (0.0..s).contains(&u) && (0.0..s).contains(&v))
            .map(|(u, v)| [u / s, v / s])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub position: [f64; 3],
    pub class: usize,
    /// Projected center inside the image bounds.
    pub in_view: bool,
    /// Normalized `(u, v)` when in view.
    pub center: Option<[f64; 2]>,
}

impl Truth {
    /// Teacher visibility at exposure `b`.
    pub fn visible(&self, b: f64, floor: f64) -> bool {
        self.in_view && b >= floor
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub scene: usize,
    pub index: usize,
    pub timestamp: f64,
    pub audio: AudioWindow,
    /// Noise-free render at the scene brightness.
    pub image: ImageFrame,
    pub cloud: PointCloud,
    pub truth: Truth,
}

/// Smooth path in spherical coordinates around the rig.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub radius: f64,
    pub radius_amp: f64,
    pub radius_rate: f64,
    pub radius_phase: f64,
    pub elevation: f64,
    pub elevation_amp: f64,
    pub elevation_rate: f64,
    pub elevation_phase: f64,
    pub azimuth: f64,
    pub azimuth_rate: f64,
}

impl Trajectory {
    pub fn random(rng: &mut impl Rng, cfg: &SimConfig) -> Self {
        let radius_amp = rng.gen_range(0.0..1.0);
        let (emin, emax) = (cfg.elevation_min_deg.to_radians(), cfg.elevation_max_deg.to_radians());
        let elevation_amp = rng.gen_range(0.0..(emax - emin) / 4.0);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        Trajectory {
            radius: rng.gen_range(cfg.radius_min + radius_amp..=cfg.radius_max - radius_amp),
            radius_amp,
            radius_rate: rng.gen_range(0.05..0.2),
            radius_phase: rng.gen_range(0.0..2.0 * PI),
            elevation: rng.gen_range(emin + elevation_amp..=emax - elevation_amp),
            elevation_amp,
            elevation_rate: rng.gen_range(0.05..0.2),
            elevation_phase: rng.gen_range(0.0..2.0 * PI),
            azimuth: rng.gen_range(0.0..2.0 * PI),
            azimuth_rate: sign * rng.gen_range(0.25 * cfg.azimuth_rate_max..=cfg.azimuth_rate_max),
        }
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        let r = self.radius + self.radius_amp * (self.radius_rate * t + self.radius_phase).sin();
        let el = self.elevation + self.elevation_amp * (self.elevation_rate * t + self.elevation_phase).sin();
        let az = self.azimuth + self.azimuth_rate * t;
        [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()]
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Class source signal: harmonic comb on a jittered fundamental plus
/// broadband noise, unit RMS.
pub fn source_signal(class: usize, len: usize, sample_rate: f64, harmonics: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (f0, decay, _, broadband) = signature(class);
    let f0 = f0 * rng.gen_range(0.98..1.02);
    let nyquist = sample_rate / 2.0;
    let comps: Vec<(f64, f64, f64)> = (1..=harmonics)
        .map(|k| (f0 * k as f64, (k as f64).powf(-decay), rng.gen_range(0.0..2.0 * PI)))
        .filter(|c| c.0 < nyquist)
        .collect();
    let white = Normal::new(0.0, 1.0).expect("unit normal");
    let mut s: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / sample_rate;
            comps.iter().map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum::<f64>()
        })
        .collect();
    let tonal = (s.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt().max(1e-12);
    let noise_gain = broadband.sqrt();
    for v in s.iter_mut() {
        *v = *v / tonal + noise_gain * white.sample(rng);
    }
    let rms = (s.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt().max(1e-12);
    s.iter_mut().for_each(|v| *v /= rms);
    s
}

const SINC_HALF: isize = 16;

/// `x(n + shift)` for `n in 0..len` by Blackman-windowed sinc interpolation;
/// samples outside the buffer count as zero.
fn fractional_shift(x: &[f64], shift: f64, len: usize) -> Vec<f64> {
    let base = shift.floor();
    let frac = shift - base;
    let base = base as isize;
    let taps: Vec<(isize, f64)> = (-SINC_HALF + 1..=SINC_HALF)
        .map(|j| {
            let d = frac - j as f64;
            let sinc = if d.abs() < 1e-12 { 1.0 } else { (PI * d).sin() / (PI * d) };
            let w = 0.42 + 0.5 * (PI * d / SINC_HALF as f64).cos() + 0.08 * (2.0 * PI * d / SINC_HALF as f64).cos();
            (j, sinc * w)
        })
        .collect();
    (0..len as isize)
        .map(|n| {
            taps.iter()
                .map(|&(j, w)| {
                    let k = n + base + j;
                    if k < 0 || k as usize >= x.len() {
                        0.0
                    } else {
                        x[k as usize] * w
                    }
                })
                .sum()
        })
        .collect()
}

/// Audio at every microphone for a source held at `pos`: propagation delay
/// `distance / c`, gain `1 / distance`, white noise at `snr_db` below the
/// array-average received RMS.
pub fn synth_audio(
    pos: [f64; 3],
    class: usize,
    mics: &[[f64; 3]],
    spec: &SpectrogramConfig,
    harmonics: usize,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Result<AudioWindow> {
    if mics.is_empty() {
        return Err(Error::Config("no microphones".into()));
    }
    let fs = spec.sample_rate as f64;
    let n = spec.window_samples();
    let dists: Vec<f64> = mics.iter().map(|&m| distance(pos, m)).collect();
    if dists.iter().any(|&d| !(d > 1e-3)) {
        return Err(Error::InvalidInput("source coincides with a microphone".into()));
    }
    let max_delay = dists.iter().cloned().fold(0.0, f64::max) / SPEED_OF_SOUND * fs;
    let lead = max_delay.ceil() as usize + SINC_HALF as usize + 1;
    let src = source_signal(class, n + lead + SINC_HALF as usize, fs, harmonics, rng);
    let mut chans: Vec<Vec<f64>> = dists
        .iter()
        .map(|&d| {
            let delay = d / SPEED_OF_SOUND * fs;
            fractional_shift(&src, lead as f64 - delay, n).into_iter().map(|v| v / d).collect()
        })
        .collect();
    let power: f64 = chans.iter().flatten().map(|v| v * v).sum::<f64>() / (n * chans.len()) as f64;
    let sigma = power.sqrt() / 10f64.powf(snr_db / 20.0);
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        for c in chans.iter_mut() {
            c.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
    }
    let chans: Vec<Vec<f32>> = chans
        .into_iter()
        .map(|c| c.into_iter().map(|v| v as f32).collect())
        .collect();
    AudioWindow::from_channels(spec.sample_rate, &chans)
}

/// Lag (in samples) of `b` relative to `a` from the phase-transform
/// generalized cross-correlation, searched over `[-max_lag, max_lag]`.
/// Positive means `b` arrives later.
pub fn gcc_phat(a: &[f32], b: &[f32], max_lag: usize) -> isize {
    let n = (a.len() + b.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |x: &[f32]| {
        let mut v: Vec<Complex<f64>> = x.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let (mut fa, mut fb) = (load(a), load(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    let mut cross: Vec<Complex<f64>> = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            let c = y * x.conj();
            let m = c.norm();
            if m > 1e-20 {
                c / m
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    inv.process(&mut cross);
    let max_lag = max_lag.min(n / 2 - 1) as isize;
    let at = |lag: isize| cross[lag.rem_euclid(n as isize) as usize].re;
    (-max_lag..=max_lag)
        .max_by(|&x, &y| at(x).total_cmp(&at(y)))
        .unwrap_or(0)
}

/// Blob radius (px) added to the projected half-size, so distant drones
/// stay visible at low resolution while size still tracks depth.
pub const BLOB_MIN_SIGMA: f64 = 0.6;

/// Smooth sky texture fixed per scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Sky {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Sky {
    pub fn random(rng: &mut impl Rng) -> Self {
        Sky {
            waves: (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.5..3.0),
                        rng.gen_range(0.5..3.0),
                        rng.gen_range(0.0..2.0 * PI),
                        rng.gen_range(0.01..0.05),
                    )
                })
                .collect(),
        }
    }

    pub fn flat() -> Self {
        Sky { waves: Vec::new() }
    }

    fn at(&self, c: usize, x: f64, y: f64) -> f64 {
        let base = [0.45 + 0.2 * y, 0.6 + 0.15 * y, 0.85 + 0.1 * y][c];
        let tex: f64 = self
            .waves
            .iter()
            .map(|&(fx, fy, ph, a)| a * (2.0 * PI * (fx * x + fy * y) + ph).sin())
            .sum();
        base + tex
    }
}

/// Noise-free render: sky, a dark Gaussian blob at the projected drone
/// position sized by class and depth, every pixel multiplied by `b`.
pub fn render_clean(pos: [f64; 3], class: usize, cam: &Camera, sky: &Sky, b: f64, timestamp: f64) -> Result<ImageFrame> {
    let s = cam.size;
    let blob = cam.project(pos).map(|(u, v)| {
        let sigma = BLOB_MIN_SIGMA + 0.5 * class_size(class) * cam.focal / pos[2];
        (u, v, sigma)
    });
    let mut pixels = Vec::with_capacity(3 * s * s);
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let mut p = sky.at(c, x as f64 / s as f64, y as f64 / s as f64);
                if let Some((u, v, sg)) = blob {
                    let d2 = (x as f64 + 0.5 - u).powi(2) + (y as f64 + 0.5 - v).powi(2);
                    p *= 1.0 - 0.85 * (-d2 / (2.0 * sg * sg)).exp();
                }
                pixels.push((p.clamp(0.0, 1.0) * b) as f32);
            }
        }
    }
    ImageFrame::new(s, s, pixels, timestamp)
}

/// Exposure change by `b` followed by additive read noise, clamped to [0, 1].
pub fn expose(img: &ImageFrame, b: f64, sensor_noise: f64, rng: &mut impl Rng) -> ImageFrame {
    let noise = Normal::new(0.0, sensor_noise.max(0.0)).expect("finite sigma");
    let pixels = img
        .pixels()
        .iter()
        .map(|&p| {
            let n = if sensor_noise > 0.0 { noise.sample(rng) } else { 0.0 };
            ((p as f64 * b + n).clamp(0.0, 1.0)) as f32
        })
        .collect();
    ImageFrame::new(img.height(), img.width(), pixels, img.timestamp).expect("same shape, clamped range")
}

/// Rendered image at brightness `b` with read noise.
pub fn synth_image(
    pos: [f64; 3],
    class: usize,
    cam: &Camera,
    sky: &Sky,
    b: f64,
    sensor_noise: f64,
    rng: &mut impl Rng,
) -> Result<ImageFrame> {
    Ok(expose(&render_clean(pos, class, cam, sky, 1.0, 0.0)?, b, sensor_noise, rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LidarConfig {
    pub density: f64,
    pub noise: f64,
    pub clutter: usize,
    /// Clutter and wall extend to this range (m).
    pub range: f64,
    pub wall: bool,
}

impl LidarConfig {
    pub fn from_sim(cfg: &SimConfig, wall: bool) -> Self {
        LidarConfig {
            density: cfg.lidar_density,
            noise: cfg.lidar_noise,
            clutter: cfg.clutter_points,
            range: cfg.radius_max + 4.0,
            wall,
        }
    }
}

/// Returns on the surface of a class-sized cube around `pos`, Gaussian
/// jitter, uniform clutter in the upper half-ball and an optional wall.
pub fn synth_lidar(pos: Option<[f64; 3]>, class: usize, cfg: &LidarConfig, timestamp: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    let mut pts = Vec::new();
    if let Some(p) = pos {
        let side = class_size(class);
        let count = (cfg.density * 6.0 * side * side).round() as usize;
        let jitter = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite sigma");
        for _ in 0..count {
            let face = rng.gen_range(0..6);
            let (axis, sign) = (face / 2, if face % 2 == 0 { -0.5 } else { 0.5 });
            let mut q = [0.0; 3];
            for (a, v) in q.iter_mut().enumerate() {
                let off = if a == axis { sign * side } else { rng.gen_range(-0.5..0.5) * side };
                let n = if cfg.noise > 0.0 { jitter.sample(rng) } else { 0.0 };
                *v = p[a] + off + n;
            }
            pts.push(q);
        }
    }
    for _ in 0..cfg.clutter {
        loop {
            let q = [
                rng.gen_range(-cfg.range..cfg.range),
                rng.gen_range(-cfg.range..cfg.range),
                rng.gen_range(0.0..cfg.range),
            ];
            if q.iter().map(|v| v * v).sum::<f64>() <= cfg.range * cfg.range {
                pts.push(q);
                break;
            }
        }
    }
    if cfg.wall {
        for _ in 0..250 {
            pts.push([rng.gen_range(-2.5..2.5), cfg.range - 1.0, rng.gen_range(0.0..3.0)]);
        }
    }
    PointCloud::new(pts, timestamp)
}

/// One scene's frames; deterministic in `(seed, scene)`.
pub fn generate_scene(cfg: &SimConfig, spec: &SpectrogramConfig, seed: u64, scene: usize) -> Result<Vec<FrameSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene as u64 + 1);
    let class = rng.gen_range(0..cfg.classes);
    let traj = Trajectory::random(&mut rng, cfg);
    let sky = Sky::random(&mut rng);
    let wall = rng.gen_bool(cfg.wall_probability.clamp(0.0, 1.0));
    let lidar = LidarConfig::from_sim(cfg, wall);
    let cam = cfg.camera();
    let mics = cfg.microphones();
    (0..cfg.frames_per_scene)
        .map(|i| {
            let t = spec.window_seconds + i as f64 * cfg.frame_period;
            let pos = traj.at(t);
            let center = cam.in_view(pos);
            Ok(FrameSample {
                scene,
                index: i,
                timestamp: t,
                audio: synth_audio(pos, class, &mics, spec, cfg.harmonics, cfg.snr_db, &mut rng)?,
                image: render_clean(pos, class, &cam, &sky, cfg.brightness, t)?,
                cloud: synth_lidar(Some(pos), class, &lidar, t, &mut rng)?,
                truth: Truth {
                    position: pos,
                    class,
                    in_view: center.is_some(),
                    center,
                },
            })
        })
        .collect()
}

/// All scenes, generated in parallel, in scene order.
pub fn generate_scenes(cfg: &SimConfig, spec: &SpectrogramConfig, seed: u64) -> Result<Vec<Vec<FrameSample>>> {
    (0..cfg.scenes)
        .into_par_iter()
        .map(|s| generate_scene(cfg, spec, seed, s))
        .collect()
}

/// Scene ids of the training split: a seeded shuffle, first
/// `round(train_fraction * scenes)` taken.
pub fn train_scenes(scenes: usize, train_fraction: f64, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut ids: Vec<usize> = (0..scenes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    ids.shuffle(&mut rng);
    let mut k = (scenes as f64 * train_fraction).round() as usize;
    if scenes >= 2 {
        k = k.clamp(1, scenes - 1);
    }
    let mut out = ids[..k.min(scenes)].to_vec();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo_label::{dbscan, label_sequence, LabelConfig};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn rms(x: &[f32]) -> f64 {
        (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn equidistant_source_has_zero_lag() {
        let cfg = SimConfig::default();
        let w = synth_audio([0.0, 0.0, 5.0], 1, &cfg.microphones(), &SpectrogramConfig::default(), 10, 30.0, &mut rng()).unwrap();
        for c in 1..4 {
            assert_eq!(gcc_phat(w.channel(0), w.channel(c), 200), 0);
        }
    }

    #[test]
    fn path_difference_of_1715_mm_is_240_samples() {
        // 1.715 / 343 * 48000 = 240
        let mics = [[0.0, 0.0, 0.0], [0.0, 0.0, -1.715]];
        let w = synth_audio([0.0, 0.0, 2.0], 2, &mics, &SpectrogramConfig::default(), 10, 20.0, &mut rng()).unwrap();
        let lag = gcc_phat(w.channel(0), w.channel(1), 400);
        assert!((lag - 240).abs() <= 2, "lag {lag}");
    }

    #[test]
    fn tdoa_matches_geometry_for_the_square_array() {
        let cfg = SimConfig::default();
        let mics = cfg.microphones();
        let mut r = rng();
        for _ in 0..5 {
            let traj = Trajectory::random(&mut r, &cfg);
            let pos = traj.at(r.gen_range(0.0..30.0));
            let w = synth_audio(pos, 0, &mics, &SpectrogramConfig::default(), 10, 20.0, &mut r).unwrap();
            for c in 1..4 {
                let expect = (distance(pos, mics[c]) - distance(pos, mics[0])) / SPEED_OF_SOUND * 48_000.0;
                let lag = gcc_phat(w.channel(0), w.channel(c), 100);
                assert!((lag as f64 - expect).abs() <= 2.0, "lag {lag} vs {expect}");
            }
        }
    }

    #[test]
    fn doubling_distance_halves_rms() {
        let mics = [[0.0; 3]];
        let spec = SpectrogramConfig::default();
        let near = synth_audio([0.0, 0.0, 3.0], 0, &mics, &spec, 10, 40.0, &mut rng()).unwrap();
        let far = synth_audio([0.0, 0.0, 6.0], 0, &mics, &spec, 10, 40.0, &mut rng()).unwrap();
        let ratio = rms(far.channel(0)) / rms(near.channel(0));
        assert!((ratio - 0.5).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn on_axis_point_projects_to_image_centre() {
        let cam = Camera::new(64, 50.0);
        assert_eq!(cam.project([0.0, 0.0, 7.0]), Some((32.0, 32.0)));
        assert_eq!(cam.in_view([0.0, 0.0, 7.0]), Some([0.5, 0.5]));
    }

    #[test]
    fn off_axis_projection_matches_pinhole_formula() {
        // f = 32 / tan(45 deg) = 32; (1, -0.5, 4) -> (32 + 8, 32 - 4)
        let cam = Camera::new(64, 45.0);
        let (u, v) = cam.project([1.0, -0.5, 4.0]).unwrap();
        assert!((u - 40.0).abs() < 1e-9 && (v - 28.0).abs() < 1e-9);
        assert!(cam.in_view([10.0, 0.0, 1.0]).is_none());
        assert!(cam.project([0.0, 0.0, -1.0]).is_none());
    }

    #[test]
    fn dark_render_scales_the_mean_linearly() {
        let cam = Camera::new(64, 50.0);
        let sky = Sky::random(&mut rng());
        let bright = synth_image([0.5, 0.2, 5.0], 1, &cam, &sky, 1.0, 0.0, &mut rng()).unwrap();
        let dark = synth_image([0.5, 0.2, 5.0], 1, &cam, &sky, 0.05, 0.0, &mut rng()).unwrap();
        assert!((dark.mean() - 0.05 * bright.mean()).abs() < 1e-6);
    }

    #[test]
    fn blob_darkens_the_projected_pixel() {
        let cam = Camera::new(64, 50.0);
        let img = render_clean([0.0, 0.0, 4.0], 3, &cam, &Sky::flat(), 1.0, 0.0).unwrap();
        assert!(img.get(0, 32, 32) < 0.5 * img.get(0, 5, 5));
    }

    #[test]
    fn noiseless_lidar_centroid_is_the_true_position() {
        let cfg = LidarConfig {
            density: 600.0,
            noise: 0.0,
            clutter: 0,
            range: 12.0,
            wall: false,
        };
        let mut r = rng();
        for class in 0..4 {
            let pos = [1.0, -2.0, 5.0];
            let cloud = synth_lidar(Some(pos), class, &cfg, 0.0, &mut r).unwrap();
            let cs = dbscan(&cloud, 0.7, 4).unwrap();
            assert_eq!(cs.len(), 1);
            assert!(distance(cs[0].centroid, pos) < 0.05);
        }
    }

    #[test]
    fn lidar_point_count_scales_with_density() {
        let mk = |density| LidarConfig {
            density,
            noise: 0.0,
            clutter: 0,
            range: 12.0,
            wall: false,
        };
        let a = synth_lidar(Some([0.0, 0.0, 5.0]), 1, &mk(50.0), 0.0, &mut rng()).unwrap();
        let b = synth_lidar(Some([0.0, 0.0, 5.0]), 1, &mk(100.0), 0.0, &mut rng()).unwrap();
        assert_eq!(a.points.len(), 48);
        assert_eq!(b.points.len(), 96);
    }

    #[test]
    fn clutter_only_frames_yield_no_labels() {
        let cfg = LidarConfig {
            wall: true,
            ..LidarConfig::from_sim(&SimConfig::default(), true)
        };
        let mut r = rng();
        let clouds: Vec<PointCloud> = (0..20)
            .map(|i| synth_lidar(None, 0, &cfg, i as f64, &mut r).unwrap())
            .collect();
        let out = label_sequence(0, &clouds, &LabelConfig::default()).unwrap();
        assert!(out.labels.is_empty());
    }

    #[test]
    fn scenes_are_deterministic_and_inside_the_hemisphere() {
        let cfg = SimConfig {
            scenes: 2,
            frames_per_scene: 3,
            ..SimConfig::default()
        };
        let spec = SpectrogramConfig::default();
        let a = generate_scenes(&cfg, &spec, 7).unwrap();
        let b = generate_scenes(&cfg, &spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scenes(&cfg, &spec, 8).unwrap());
        for f in a.iter().flatten() {
            let r = distance(f.truth.position, [0.0; 3]);
            assert!(r >= cfg.radius_min - 1e-9 && r <= cfg.radius_max + 1e-9);
            assert!(f.truth.position[2] > 0.0);
            assert_eq!(f.truth.in_view, cfg.camera().in_view(f.truth.position).is_some());
        }
    }

    #[test]
    fn split_is_seventy_thirty_by_scene() {
        let t = train_scenes(10, 0.7, 3);
        assert_eq!(t.len(), 7);
        assert_eq!(t, train_scenes(10, 0.7, 3));
    }
}
