//! Training loop, evaluation metrics and the variant ablation harness.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::fusion::AlphaSource;
use crate::graph::Graph;
use crate::heads::{loss_total, LossConfig, Target};
use crate::model::{AudioPatches, InputNorm, Model, ModelConfig, Variant};
use crate::params::Adam;
use crate::pseudo_label::TrajectoryLabel;
use crate::sim::expose;
use crate::vision::image_patches;

/// Where trajectory targets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// LiDAR pseudo-labels.
    Pseudo,
    /// Simulator ground truth.
    Truth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Augmentation brightness is drawn uniformly from this range.
    pub brightness_min: f64,
    pub brightness_max: f64,
    pub label_source: LabelSource,
    /// Epochs between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub light_brightness: f64,
    pub dark_brightness: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 16,
            epochs: 20,
            seed: 0,
            brightness_min: 0.02,
            brightness_max: 1.0,
            label_source: LabelSource::Pseudo,
            checkpoint_every: 0,
            light_brightness: 1.0,
            dark_brightness: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        let b = [self.brightness_min, self.brightness_max, self.light_brightness, self.dark_brightness];
        if b.iter().any(|&v| !(v > 0.0 && v <= 1.0)) || self.brightness_min > self.brightness_max {
            return Err(Error::Config("brightness values must lie in (0, 1] with min <= max".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("invalid Adam moments".into()));
        }
        Ok(())
    }
}

/// One supervised training example: a dataset sample and its position target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainItem {
    pub sample: usize,
    pub position: [f64; 3],
}

/// Training items of the train split. Pseudo-label targets skip frames the
/// labeler did not cover.
pub fn training_items(data: &Dataset, source: LabelSource, labels: Option<&[TrajectoryLabel]>) -> Result<Vec<TrainItem>> {
    let idx = data.indices(Split::Train);
    match source {
        LabelSource::Truth => Ok(idx
            .into_iter()
            .map(|i| TrainItem {
                sample: i,
                position: data.samples[i].truth.position,
            })
            .collect()),
        LabelSource::Pseudo => {
            let labels = labels.ok_or_else(|| Error::Config("pseudo-label training needs a label file".into()))?;
            let map = crate::pseudo_label::primary_labels(labels);
            Ok(idx
                .into_iter()
                .filter_map(|i| {
                    let s = &data.samples[i];
                    map.get(&(s.scene, s.index)).map(|l| TrainItem {
                        sample: i,
                        position: l.position(),
                    })
                })
                .collect())
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Randomness for one sample, independent of visiting order.
fn keyed_rng(seed: u64, sample: &Sample, salt: u64) -> ChaCha8Rng {
    let k = mix(mix(mix(seed) ^ sample.scene as u64) ^ sample.index as u64) ^ mix(salt);
    ChaCha8Rng::seed_from_u64(k)
}

const EVAL_SALT: u64 = u64::MAX;

/// Supervision and inputs of one sample at brightness `b`.
fn prepare(model: &Model, data: &Dataset, sample: &Sample, b: f64, rng: &mut ChaCha8Rng) -> Result<(AudioPatches, Option<crate::Tensor>, bool)> {
    let audio = AudioPatches::from_spectrogram(&sample.mel, &model.norm, model.config())?;
    let image = if model.uses_vision() {
        let img = expose(&sample.image, b, data.exposure.sensor_noise, rng);
        Some(image_patches(&img, model.config().vision.patch)?)
    } else {
        None
    };
    Ok((audio, image, sample.truth.visible(b, data.exposure.visibility_floor)))
}

fn target(sample: &Sample, position: [f64; 3], visible: bool) -> Target {
    Target {
        position,
        class: sample.truth.class,
        visual_center: if visible { sample.truth.center } else { None },
        visual_present: visible,
    }
}

/// One row of the metrics log, averaged over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub l_cls: f64,
    pub l_pos: f64,
    pub l_ts: f64,
    pub l_total: f64,
    /// Largest `|total - (cls + g1 pos + g2 ts)|` over the batch's
    /// per-sample objectives; zero when the decomposition is exact.
    pub residual: f64,
}

pub const METRICS_HEADER: &str = "# step epoch l_cls l_pos l_ts l_total residual";

impl fmt::Display for MetricRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {:e} {:e} {:e} {:e} {:e}",
            self.step, self.epoch, self.l_cls, self.l_pos, self.l_ts, self.l_total, self.residual
        )
    }
}

impl FromStr for MetricRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let f: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::InvalidInput(format!("bad metrics row: {s}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(MetricRow {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            l_cls: num(2)?,
            l_pos: num(3)?,
            l_ts: num(4)?,
            l_total: num(5)?,
            residual: num(6)?,
        })
    }
}

pub fn format_metrics(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{r}");
    }
    s
}

pub fn parse_metrics(reader: impl Read) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line.map_err(|e| Error::InvalidInput(e.to_string()))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        rows.push(t.parse()?);
    }
    Ok(rows)
}

/// Offending batch written out when a loss goes non-finite.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NanDump {
    pub step: u64,
    pub epoch: usize,
    pub samples: Vec<NanSample>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NanSample {
    pub scene: usize,
    pub frame: usize,
    pub brightness: f64,
    pub target: [f64; 3],
    pub l_cls: f64,
    pub l_pos: f64,
    pub l_ts: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<MetricRow>,
    pub steps: u64,
    pub final_loss: f64,
}

/// Trains with no checkpoint hook.
pub fn train(model: &mut Model, data: &Dataset, items: &[TrainItem], cfg: &TrainConfig, loss: &LossConfig) -> Result<TrainOutcome> {
    train_with(model, data, items, cfg, loss, |_, _, _| Ok(()))
}

/// Mini-batch Adam over per-sample graphs. `on_epoch(model, epoch, step)`
/// runs after every epoch. The input normalisation is fit on the training
/// spectrograms first.
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    items: &[TrainItem],
    cfg: &TrainConfig,
    loss: &LossConfig,
    mut on_epoch: impl FnMut(&Model, usize, u64) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidInput("no training items".into()));
    }
    model.norm = InputNorm::fit(items.iter().map(|it| &data.samples[it.sample].mel));
    let mut adam = Adam::new(&model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let teacher = model.config().fusion.alpha_source == AlphaSource::Teacher;
    let (g1, g2) = (loss.gamma1, loss.gamma2);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(mix(cfg.seed));
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch) {
            let mut acc = model.store.zeros_like();
            let mut sums = [0.0; 4];
            let mut residual: f64 = 0.0;
            let mut rows = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let item = &items[k];
                let sample = &data.samples[item.sample];
                let mut rng = keyed_rng(cfg.seed, sample, epoch as u64);
                let b = rng.gen_range(cfg.brightness_min..=cfg.brightness_max);
                let (audio, image, visible) = prepare(model, data, sample, b, &mut rng)?;
                let tgt = target(sample, item.position, visible);
                let alpha = (teacher && model.variant() == Variant::Full).then_some(if visible { 1.0 } else { 0.0 });
                let mut g = Graph::new();
                let p = model.store.bind(&mut g);
                let out = model.forward(&mut g, &p, &audio, image.as_ref(), alpha)?;
                let l = model.sample_loss(&mut g, &out, &tgt, g1, g2, loss.log_floor)?;
                let v = [
                    g.value(l.cls).item(),
                    g.value(l.pos).item(),
                    l.ts.map_or(0.0, |t| g.value(t).item()),
                    g.value(l.total).item(),
                ];
                rows.push(NanSample {
                    scene: sample.scene,
                    frame: sample.index,
                    brightness: b,
                    target: item.position,
                    l_cls: v[0],
                    l_pos: v[1],
                    l_ts: v[2],
                    l_total: v[3],
                });
                if v.iter().any(|x| !x.is_finite()) {
                    continue;
                }
                for (s, x) in sums.iter_mut().zip(v) {
                    *s += x;
                }
                residual = residual.max((v[3] - loss_total(v[0], v[1], v[2], g1, g2).l_total).abs());
                let grads = g.backward(l.total);
                p.accumulate(&grads, &mut acc);
            }
            let step = adam.steps() + 1;
            let bad_grad = acc.iter().any(|t| !t.all_finite());
            if rows.iter().any(|r| !r.l_total.is_finite()) || bad_grad {
                let dump = NanDump {
                    step,
                    epoch,
                    samples: rows,
                };
                let text = serde_json::to_string(&dump).unwrap_or_default();
                log::error!("non-finite loss at step {step}");
                return Err(Error::Divergence(format!("non-finite loss at step {step}; batch: {text}")));
            }
            let n = chunk.len() as f64;
            for t in &mut acc {
                for x in t.data_mut() {
                    *x /= n;
                }
            }
            adam.step(&mut model.store, &acc);
            let [c, p, t, total] = sums.map(|s| s / n);
            log.push(MetricRow {
                step,
                epoch,
                l_cls: c,
                l_pos: p,
                l_ts: t,
                l_total: total,
                residual,
            });
        }
        log::info!(
            "epoch {} loss {:.4}",
            epoch + 1,
            log.last().map_or(f64::NAN, |r: &MetricRow| r.l_total)
        );
        on_epoch(model, epoch, adam.steps())?;
    }
    Ok(TrainOutcome {
        steps: adam.steps(),
        final_loss: log.last().map_or(f64::NAN, |r| r.l_total),
        log,
    })
}

/// Mean objective over `items` at fixed brightness, without updating.
pub fn objective(model: &Model, data: &Dataset, items: &[TrainItem], loss: &LossConfig, b: f64, seed: u64) -> Result<f64> {
    let totals: Vec<f64> = items
        .par_iter()
        .map(|item| {
            let sample = &data.samples[item.sample];
            let mut rng = keyed_rng(seed, sample, EVAL_SALT);
            let (audio, image, visible) = prepare(model, data, sample, b, &mut rng)?;
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let out = model.forward(&mut g, &p, &audio, image.as_ref(), None)?;
            let l = model.sample_loss(&mut g, &out, &target(sample, item.position, visible), loss.gamma1, loss.gamma2, loss.log_floor)?;
            Ok(g.value(l.total).item())
        })
        .collect::<Result<_>>()?;
    Ok(totals.iter().sum::<f64>() / totals.len().max(1) as f64)
}

/// Prediction and truth of one evaluated frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene: usize,
    pub frame: usize,
    pub timestamp: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub predicted_class: usize,
    pub class: usize,
}

impl EvalRecord {
    pub fn predicted(&self) -> [f64; 3] {
        [self.px, self.py, self.pz]
    }

    pub fn truth(&self) -> [f64; 3] {
        [self.tx, self.ty, self.tz]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag: String,
    pub brightness: f64,
    pub samples: usize,
    pub d_x: f64,
    pub d_y: f64,
    pub d_z: f64,
    pub ape: f64,
    /// Percent.
    pub acc: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_records(tag: &str, brightness: f64, classes: usize, records: &[EvalRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidInput("nothing to evaluate".into()));
        }
        let n = records.len() as f64;
        let mut d = [0.0; 3];
        let mut ape = 0.0;
        let mut confusion = vec![vec![0usize; classes]; classes];
        for r in records {
            let (p, t) = (r.predicted(), r.truth());
            let mut sq = 0.0;
            for a in 0..3 {
                d[a] += (p[a] - t[a]).abs();
                sq += (p[a] - t[a]).powi(2);
            }
            ape += sq.sqrt();
            if r.class >= classes || r.predicted_class >= classes {
                return Err(Error::InvalidInput(format!("class out of range for {classes} classes")));
            }
            confusion[r.class][r.predicted_class] += 1;
        }
        let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
        Ok(EvalReport {
            tag: tag.to_string(),
            brightness,
            samples: records.len(),
            d_x: d[0] / n,
            d_y: d[1] / n,
            d_z: d[2] / n,
            ape: ape / n,
            acc: 100.0 * correct as f64 / n,
            confusion,
        })
    }

    /// Bitwise equality of every metric, ignoring tag and brightness.
    pub fn same_metrics(&self, other: &EvalReport) -> bool {
        let bits = |r: &EvalReport| [r.d_x, r.d_y, r.d_z, r.ape, r.acc].map(f64::to_bits);
        self.samples == other.samples && bits(self) == bits(other) && self.confusion == other.confusion
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<6} b={:<5} n={:<5} Dx={:.3} Dy={:.3} Dz={:.3} APE={:.3} Acc={:.1}%",
            self.tag, self.brightness, self.samples, self.d_x, self.d_y, self.d_z, self.ape, self.acc
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub records: Vec<EvalRecord>,
}

/// Evaluates a split at brightness `b` against simulator truth.
pub fn evaluate(model: &Model, data: &Dataset, split: Split, b: f64, tag: &str, seed: u64) -> Result<Evaluation> {
    let records: Vec<EvalRecord> = data
        .indices(split)
        .par_iter()
        .map(|&i| {
            let s = &data.samples[i];
            let mut rng = keyed_rng(seed, s, EVAL_SALT);
            let (audio, image, _) = prepare(model, data, s, b, &mut rng)?;
            let inf = model.infer(&audio, image.as_ref(), None)?;
            let [px, py, pz] = inf.prediction.position;
            let [tx, ty, tz] = s.truth.position;
            Ok(EvalRecord {
                scene: s.scene,
                frame: s.index,
                timestamp: s.timestamp,
                px,
                py,
                pz,
                tx,
                ty,
                tz,
                predicted_class: inf.prediction.class(),
                class: s.truth.class,
            })
        })
        .collect::<Result<_>>()?;
    let report = EvalReport::from_records(tag, b, model.config().heads.classes, &records)?;
    Ok(Evaluation { report, records })
}

/// Light and dark reports on the test split.
pub fn evaluate_light_dark(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Evaluation, Evaluation)> {
    Ok((
        evaluate(model, data, Split::Test, cfg.light_brightness, "light", cfg.seed)?,
        evaluate(model, data, Split::Test, cfg.dark_brightness, "dark", cfg.seed)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub parameters: usize,
    pub final_loss: f64,
    pub light: EvalReport,
    pub dark: EvalReport,
}

impl AblationRow {
    pub fn degradation(&self) -> f64 {
        self.dark.ape - self.light.ape
    }
}

/// Fresh model of `variant` sized for the dataset's spectrograms.
pub fn build_model(cfg: &ModelConfig, variant: Variant, data: &Dataset, seed: u64) -> Result<Model> {
    let s = data
        .samples
        .first()
        .ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
    let [c, t, m] = s.mel.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x6d6f_64656c));
    Model::new(cfg, variant, c, t, m, &mut rng)
}

/// Trains and evaluates each variant from the same seed.
pub fn ablation_suite(
    data: &Dataset,
    items: &[TrainItem],
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    loss: &LossConfig,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| {
            let mut m = build_model(model, v, data, train_cfg.seed)?;
            let out = train(&mut m, data, items, train_cfg, loss)?;
            let (light, dark) = evaluate_light_dark(&m, data, train_cfg)?;
            log::info!("{v}: {} | {}", light.report, dark.report);
            Ok(AblationRow {
                variant: v,
                parameters: m.parameter_count(),
                final_loss: out.final_loss,
                light: light.report,
                dark: dark.report,
            })
        })
        .collect()
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "| {:<24} | {:>9} | {:>9} | {:>9} | {:>8} | {:>8} | {:>8} |",
        "Variant", "Params", "Light APE", "Light Acc", "Dark APE", "Dark Acc", "dAPE"
    );
    let _ = writeln!(s, "|{:-<26}|{:->11}|{:->11}|{:->11}|{:->10}|{:->10}|{:->10}|", "", "", "", "", "", "", "");
    for r in rows {
        let _ = writeln!(
            s,
            "| {:<24} | {:>9} | {:>9.3} | {:>8.1}% | {:>8.3} | {:>7.1}% | {:>8.3} |",
            r.variant.label(),
            r.parameters,
            r.light.ape,
            r.light.acc,
            r.dark.ape,
            r.dark.acc,
            r.degradation()
        );
    }
    s
}

/// Per-frame errors of pseudo-labels against truth, in meters.
pub fn label_errors(data: &Dataset, labels: &[TrajectoryLabel]) -> Vec<f64> {
    let truth: HashMap<(usize, usize), [f64; 3]> = data
        .samples
        .iter()
        .map(|s| ((s.scene, s.index), s.truth.position))
        .collect();
    labels
        .iter()
        .filter_map(|l| {
            truth.get(&(l.scene, l.frame)).map(|t| {
                let p = l.position();
                ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)).sqrt()
            })
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|x| x.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::audio::SpectrogramConfig;
    use crate::fusion::FusionConfig;
    use crate::heads::HeadConfig;
    use crate::sim::SimConfig;
    use crate::ssm::SsmConfig;
    use crate::vision::VisionConfig;

    fn rec(p: [f64; 3], t: [f64; 3], pc: usize, c: usize) -> EvalRecord {
        EvalRecord {
            scene: 0,
            frame: 0,
            timestamp: 0.0,
            px: p[0],
            py: p[1],
            pz: p[2],
            tx: t[0],
            ty: t[1],
            tz: t[2],
            predicted_class: pc,
            class: c,
        }
    }

    #[test]
    fn single_sample_metrics_match_hand_values() {
        let r = EvalReport::from_records("light", 1.0, 4, &[rec([1.3, 2.4, 3.0], [1.0, 2.0, 3.0], 2, 2)]).unwrap();
        assert!((r.ape - 0.5).abs() < 1e-12);
        assert!((r.d_x - 0.3).abs() < 1e-12);
        assert!((r.d_y - 0.4).abs() < 1e-12);
        assert_eq!(r.d_z, 0.0);
        assert_eq!(r.acc, 100.0);
    }

    #[test]
    fn perfect_predictions_score_zero_error() {
        let rs: Vec<_> = (0..8).map(|i| rec([i as f64, 1.0, 2.0], [i as f64, 1.0, 2.0], i % 4, i % 4)).collect();
        let r = EvalReport::from_records("light", 1.0, 4, &rs).unwrap();
        assert_eq!((r.ape, r.acc), (0.0, 100.0));
    }

    #[test]
    fn confusion_rows_count_classes_and_trace_gives_accuracy() {
        let rs = vec![
            rec([0.0; 3], [1.0, 0.0, 0.0], 0, 0),
            rec([0.0; 3], [0.0, 2.0, 0.0], 1, 0),
            rec([0.0; 3], [0.0, 0.0, 3.0], 1, 1),
            rec([0.0; 3], [0.0, 0.0, 0.0], 0, 2),
        ];
        let r = EvalReport::from_records("dark", 0.05, 3, &rs).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 0]]);
        assert_eq!(r.acc, 50.0);
        assert!((r.ape - 1.5).abs() < 1e-12);
        assert!(r.ape <= r.d_x + r.d_y + r.d_z + 1e-12);
    }

    #[test]
    fn metrics_rows_round_trip() {
        let rows = vec![MetricRow {
            step: 3,
            epoch: 1,
            l_cls: 1.25,
            l_pos: 0.1 + 0.2,
            l_ts: 0.0,
            l_total: 1.85,
            residual: 2.2e-16,
        }];
        assert_eq!(parse_metrics(format_metrics(&rows).as_bytes()).unwrap(), rows);
    }

    #[test]
    fn defaults_match_reference_settings() {
        let t = TrainConfig::default();
        assert_eq!((t.lr, t.brightness_min, t.brightness_max, t.dark_brightness), (1e-4, 0.02, 1.0, 0.05));
        let l = LossConfig::default();
        assert_eq!((l.gamma1, l.gamma2), (2.0, 0.5));
        assert!(TrainConfig { batch: 0, ..t.clone() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..t }.validate().is_err());
    }

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            ssm: SsmConfig {
                d_model: 16,
                d_state: 4,
                expand: 2,
                conv_kernel: 3,
                dt_rank: 2,
                ..SsmConfig::default()
            },
            audio_depth: 1,
            temporal_patch: 8,
            spectral_patch: 8,
            vision: VisionConfig {
                image_size: 32,
                patch: 16,
                depth: 1,
            },
            fusion: FusionConfig {
                heads: 2,
                d_k: 16,
                ..FusionConfig::default()
            },
            heads: HeadConfig {
                trajectory_hidden: 16,
                class_hidden: 16,
                center_hidden: 8,
                ..HeadConfig::default()
            },
        }
    }

    fn small_data(scenes: usize, frames: usize) -> Dataset {
        let sim = SimConfig {
            scenes,
            frames_per_scene: frames,
            image_size: 32,
            ..SimConfig::default()
        };
        let spec = SpectrogramConfig {
            n_mels: 32,
            frames: 16,
            hop: 2900,
            ..SpectrogramConfig::default()
        };
        Dataset::simulate(&sim, &spec, 3).unwrap()
    }

    #[test]
    fn one_epoch_smoke_run_decreases_objective() {
        let data = small_data(10, 10);
        let items = training_items(&data, LabelSource::Truth, None).unwrap();
        assert_eq!(items.len(), 70);
        let mut m = build_model(&tiny(), Variant::Full, &data, 1).unwrap();
        let loss = LossConfig::default();
        m.norm = InputNorm::fit(items.iter().map(|it| &data.samples[it.sample].mel));
        let before = objective(&m, &data, &items, &loss, 1.0, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch: 4,
            lr: 3e-3,
            label_source: LabelSource::Truth,
            ..TrainConfig::default()
        };
        let out = train(&mut m, &data, &items, &cfg, &loss).unwrap();
        assert_eq!(out.steps, 18);
        assert!(out.log.iter().all(|r| r.residual == 0.0));
        let after = objective(&m, &data, &items, &loss, 1.0, 0).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn same_seed_gives_identical_final_loss() {
        let data = small_data(2, 4);
        let items = training_items(&data, LabelSource::Truth, None).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = build_model(&tiny(), Variant::Full, &data, 5).unwrap();
            train(&mut m, &data, &items, &cfg, &LossConfig::default()).unwrap().final_loss
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn audio_only_reports_ignore_brightness() {
        let data = small_data(3, 3);
        let m = build_model(&tiny(), Variant::AudioFem, &data, 2).unwrap();
        let (l, d) = evaluate_light_dark(&m, &data, &TrainConfig::default()).unwrap();
        assert!(l.report.same_metrics(&d.report));
        let v = build_model(&tiny(), Variant::Visual, &data, 2).unwrap();
        let (l, d) = evaluate_light_dark(&v, &data, &TrainConfig::default()).unwrap();
        assert!(!l.report.same_metrics(&d.report));
    }

    #[test]
    fn pseudo_source_requires_labels_and_skips_unlabeled_frames() {
        let data = small_data(2, 3);
        assert!(training_items(&data, LabelSource::Pseudo, None).is_err());
        let s = data.split(Split::Train).next().unwrap();
        let labels = vec![TrajectoryLabel {
            scene: s.scene,
            frame: s.index,
            timestamp: s.timestamp,
            track_id: 0,
            x: 1.0,
            y: 2.0,
            z: 3.0,
        }];
        let items = training_items(&data, LabelSource::Pseudo, Some(&labels)).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].position, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn non_finite_loss_aborts_with_the_batch() {
        let data = small_data(2, 2);
        let mut items = training_items(&data, LabelSource::Truth, None).unwrap();
        items[0].position = [f64::NAN, 0.0, 0.0];
        let mut m = build_model(&tiny(), Variant::Temporal, &data, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        match train(&mut m, &data, &items, &cfg, &LossConfig::default()) {
            Err(Error::Divergence(msg)) => assert!(msg.contains("\"samples\"")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
