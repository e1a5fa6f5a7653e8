//! On-disk dataset: a JSON manifest plus one small binary array file per
//! frame and sensor.
//!
//! Array container, all integers little-endian:
//!
//! | bytes | content                                      |
//! |-------|----------------------------------------------|
//! | 4     | magic `AVDA`                                 |
//! | 1     | version, currently 1                         |
//! | 1     | dtype: 1 = f32, 2 = f64, 3 = i16             |
//! | 1     | ndim                                         |
//! | 1     | reserved, 0                                  |
//! | 8*n   | shape, one u64 per axis                      |
//! | 8     | f64 scale; i16 values decode as `v * scale`  |
//! | rest  | row-major little-endian elements             |
//!
//! Layout below the dataset root:
//!
//! ```text
//! manifest.json
//! scenes/<scene>/<frame>.audio.bin   i16 [channels, samples]
//! scenes/<scene>/<frame>.image.bin   f32 [3, H, W]
//! scenes/<scene>/<frame>.cloud.bin   f64 [points, 3]
//! scenes/<scene>/<frame>.mel.bin     f32 [channels, frames, mels]
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioWindow, MelExtractor, MelSpectrogram, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::pseudo_label::PointCloud;
use crate::sim::{generate_scene, generate_scenes, train_scenes, FrameSample, SimConfig, Truth};
use crate::vision::ImageFrame;

const MAGIC: &[u8; 4] = b"AVDA";
const VERSION: u8 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I16 { values: Vec<i16>, scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn len(&self) -> usize {
        match &self.data {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I16 { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
            ArrayData::I16 { values, scale } => values.iter().map(|&x| x as f64 * scale).collect(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            ArrayData::F32(v) => v.clone(),
            _ => self.to_f64().into_iter().map(|x| x as f32).collect(),
        }
    }

    /// Quantizes to i16 with the scale set by the largest magnitude.
    pub fn quantize(shape: Vec<usize>, values: &[f32]) -> Array {
        let peak = values.iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
        let scale = if peak > 0.0 { peak / i16::MAX as f64 } else { 1.0 };
        Array {
            shape,
            data: ArrayData::I16 {
                values: values.iter().map(|&v| (v as f64 / scale).round() as i16).collect(),
                scale,
            },
        }
    }
}

pub fn encode_array(a: &Array) -> Result<Vec<u8>> {
    let n: usize = a.shape.iter().product();
    if n != a.len() {
        return Err(Error::Dimension(format!("shape {:?} holds {n} elements, data has {}", a.shape, a.len())));
    }
    if a.shape.len() > u8::MAX as usize {
        return Err(Error::Dimension("too many axes".into()));
    }
    let (dtype, scale) = match &a.data {
        ArrayData::F32(_) => (1u8, 1.0),
        ArrayData::F64(_) => (2, 1.0),
        ArrayData::I16 { scale, .. } => (3, *scale),
    };
    let mut out = Vec::with_capacity(16 + 8 * a.shape.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype, a.shape.len() as u8, 0]);
    for &d in &a.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&f64::to_le_bytes(scale));
    match &a.data {
        ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArrayData::I16 { values, .. } => values.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_array(bytes: &[u8], path: &Path) -> Result<Array> {
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("not an array file"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let (dtype, ndim) = (bytes[5], bytes[6] as usize);
    let head = 8 + 8 * ndim + 8;
    if bytes.len() < head {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| -> [u8; 8] { bytes[i..i + 8].try_into().expect("8 bytes") };
    let shape: Vec<usize> = (0..ndim).map(|k| u64::from_le_bytes(word(8 + 8 * k)) as usize).collect();
    let scale = f64::from_le_bytes(word(8 + 8 * ndim));
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("shape overflows"))?;
    let body = &bytes[head..];
    let width = match dtype {
        1 => 4,
        2 => 8,
        3 => 2,
        d => return Err(bad(&format!("unknown dtype {d}"))),
    };
    if body.len() != n.checked_mul(width).ok_or_else(|| bad("shape overflows"))? {
        return Err(bad(&format!("expected {} data bytes, found {}", n * width, body.len())));
    }
    let data = match dtype {
        1 => ArrayData::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
        2 => ArrayData::F64(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
        _ => ArrayData::I16 {
            values: body.chunks_exact(2).map(|c| i16::from_le_bytes(c.try_into().expect("2"))).collect(),
            scale,
        },
    };
    Ok(Array { shape, data })
}

pub fn write_array(path: &Path, a: &Array) -> Result<()> {
    let bytes = encode_array(a)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub audio: String,
    pub image: String,
    pub cloud: String,
    pub mel: String,
    pub truth: Truth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    pub split: Split,
    pub class: usize,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    pub sim: SimConfig,
    pub spectrogram: SpectrogramConfig,
    pub scenes: Vec<SceneRecord>,
}

impl Manifest {
    pub fn frame_count(&self) -> usize {
        self.scenes.iter().map(|s| s.frames.len()).sum()
    }

    pub fn count(&self, split: Split) -> (usize, usize) {
        let scenes: Vec<_> = self.scenes.iter().filter(|s| s.split == split).collect();
        (scenes.len(), scenes.iter().map(|s| s.frames.len()).sum())
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

/// One model-ready frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: usize,
    pub index: usize,
    pub timestamp: f64,
    pub split: Split,
    pub mel: MelSpectrogram,
    pub image: ImageFrame,
    pub truth: Truth,
}

/// Camera settings needed to re-expose the stored clean images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Exposure {
    pub sensor_noise: f64,
    pub visibility_floor: f64,
}

impl Exposure {
    pub fn from_sim(cfg: &SimConfig) -> Self {
        Exposure {
            sensor_noise: cfg.sensor_noise,
            visibility_floor: cfg.visibility_floor,
        }
    }
}

impl Default for Exposure {
    fn default() -> Self {
        Exposure::from_sim(&SimConfig::default())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// LiDAR frames per scene, in scene order.
    pub clouds: Vec<Vec<PointCloud>>,
    pub exposure: Exposure,
}

impl Dataset {
    /// Builds spectrograms for generated frames and tags the split.
    pub fn from_frames(
        scenes: Vec<Vec<FrameSample>>,
        spec: &SpectrogramConfig,
        train: &[usize],
        exposure: Exposure,
    ) -> Result<Dataset> {
        let ex = MelExtractor::new(spec)?;
        let mut samples = Vec::new();
        let mut clouds = Vec::new();
        for frames in scenes {
            let mut sc = Vec::with_capacity(frames.len());
            let mels: Vec<MelSpectrogram> = frames.par_iter().map(|f| ex.compute(&f.audio)).collect::<Result<_>>()?;
            for (f, mel) in frames.into_iter().zip(mels) {
                let split = if train.contains(&f.scene) { Split::Train } else { Split::Test };
                sc.push(f.cloud);
                samples.push(Sample {
                    scene: f.scene,
                    index: f.index,
                    timestamp: f.timestamp,
                    split,
                    mel,
                    image: f.image,
                    truth: f.truth,
                });
            }
            clouds.push(sc);
        }
        Ok(Dataset {
            samples,
            clouds,
            exposure,
        })
    }

    /// Simulates in memory without touching the disk.
    pub fn simulate(cfg: &SimConfig, spec: &SpectrogramConfig, seed: u64) -> Result<Dataset> {
        let scenes = generate_scenes(cfg, spec, seed)?;
        let train = train_scenes(cfg.scenes, cfg.train_fraction, seed);
        Dataset::from_frames(scenes, spec, &train, Exposure::from_sim(cfg))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn load(dir: &Path) -> Result<(Manifest, Dataset)> {
        let manifest = Manifest::read(dir)?;
        let spec = &manifest.spectrogram;
        let mut samples = Vec::new();
        let mut clouds = Vec::new();
        for scene in &manifest.scenes {
            let loaded: Vec<(Sample, PointCloud)> = scene
                .frames
                .par_iter()
                .map(|f| load_frame(dir, scene, f, spec))
                .collect::<Result<_>>()?;
            let mut sc = Vec::with_capacity(loaded.len());
            for (s, c) in loaded {
                samples.push(s);
                sc.push(c);
            }
            clouds.push(sc);
        }
        let exposure = Exposure::from_sim(&manifest.sim);
        Ok((
            manifest,
            Dataset {
                samples,
                clouds,
                exposure,
            },
        ))
    }
}

fn load_frame(dir: &Path, scene: &SceneRecord, f: &FrameRecord, spec: &SpectrogramConfig) -> Result<(Sample, PointCloud)> {
    let img_path = dir.join(&f.image);
    let img = read_array(&img_path)?;
    let (h, w) = match img.shape[..] {
        [3, h, w] => (h, w),
        _ => return Err(Error::format(&img_path, format!("image shape {:?}", img.shape))),
    };
    let image = ImageFrame::new(h, w, img.to_f32(), f.timestamp)?;
    let cloud_path = dir.join(&f.cloud);
    let cloud = read_array(&cloud_path)?;
    if cloud.shape.len() != 2 || cloud.shape[1] != 3 {
        return Err(Error::format(&cloud_path, format!("cloud shape {:?}", cloud.shape)));
    }
    let pts = cloud.to_f64().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let mel_path = dir.join(&f.mel);
    let mel = match read_array(&mel_path) {
        Ok(a) => match a.shape[..] {
            [z, r, s] => MelSpectrogram::new(z, r, s, a.to_f64())?,
            _ => return Err(Error::format(&mel_path, format!("spectrogram shape {:?}", a.shape))),
        },
        Err(Error::Io { .. }) => crate::audio::compute_melspectrogram(&load_audio(dir, f, spec)?, spec)?,
        Err(e) => return Err(e),
    };
    Ok((
        Sample {
            scene: scene.id,
            index: f.index,
            timestamp: f.timestamp,
            split: scene.split,
            mel,
            image,
            truth: f.truth.clone(),
        },
        PointCloud::new(pts, f.timestamp)?,
    ))
}

pub fn load_audio(dir: &Path, f: &FrameRecord, spec: &SpectrogramConfig) -> Result<AudioWindow> {
    let path = dir.join(&f.audio);
    let a = read_array(&path)?;
    if a.shape.len() != 2 {
        return Err(Error::format(&path, format!("audio shape {:?}", a.shape)));
    }
    AudioWindow::new(a.shape[0], spec.sample_rate, a.to_f32())
}

fn frame_paths(scene: usize, index: usize) -> [String; 4] {
    let stem = format!("scenes/{scene:03}/{index:04}");
    [
        format!("{stem}.audio.bin"),
        format!("{stem}.image.bin"),
        format!("{stem}.cloud.bin"),
        format!("{stem}.mel.bin"),
    ]
}

/// Simulates every scene and writes the dataset below `dir`.
pub fn generate_dataset(dir: &Path, cfg: &SimConfig, spec: &SpectrogramConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    let ex = MelExtractor::new(spec)?;
    let train = train_scenes(cfg.scenes, cfg.train_fraction, seed);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenes: Vec<SceneRecord> = (0..cfg.scenes)
        .into_par_iter()
        .map(|s| {
            let frames = generate_scene(cfg, spec, seed, s)?;
            let sdir = dir.join(format!("scenes/{s:03}"));
            fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
            let mut records = Vec::with_capacity(frames.len());
            for f in &frames {
                let [audio, image, cloud, mel] = frame_paths(s, f.index);
                let a = &f.audio;
                write_array(&dir.join(&audio), &Array::quantize(vec![a.channels(), a.len()], a.samples()))?;
                write_array(
                    &dir.join(&image),
                    &Array {
                        shape: vec![3, f.image.height(), f.image.width()],
                        data: ArrayData::F32(f.image.pixels().to_vec()),
                    },
                )?;
                write_array(
                    &dir.join(&cloud),
                    &Array {
                        shape: vec![f.cloud.points.len(), 3],
                        data: ArrayData::F64(f.cloud.points.iter().flatten().copied().collect()),
                    },
                )?;
                // Spectrogram of the stored (quantized) audio so cached and
                // recomputed values agree.
                let stored = AudioWindow::new(
                    a.channels(),
                    a.sample_rate(),
                    Array::quantize(vec![a.channels(), a.len()], a.samples()).to_f32(),
                )?;
                let m = ex.compute(&stored)?;
                write_array(
                    &dir.join(&mel),
                    &Array {
                        shape: m.shape().to_vec(),
                        data: ArrayData::F32(m.values().iter().map(|&v| v as f32).collect()),
                    },
                )?;
                records.push(FrameRecord {
                    index: f.index,
                    timestamp: f.timestamp,
                    audio,
                    image,
                    cloud,
                    mel,
                    truth: f.truth.clone(),
                });
            }
            Ok(SceneRecord {
                id: s,
                split: if train.contains(&s) { Split::Train } else { Split::Test },
                class: frames.first().map_or(0, |f| f.truth.class),
                frames: records,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        format: 1,
        seed,
        sim: cfg.clone(),
        spectrogram: spec.clone(),
        scenes,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
