//! Model variants assembled from the encoders, fusion stages and heads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{split_patches, MelSpectrogram, PatchAxis, PatchEmbed};
use crate::error::{Error, Result};
use crate::fusion::{clamp_alpha, Aam, AlphaSource, Fem, FusionConfig};
use crate::graph::{Graph, Var};
use crate::heads::{
    cls_loss_on_graph, pos_loss_on_graph, prediction, ts_loss_on_graph, HeadConfig, HeadOutputs, Heads,
    Prediction, StudentOutputs, StudentPrediction, Target,
};
use crate::params::{fan_in, Binding, ParamId, ParamStore};
use crate::ssm::{MambaStack, SsmConfig};
use crate::tensor::Tensor;
use crate::vision::{student_prediction, StudentHeads, VisionConfig, VisionEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub ssm: SsmConfig,
    /// Blocks per audio stack.
    pub audio_depth: usize,
    /// Temporal patch width `w` in frames.
    pub temporal_patch: usize,
    /// Spectral patch height `h` in mel bins.
    pub spectral_patch: usize,
    pub vision: VisionConfig,
    pub fusion: FusionConfig,
    pub heads: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ssm: SsmConfig::default(),
            audio_depth: 2,
            temporal_patch: 4,
            spectral_patch: 1,
            vision: VisionConfig::default(),
            fusion: FusionConfig::default(),
            heads: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.ssm.d_model
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Temporal audio stack only.
    Temporal,
    /// Spectral audio stack only.
    Spectral,
    /// Both audio stacks, token rows concatenated.
    AudioConcat,
    /// Both audio stacks fused by the enhancement module.
    AudioFem,
    /// Visual stack only.
    Visual,
    /// Audio and visual token rows concatenated.
    AvConcat,
    /// Audio enhancement plus existence-weighted visual enhancement.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Temporal,
        Variant::Spectral,
        Variant::AudioConcat,
        Variant::AudioFem,
        Variant::Visual,
        Variant::AvConcat,
        Variant::Full,
    ];

    /// The audio ablation set plus the full model.
    pub const ABLATION: [Variant; 5] = [
        Variant::Temporal,
        Variant::Spectral,
        Variant::AudioConcat,
        Variant::AudioFem,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Temporal => "temporal",
            Variant::Spectral => "spectral",
            Variant::AudioConcat => "audio-concat",
            Variant::AudioFem => "audio-fem",
            Variant::Visual => "visual",
            Variant::AvConcat => "av-concat",
            Variant::Full => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Temporal => "T",
            Variant::Spectral => "S",
            Variant::AudioConcat => "T+S concat",
            Variant::AudioFem => "T+S FEM",
            Variant::Visual => "V",
            Variant::AvConcat => "T+S+V concat",
            Variant::Full => "T+S FEM + V AAM",
        }
    }

    pub fn uses_temporal(self) -> bool {
        !matches!(self, Variant::Spectral | Variant::Visual)
    }

    pub fn uses_spectral(self) -> bool {
        !matches!(self, Variant::Temporal | Variant::Visual)
    }

    pub fn uses_vision(self) -> bool {
        matches!(self, Variant::Visual | Variant::AvConcat | Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Affine standardisation applied to log-mel values before patching.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        InputNorm { mean: 0.0, std: 1.0 }
    }
}

impl InputNorm {
    pub fn fit<'a>(specs: impl IntoIterator<Item = &'a MelSpectrogram>) -> Self {
        let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
        for spec in specs {
            for &v in spec.values() {
                n += 1;
                s += v;
                s2 += v * v;
            }
        }
        if n == 0 {
            return InputNorm::default();
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        InputNorm {
            mean,
            std: var.sqrt().max(1e-6),
        }
    }

    pub fn apply(&self, spec: &MelSpectrogram) -> MelSpectrogram {
        let (m, s) = (self.mean, self.std);
        spec.map(|v| (v - m) / s)
    }
}

/// Pre-patched inputs of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioPatches {
    pub temporal: Tensor,
    pub spectral: Tensor,
}

impl AudioPatches {
    pub fn from_spectrogram(spec: &MelSpectrogram, norm: &InputNorm, cfg: &ModelConfig) -> Result<Self> {
        let s = norm.apply(spec);
        Ok(AudioPatches {
            temporal: split_patches(&s, PatchAxis::Temporal, cfg.temporal_patch)?.patches,
            spectral: split_patches(&s, PatchAxis::Spectral, cfg.spectral_patch)?.patches,
        })
    }
}

#[derive(Clone, Debug)]
struct AudioBranch {
    embed: PatchEmbed,
    stack: MambaStack,
}

impl AudioBranch {
    fn forward(&self, g: &mut Graph, p: &Binding, patches: &Tensor) -> Result<Var> {
        let x = self.embed.forward(g, p, patches)?;
        self.stack.forward(g, p, x)
    }
}

#[derive(Clone, Debug)]
enum Fusion {
    None,
    /// Token rows concatenated along features, then a linear map back to `D`.
    Concat { w: ParamId, b: ParamId },
    Fem(Fem),
    Aam(Aam),
}

/// Graph outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub heads: HeadOutputs,
    pub student: Option<StudentOutputs>,
    /// Visual weight actually used, if the variant has one.
    pub alpha: Option<f64>,
}

/// Per-sample loss terms on a graph.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub pos: Var,
    pub cls: Var,
    pub ts: Option<Var>,
    pub total: Var,
}

/// Value-level forward result.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub prediction: Prediction,
    pub student: Option<StudentPrediction>,
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    variant: Variant,
    input: [usize; 3],
    pub store: ParamStore,
    pub norm: InputNorm,
    temporal: Option<AudioBranch>,
    spectral: Option<AudioBranch>,
    vision: Option<VisionEncoder>,
    student: Option<StudentHeads>,
    fusion: Fusion,
    heads: Heads,
}

impl Model {
    pub fn new(
        cfg: &ModelConfig,
        variant: Variant,
        channels: usize,
        frames: usize,
        mels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.d_model();
        if cfg.fusion.heads == 0 || cfg.fusion.d_k % cfg.fusion.heads != 0 {
            return Err(Error::Config(format!(
                "d_k = {} is not divisible by {} heads",
                cfg.fusion.d_k, cfg.fusion.heads
            )));
        }
        let (w, h) = (cfg.temporal_patch, cfg.spectral_patch);
        if w == 0 || frames % w != 0 || h == 0 || mels % h != 0 {
            return Err(Error::Patching(format!(
                "{frames}x{mels} spectrogram does not split into w={w}, h={h} patches"
            )));
        }
        if cfg.vision.patch == 0 || cfg.vision.image_size % cfg.vision.patch != 0 {
            return Err(Error::Patching(format!(
                "{} pixel images do not split into {} pixel patches",
                cfg.vision.image_size, cfg.vision.patch
            )));
        }
        let mut store = ParamStore::new();
        let s = &mut store;
        let branch = |store: &mut ParamStore, name: &str, patches: usize, dim: usize, rng: &mut _| AudioBranch {
            embed: PatchEmbed::new(store, &format!("{name}.embed"), patches, dim, d, rng),
            stack: MambaStack::new(store, name, &cfg.ssm, cfg.audio_depth, false, rng),
        };
        let temporal = variant
            .uses_temporal()
            .then(|| branch(s, "tmamba", frames / w, channels * w * mels, rng));
        let spectral = variant
            .uses_spectral()
            .then(|| branch(s, "smamba", mels / h, channels * frames * h, rng));
        let vision = variant
            .uses_vision()
            .then(|| VisionEncoder::new(s, &cfg.vision, &cfg.ssm, rng));
        let student = variant
            .uses_vision()
            .then(|| StudentHeads::new(s, d, cfg.heads.center_hidden, rng));
        let fusion = match variant {
            Variant::Temporal | Variant::Spectral | Variant::Visual => Fusion::None,
            Variant::AudioConcat | Variant::AvConcat => {
                let k = if variant == Variant::AvConcat { 3 } else { 2 };
                Fusion::Concat {
                    w: s.add("concat.w", fan_in(rng, k * d, d)),
                    b: s.add("concat.b", Tensor::zeros(1, d)),
                }
            }
            Variant::AudioFem => Fusion::Fem(Fem::new(s, "fem", d, cfg.fusion.d_k, cfg.fusion.heads, rng)),
            Variant::Full => Fusion::Aam(Aam::new(s, "aam", d, &cfg.fusion, rng)),
        };
        let heads = Heads::new(s, "heads", d, &cfg.heads, rng);
        Ok(Model {
            cfg: cfg.clone(),
            variant,
            input: [channels, frames, mels],
            store,
            norm: InputNorm::default(),
            temporal,
            spectral,
            vision,
            student,
            fusion,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Spectrogram shape `[channels, frames, mels]` the model was built for.
    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn student_heads(&self) -> Option<&StudentHeads> {
        self.student.as_ref()
    }

    pub fn uses_vision(&self) -> bool {
        self.vision.is_some()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    /// Forward pass. `image` holds pre-extracted image patches and is required
    /// exactly when the variant has a visual branch. `alpha` overrides the
    /// configured visual weight.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        audio: &AudioPatches,
        image: Option<&Tensor>,
        alpha: Option<f64>,
    ) -> Result<Outputs> {
        let psi_t = match &self.temporal {
            Some(b) => Some(b.forward(g, p, &audio.temporal)?),
            None => None,
        };
        let psi_s = match &self.spectral {
            Some(b) => Some(b.forward(g, p, &audio.spectral)?),
            None => None,
        };
        let upsilon = match &self.vision {
            Some(v) => {
                let img = image.ok_or_else(|| Error::InvalidInput("visual variant needs an image".into()))?;
                Some(v.forward(g, p, img)?)
            }
            None => None,
        };
        let student = match (&self.student, upsilon) {
            (Some(s), Some(u)) => Some(s.forward(g, p, u)),
            _ => None,
        };
        let mut used_alpha = None;
        let fused = match &self.fusion {
            Fusion::None => psi_t.or(psi_s).or(upsilon).expect("variant has a branch"),
            Fusion::Concat { w, b } => {
                let mut tokens = Vec::new();
                for x in [psi_t, psi_s, upsilon].into_iter().flatten() {
                    let rows = g.shape(x).0;
                    tokens.push(g.slice_rows(x, rows - 1, 1));
                }
                let cat = g.concat_cols(&tokens);
                let y = g.matmul(cat, p.var(*w));
                g.add_row(y, p.var(*b))
            }
            Fusion::Fem(fem) => fem.forward(g, p, psi_t.expect("temporal"), psi_s.expect("spectral"))?,
            Fusion::Aam(aam) => {
                let a = match alpha {
                    Some(a) => clamp_alpha(a),
                    None => match self.cfg.fusion.alpha_source {
                        AlphaSource::Fixed => clamp_alpha(self.cfg.fusion.fixed_alpha),
                        AlphaSource::Student | AlphaSource::Teacher => {
                            let z = g.value(student.expect("student").existence_logit).item();
                            1.0 / (1.0 + (-z).exp())
                        }
                    },
                };
                used_alpha = Some(a);
                aam.forward(
                    g,
                    p,
                    psi_t.expect("temporal"),
                    psi_s.expect("spectral"),
                    upsilon.expect("visual"),
                    a,
                )?
            }
        };
        Ok(Outputs {
            heads: self.heads.forward(g, p, fused),
            student,
            alpha: used_alpha,
        })
    }

    /// Per-sample objective `L_cls + g1 L_pos + g2 L_ts` on the graph.
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        out: &Outputs,
        target: &Target,
        gamma1: f64,
        gamma2: f64,
        floor: f64,
    ) -> Result<SampleLoss> {
        let pos = pos_loss_on_graph(g, out.heads.position, &target.position);
        let cls = cls_loss_on_graph(g, out.heads.logits, target.class, floor);
        let ts = match &out.student {
            Some(s) if gamma2 != 0.0 => Some(ts_loss_on_graph(g, s, target)?),
            _ => None,
        };
        let wp = g.scale(pos, gamma1);
        let mut total = g.add(cls, wp);
        if let Some(t) = ts {
            let wt = g.scale(t, gamma2);
            total = g.add(total, wt);
        }
        Ok(SampleLoss { pos, cls, ts, total })
    }

    pub fn infer(&self, audio: &AudioPatches, image: Option<&Tensor>, alpha: Option<f64>) -> Result<Inference> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let out = self.forward(&mut g, &p, audio, image, alpha)?;
        Ok(Inference {
            prediction: prediction(&g, &out.heads),
            student: out.student.as_ref().map(|s| student_prediction(&g, s)),
            alpha: out.alpha,
        })
    }

    /// Fused audio features `Phi(Psi_T, Psi_S)` of the enhancement stage; only
    /// for variants that have one.
    pub fn audio_enhanced(&self, audio: &AudioPatches) -> Result<Tensor> {
        let fem = match &self.fusion {
            Fusion::Fem(f) => f,
            Fusion::Aam(a) => &a.audio,
            _ => return Err(Error::Config(format!("{} has no enhancement stage", self.variant))),
        };
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let t = self.temporal.as_ref().expect("temporal").forward(&mut g, &p, &audio.temporal)?;
        let s = self.spectral.as_ref().expect("spectral").forward(&mut g, &p, &audio.spectral)?;
        let out = fem.forward(&mut g, &p, t, s)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::predict;
    use crate::params::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            ssm: SsmConfig {
                d_model: 12,
                d_state: 4,
                expand: 2,
                conv_kernel: 4,
                dt_rank: 2,
                ..SsmConfig::default()
            },
            audio_depth: 1,
            temporal_patch: 2,
            spectral_patch: 2,
            vision: VisionConfig {
                image_size: 16,
                patch: 8,
                depth: 1,
            },
            fusion: FusionConfig {
                heads: 2,
                d_k: 12,
                ..FusionConfig::default()
            },
            heads: HeadConfig {
                trajectory_hidden: 8,
                class_hidden: 8,
                center_hidden: 8,
                ..HeadConfig::default()
            },
        }
    }

    fn inputs(rng: &mut ChaCha8Rng) -> (AudioPatches, Tensor) {
        (
            AudioPatches {
                temporal: uniform(rng, 4, 2 * 2 * 6, 1.0),
                spectral: uniform(rng, 3, 2 * 8 * 2, 1.0),
            },
            Tensor::from_fn(4, 3 * 64, |_, _| rng.gen_range(0.0..1.0)),
        )
    }

    fn build(v: Variant, seed: u64) -> Model {
        Model::new(&tiny_config(), v, 2, 8, 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn every_variant_runs_and_names_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (audio, image) = inputs(&mut rng);
        for v in Variant::ALL {
            let m = build(v, 2);
            let inf = m.infer(&audio, Some(&image), None).unwrap();
            assert!(inf.prediction.position.iter().all(|x| x.is_finite()));
            assert_eq!(inf.student.is_some(), v.uses_vision());
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn fem_variant_has_more_parameters_than_concat() {
        assert_ne!(
            build(Variant::AudioFem, 3).parameter_count(),
            build(Variant::AudioConcat, 3).parameter_count()
        );
    }

    #[test]
    fn audio_variants_ignore_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (audio, image) = inputs(&mut rng);
        let m = build(Variant::AudioFem, 5);
        let a = m.infer(&audio, Some(&image), None).unwrap();
        let b = m.infer(&audio, Some(&image.scale(0.05)), None).unwrap();
        let c = m.infer(&audio, None, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn zero_alpha_reduces_full_model_to_doubled_audio_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (audio, image) = inputs(&mut rng);
        let m = build(Variant::Full, 7);
        let inf = m.infer(&audio, Some(&image), Some(0.0)).unwrap();
        let phi = m.audio_enhanced(&audio).unwrap();
        let direct = predict(&phi.scale(2.0), m.heads(), &m.store).unwrap();
        assert_eq!(inf.prediction, direct);
        assert_eq!(inf.alpha, Some(0.0));
    }

    #[test]
    fn visual_variant_requires_an_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (audio, _) = inputs(&mut rng);
        assert!(build(Variant::Visual, 9).infer(&audio, None, None).is_err());
    }

    #[test]
    fn zero_gamma2_leaves_student_without_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (audio, image) = inputs(&mut rng);
        let m = build(Variant::Full, 11);
        let target = Target {
            position: [1.0, 2.0, 3.0],
            class: 1,
            visual_center: Some([0.4, 0.5]),
            visual_present: true,
        };
        for (gamma2, expect_zero) in [(0.0, true), (0.5, false)] {
            let mut g = Graph::new();
            let p = m.store.bind(&mut g);
            let out = m.forward(&mut g, &p, &audio, Some(&image), None).unwrap();
            let loss = m.sample_loss(&mut g, &out, &target, 2.0, gamma2, 1e-12).unwrap();
            let grads = g.backward(loss.total);
            let mut acc = m.store.zeros_like();
            p.accumulate(&grads, &mut acc);
            let s = m.student_heads().unwrap();
            let ids: Vec<ParamId> = s
                .center()
                .layers()
                .iter()
                .chain(s.existence().layers())
                .flat_map(|&(w, b)| [w, b])
                .collect();
            let norm: f64 = ids.iter().map(|id| acc[id.index()].max_abs()).sum();
            assert_eq!(norm == 0.0, expect_zero, "gamma2 = {gamma2}: {norm}");
        }
    }
}
