//! Image patches through a bidirectional selective-scan stack, plus the
//! student heads on the visual token (2-D center and existence).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::PatchEmbed;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::heads::{Mlp, StudentOutputs, StudentPrediction};
use crate::params::{Binding, ParamStore};
use crate::ssm::{MambaStack, SsmConfig};
use crate::tensor::Tensor;

/// `3 x H x W` RGB image, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    pub timestamp: f64,
}

impl ImageFrame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, timestamp: f64) -> Result<Self> {
        if pixels.len() != 3 * height * width {
            return Err(Error::Dimension(format!(
                "{} pixels for a 3x{height}x{width} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("pixel values must lie in [0, 1]".into()));
        }
        Ok(ImageFrame {
            height,
            width,
            pixels,
            timestamp,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len().max(1) as f64
    }

    /// Every pixel multiplied by `b`.
    pub fn darkened(&self, b: f64) -> ImageFrame {
        ImageFrame {
            pixels: self.pixels.iter().map(|&p| (p as f64 * b) as f32).collect(),
            ..self.clone()
        }
    }
}

/// `(J_v, 3*p*p)` patches scanned row by row; inside a patch the element at
/// channel `c`, row `y`, column `x` sits at `c*p*p + y*p + x`.
pub fn image_patches(img: &ImageFrame, patch: usize) -> Result<Tensor> {
    image_patches_scaled(img, patch, 1.0)
}

/// [`image_patches`] with every pixel multiplied by `b` first.
pub fn image_patches_scaled(img: &ImageFrame, patch: usize, b: f64) -> Result<Tensor> {
    let (h, w) = (img.height(), img.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Patching(format!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let pp = patch * patch;
    Ok(Tensor::from_fn(ph * pw, 3 * pp, |j, k| {
        let (py, px) = (j / pw, j % pw);
        let (c, rem) = (k / pp, k % pp);
        img.get(c, py * patch + rem / patch, px * patch + rem % patch) as f64 * b
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch: usize,
    pub depth: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 64,
            patch: 16,
            depth: 2,
        }
    }
}

impl VisionConfig {
    pub fn patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }
}

/// Output of the visual branch, `(J_v + 1, D)` with the token last.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeature {
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    embed: PatchEmbed,
    stack: MambaStack,
    patch: usize,
    patches: usize,
}

impl VisionEncoder {
    pub fn new(store: &mut ParamStore, cfg: &VisionConfig, ssm: &SsmConfig, rng: &mut impl Rng) -> Self {
        let patches = cfg.patches();
        VisionEncoder {
            embed: PatchEmbed::new(store, "vim.embed", patches, 3 * cfg.patch * cfg.patch, ssm.d_model, rng),
            stack: MambaStack::new(store, "vim", ssm, cfg.depth, true, rng),
            patch: cfg.patch,
            patches,
        }
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn embed(&self) -> &PatchEmbed {
        &self.embed
    }

    /// Encodes pre-extracted patches (see [`image_patches`]).
    pub fn forward(&self, g: &mut Graph, p: &Binding, patches: &Tensor) -> Result<Var> {
        if patches.rows() != self.patches {
            return Err(Error::Patching(format!(
                "encoder built for {} patches, got {}",
                self.patches,
                patches.rows()
            )));
        }
        let x = self.embed.forward(g, p, &auto_gain(patches))?;
        self.stack.forward(g, p, x)
    }
}

/// Mean brightness below which gain stops increasing.
pub const GAIN_FLOOR: f64 = 0.01;

/// Divides by the mean pixel value (floored) and recentres on zero, so the
/// encoder sees contrast rather than exposure. Read noise is amplified along
/// with the signal in dark frames.
pub fn auto_gain(patches: &Tensor) -> Tensor {
    let mean = patches.sum() / patches.len().max(1) as f64;
    let g = 1.0 / mean.max(GAIN_FLOOR);
    patches.map(|v| v * g - 1.0)
}

pub fn encode_image(img: &ImageFrame, encoder: &VisionEncoder, store: &ParamStore) -> Result<VisualFeature> {
    let patches = image_patches(img, encoder.patch)?;
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = encoder.forward(&mut g, &p, &patches)?;
    Ok(VisualFeature {
        tokens: g.value(out).clone(),
    })
}

/// Center regressor and existence classifier on the visual token.
#[derive(Clone, Debug)]
pub struct StudentHeads {
    center: Mlp,
    existence: Mlp,
}

impl StudentHeads {
    pub fn new(store: &mut ParamStore, d_model: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        StudentHeads {
            center: Mlp::new(store, "student.center", &[d_model, hidden, 2], rng),
            existence: Mlp::new(store, "student.existence", &[d_model, 1], rng),
        }
    }

    pub fn center(&self) -> &Mlp {
        &self.center
    }

    pub fn existence(&self) -> &Mlp {
        &self.existence
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, visual: Var) -> StudentOutputs {
        let rows = g.shape(visual).0;
        let token = g.slice_rows(visual, rows - 1, 1);
        let raw = self.center.forward(g, p, token);
        StudentOutputs {
            center: g.sigmoid(raw),
            existence_logit: self.existence.forward(g, p, token),
        }
    }
}

pub fn student_prediction(g: &Graph, out: &StudentOutputs) -> StudentPrediction {
    let c = g.value(out.center).data();
    let z = g.value(out.existence_logit).item();
    StudentPrediction {
        center: [c[0], c[1]],
        existence: 1.0 / (1.0 + (-z).exp()),
    }
}

pub fn student_heads(feat: &VisualFeature, heads: &StudentHeads, store: &ParamStore) -> Result<StudentPrediction> {
    if feat.tokens.rows() == 0 {
        return Err(Error::Dimension("visual feature has no token row".into()));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(feat.tokens.clone());
    let out = heads.forward(&mut g, &p, x);
    Ok(student_prediction(&g, &out))
}
