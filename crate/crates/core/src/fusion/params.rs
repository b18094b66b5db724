use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::{init_codebook_with, Codebook};
use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Tensor4};

/// Number of convolution stages in the built-in feature extractor; also the
/// number of available resolution levels.
pub const STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub widths: [usize; STAGES],
    /// Active resolution levels, ascending, drawn from `1..=STAGES`.
    pub levels: Vec<usize>,
    pub dict_size: usize,
    pub shared_dim: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            in_channels: 1,
            kernel_size: 3,
            widths: [8, 16, 32],
            levels: vec![1, 2, 3],
            dict_size: 8,
            shared_dim: 64,
            classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        validate_levels(&self.levels)?;
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel size must be odd"));
        }
        if self.widths.iter().any(|&w| w == 0)
            || self.in_channels == 0
            || self.dict_size == 0
            || self.shared_dim == 0
        {
            return Err(Error::invalid("widths, channels, dict size and shared dim must be >= 1"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        let factor = 1 << STAGES;
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(Error::invalid(format!(
                "image size {} must be a positive multiple of {factor}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Descriptor dimension at a level (1-based).
    pub fn level_dim(&self, level: usize) -> usize {
        self.widths[level - 1]
    }

    /// Spatial side of the level's pooled feature map.
    pub fn level_side(&self, level: usize) -> usize {
        self.image_size >> level
    }
}

fn validate_levels(levels: &[usize]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::invalid("at least one resolution level must be active"));
    }
    if levels.iter().any(|&l| l == 0 || l > STAGES) {
        return Err(Error::invalid(format!(
            "levels must be drawn from 1..={STAGES}, got {levels:?}"
        )));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "levels must be strictly ascending, got {levels:?}"
        )));
    }
    Ok(())
}

/// Restricts a configuration to the given resolution levels. Duplicates are
/// dropped and the order normalized.
pub fn configure_levels(base: &ModelConfig, levels: &[usize]) -> Result<ModelConfig> {
    let mut sorted = levels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    validate_levels(&sorted)?;
    let mut cfg = base.clone();
    cfg.levels = sorted;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `"1,2,3"` style level lists.
pub fn parse_levels(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let l: usize = part
            .parse()
            .map_err(|_| Error::invalid(format!("bad level {part:?}")))?;
        out.push(l);
    }
    out.sort_unstable();
    out.dedup();
    validate_levels(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub kernels: Tensor4,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub stages: Vec<ConvStage>,
}

/// Dictionary and projection for one resolution level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelHead {
    pub level: usize,
    pub codebook: Codebook,
    /// `(K·D) × M`
    pub projection: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub levels: Vec<LevelHead>,
    /// Unconstrained logits; the fusion weights are their softmax.
    pub fusion_logits: Vec<f64>,
    /// `M × classes`
    pub fc_weight: Matrix,
    pub fc_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub head: FusionHead,
}

/// Named view of one parameter array.
#[derive(Debug)]
pub struct ParamGroup<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: &'a [f64],
}

#[derive(Debug)]
pub struct ParamGroupMut<'a> {
    pub name: String,
    pub values: &'a mut [f64],
}

impl ModelParams {
    /// All-zero parameters with the shapes `cfg` implies. Smoothing factors
    /// are zero too.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let mut stages = Vec::with_capacity(STAGES);
        let mut in_ch = cfg.in_channels;
        for &w in &cfg.widths {
            stages.push(ConvStage {
                kernels: Tensor4::zeros(w, in_ch, k, k),
                bias: vec![0.0; w],
            });
            in_ch = w;
        }
        let mut levels = Vec::with_capacity(cfg.levels.len());
        for &l in &cfg.levels {
            let d = cfg.level_dim(l);
            levels.push(LevelHead {
                level: l,
                codebook: Codebook::new(
                    Matrix::zeros(cfg.dict_size, d),
                    vec![0.0; cfg.dict_size],
                )?,
                projection: Matrix::zeros(cfg.dict_size * d, cfg.shared_dim),
            });
        }
        Ok(ModelParams {
            backbone: BackboneParams { stages },
            head: FusionHead {
                levels,
                fusion_logits: vec![0.0; cfg.levels.len()],
                fc_weight: Matrix::zeros(cfg.shared_dim, cfg.classes),
                fc_bias: vec![0.0; cfg.classes],
            },
        })
    }

    /// Random initialization: He-uniform conv kernels with zero bias,
    /// codebooks as in [`init_codebook_with`], uniform fan-in scaled
    /// projections and classifier, zero fusion logits (equal weights).
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        for stage in &mut p.backbone.stages {
            let [_, c, kh, kw] = stage.kernels.dims();
            let bound = (6.0 / (c * kh * kw) as f64).sqrt();
            for v in stage.kernels.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }

        for head in &mut p.head.levels {
            let d = head.codebook.d();
            head.codebook = init_codebook_with(cfg.dict_size, d, rng)?;
            let bound = (3.0 / head.projection.rows() as f64).sqrt();
            for v in head.projection.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        let bound = 1.0 / (cfg.shared_dim as f64).sqrt();
        for v in p.head.fc_weight.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        Ok(p)
    }

    pub fn init_seeded(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(cfg, &mut rng)
    }

    pub fn groups(&self) -> Vec<ParamGroup<'_>> {
        let mut out = Vec::new();
        for (i, st) in self.backbone.stages.iter().enumerate() {
            out.push(ParamGroup {
                name: format!("stage{}.kernels", i + 1),
                dims: st.kernels.dims().to_vec(),
                values: st.kernels.data(),
            });
            out.push(ParamGroup {
                name: format!("stage{}.bias", i + 1),
                dims: vec![st.bias.len()],
                values: &st.bias,
            });
        }
        for lh in &self.head.levels {
            let cb = &lh.codebook;
            out.push(ParamGroup {
                name: format!("level{}.codewords", lh.level),
                dims: vec![cb.k(), cb.d()],
                values: cb.codewords().data(),
            });
            out.push(ParamGroup {
                name: format!("level{}.smoothing", lh.level),
                dims: vec![cb.k()],
                values: cb.smoothing(),
            });
            out.push(ParamGroup {
                name: format!("level{}.projection", lh.level),
                dims: vec![lh.projection.rows(), lh.projection.cols()],
                values: lh.projection.data(),
            });
        }
        out.push(ParamGroup {
            name: "fusion.logits".into(),
            dims: vec![self.head.fusion_logits.len()],
            values: &self.head.fusion_logits,
        });
        out.push(ParamGroup {
            name: "fc.weight".into(),
            dims: vec![self.head.fc_weight.rows(), self.head.fc_weight.cols()],
            values: self.head.fc_weight.data(),
        });
        out.push(ParamGroup {
            name: "fc.bias".into(),
            dims: vec![self.head.fc_bias.len()],
            values: &self.head.fc_bias,
        });
        out
    }

    /// Mutable counterpart of [`groups`](Self::groups), same order and names.
    pub fn groups_mut(&mut self) -> Vec<ParamGroupMut<'_>> {
        let mut out = Vec::new();
        for (i, st) in self.backbone.stages.iter_mut().enumerate() {
            out.push(ParamGroupMut {
                name: format!("stage{}.kernels", i + 1),
                values: st.kernels.data_mut(),
            });
            out.push(ParamGroupMut {
                name: format!("stage{}.bias", i + 1),
                values: &mut st.bias,
            });
        }
        let FusionHead {
            levels,
            fusion_logits,
            fc_weight,
            fc_bias,
        } = &mut self.head;
        for lh in levels.iter_mut() {
            let level = lh.level;
            let LevelHead {
                codebook,
                projection,
                ..
            } = lh;
            let (cw, sm) = codebook.parts_mut();
            let cw = cw.data_mut();
            out.push(ParamGroupMut {
                name: format!("level{level}.codewords"),
                values: cw,
            });
            out.push(ParamGroupMut {
                name: format!("level{level}.smoothing"),
                values: sm,
            });
            out.push(ParamGroupMut {
                name: format!("level{level}.projection"),
                values: projection.data_mut(),
            });
        }
        out.push(ParamGroupMut {
            name: "fusion.logits".into(),
            values: fusion_logits,
        });
        out.push(ParamGroupMut {
            name: "fc.weight".into(),
            values: fc_weight.data_mut(),
        });
        out.push(ParamGroupMut {
            name: "fc.bias".into(),
            values: fc_bias,
        });
        out
    }

    pub fn param_count(&self) -> usize {
        self.groups().iter().map(|g| g.values.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for g in z.groups_mut() {
            g.values.fill(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.groups()
            .iter()
            .all(|g| g.values.iter().all(|v| v.is_finite()))
    }
}
