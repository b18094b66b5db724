//! Multi-resolution model: backbone → per-level encoding → projection →
//! simplex-weighted fusion → linear classifier.

mod backbone;
mod params;

pub use backbone::{
    backbone_backward, backbone_forward, descriptors_to_map, map_to_descriptors, BackboneCache,
    BackboneGrads,
};
pub use params::{
    configure_levels, parse_levels, BackboneParams, ConvStage, FusionHead, LevelHead,
    ModelConfig, ModelParams, ParamGroup, ParamGroupMut, STAGES,
};

use std::ops::{Deref, DerefMut};

use rayon::prelude::*;

use crate::encoding::{encode_backward, encode_forward, DescriptorBatch, EncodeCache, EncodingVector};
use crate::error::{Error, Result};
use crate::numkernel::{softmax_xent, Matrix, Tensor4};

/// Softmax of the fusion logits.
pub fn fusion_weights(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone)]
pub struct FuseOutput {
    /// `sum_l w_l · (e_l P_l)`, length M.
    pub fused: Vec<f64>,
    pub omega: Vec<f64>,
    /// Per-level `e_l P_l`.
    pub projected: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FuseGrads {
    pub encodings: Vec<Vec<f64>>,
    pub projections: Vec<Matrix>,
    pub logits: Vec<f64>,
}

fn project(e: &[f64], p: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; p.cols()];
    for (j, &ev) in e.iter().enumerate() {
        if ev == 0.0 {
            continue;
        }
        for (o, &pv) in out.iter_mut().zip(p.row(j)) {
            *o += ev * pv;
        }
    }
    out
}

pub fn fuse_forward(encodings: &[EncodingVector], head: &FusionHead) -> Result<FuseOutput> {
    if encodings.len() != head.levels.len() || head.fusion_logits.len() != head.levels.len() {
        return Err(Error::shape(format!(
            "{} encodings for {} fusion levels ({} logits)",
            encodings.len(),
            head.levels.len(),
            head.fusion_logits.len()
        )));
    }
    let m = head.fc_weight.rows();
    let omega = fusion_weights(&head.fusion_logits);
    let mut fused = vec![0.0; m];
    let mut projected = Vec::with_capacity(encodings.len());
    for ((enc, lh), &w) in encodings.iter().zip(&head.levels).zip(&omega) {
        if enc.len() != lh.projection.rows() || lh.projection.cols() != m {
            return Err(Error::shape(format!(
                "level {} encoding has length {} but projection is {}x{} (shared dim {m})",
                lh.level,
                enc.len(),
                lh.projection.rows(),
                lh.projection.cols()
            )));
        }
        let p = project(enc.values(), &lh.projection);
        for (f, &pv) in fused.iter_mut().zip(&p) {
            *f += w * pv;
        }
        projected.push(p);
    }
    Ok(FuseOutput {
        fused,
        omega,
        projected,
    })
}

pub fn fuse_backward(
    grad_fused: &[f64],
    encodings: &[EncodingVector],
    head: &FusionHead,
    out: &FuseOutput,
) -> Result<FuseGrads> {
    if grad_fused.len() != out.fused.len() || encodings.len() != out.projected.len() {
        return Err(Error::shape("fuse backward does not match forward output"));
    }
    let omega = &out.omega;
    let d_omega: Vec<f64> = out
        .projected
        .iter()
        .map(|p| p.iter().zip(grad_fused).map(|(a, b)| a * b).sum())
        .collect();
    let mean: f64 = omega.iter().zip(&d_omega).map(|(w, d)| w * d).sum();
    let logits = omega
        .iter()
        .zip(&d_omega)
        .map(|(w, d)| w * (d - mean))
        .collect();

    let mut enc_grads = Vec::with_capacity(encodings.len());
    let mut proj_grads = Vec::with_capacity(encodings.len());
    for ((enc, lh), &w) in encodings.iter().zip(&head.levels).zip(omega) {
        let dp: Vec<f64> = grad_fused.iter().map(|g| w * g).collect();
        let p = &lh.projection;
        let mut gp = Matrix::zeros(p.rows(), p.cols());
        let mut ge = vec![0.0; p.rows()];
        for (j, &ev) in enc.values().iter().enumerate() {
            let prow = p.row(j);
            ge[j] = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (g, &d) in gp.row_mut(j).iter_mut().zip(&dp) {
                *g = ev * d;
            }
        }
        enc_grads.push(ge);
        proj_grads.push(gp);
    }
    Ok(FuseGrads {
        encodings: enc_grads,
        projections: proj_grads,
        logits,
    })
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Vec<f64>,
    pub encodings: Vec<EncodingVector>,
    pub omega: Vec<f64>,
    pub fused: Vec<f64>,
}

impl ModelOutput {
    /// Index of the largest logit; lowest index on ties.
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Caches for everything downstream of the descriptor maps.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub descriptors: Vec<DescriptorBatch>,
    pub encode: Vec<EncodeCache>,
    pub encodings: Vec<EncodingVector>,
    pub fuse: FuseOutput,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub backbone: BackboneCache,
    pub head: HeadCache,
}

/// Gradients shaped exactly like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle(pub ModelParams);

impl GradBundle {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradBundle(params.zeros_like())
    }

    /// `self += scale · other`, group by group.
    pub fn add_scaled(&mut self, other: &GradBundle, scale: f64) -> Result<()> {
        let theirs = other.0.groups();
        let ours = self.0.groups_mut();
        if theirs.len() != ours.len() {
            return Err(Error::shape("gradient bundles have different layouts"));
        }
        for (a, b) in ours.into_iter().zip(theirs) {
            if a.values.len() != b.values.len() || a.name != b.name {
                return Err(Error::shape(format!(
                    "gradient group {} does not match {}",
                    a.name, b.name
                )));
            }
            for (x, y) in a.values.iter_mut().zip(b.values) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.0.groups().iter().all(|g| g.values.iter().all(|&v| v == 0.0))
    }
}

impl Deref for GradBundle {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for GradBundle {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init_seeded(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let template = ModelParams::zeros(&config)?;
        let a: Vec<_> = template.groups().into_iter().map(|g| (g.name, g.dims)).collect();
        let b: Vec<_> = params.groups().into_iter().map(|g| (g.name, g.dims)).collect();
        if a != b {
            return Err(Error::shape("parameters do not match the model configuration"));
        }
        Ok(Model { config, params })
    }

    pub fn omega(&self) -> Vec<f64> {
        fusion_weights(&self.params.head.fusion_logits)
    }

    /// Full forward pass for a single 1×C×H×W image.
    pub fn forward(&self, image: &Tensor4) -> Result<(ModelOutput, ForwardCache)> {
        model_forward(image, &self.params)
    }

    /// Forward from externally computed descriptor maps, one per active level.
    pub fn forward_descriptors(
        &self,
        levels: &[DescriptorBatch],
    ) -> Result<(ModelOutput, HeadCache)> {
        head_forward(levels.to_vec(), &self.params.head)
    }

    pub fn backward(&self, grad_logits: &[f64], cache: &ForwardCache) -> Result<GradBundle> {
        model_backward(grad_logits, cache, &self.params)
    }

    pub fn predict(&self, image: &Tensor4) -> Result<usize> {
        Ok(self.forward(image)?.0.predicted())
    }

    /// Logits for each image, computed in parallel and returned in input order.
    pub fn logits_batch(&self, images: &[&Tensor4]) -> Result<Vec<Vec<f64>>> {
        images
            .par_iter()
            .map(|img| self.forward(img).map(|(o, _)| o.logits))
            .collect()
    }

    /// Mean cross-entropy over the batch and its gradient. Samples run in
    /// parallel; their gradients are summed in input order so the result is
    /// independent of the thread count.
    pub fn loss_and_grads(&self, images: &[&Tensor4], labels: &[usize]) -> Result<(f64, GradBundle)> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::shape(format!(
                "{} images with {} labels",
                images.len(),
                labels.len()
            )));
        }
        let per_sample: Vec<(f64, GradBundle)> = images
            .par_iter()
            .zip(labels.par_iter())
            .map(|(img, &label)| {
                let (out, cache) = self.forward(img)?;
                let logits = Matrix::from_vec(1, out.logits.len(), out.logits)?;
                let (loss, grad) = softmax_xent(&logits, &[label])?;
                let g = self.backward(grad.data(), &cache)?;
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / images.len() as f64;
        let mut total = GradBundle::zeros_like(&self.params);
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l;
            total.add_scaled(g, scale)?;
        }
        Ok((loss * scale, total))
    }
}

pub fn model_forward(image: &Tensor4, params: &ModelParams) -> Result<(ModelOutput, ForwardCache)> {
    let (all_levels, backbone) = backbone_forward(image, &params.backbone)?;
    let mut all_levels: Vec<Option<DescriptorBatch>> = all_levels.into_iter().map(Some).collect();
    let active = params
        .head
        .levels
        .iter()
        .map(|lh| {
            all_levels
                .get_mut(lh.level - 1)
                .and_then(Option::take)
                .ok_or_else(|| Error::shape(format!("level {} is not produced by the backbone", lh.level)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (out, head) = head_forward(active, &params.head)?;
    Ok((out, ForwardCache { backbone, head }))
}

fn head_forward(descriptors: Vec<DescriptorBatch>, head: &FusionHead) -> Result<(ModelOutput, HeadCache)> {
    if descriptors.len() != head.levels.len() {
        return Err(Error::shape(format!(
            "{} descriptor maps for {} active levels",
            descriptors.len(),
            head.levels.len()
        )));
    }
    let mut encode = Vec::with_capacity(descriptors.len());
    let mut encodings = Vec::with_capacity(descriptors.len());
    for (batch, lh) in descriptors.iter().zip(&head.levels) {
        let (e, c) = encode_forward(batch, &lh.codebook)?;
        encodings.push(e);
        encode.push(c);
    }
    let fuse = fuse_forward(&encodings, head)?;
    let mut logits = head.fc_bias.clone();
    for (m, &f) in fuse.fused.iter().enumerate() {
        for (l, &w) in logits.iter_mut().zip(head.fc_weight.row(m)) {
            *l += f * w;
        }
    }
    let out = ModelOutput {
        logits,
        encodings: encodings.clone(),
        omega: fuse.omega.clone(),
        fused: fuse.fused.clone(),
    };
    Ok((
        out,
        HeadCache {
            descriptors,
            encode,
            encodings,
            fuse,
        },
    ))
}

/// Head gradients written into `bundle`; returns dL/d(descriptors) per level.
fn head_backward(
    grad_logits: &[f64],
    cache: &HeadCache,
    head: &FusionHead,
    bundle: &mut GradBundle,
) -> Result<Vec<Matrix>> {
    let classes = head.fc_bias.len();
    if grad_logits.len() != classes {
        return Err(Error::shape(format!(
            "{} logit gradients for {classes} classes",
            grad_logits.len()
        )));
    }
    if cache.encodings.len() != head.levels.len() {
        return Err(Error::shape("forward cache was produced for different levels"));
    }
    let gh = &mut bundle.0.head;
    gh.fc_bias.copy_from_slice(grad_logits);
    let mut grad_fused = vec![0.0; head.fc_weight.rows()];
    for (m, (&f, gf)) in cache.fuse.fused.iter().zip(grad_fused.iter_mut()).enumerate() {
        let wrow = head.fc_weight.row(m);
        *gf = wrow.iter().zip(grad_logits).map(|(w, g)| w * g).sum();
        for (gw, &g) in gh.fc_weight.row_mut(m).iter_mut().zip(grad_logits) {
            *gw = f * g;
        }
    }

    let fg = fuse_backward(&grad_fused, &cache.encodings, head, &cache.fuse)?;
    gh.fusion_logits.copy_from_slice(&fg.logits);

    let mut desc_grads = Vec::with_capacity(head.levels.len());
    for (idx, lh) in head.levels.iter().enumerate() {
        let eg = encode_backward(
            &fg.encodings[idx],
            &cache.descriptors[idx],
            &lh.codebook,
            &cache.encode[idx],
        )?;
        let gl = &mut gh.levels[idx];
        gl.projection = fg.projections[idx].clone();
        let (cw, sm) = gl.codebook.parts_mut();
        cw.data_mut().copy_from_slice(eg.codewords.data());
        sm.copy_from_slice(&eg.smoothing);
        desc_grads.push(eg.x);
    }
    Ok(desc_grads)
}

pub fn model_backward(
    grad_logits: &[f64],
    cache: &ForwardCache,
    params: &ModelParams,
) -> Result<GradBundle> {
    let mut bundle = GradBundle::zeros_like(params);
    let desc_grads = head_backward(grad_logits, &cache.head, &params.head, &mut bundle)?;

    let mut pooled_grads: Vec<Option<Tensor4>> = vec![None; params.backbone.stages.len()];
    for (lh, g) in params.head.levels.iter().zip(desc_grads) {
        let dims = cache
            .backbone
            .pooled
            .get(lh.level - 1)
            .ok_or_else(|| Error::shape("backbone cache is missing a level"))?
            .dims();
        pooled_grads[lh.level - 1] = Some(descriptors_to_map(&g, dims[2], dims[3])?);
    }
    let bg = backbone_backward(&pooled_grads, &cache.backbone, &params.backbone)?;
    for ((stage, k), b) in bundle.0.backbone.stages.iter_mut().zip(bg.kernels).zip(bg.bias) {
        stage.kernels = k;
        stage.bias = b;
    }
    Ok(bundle)
}

/// Gradients of the head only, given a cache from [`Model::forward_descriptors`].
/// Backbone entries of the bundle stay zero.
pub fn head_only_backward(
    grad_logits: &[f64],
    cache: &HeadCache,
    params: &ModelParams,
) -> Result<(GradBundle, Vec<Matrix>)> {
    let mut bundle = GradBundle::zeros_like(params);
    let d = head_backward(grad_logits, cache, &params.head, &mut bundle)?;
    Ok((bundle, d))
}
