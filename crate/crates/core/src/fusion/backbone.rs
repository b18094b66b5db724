use super::params::{BackboneParams, ConvStage, STAGES};
use crate::encoding::DescriptorBatch;
use crate::error::{Error, Result};
use crate::numkernel::{
    avgpool2, avgpool2_backward, conv2d_backward, conv2d_forward, relu, relu_backward, Matrix,
    Tensor4,
};

/// Intermediate maps of one backbone pass over a single image.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// Input to each stage's convolution.
    pub inputs: Vec<Tensor4>,
    /// Convolution output before the ReLU.
    pub pre_act: Vec<Tensor4>,
    /// Pooled output of each stage; the level-`l` descriptor map.
    pub pooled: Vec<Tensor4>,
}

/// Per-stage gradients from [`backbone_backward`].
#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub kernels: Vec<Tensor4>,
    pub bias: Vec<Vec<f64>>,
}

/// C×H×W map of a single sample → (H·W)×C descriptor rows.
pub fn map_to_descriptors(map: &Tensor4) -> Result<DescriptorBatch> {
    let [b, c, h, w] = map.dims();
    if b != 1 {
        return Err(Error::shape(format!("expected a single sample, got batch {b}")));
    }
    let n = h * w;
    let mut data = vec![0.0; n * c];
    let src = map.data();
    for ch in 0..c {
        for i in 0..n {
            data[i * c + ch] = src[ch * n + i];
        }
    }
    DescriptorBatch::from_rows(n, c, data)
}

/// Inverse layout of [`map_to_descriptors`], used to route descriptor
/// gradients back onto a feature map.
pub fn descriptors_to_map(rows: &Matrix, h: usize, w: usize) -> Result<Tensor4> {
    let (n, c) = (rows.rows(), rows.cols());
    if n != h * w {
        return Err(Error::shape(format!("{n} descriptors cannot tile a {h}x{w} map")));
    }
    let mut data = vec![0.0; n * c];
    let src = rows.data();
    for i in 0..n {
        for ch in 0..c {
            data[ch * n + i] = src[i * c + ch];
        }
    }
    Tensor4::from_vec([1, c, h, w], data)
}

fn same_pad(stage: &ConvStage) -> usize {
    stage.kernels.dims()[2] / 2
}

/// Runs the conv → ReLU → 2×2 average pool stages on one image and returns
/// the pooled map of every stage as a descriptor batch.
pub fn backbone_forward(
    image: &Tensor4,
    params: &BackboneParams,
) -> Result<(Vec<DescriptorBatch>, BackboneCache)> {
    let [b, _, h, w] = image.dims();
    if b != 1 {
        return Err(Error::shape(format!(
            "backbone_forward takes one image at a time, got batch {b}"
        )));
    }
    let factor = 1usize << params.stages.len();
    if h % factor != 0 || w % factor != 0 {
        let pad_h = (factor - h % factor) % factor;
        let pad_w = (factor - w % factor) % factor;
        return Err(Error::shape(format!(
            "image {h}x{w} must be divisible by {factor} for {} pooling stages; \
             pad by {pad_h} rows and {pad_w} columns",
            params.stages.len()
        )));
    }
    debug_assert_eq!(params.stages.len(), STAGES);

    let mut cache = BackboneCache {
        inputs: Vec::with_capacity(STAGES),
        pre_act: Vec::with_capacity(STAGES),
        pooled: Vec::with_capacity(STAGES),
    };
    let mut descriptors = Vec::with_capacity(STAGES);
    let mut current = image.clone();
    for stage in &params.stages {
        let pre = conv2d_forward(&current, &stage.kernels, &stage.bias, 1, same_pad(stage))?;
        let pooled = avgpool2(&relu(&pre))?;
        descriptors.push(map_to_descriptors(&pooled)?);
        cache.inputs.push(current);
        cache.pre_act.push(pre);
        current = pooled.clone();
        cache.pooled.push(pooled);
    }
    Ok((descriptors, cache))
}

/// `pooled_grads[s]` is the gradient arriving directly at stage `s`'s pooled
/// map from its encoding layer (or `None` for inactive levels). The
/// contribution flowing back from stage `s+1` is added here.
pub fn backbone_backward(
    pooled_grads: &[Option<Tensor4>],
    cache: &BackboneCache,
    params: &BackboneParams,
) -> Result<BackboneGrads> {
    let stages = params.stages.len();
    if pooled_grads.len() != stages || cache.inputs.len() != stages {
        return Err(Error::shape("backbone cache does not match parameters"));
    }
    let mut kernels = vec![None; stages];
    let mut bias = vec![Vec::new(); stages];
    let mut carry: Option<Tensor4> = None;

    for s in (0..stages).rev() {
        let pooled_dims = cache.pooled[s].dims();
        let mut g = match (&pooled_grads[s], carry.take()) {
            (Some(direct), Some(mut from_above)) => {
                for (a, b) in from_above.data_mut().iter_mut().zip(direct.data()) {
                    *a += b;
                }
                from_above
            }
            (Some(direct), None) => direct.clone(),
            (None, Some(from_above)) => from_above,
            (None, None) => Tensor4::zeros(pooled_dims[0], pooled_dims[1], pooled_dims[2], pooled_dims[3]),
        };
        if g.dims() != pooled_dims {
            return Err(Error::shape(format!(
                "stage {} gradient {:?} does not match pooled map {:?}",
                s + 1,
                g.dims(),
                pooled_dims
            )));
        }
        g = avgpool2_backward(&g);
        g = relu_backward(&g, &cache.pre_act[s])?;
        let stage = &params.stages[s];
        let cg = conv2d_backward(&g, &cache.inputs[s], &stage.kernels, 1, same_pad(stage))?;
        kernels[s] = Some(cg.kernels);
        bias[s] = cg.bias;
        if s > 0 {
            carry = Some(cg.input);
        }
    }
    Ok(BackboneGrads {
        kernels: kernels.into_iter().map(|k| k.expect("filled")).collect(),
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::params::{ModelConfig, ModelParams};

    #[test]
    fn descriptor_layout_round_trip() {
        let map = Tensor4::from_vec([1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let d = map_to_descriptors(&map).unwrap();
        assert_eq!(d.n(), 4);
        assert_eq!(d.descriptors().row(1), &[1.0, 5.0]);
        let back = descriptors_to_map(d.descriptors(), 2, 2).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn shapes_for_small_input() {
        let cfg = ModelConfig {
            image_size: 8,
            widths: [4, 8, 16],
            ..ModelConfig::default()
        };
        let p = ModelParams::zeros(&cfg).unwrap();
        let img = Tensor4::zeros(1, 1, 8, 8);
        let (levels, _) = backbone_forward(&img, &p.backbone).unwrap();
        let shapes: Vec<_> = levels.iter().map(|b| (b.n(), b.d())).collect();
        assert_eq!(shapes, vec![(16, 4), (4, 8), (1, 16)]);
        assert!(levels
            .iter()
            .all(|b| b.descriptors().data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn indivisible_image_reports_padding() {
        let p = ModelParams::zeros(&ModelConfig::default()).unwrap();
        let img = Tensor4::zeros(1, 1, 30, 32);
        let err = backbone_forward(&img, &p.backbone).unwrap_err();
        assert!(err.to_string().contains("pad by 2 rows and 0 columns"), "{err}");
    }
}
