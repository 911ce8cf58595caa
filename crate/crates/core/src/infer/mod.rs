//! Whole-image inference through the fully convolutional form of a patch
//! network, and the evaluation metrics.

mod metrics;

pub use metrics::{dice, dice_from_counts, overlap_counts, roc_auc};

use crate::data::{Mask, Volume};
use crate::error::{Error, Result};
use crate::nn::{BatchNormParams, LayerKind, NetworkSpec, ParamSet};
use crate::tensor::{conv_forward_raw, ConvGeometry, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One layer of the converted network: a valid convolution, optional
/// batch normalization with running statistics, then ReLU unless last.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnLayer {
    /// `[cout, cin, k, k]`.
    pub kernels: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub bn: Option<BatchNormParams<f32>>,
}

/// Fully convolutional equivalent of a patch classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnModel {
    spec: NetworkSpec,
    layers: Vec<FcnLayer>,
}

/// Reshapes the dense layers into convolutions: the first dense layer
/// becomes a `feature_side x feature_side` kernel over the last conv map,
/// later ones become 1x1 kernels.
pub fn to_fcn(params: &ParamSet<f32>) -> Result<FcnModel> {
    let spec = params.spec().clone();
    spec.validate().map_err(|e| Error::Conversion(e.to_string()))?;
    let mismatched = params.shape_mismatches(&spec);
    if !mismatched.is_empty() {
        return Err(Error::Conversion(format!("layers {mismatched:?} do not match the network spec")));
    }
    let mut layers = Vec::with_capacity(spec.depth());
    let mut in_channels = spec.input_channels;
    let mut side = spec.kernel;
    for (index, layer) in params.layers().iter().enumerate() {
        let out = layer.bias.len();
        let kernels = match spec.layer_kind(index) {
            LayerKind::Conv => layer.weight.clone(),
            LayerKind::Dense => {
                if index == spec.conv_layers() {
                    side = spec.feature_side();
                } else {
                    side = 1;
                }
                layer.weight.clone().reshape(&[out, in_channels, side, side])?
            }
        };
        debug_assert_eq!(kernels.shape()[2], side);
        layers.push(FcnLayer { kernels, bias: layer.bias.clone(), bn: layer.bn.clone() });
        in_channels = out;
    }
    Ok(FcnModel { spec, layers })
}

impl FcnModel {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[FcnLayer] {
        &self.layers
    }

    /// Lesion-class probability for every `patch_side` window of a
    /// `[C, H, W]` image: output is `[H - P + 1, W - P + 1]`.
    pub fn forward(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let p = self.spec.patch_side;
        let [c, h, w] = *image.shape() else {
            return Err(Error::dim(format!("FCN input must be [C, H, W], got {:?}", image.shape())));
        };
        if c != self.spec.input_channels || h < p || w < p {
            return Err(Error::dim(format!(
                "FCN needs {} channels of at least {p}x{p}, got {:?}",
                self.spec.input_channels,
                image.shape()
            )));
        }
        let (mut x, mut ch, mut hh, mut ww) = (image.data().to_vec(), c, h, w);
        let last = self.layers.len() - 1;
        for (index, layer) in self.layers.iter().enumerate() {
            let geo = ConvGeometry {
                batch: 1,
                in_channels: ch,
                height: hh,
                width: ww,
                out_channels: layer.bias.len(),
                kernel: layer.kernels.shape()[2],
            };
            let mut out = vec![0.0f32; geo.out_len()];
            conv_forward_raw(&geo, &x, layer.kernels.data(), layer.bias.data(), &mut out);
            let plane = geo.out_height() * geo.out_width();
            if let Some(bn) = &layer.bn {
                crate::nn::bn_running_in_place(&mut out, 1, geo.out_channels, plane, bn);
            }
            if index < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            (x, ch, hh, ww) = (out, geo.out_channels, geo.out_height(), geo.out_width());
        }
        // two-way softmax per position, p1 = 1 / (1 + exp(z0 - z1))
        let plane = hh * ww;
        let probs = (0..plane).map(|i| 1.0 / (1.0 + (x[i] - x[plane + i]).exp())).collect();
        Tensor::from_vec(&[hh, ww], probs)
    }
}

/// Probability map, thresholded mask and overlap with the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// `[H, W]` lesion probability, zero outside the brain.
    pub probability: Tensor<f32>,
    pub mask: Mask,
    pub dice: f64,
    /// `(|pred ∩ ref|, |pred|, |ref|)` for pooling across volumes.
    pub counts: (usize, usize, usize),
}

/// Segments a normalized volume. The image is zero-padded so that each
/// output aligns with the center voxel of its window; only rows and columns
/// spanned by the brain mask are evaluated.
pub fn segment(fcn: &FcnModel, volume: &Volume, threshold: f64) -> Result<SegmentationResult> {
    let p = fcn.spec.patch_side;
    let (h, w) = (volume.height(), volume.width());
    if h < p || w < p {
        return Err(Error::dim(format!("image {h}x{w} is smaller than the {p}x{p} patch")));
    }
    let before = p / 2;
    let mut probability = Tensor::zeros(&[h, w]);
    let mut mask = Mask::zeros(h, w);
    if let Some((r0, r1, c0, c1)) = volume.brain_mask().bounding_box() {
        let (rows, cols) = (r1 - r0 + p - 1, c1 - c0 + p - 1);
        let mut input = vec![0.0f32; 2 * rows * cols];
        for (ch, image) in [volume.flair(), volume.t1()].into_iter().enumerate() {
            for i in 0..rows {
                // padded row i maps to image row r0 + i - before
                let Some(r) = (r0 + i).checked_sub(before).filter(|&r| r < h) else { continue };
                for j in 0..cols {
                    let Some(c) = (c0 + j).checked_sub(before).filter(|&c| c < w) else { continue };
                    input[(ch * rows + i) * cols + j] = image.data()[r * w + c];
                }
            }
        }
        let map = fcn.forward(&Tensor::from_vec(&[2, rows, cols], input)?)?;
        let mw = c1 - c0;
        for r in r0..r1 {
            for c in c0..c1 {
                if volume.brain_mask().get(r, c) == 0 {
                    continue;
                }
                let v = map.data()[(r - r0) * mw + (c - c0)];
                probability.data_mut()[r * w + c] = v;
                if v as f64 >= threshold {
                    mask.set(r, c, true);
                }
            }
        }
    }
    let counts = overlap_counts(&mask, volume.wmh_mask())?;
    Ok(SegmentationResult { probability, mask, dice: dice_from_counts(counts.0, counts.1, counts.2), counts })
}

/// Per-patient mean Dice and Dice of the pooled voxel sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceSummary {
    pub mean: f64,
    pub pooled: f64,
}

pub fn evaluate(fcn: &FcnModel, volumes: &[Volume], threshold: f64) -> Result<DiceSummary> {
    if volumes.is_empty() {
        return Err(Error::Metric("cannot evaluate on zero volumes".into()));
    }
    let (mut sum, mut both, mut a, mut b) = (0.0, 0, 0, 0);
    for v in volumes {
        let s = segment(fcn, v, threshold)?;
        sum += s.dice;
        both += s.counts.0;
        a += s.counts.1;
        b += s.counts.2;
    }
    Ok(DiceSummary { mean: sum / volumes.len() as f64, pooled: dice_from_counts(both, a, b) })
}
