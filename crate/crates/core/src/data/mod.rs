//! Synthetic two-domain slices, intensity normalization, the MVL1 volume
//! format with its manifest, and balanced patch sampling.

mod manifest;
mod patches;
mod synth;
mod volume;

pub use manifest::{Manifest, ManifestEntry, Split};
pub use patches::{
    augment_flip, positive_count, sample_patches, valid_center, PatchSet, DEFAULT_POSITIVE_FRACTION, PATCH_CENTER,
    PATCH_SIDE,
};
pub use synth::{gaussian_blur, generate_domain, generate_volume, DomainConfig, SplitSizes};
pub use volume::{read_volume, write_volume, DomainTag, Mask, Volume, VOLUME_MAGIC, VOLUME_VERSION};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Volumes of one domain partitioned at patient level.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    domain: DomainTag,
    train: Vec<Volume>,
    val: Vec<Volume>,
    test: Vec<Volume>,
}

impl DomainDataset {
    pub fn new(domain: DomainTag, train: Vec<Volume>, val: Vec<Volume>, test: Vec<Volume>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for v in train.iter().chain(&val).chain(&test) {
            if v.domain() != domain {
                return Err(Error::Data(format!(
                    "patient {} is tagged {}, dataset is {domain}",
                    v.patient_id(),
                    v.domain()
                )));
            }
            if !seen.insert(v.patient_id()) {
                return Err(Error::Data(format!("patient {} appears in more than one split", v.patient_id())));
            }
        }
        Ok(DomainDataset { domain, train, val, test })
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn train(&self) -> &[Volume] {
        &self.train
    }

    pub fn val(&self) -> &[Volume] {
        &self.val
    }

    pub fn test(&self) -> &[Volume] {
        &self.test
    }

    pub fn split(&self, split: Split) -> &[Volume] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes { train: self.train.len(), val: self.val.len(), test: self.test.len() }
    }
}

/// Per-channel min-max rescaling to [0, 1] over brain voxels; voxels outside
/// the brain become 0.
pub fn normalize_unit(volume: &Volume) -> Result<Volume> {
    let brain = volume.brain_mask().data();
    let mut channels = Vec::with_capacity(2);
    for (name, image) in [("FLAIR", volume.flair()), ("T1", volume.t1())] {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for (&v, &m) in image.data().iter().zip(brain) {
            if m == 1 {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !(hi > lo) || !(hi - lo).is_finite() {
            return Err(Error::Normalization(format!(
                "patient {}: {name} has no intensity range inside the brain (min {lo}, max {hi})",
                volume.patient_id()
            )));
        }
        let range = hi - lo;
        let data = image
            .data()
            .iter()
            .zip(brain)
            .map(|(&v, &m)| if m == 1 { ((v - lo) / range).clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        channels.push(Tensor::from_vec(image.shape(), data)?);
    }
    let t1 = channels.pop().expect("two channels");
    let flair = channels.pop().expect("two channels");
    volume.with_channels(flair, t1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume_with(flair: Vec<f32>, t1: Vec<f32>, brain: Vec<u8>) -> Volume {
        let n = flair.len();
        Volume::new(
            Tensor::from_vec(&[1, n], flair).unwrap(),
            Tensor::from_vec(&[1, n], t1).unwrap(),
            Mask::zeros(1, n),
            Mask::new(1, n, brain).unwrap(),
            0,
            DomainTag::Source,
        )
        .unwrap()
    }

    #[test]
    fn min_max_example() {
        let v = volume_with(vec![2.0, 4.0, 6.0, 9.0], vec![0.0, 1.0, 3.0, 5.0], vec![1, 1, 1, 0]);
        let n = normalize_unit(&v).unwrap();
        assert_eq!(n.flair().data(), &[0.0, 0.5, 1.0, 0.0]);
        assert_eq!(n.t1().data(), &[0.0, 1.0 / 3.0, 1.0, 0.0]);
    }

    #[test]
    fn normalized_input_is_a_fixed_point() {
        let v = volume_with(vec![0.0, 0.25, 1.0, 0.0], vec![1.0, 0.0, 0.5, 0.0], vec![1, 1, 1, 0]);
        let n = normalize_unit(&v).unwrap();
        assert_eq!(n, v);
    }

    #[test]
    fn constant_channel_is_rejected() {
        let v = volume_with(vec![3.0, 3.0, 1.0], vec![0.0, 1.0, 0.0], vec![1, 1, 0]);
        assert!(matches!(normalize_unit(&v), Err(Error::Normalization(_))));
    }

    #[test]
    fn splits_must_be_disjoint() {
        let a = volume_with(vec![0.0, 1.0], vec![0.0, 1.0], vec![1, 1]);
        let r = DomainDataset::new(DomainTag::Source, vec![a.clone()], vec![], vec![a.clone()]);
        assert!(matches!(r, Err(Error::Data(_))));
        let r = DomainDataset::new(DomainTag::Target, vec![a], vec![], vec![]);
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
