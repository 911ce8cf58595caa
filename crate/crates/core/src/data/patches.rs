use rand::seq::index::sample;
use rand::Rng;

use super::volume::Volume;
use crate::error::{Error, Result};
use crate::tensor::{flip_rows_in_place, Tensor};

/// Side of a training patch.
pub const PATCH_SIDE: usize = 32;
/// Offset of the labelled center voxel inside a patch window: the window
/// spans 16 voxels above/left and 15 below/right of its center.
pub const PATCH_CENTER: usize = PATCH_SIDE / 2;
pub const DEFAULT_POSITIVE_FRACTION: f64 = 0.25;

/// Labelled two-channel patches, `[N, 2, 32, 32]` with channels (FLAIR, T1).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    patches: Tensor<f32>,
    labels: Vec<u8>,
}

impl PatchSet {
    pub fn new(patches: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        match *patches.shape() {
            [n, _, h, w] if n == labels.len() && h == w => {}
            _ => {
                return Err(Error::Data(format!(
                    "patch tensor {:?} does not match {} labels",
                    patches.shape(),
                    labels.len()
                )))
            }
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!("label {bad} is not in {{0, 1}}")));
        }
        Ok(PatchSet { patches, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patches(&self) -> &Tensor<f32> {
        &self.patches
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Concatenates patch sets in order.
    pub fn concat(sets: &[PatchSet]) -> Result<PatchSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Data("cannot concatenate zero patch sets".into()))?;
        let per = first.patches.outer(0).len();
        let mut shape = first.patches.shape().to_vec();
        let mut data = Vec::with_capacity(per * sets.iter().map(PatchSet::len).sum::<usize>());
        let mut labels = Vec::new();
        for set in sets {
            if set.patches.shape()[1..] != shape[1..] {
                return Err(Error::Data("patch sets have different patch shapes".into()));
            }
            data.extend_from_slice(set.patches.data());
            labels.extend_from_slice(&set.labels);
        }
        shape[0] = labels.len();
        PatchSet::new(Tensor::from_vec(&shape, data)?, labels)
    }
}

/// Center coordinates whose full 32x32 window lies inside an `h x w` image.
pub fn valid_center(row: usize, col: usize, height: usize, width: usize) -> bool {
    row >= PATCH_CENTER
        && col >= PATCH_CENTER
        && row + (PATCH_SIDE - PATCH_CENTER) <= height
        && col + (PATCH_SIDE - PATCH_CENTER) <= width
}

/// Copies the (FLAIR, T1) window centered on `(row, col)` into `out`.
pub(crate) fn extract_window(volume: &Volume, row: usize, col: usize, out: &mut [f32]) {
    let w = volume.width();
    let (r0, c0) = (row - PATCH_CENTER, col - PATCH_CENTER);
    for (ch, image) in [volume.flair(), volume.t1()].into_iter().enumerate() {
        for i in 0..PATCH_SIDE {
            let src = &image.data()[(r0 + i) * w + c0..(r0 + i) * w + c0 + PATCH_SIDE];
            let dst = (ch * PATCH_SIDE + i) * PATCH_SIDE;
            out[dst..dst + PATCH_SIDE].copy_from_slice(src);
        }
    }
}

/// Number of positives drawn from `valid_lesion` eligible lesion voxels.
pub fn positive_count(valid_lesion: usize, positive_fraction: f64) -> usize {
    ((valid_lesion as f64 * positive_fraction).floor() as usize).max(1)
}

/// Samples a balanced patch set from one volume: a `positive_fraction` of
/// the lesion voxels (floor, at least one) and the same number of normal
/// in-brain voxels, all drawn without replacement among valid centers.
/// Positives come first, then negatives.
pub fn sample_patches<R: Rng + ?Sized>(volume: &Volume, positive_fraction: f64, rng: &mut R) -> Result<PatchSet> {
    if !(positive_fraction > 0.0 && positive_fraction <= 1.0) {
        return Err(Error::param(format!(
            "positive fraction must lie in (0, 1], got {positive_fraction}"
        )));
    }
    let (h, w) = (volume.height(), volume.width());
    let mut lesion = Vec::new();
    let mut normal = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !valid_center(r, c, h, w) || volume.brain_mask().get(r, c) == 0 {
                continue;
            }
            if volume.wmh_mask().get(r, c) == 1 {
                lesion.push((r, c));
            } else {
                normal.push((r, c));
            }
        }
    }
    if lesion.is_empty() {
        return Err(Error::Sampling(format!(
            "patient {}: no lesion voxels with a full patch window ({} normal available)",
            volume.patient_id(),
            normal.len()
        )));
    }
    let count = positive_count(lesion.len(), positive_fraction);
    if normal.len() < count {
        return Err(Error::Sampling(format!(
            "patient {}: need {count} normal voxels, only {} available ({} lesion)",
            volume.patient_id(),
            normal.len(),
            lesion.len()
        )));
    }
    let mut centers: Vec<((usize, usize), u8)> = Vec::with_capacity(2 * count);
    let mut picked = sample(rng, lesion.len(), count).into_vec();
    picked.sort_unstable();
    centers.extend(picked.into_iter().map(|i| (lesion[i], 1)));
    let mut picked = sample(rng, normal.len(), count).into_vec();
    picked.sort_unstable();
    centers.extend(picked.into_iter().map(|i| (normal[i], 0)));

    let per = 2 * PATCH_SIDE * PATCH_SIDE;
    let mut data = vec![0.0f32; centers.len() * per];
    for (k, &((r, c), _)) in centers.iter().enumerate() {
        extract_window(volume, r, c, &mut data[k * per..(k + 1) * per]);
    }
    let labels = centers.iter().map(|&(_, l)| l).collect();
    PatchSet::new(
        Tensor::from_vec(&[centers.len(), 2, PATCH_SIDE, PATCH_SIDE], data)?,
        labels,
    )
}

/// Appends the left-right mirror of every patch with the same label.
pub fn augment_flip(set: &PatchSet) -> PatchSet {
    let n = set.len();
    let per = set.patches.outer(0).len();
    let width = set.patches.shape()[3];
    let mut data = Vec::with_capacity(2 * n * per);
    data.extend_from_slice(set.patches.data());
    let mut flipped = set.patches.data().to_vec();
    flip_rows_in_place(&mut flipped, width);
    data.extend_from_slice(&flipped);
    let mut shape = set.patches.shape().to_vec();
    shape[0] = 2 * n;
    let labels = set.labels.iter().chain(&set.labels).copied().collect();
    PatchSet::new(Tensor::from_vec(&shape, data).expect("doubling preserves shape"), labels)
        .expect("labels already validated")
}
