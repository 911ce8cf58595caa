use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"MVL1";
pub const VOLUME_VERSION: u32 = 1;

/// High bit of the stored id field marks a target-domain volume.
const TARGET_BIT: u32 = 1 << 31;

/// Binary `H x W` mask with entries in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "mask of {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::Data(format!("mask entry {pos} is {}, not 0 or 1", data[pos])));
        }
        Ok(Mask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Whether every set entry of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// Inclusive-exclusive bounding box `(r0, r1, c0, c1)` of set entries.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) == 1 {
                    let b = bbox.get_or_insert((r, r + 1, c, c + 1));
                    b.0 = b.0.min(r);
                    b.1 = b.1.max(r + 1);
                    b.2 = b.2.min(c);
                    b.3 = b.3.max(c + 1);
                }
            }
        }
        bbox
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(DomainTag::Source),
            "target" => Ok(DomainTag::Target),
            other => Err(Error::param(format!("unknown domain {other:?} (expected source or target)"))),
        }
    }
}

/// One two-channel slice with its reference and brain masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    flair: Tensor<f32>,
    t1: Tensor<f32>,
    wmh_mask: Mask,
    brain_mask: Mask,
    patient_id: u32,
    domain: DomainTag,
}

impl Volume {
    pub fn new(
        flair: Tensor<f32>,
        t1: Tensor<f32>,
        wmh_mask: Mask,
        brain_mask: Mask,
        patient_id: u32,
        domain: DomainTag,
    ) -> Result<Self> {
        let [h, w] = *flair.shape() else {
            return Err(Error::dim(format!("FLAIR must be [H, W], got {:?}", flair.shape())));
        };
        if t1.shape() != flair.shape() {
            return Err(Error::dim(format!("T1 {:?} differs from FLAIR {:?}", t1.shape(), flair.shape())));
        }
        for (name, m) in [("WMH", &wmh_mask), ("brain", &brain_mask)] {
            if (m.height, m.width) != (h, w) {
                return Err(Error::dim(format!("{name} mask is {}x{}, image is {h}x{w}", m.height, m.width)));
            }
        }
        if !wmh_mask.is_subset_of(&brain_mask) {
            return Err(Error::Data(format!("patient {patient_id}: WMH mask extends outside the brain mask")));
        }
        if patient_id & TARGET_BIT != 0 {
            return Err(Error::param(format!("patient id {patient_id} exceeds 2^31 - 1")));
        }
        Ok(Volume { flair, t1, wmh_mask, brain_mask, patient_id, domain })
    }

    pub fn height(&self) -> usize {
        self.flair.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.flair.shape()[1]
    }

    pub fn flair(&self) -> &Tensor<f32> {
        &self.flair
    }

    pub fn t1(&self) -> &Tensor<f32> {
        &self.t1
    }

    pub fn wmh_mask(&self) -> &Mask {
        &self.wmh_mask
    }

    pub fn brain_mask(&self) -> &Mask {
        &self.brain_mask
    }

    pub fn patient_id(&self) -> u32 {
        self.patient_id
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    /// Replaces both image channels, keeping masks and identity.
    pub fn with_channels(&self, flair: Tensor<f32>, t1: Tensor<f32>) -> Result<Volume> {
        Volume::new(flair, t1, self.wmh_mask.clone(), self.brain_mask.clone(), self.patient_id, self.domain)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(20 + 10 * h * w);
        out.extend_from_slice(VOLUME_MAGIC);
        for v in [VOLUME_VERSION, h as u32, w as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for image in [&self.flair, &self.t1] {
            for v in image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.wmh_mask.data);
        out.extend_from_slice(&self.brain_mask.data);
        let tag = match self.domain {
            DomainTag::Source => 0,
            DomainTag::Target => TARGET_BIT,
        };
        out.extend_from_slice(&(self.patient_id | tag).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Volume> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != VOLUME_MAGIC {
            return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}, expected \"MVL1\"") });
        }
        let version = r.u32("version")?;
        if version != VOLUME_VERSION {
            return Err(Error::UnsupportedVersion { what: "volume", found: version, expected: VOLUME_VERSION });
        }
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        if h == 0 || w == 0 {
            return Err(Error::Format { offset: 8, message: format!("empty image {h}x{w}") });
        }
        let n = h.checked_mul(w).filter(|&n| n <= bytes.len()).ok_or_else(|| Error::Format {
            offset: 8,
            message: format!("image size {h}x{w} exceeds the file length {}", bytes.len()),
        })?;
        let flair = r.floats(n, "FLAIR")?;
        let t1 = r.floats(n, "T1")?;
        let wmh_at = r.pos;
        let wmh = r.take(n, "WMH mask")?.to_vec();
        let brain_at = r.pos;
        let brain = r.take(n, "brain mask")?.to_vec();
        let id_at = r.pos;
        let raw_id = r.u32("patient id")?;
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let mask = |data: Vec<u8>, at: usize| {
            Mask::new(h, w, data).map_err(|e| Error::Format { offset: at as u64, message: e.to_string() })
        };
        let domain = if raw_id & TARGET_BIT != 0 { DomainTag::Target } else { DomainTag::Source };
        Volume::new(
            Tensor::from_vec(&[h, w], flair)?,
            Tensor::from_vec(&[h, w], t1)?,
            mask(wmh, wmh_at)?,
            mask(brain, brain_at)?,
            raw_id & !TARGET_BIT,
            domain,
        )
        .map_err(|e| Error::Format { offset: id_at as u64, message: e.to_string() })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {len} bytes, {} remain", self.bytes.len() - self.pos),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, volume.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes)
}
