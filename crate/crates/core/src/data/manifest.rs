use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::volume::{read_volume, write_volume, DomainTag};
use super::DomainDataset;
use crate::error::{Error, Result};

const HEADER: &str = "# volume manifest v1: <domain> <split> <path relative to this file>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub domain: DomainTag,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

/// Plain-text listing of volume files per domain and split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!("{} {} {}\n", e.domain, e.split, e.path.display()));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.splitn(3, ' ').collect();
            let [domain, split, path] = fields[..] else {
                return Err(Error::Data(format!("manifest line {}: expected <domain> <split> <path>", n + 1)));
            };
            let wrap = |e: Error| Error::Data(format!("manifest line {}: {e}", n + 1));
            entries.push(ManifestEntry {
                domain: domain.parse().map_err(wrap)?,
                split: split.parse().map_err(wrap)?,
                path: PathBuf::from(path),
            });
        }
        Ok(Manifest { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text)
    }

    /// Writes every volume of `datasets` under `dir` as
    /// `<domain>/<split>/p<id>.mvl` and saves `dir/manifest.txt`.
    pub fn save_datasets(dir: impl AsRef<Path>, datasets: &[&DomainDataset]) -> Result<Manifest> {
        let dir = dir.as_ref();
        let mut manifest = Manifest::default();
        for ds in datasets {
            for split in Split::ALL {
                let sub = dir.join(ds.domain().as_str()).join(split.as_str());
                fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                for v in ds.split(split) {
                    let rel = PathBuf::from(ds.domain().as_str())
                        .join(split.as_str())
                        .join(format!("p{:04}.mvl", v.patient_id()));
                    write_volume(v, dir.join(&rel))?;
                    manifest.entries.push(ManifestEntry { domain: ds.domain(), split, path: rel });
                }
            }
        }
        manifest.write(dir.join("manifest.txt"))?;
        Ok(manifest)
    }

    /// Loads one domain's volumes, resolving paths against `base`.
    pub fn load_domain(&self, base: impl AsRef<Path>, domain: DomainTag) -> Result<DomainDataset> {
        let base = base.as_ref();
        let mut parts = [Vec::new(), Vec::new(), Vec::new()];
        for e in self.entries.iter().filter(|e| e.domain == domain) {
            let v = read_volume(base.join(&e.path))?;
            if v.domain() != domain {
                return Err(Error::Data(format!("{} is tagged {}, manifest says {domain}", e.path.display(), v.domain())));
            }
            parts[e.split as usize].push(v);
        }
        let [train, val, test] = parts;
        if train.is_empty() && val.is_empty() && test.is_empty() {
            return Err(Error::Data(format!("manifest lists no {domain} volumes")));
        }
        DomainDataset::new(domain, train, val, test)
    }
}
