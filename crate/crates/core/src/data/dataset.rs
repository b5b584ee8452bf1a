use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::preprocess::{jsrt_to_negative, preprocess, ContrastCurve, PreprocessConfig};
use super::synthetic::{generate_synthetic_pairs, SyntheticConfig};
use crate::checkpoint::fingerprint_of;
use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| invalid(format!("unknown split {s:?}")))
    }
}

/// Group sizes for `n` items: floors of `n * ratio`, then the leftover
/// items go one each to the largest fractional remainders (earlier splits
/// win ties).
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Seeded shuffle of `ids`, then the first group becomes train, the next
/// val and the rest test. Returned labels align with `ids`.
pub fn split_dataset(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if ids.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    let counts = split_counts(ids.len(), ratios)?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut rng::seeded(rng::derive_seed(seed, "split", 0), 0));
    let mut labels = vec![Split::Train; ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(labels)
}

/// Ids listed one per line; blank lines and `#` comments are ignored.
pub fn read_blacklist(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Paths relative to the manifest's directory.
    pub cxr: String,
    pub tissue: String,
    /// Ground-truth bone layer, when the source provides one.
    pub bone: Option<String>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// A loaded pair, images in [-1, 1].
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub id: String,
    pub cxr: GrayImage,
    pub tissue: GrayImage,
    pub bone: Option<GrayImage>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(invalid(format!("no dataset manifest at {}; run `prepare` first", path.display())));
        }
        let mut r = csv::Reader::from_path(&path)?;
        let entries = r.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Ok(Self { root: dir.to_path_buf(), entries })
    }

    pub fn save(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        {
            let mut w = csv::Writer::from_path(&tmp)?;
            for e in &self.entries {
                w.serialize(e)?;
            }
            w.flush()?;
        }
        std::fs::rename(tmp, self.root.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn fingerprint(&self) -> Option<&str> {
        self.entries.first().map(|e| e.fingerprint.as_str())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_pair(&self, e: &ManifestEntry) -> Result<LoadedPair> {
        Ok(LoadedPair {
            id: e.id.clone(),
            cxr: GrayImage::load_normalized(&self.root.join(&e.cxr))?,
            tissue: GrayImage::load_normalized(&self.root.join(&e.tissue))?,
            bone: e.bone.as_ref().map(|b| GrayImage::load_normalized(&self.root.join(b))).transpose()?,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedPair>> {
        self.split(split).map(|e| self.load_pair(e)).collect()
    }

    fn files_present(&self) -> bool {
        self.entries.iter().all(|e| {
            [Some(&e.cxr), Some(&e.tissue), e.bone.as_ref()].into_iter().flatten().all(|p| self.root.join(p).exists())
        })
    }
}

/// Where prepared pairs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// A directory with `cxr/` and `tissue/` holding PNGs with matching names.
    Directory {
        path: PathBuf,
        /// Invert (and contrast-adjust) radiographs stored as positives.
        negative: Option<ContrastCurve>,
        blacklist: Option<PathBuf>,
    },
    Synthetic {
        count: usize,
        seed: u64,
        #[serde(default)]
        config: SyntheticConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub source: DataSource,
    pub preprocess: PreprocessConfig,
    pub ratios: [f64; 3],
    pub split_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrepareOutcome {
    UpToDate,
    Written(usize),
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true) {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                out.push(s.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes processed images under `out/{cxr,tissue[,bone]}/` plus a manifest.
///
/// Re-running with an identical configuration is a no-op. A manifest made
/// with a different configuration is only replaced when `force` is set.
pub fn prepare_dataset(config: &PrepareConfig, out: &Path, force: bool) -> Result<PrepareOutcome> {
    config.preprocess.validate()?;
    let mut fp_input = serde_json::to_value(config)?;
    let listing = match &config.source {
        DataSource::Directory { path, .. } => {
            for sub in ["cxr", "tissue"] {
                if !path.join(sub).is_dir() {
                    return Err(invalid(format!(
                        "missing {sub}/ directory under {}; expected cxr/ and tissue/ with matching PNG names",
                        path.display()
                    )));
                }
            }
            Some(png_stems(&path.join("cxr"))?)
        }
        DataSource::Synthetic { count, .. } => {
            if *count == 0 {
                return Err(invalid("synthetic count must be at least 1"));
            }
            None
        }
    };
    fp_input["listing"] = serde_json::json!(listing);
    let fingerprint = fingerprint_of(&fp_input);

    if let Ok(existing) = Manifest::load(out) {
        if existing.fingerprint() == Some(fingerprint.as_str()) && existing.files_present() {
            return Ok(PrepareOutcome::UpToDate);
        }
        if !force {
            return Err(Error::FingerprintMismatch {
                what: format!("dataset at {} (pass --force to overwrite)", out.display()),
                expected: fingerprint,
                found: existing.fingerprint().unwrap_or("").to_string(),
            });
        }
    }

    let size = config.preprocess.target_size;
    let mut items: Vec<(String, GrayImage, GrayImage, Option<GrayImage>)> = Vec::new();
    match &config.source {
        DataSource::Directory { path, negative, blacklist } => {
            let banned = blacklist.as_deref().map(read_blacklist).transpose()?.unwrap_or_default();
            let tissue: HashSet<String> = png_stems(&path.join("tissue"))?.into_iter().collect();
            let stems = listing.unwrap_or_default();
            let unmatched: Vec<&String> = stems.iter().filter(|s| !tissue.contains(*s)).collect();
            if !unmatched.is_empty() {
                return Err(invalid(format!("radiographs without a tissue image: {unmatched:?}")));
            }
            for id in stems.iter().filter(|s| !banned.contains(*s)) {
                let mut cxr = GrayImage::load_png(&path.join("cxr").join(format!("{id}.png")))?;
                let mut st = GrayImage::load_png(&path.join("tissue").join(format!("{id}.png")))?;
                if let Some(curve) = negative {
                    cxr = jsrt_to_negative(&cxr, *curve);
                    st = jsrt_to_negative(&st, *curve);
                }
                items.push((
                    id.clone(),
                    preprocess(&cxr, &config.preprocess)?,
                    preprocess(&st, &config.preprocess)?,
                    None,
                ));
            }
        }
        DataSource::Synthetic { count, seed, config: syn } => {
            // Generated directly in [-1, 1] at the target size; the min-max
            // step would rescale each image independently and break the
            // additive relation between radiograph, tissue and bone.
            for p in generate_synthetic_pairs(*count, size, *seed, syn) {
                items.push((p.id, p.cxr, p.soft_tissue, Some(p.bone)));
            }
        }
    }
    if items.is_empty() {
        return Err(Error::Empty("no image pairs left after filtering".into()));
    }
    let ids: Vec<String> = items.iter().map(|i| i.0.clone()).collect();
    let labels = split_dataset(&ids, config.ratios, config.split_seed)?;
    let mut entries = Vec::with_capacity(items.len());
    for ((id, cxr, tissue, bone), split) in items.into_iter().zip(labels) {
        let rel = |d: &str| format!("{d}/{id}.png");
        cxr.save_normalized(&out.join(rel("cxr")))?;
        tissue.save_normalized(&out.join(rel("tissue")))?;
        if let Some(b) = &bone {
            b.save_normalized(&out.join(rel("bone")))?;
        }
        entries.push(ManifestEntry {
            id: id.clone(),
            split,
            cxr: rel("cxr"),
            tissue: rel("tissue"),
            bone: bone.as_ref().map(|_| rel("bone")),
            fingerprint: fingerprint.clone(),
        });
    }
    let n = entries.len();
    Manifest { root: out.to_path_buf(), entries }.save()?;
    Ok(PrepareOutcome::Written(n))
}
