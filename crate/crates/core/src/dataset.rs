//! Desk-scale phantom datasets and their on-disk layout:
//! `root/{split}/{id}.img.pgm`, `{id}.mask.pgm`, `{id}.json`, plus
//! `root/manifest.json`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomask::{View, SEG_CLASSES};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::phantom::{self, PhantomConfig, Sample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            labeled: 200,
            unlabeled: 400,
            val: 100,
            test: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub counts: SplitCounts,
    pub seed: u64,
    #[serde(default)]
    pub phantom: PhantomConfig,
}

impl DatasetSpec {
    pub fn new(counts: SplitCounts, seed: u64) -> Self {
        Self {
            counts,
            seed,
            phantom: PhantomConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub view: View,
    pub chd: usize,
    pub labeled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub seed: u64,
    pub size: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Structural(format!("duplicate sample id {}", e.id)));
            }
            if e.chd >= crate::model::CHD_CLASSES {
                return Err(Error::Index(format!("{}: CHD class {}", e.id, e.chd)));
            }
            if e.split != Split::Train && !e.labeled {
                return Err(Error::Structural(format!("{}: {} samples must be labeled", e.id, e.split.name())));
            }
        }
        Ok(())
    }

    fn paths(&self, e: &ManifestEntry) -> (PathBuf, PathBuf, PathBuf) {
        let dir = self.root.join(e.split.name());
        (
            dir.join(format!("{}.img.pgm", e.id)),
            dir.join(format!("{}.mask.pgm", e.id)),
            dir.join(format!("{}.json", e.id)),
        )
    }
}

/// Samples grouped by role. Unlabeled training samples keep their
/// ground truth for audits only; the trainer never reads it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    fn from_samples(manifest: DatasetManifest, samples: Vec<(Split, Sample)>) -> Self {
        let mut d = Dataset {
            manifest,
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (split, s) in samples {
            match (split, s.labeled) {
                (Split::Train, true) => d.labeled.push(s),
                (Split::Train, false) => d.unlabeled.push(s),
                (Split::Val, _) => d.val.push(s),
                (Split::Test, _) => d.test.push(s),
            }
        }
        d
    }

    /// A dataset holding exactly `samples`, in order; e.g. predictions
    /// written for scoring.
    pub fn from_split_samples(seed: u64, size: usize, samples: Vec<(Split, Sample)>) -> Self {
        let entries = samples
            .iter()
            .map(|(split, s)| ManifestEntry {
                id: s.id.clone(),
                split: *split,
                view: s.view,
                chd: s.chd,
                labeled: s.labeled,
            })
            .collect();
        let manifest = DatasetManifest {
            root: PathBuf::new(),
            seed,
            size,
            entries,
        };
        Self::from_samples(manifest, samples)
    }

    /// Every sample with its split, in manifest order.
    pub fn samples(&self) -> Vec<(Split, &Sample)> {
        let by_id: std::collections::HashMap<&str, &Sample> = [&self.labeled, &self.unlabeled, &self.val, &self.test]
            .into_iter()
            .flatten()
            .map(|s| (s.id.as_str(), s))
            .collect();
        self.manifest
            .entries
            .iter()
            .filter_map(|e| by_id.get(e.id.as_str()).map(|s| (e.split, *s)))
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples().into_iter().filter(|(s, _)| *s == split).map(|(_, s)| s).collect()
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draw labels for every id, then render each phantom from its own stream.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let c = spec.counts;
    if c.labeled == 0 || c.unlabeled == 0 || c.val == 0 || c.test == 0 {
        return Err(Error::Config(format!("every split count must be positive, got {c:?}")));
    }
    spec.phantom.validate()?;
    let mut entries = Vec::new();
    let mut push = |split: Split, prefix: &str, n: usize, labeled: bool, offset: usize| {
        for i in 0..n {
            let id = format!("{prefix}-{:05}", offset + i);
            let mut rng = rng_stream!(spec.seed, "labels", &id);
            let view = phantom::draw_view(&mut rng);
            let chd = phantom::draw_chd(&mut rng);
            entries.push(ManifestEntry {
                id,
                split,
                view,
                chd,
                labeled,
            });
        }
    };
    push(Split::Train, "train", c.labeled, true, 0);
    push(Split::Train, "train", c.unlabeled, false, c.labeled);
    push(Split::Val, "val", c.val, true, 0);
    push(Split::Test, "test", c.test, true, 0);

    let samples = entries
        .par_iter()
        .map(|e| {
            let mut rng = rng_stream!(spec.seed, "phantom", &e.id);
            let (image, mask) = phantom::render(&mut rng, e.view, e.chd, &spec.phantom)?;
            Ok((
                e.split,
                Sample {
                    id: e.id.clone(),
                    image,
                    mask,
                    view: e.view,
                    chd: e.chd,
                    labeled: e.labeled,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        root: PathBuf::new(),
        seed: spec.seed,
        size: spec.phantom.size,
        entries,
    };
    Ok(Dataset::from_samples(manifest, samples))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    view: View,
    chd: usize,
    labeled: bool,
}

/// Write every sample and the manifest under `root`. Updates
/// `dataset.manifest.root`.
pub fn write_dataset(dataset: &mut Dataset, root: &Path) -> Result<()> {
    dataset.manifest.root = root.to_path_buf();
    for split in [Split::Train, Split::Val, Split::Test] {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let m = &dataset.manifest;
    let by_id: std::collections::HashMap<&str, &Sample> = [&dataset.labeled, &dataset.unlabeled, &dataset.val, &dataset.test]
        .into_iter()
        .flatten()
        .map(|s| (s.id.as_str(), s))
        .collect();
    for e in &m.entries {
        let s = by_id
            .get(e.id.as_str())
            .ok_or_else(|| Error::Structural(format!("manifest id {} has no sample", e.id)))?;
        let (img, mask, side) = m.paths(e);
        write_file(&img, &encode_image(&s.image)?)?;
        write_file(&mask, &encode_mask(&s.mask))?;
        let json = serde_json::to_vec_pretty(&Sidecar {
            view: e.view,
            chd: e.chd,
            labeled: e.labeled,
        })
        .map_err(|e| Error::Json {
            path: side.clone(),
            source: e,
        })?;
        write_file(&side, &json)?;
    }
    let path = root.join("manifest.json");
    let json = serde_json::to_vec_pretty(m).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    write_file(&path, &json)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Json { path, source: e })?;
    m.root = root.to_path_buf();
    m.validate()?;
    Ok(m)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let samples = manifest
        .entries
        .par_iter()
        .map(|e| {
            let (img, mask, side) = manifest.paths(e);
            let image = decode_image(&img, &read_file(&img)?)?;
            let mask = decode_mask(&mask, &read_file(&mask)?)?;
            let sc: Sidecar = serde_json::from_slice(&read_file(&side)?).map_err(|err| Error::Json {
                path: side.clone(),
                source: err,
            })?;
            if sc.view != e.view || sc.chd != e.chd || sc.labeled != e.labeled {
                return Err(Error::parse(&side, 0, format!("labels disagree with manifest for {}", e.id)));
            }
            if image.dims()[1] != mask.height() || image.dims()[2] != mask.width() {
                return Err(Error::Dimension(format!("{}: image and mask sizes differ", e.id)));
            }
            Ok((
                e.split,
                Sample {
                    id: e.id.clone(),
                    image,
                    mask,
                    view: e.view,
                    chd: e.chd,
                    labeled: e.labeled,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_samples(manifest, samples))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

// ---- PGM (binary P5) ----

pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let d = image.dims();
    if d.len() != 3 || d[0] != 1 {
        return Err(Error::Dimension(format!("image dims {d:?}, want 1×H×W")));
    }
    let mut out = format!("P5\n{} {}\n65535\n", d[2], d[1]).into_bytes();
    for &v in image.data() {
        let q = (65535.0 * f64::from(v).clamp(0.0, 1.0)).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.data());
    out
}

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<PgmHeader> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::parse(path, 0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (n, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, pos, format!("expected header field {}", n + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, start, "header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(path, pos, "expected single whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::parse(path, 2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(path, pos - 1, format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(PgmHeader {
        width: width as usize,
        height: height as usize,
        maxval,
        data_offset: pos,
    })
}

fn check_payload(path: &Path, bytes: &[u8], h: &PgmHeader, bytes_per: usize) -> Result<()> {
    let want = h.width * h.height * bytes_per;
    let have = bytes.len() - h.data_offset;
    if have != want {
        return Err(Error::parse(
            path,
            h.data_offset + have.min(want),
            format!("payload has {have} bytes, expected {want}"),
        ));
    }
    Ok(())
}

pub fn decode_image(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(path, bytes)?;
    if h.maxval != 65535 {
        return Err(Error::parse(path, h.data_offset - 1, format!("image maxval {} (want 65535)", h.maxval)));
    }
    check_payload(path, bytes, &h, 2)?;
    let data = bytes[h.data_offset..]
        .chunks_exact(2)
        .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) / 65535.0)
        .collect();
    Tensor::new(&[1, h.height, h.width], data)
}

pub fn decode_mask(path: &Path, bytes: &[u8]) -> Result<Mask> {
    let h = parse_header(path, bytes)?;
    if h.maxval > 255 {
        return Err(Error::parse(path, h.data_offset - 1, "mask must be 8-bit"));
    }
    check_payload(path, bytes, &h, 1)?;
    let payload = &bytes[h.data_offset..];
    if let Some(i) = payload.iter().position(|&c| c as usize >= SEG_CLASSES) {
        return Err(Error::parse(
            path,
            h.data_offset + i,
            format!("mask value {} exceeds class {}", payload[i], SEG_CLASSES - 1),
        ));
    }
    Mask::new(h.width, h.height, payload.to_vec())
}
