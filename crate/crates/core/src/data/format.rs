//! Dataset directory layout:
//!
//! ```text
//! <root>/manifest          JSON: version, counts, part groups, splits, generator echo
//! <root>/annotations.txt   one JSON object per line, in sample order
//! <root>/images/<id>.pgm   plain (P2) 8-bit portable graymap
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::{render_figure, GenConfig, GrayImage};
use crate::error::{Error, Result};
use crate::simcc::{KeypointSet, PartGroup};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const ANNOTATIONS_FILE: &str = "annotations.txt";
pub const IMAGES_DIR: &str = "images";

const SPLIT_STREAM: u64 = 99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub sample_count: usize,
    pub num_keypoints: usize,
    pub keypoint_names: Vec<String>,
    pub part_groups: Vec<PartGroup>,
    pub splits: Splits,
    pub generator: GenConfig,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Stable content hash, used to check that runs were scored on the same data.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        let digest = Sha256::digest(bytes);
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AnnotationLine {
    id: String,
    image: String,
    /// `[x, y, v]` per keypoint.
    keypoints: Vec<(f64, f64, u8)>,
    groups: Vec<PartGroup>,
}

/// A decoded sample as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub image: GrayImage,
    pub keypoints: KeypointSet,
}

pub fn write_pgm(img: &GrayImage) -> String {
    let mut s = format!("P2\n{} {}\n255\n", img.width, img.height);
    for row in img.pixels.chunks(img.width) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_pgm(text: &str) -> std::result::Result<GrayImage, String> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err("not a plain PGM (missing P2 magic)".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        tokens
            .next()
            .ok_or_else(|| format!("truncated header: missing {what}"))?
            .parse::<usize>()
            .map_err(|e| format!("bad {what}: {e}"))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let pixels = (0..width * height)
        .map(|i| num(&format!("pixel {i}")).and_then(|v| u8::try_from(v).map_err(|e| e.to_string())))
        .collect::<std::result::Result<Vec<u8>, String>>()?;
    Ok(GrayImage { width, height, pixels })
}

fn split_ids(n: usize, seed: u64) -> Splits {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let ids = |range: &[usize]| {
        let mut v = range.to_vec();
        v.sort_unstable();
        v.into_iter().map(sample_id).collect()
    };
    Splits {
        train: ids(&order[..n_train]),
        val: ids(&order[n_train..n_train + n_val]),
        test: ids(&order[n_train + n_val..]),
    }
}

fn sample_id(i: usize) -> String {
    format!("{i:06}")
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Renders `cfg.num_samples` figures into `root`. Refuses to touch a
/// non-empty directory unless `force`.
pub fn generate_dataset(cfg: &GenConfig, root: &Path, force: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Refused(format!(
                "{} already exists and is not empty (use --force to overwrite)",
                root.display()
            )));
        }
    }
    let images = root.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let mut annotations = String::new();
    for i in 0..cfg.num_samples {
        let (img, kps) = render_figure(cfg.sample_seed(i), cfg)?;
        let id = sample_id(i);
        let image = format!("{IMAGES_DIR}/{id}.pgm");
        write(&root.join(&image), write_pgm(&img))?;
        let line = AnnotationLine {
            id,
            image,
            keypoints: kps
                .coords
                .iter()
                .zip(&kps.visibility)
                .map(|(c, v)| (c[0], c[1], *v))
                .collect(),
            groups: kps.part_group.clone(),
        };
        annotations.push_str(&serde_json::to_string(&line).expect("annotation serializes"));
        annotations.push('\n');
    }
    write(&root.join(ANNOTATIONS_FILE), annotations)?;

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        sample_count: cfg.num_samples,
        num_keypoints: cfg.num_keypoints(),
        keypoint_names: cfg.keypoint_names(),
        part_groups: cfg.part_groups(),
        splits: split_ids(cfg.num_samples, cfg.seed),
        generator: cfg.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write(&root.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path,
            reason: format!("unsupported format version {}", manifest.format_version),
        });
    }
    Ok(manifest)
}

/// Samples of one split, in manifest order.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<LoadedSample>> {
    let manifest = read_manifest(root)?;
    let ann_path = root.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut by_id = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let ann: AnnotationLine = serde_json::from_str(line).map_err(|e| Error::Format {
            path: ann_path.clone(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        by_id.insert(ann.id.clone(), ann);
    }
    manifest
        .split(split)
        .iter()
        .map(|id| {
            let load_err = |reason: String| Error::Load {
                sample_id: id.clone(),
                reason,
            };
            let ann = by_id.get(id).ok_or_else(|| load_err("no annotation line".into()))?;
            let img_path: PathBuf = root.join(&ann.image);
            let img_text =
                fs::read_to_string(&img_path).map_err(|e| load_err(format!("{}: {e}", img_path.display())))?;
            let image = read_pgm(&img_text).map_err(|e| load_err(format!("{}: {e}", img_path.display())))?;
            let keypoints = KeypointSet::new(
                ann.keypoints.iter().map(|(x, y, _)| [*x, *y]).collect(),
                ann.keypoints.iter().map(|(_, _, v)| *v).collect(),
                ann.groups.clone(),
            )
            .map_err(|e| load_err(e.to_string()))?;
            if keypoints.len() != manifest.num_keypoints {
                return Err(load_err(format!(
                    "{} keypoints, manifest says {}",
                    keypoints.len(),
                    manifest.num_keypoints
                )));
            }
            Ok(LoadedSample {
                id: id.clone(),
                image,
                keypoints,
            })
        })
        .collect()
}
