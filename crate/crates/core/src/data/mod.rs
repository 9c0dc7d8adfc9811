//! Synthetic dataset generation, on-disk format and training samples.

mod format;
pub mod synth;

pub use format::{
    generate_dataset, load_dataset, read_manifest, read_pgm, write_pgm, DatasetManifest, LoadedSample, Split, Splits,
    ANNOTATIONS_FILE, FORMAT_VERSION, IMAGES_DIR, MANIFEST_FILE,
};
pub use synth::{render_figure, GenConfig, GrayImage};

use crate::error::Result;
use crate::model::Image;
use crate::simcc::{encode, KeypointSet, SimCCConfig, SimCCTarget};

/// A loaded sample with its encoded training target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub keypoints: KeypointSet,
    pub target: SimCCTarget,
    /// Target-weight row, one entry per keypoint.
    pub weights: Vec<f64>,
}

impl Sample {
    pub fn prepare(loaded: LoadedSample, simcc: &SimCCConfig) -> Result<Self> {
        let (target, weights) = encode(&loaded.keypoints, simcc)?;
        Ok(Self {
            id: loaded.id,
            image: loaded.image.to_unit(),
            keypoints: loaded.keypoints,
            target,
            weights,
        })
    }
}

/// Train and validation samples of one dataset, ready for training.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// Identifies the dataset the validation split came from.
    pub fingerprint: String,
}

impl TrainingSet {
    pub fn load(path: &std::path::Path, simcc: &SimCCConfig) -> Result<Self> {
        let manifest = read_manifest(path)?;
        let prep = |split| -> Result<Vec<Sample>> {
            load_dataset(path, split)?
                .into_iter()
                .map(|s| Sample::prepare(s, simcc))
                .collect()
        };
        Ok(Self {
            train: prep(Split::Train)?,
            val: prep(Split::Val)?,
            fingerprint: manifest.fingerprint(),
        })
    }

    /// Builds an in-memory set straight from the renderer (tests, smoke runs).
    pub fn synthesize(gen: &GenConfig, train: usize, val: usize, simcc: &SimCCConfig) -> Result<Self> {
        let make = |range: std::ops::Range<usize>| -> Result<Vec<Sample>> {
            range
                .map(|i| {
                    let (img, kps) = render_figure(gen.sample_seed(i), gen)?;
                    Sample::prepare(
                        LoadedSample {
                            id: format!("{i:06}"),
                            image: img,
                            keypoints: kps,
                        },
                        simcc,
                    )
                })
                .collect()
        };
        Ok(Self {
            train: make(0..train)?,
            val: make(train..train + val)?,
            fingerprint: format!("synth:{}:{}:{train}:{val}", gen.seed, gen.num_keypoints()),
        })
    }
}
