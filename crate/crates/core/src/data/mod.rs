//! Driving-log parsing, frame preprocessing, augmentation and batching.

mod image;
mod log;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

pub use self::image::{
    augment, decode_jpeg, encode_jpeg, flip_sample, load_jpeg, preprocess, preprocess_with,
    AugmentConfig, Crop, RawImage, Transform, INPUT_HEIGHT, INPUT_WIDTH,
};
pub use self::log::{parse_driving_log, parse_driving_log_str, DrivingLogRecord};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("driving log row {row}{}: {message}", column.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        row: usize,
        column: Option<usize>,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image decode failed: {0}")]
    Image(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A preprocessed frame `[3,66,200]` in `[-1,1]` and its steering label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Camera {
    Center,
    Left,
    Right,
}

impl Camera {
    pub const ALL: [Camera; 3] = [Camera::Center, Camera::Left, Camera::Right];
}

impl fmt::Display for Camera {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Camera::Center => "center",
            Camera::Left => "left",
            Camera::Right => "right",
        })
    }
}

impl FromStr for Camera {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "center" => Ok(Camera::Center),
            "left" => Ok(Camera::Left),
            "right" => Ok(Camera::Right),
            _ => Err(format!("unknown camera `{s}`")),
        }
    }
}

pub const DEFAULT_CAMERA_CORRECTION: f64 = 0.2;

/// Image path and label for one camera of a record. A side camera sees the
/// road as if the car had drifted towards that side, so its label steers back:
/// left adds `correction` (turn right), right subtracts it.
pub fn select_camera(record: &DrivingLogRecord, which: Camera, correction: f64) -> (&Path, f64) {
    debug_assert!(correction >= 0.0);
    match which {
        Camera::Center => (&record.center_path, record.steering),
        Camera::Left => (&record.left_path, record.steering + correction),
        Camera::Right => (&record.right_path, record.steering - correction),
    }
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds several integers into one well-mixed seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Independent random stream for one sample of one epoch.
pub fn stream_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, index]))
}

/// Mini-batch index lists covering a fresh permutation of `0..n`; the last
/// batch may be short.
pub fn batch_order(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(DataError::Config("dataset is empty".into()));
    }
    if batch_size == 0 {
        return Err(DataError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks a list of samples into `[N,3,66,200]` and their labels.
pub fn collate(samples: &[Sample]) -> Result<(Tensor<f32>, Vec<f32>)> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    Ok((
        Tensor::stack(&images)?,
        samples.iter().map(|s| s.label).collect(),
    ))
}

/// Shuffled mini-batches over in-memory samples.
pub fn make_batches(
    samples: &[Sample],
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = (Tensor<f32>, Vec<f32>)> + '_> {
    let order = batch_order(samples.len(), batch_size, seed)?;
    Ok(order.into_iter().map(move |idx| {
        let picked: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
        collate(&picked).expect("samples share one shape")
    }))
}

/// Indexed access to training samples. Implementations must be pure: the same
/// index and stream always yield the same sample.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads sample `index`; with a stream, applies training augmentation.
    fn load(&self, index: usize, stream: Option<&mut ChaCha8Rng>) -> Result<Sample>;

    /// Samples sharing a group (e.g. the three cameras of one record) always
    /// fall on the same side of the validation split.
    fn group(&self, index: usize) -> usize {
        index
    }
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn load(&self, index: usize, _stream: Option<&mut ChaCha8Rng>) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn load(&self, index: usize, _stream: Option<&mut ChaCha8Rng>) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraSet {
    Center,
    All,
}

impl FromStr for CameraSet {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "center" => Ok(CameraSet::Center),
            "all" => Ok(CameraSet::All),
            _ => Err(format!("unknown camera set `{s}` (center|all)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadConfig {
    pub cameras: CameraSet,
    pub correction: f64,
    pub crop: Crop,
    pub augment: AugmentConfig,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self {
            cameras: CameraSet::All,
            correction: DEFAULT_CAMERA_CORRECTION,
            crop: Crop::default(),
            augment: AugmentConfig::default(),
        }
    }
}

/// A driving log whose frames are decoded on demand.
#[derive(Debug, Clone)]
pub struct LogDataset {
    records: Vec<DrivingLogRecord>,
    config: LoadConfig,
}

impl LogDataset {
    pub fn new(records: Vec<DrivingLogRecord>, config: LoadConfig) -> Result<Self> {
        if config.correction < 0.0 || !config.correction.is_finite() {
            return Err(DataError::Config(format!(
                "camera correction must be non-negative, got {}",
                config.correction
            )));
        }
        config.augment.validate()?;
        Ok(Self { records, config })
    }

    /// Opens `dir/driving_log.csv`, or the file itself when given one.
    pub fn open(path: &Path, config: LoadConfig) -> Result<Self> {
        let log = if path.is_dir() {
            path.join("driving_log.csv")
        } else {
            path.to_path_buf()
        };
        Self::new(parse_driving_log(&log)?, config)
    }

    pub fn records(&self) -> &[DrivingLogRecord] {
        &self.records
    }

    pub fn config(&self) -> &LoadConfig {
        &self.config
    }

    fn per_record(&self) -> usize {
        match self.config.cameras {
            CameraSet::Center => 1,
            CameraSet::All => 3,
        }
    }

    pub fn locate(&self, index: usize) -> (&DrivingLogRecord, Camera) {
        let k = self.per_record();
        (&self.records[index / k], Camera::ALL[index % k])
    }
}

impl SampleSource for LogDataset {
    fn len(&self) -> usize {
        self.records.len() * self.per_record()
    }

    fn load(&self, index: usize, stream: Option<&mut ChaCha8Rng>) -> Result<Sample> {
        let (record, camera) = self.locate(index);
        let (path, label) = select_camera(record, camera, self.config.correction);
        let raw = load_jpeg(path)?;
        match stream {
            Some(rng) => augment(
                &raw,
                label as f32,
                self.config.crop,
                &self.config.augment,
                rng,
            ),
            None => Ok(Sample {
                image: preprocess(&raw, self.config.crop)?,
                label: label as f32,
            }),
        }
    }

    fn group(&self, index: usize) -> usize {
        index / self.per_record()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(steering: f64) -> DrivingLogRecord {
        DrivingLogRecord {
            center_path: "c.jpg".into(),
            left_path: "l.jpg".into(),
            right_path: "r.jpg".into(),
            steering,
            throttle: 0.0,
            brake: 0.0,
            speed: 0.0,
        }
    }

    #[test]
    fn camera_labels() {
        let r = record(0.0);
        assert_eq!(select_camera(&r, Camera::Center, 0.2).1, 0.0);
        assert_eq!(select_camera(&r, Camera::Left, 0.2).1, 0.2);
        assert_eq!(select_camera(&r, Camera::Right, 0.2).1, -0.2);
        let r = record(-0.1215);
        for cam in Camera::ALL {
            assert_eq!(select_camera(&r, cam, 0.0).1, -0.1215);
        }
        assert_eq!(select_camera(&r, Camera::Left, 0.3).0, Path::new("l.jpg"));
    }

    #[test]
    fn batch_sizes_keep_partial_tail() {
        let sizes: Vec<usize> = batch_order(100, 32, 1)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, [32, 32, 32, 4]);
    }

    #[test]
    fn batching_errors() {
        assert!(batch_order(0, 32, 1).is_err());
        assert!(batch_order(5, 0, 1).is_err());
    }

    #[test]
    fn make_batches_stacks() {
        let samples: Vec<Sample> = (0..5)
            .map(|i| Sample {
                image: Tensor::full(&[3, 66, 200], i as f32 / 10.0),
                label: i as f32,
            })
            .collect();
        let batches: Vec<_> = make_batches(&samples, 2, 7).unwrap().collect();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].0.shape(), &[2, 3, 66, 200]);
        let mut labels: Vec<f32> = batches.iter().flat_map(|b| b.1.clone()).collect();
        labels.sort_by(f32::total_cmp);
        assert_eq!(labels, [0.0, 1.0, 2.0, 3.0, 4.0]);
        // Images travel with their labels.
        for (x, y) in &batches {
            for (k, label) in y.iter().enumerate() {
                assert_eq!(x.data()[k * 3 * 66 * 200], label / 10.0);
            }
        }
    }

    #[test]
    fn streams_differ_by_coordinate() {
        use rand::RngCore;
        let a = stream_rng(1, 0, 0).next_u64();
        assert_eq!(a, stream_rng(1, 0, 0).next_u64());
        assert_ne!(a, stream_rng(1, 1, 0).next_u64());
        assert_ne!(a, stream_rng(1, 0, 1).next_u64());
        assert_ne!(a, stream_rng(2, 0, 0).next_u64());
    }

    #[test]
    fn fully_flipped_dataset_negates_mean_label() {
        let samples: Vec<Sample> = [-0.341f32, 0.0, 0.2, 0.75, -0.05]
            .iter()
            .map(|&l| Sample {
                image: Tensor::full(&[3, 2, 4], 0.5),
                label: l,
            })
            .collect();
        let mean = |s: &[Sample]| s.iter().map(|s| s.label).sum::<f32>() / s.len() as f32;
        let flipped: Vec<Sample> = samples.iter().map(flip_sample).collect();
        assert_eq!(mean(&flipped), -mean(&samples));
    }

    proptest! {
        #[test]
        fn batches_form_a_permutation(n in 1usize..300, bs in 1usize..64, seed in any::<u64>()) {
            let batches = batch_order(n, bs, seed).unwrap();
            prop_assert_eq!(batches.clone(), batch_order(n, bs, seed).unwrap());
            prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn processed_pixels_stay_in_range(
            px in proptest::collection::vec(any::<u8>(), 12 * 20 * 3),
            seed in any::<u64>(),
        ) {
            let raw = RawImage::new(12, 20, px).unwrap();
            let cfg = AugmentConfig { max_rotation_deg: 15.0, ..Default::default() };
            let s = augment(&raw, 0.1, Crop::default(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert!(s.label.is_finite());
        }
    }
}
