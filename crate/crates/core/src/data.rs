//! In-memory image datasets.
//!
//! A [`Dataset`] holds train and test images in one global index space:
//! indices `0..num_train` are training samples and `num_train..` are test
//! samples, so partition shards can reference either split without
//! ambiguity. Pixels are stored quantized to `u8` (CIFAR-10 arrives that way
//! and the procedural corpus loses nothing that matters) and materialized
//! into the requested scalar type per batch.
//!
//! Two sources are supported: CIFAR-10 binary batches from disk, and a
//! procedurally generated corpus for machines without the real data — ten
//! color/texture classes built from class-specific sinusoidal prototypes
//! with per-sample translation, deformation, and noise. The classes are
//! separable but overlapping enough that representation quality is actually
//! measured rather than given away.
//!
//! [`UnlabeledView`] is the only handle client-side self-supervised code
//! receives: it can produce image batches for a shard but has no method that
//! returns a label.

use std::io::Read;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::{cast, Scalar};

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `(num_train + num_test, channels, side, side)`, quantized.
    images: Array4<u8>,
    labels: Vec<usize>,
    pub num_classes: usize,
    pub num_train: usize,
    pub side: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn num_test(&self) -> usize {
        self.labels.len() - self.num_train
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First global index of the test split.
    pub fn test_offset(&self) -> usize {
        self.num_train
    }

    pub fn train_labels(&self) -> &[usize] {
        &self.labels[..self.num_train]
    }

    pub fn test_labels(&self) -> &[usize] {
        &self.labels[self.num_train..]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn image(&self, index: usize) -> ArrayView3<'_, u8> {
        self.images.index_axis(ndarray::Axis(0), index)
    }

    /// Materialize the given global indices as a normalized image batch.
    pub fn batch<F: Scalar>(&self, indices: &[usize]) -> Result<Batch<F>> {
        if indices.is_empty() {
            return Err(Error::Empty("image batch".into()));
        }
        let inv = cast::<F>(1.0 / 255.0);
        let mut out = Array4::zeros((indices.len(), self.channels, self.side, self.side));
        for (row, &idx) in indices.iter().enumerate() {
            if idx >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample index {idx} out of range for dataset of {}",
                    self.len()
                )));
            }
            let src = self.image(idx);
            out.index_axis_mut(ndarray::Axis(0), row)
                .zip_mut_with(&src, |o, &s| *o = cast::<F>(f64::from(s)) * inv);
        }
        Ok(Batch::Images(out))
    }
}

/// Label-free window onto a subset of a dataset. Self-supervised client code
/// is handed one of these instead of the dataset itself, so label leakage
/// into local training is impossible by construction.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    data: &'a Dataset,
    indices: &'a [usize],
}

impl<'a> UnlabeledView<'a> {
    pub fn new(data: &'a Dataset, indices: &'a [usize]) -> Self {
        Self { data, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Batch by *positions within this view* (not global indices).
    pub fn batch<F: Scalar>(&self, positions: &[usize]) -> Result<Batch<F>> {
        let global: Vec<usize> = positions
            .iter()
            .map(|&p| {
                self.indices.get(p).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "position {p} out of range for view of {}",
                        self.indices.len()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        self.data.batch(&global)
    }
}

// ---------------------------------------------------------------------------
// Procedural corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            num_train: 5000,
            num_test: 1000,
            side: 16,
            seed: 7,
        }
    }
}

/// One low-frequency sinusoidal field over the image plane.
#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

impl Wave {
    fn random(rng: &mut impl Rng, max_freq: f64, amp: (f64, f64)) -> Self {
        Self {
            amp: rng.random_range(amp.0..amp.1),
            fx: rng.random_range(0.5..max_freq),
            fy: rng.random_range(0.5..max_freq),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        self.amp * (std::f64::consts::TAU * (self.fx * x + self.fy * y) + self.phase).sin()
    }
}

/// Class identity = a color bias plus a small set of texture waves per
/// channel; sample identity = a translation of that texture, one extra
/// deformation wave, and pixel noise.
struct ClassPrototype {
    color: [f64; 3],
    waves: [Vec<Wave>; 3],
}

impl ClassPrototype {
    fn build(rng: &mut impl Rng) -> Self {
        let color = [
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
        ];
        let waves = std::array::from_fn(|_| {
            (0..3)
                .map(|_| Wave::random(rng, 3.0, (0.12, 0.3)))
                .collect()
        });
        Self { color, waves }
    }

    fn render(&self, side: usize, shift: (f64, f64), deform: &[Wave; 3], rng: &mut impl Rng) -> Array3<u8> {
        let noise = Normal::new(0.0, 0.02).expect("valid sigma");
        Array3::from_shape_fn((3, side, side), |(c, yy, xx)| {
            let x = (xx as f64 + shift.0) / side as f64;
            let y = (yy as f64 + shift.1) / side as f64;
            let tex: f64 = self.waves[c].iter().map(|w| w.eval(x, y)).sum();
            let v = self.color[c]
                + tex
                + deform[c].eval(xx as f64 / side as f64, yy as f64 / side as f64)
                + noise.sample(rng);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
    }
}

/// Generate the procedural corpus. Fully determined by the spec; sample
/// order within each split is shuffled so index ranges are not class-sorted.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.side == 0 || spec.num_train == 0 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs positive classes, side, and train size".into(),
        ));
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos: Vec<ClassPrototype> = (0..spec.num_classes)
        .map(|_| ClassPrototype::build(&mut proto_rng))
        .collect();

    let render_split = |count: usize, stream: u64| -> (Array4<u8>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(stream));
        // Balanced labels, shuffled.
        let mut labels: Vec<usize> = (0..count).map(|i| i % spec.num_classes).collect();
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let mut images = Array4::zeros((count, 3, spec.side, spec.side));
        for (i, &cls) in labels.iter().enumerate() {
            let shift = (rng.random_range(0.0..6.0), rng.random_range(0.0..6.0));
            let deform = std::array::from_fn(|_| Wave::random(&mut rng, 2.0, (0.02, 0.1)));
            let img = protos[cls].render(spec.side, shift, &deform, &mut rng);
            images.index_axis_mut(ndarray::Axis(0), i).assign(&img);
        }
        (images, labels)
    };

    let (train_imgs, train_labels) = render_split(spec.num_train, 0x7261_696e);
    let (test_imgs, test_labels) = render_split(spec.num_test, 0x7465_7374);

    let mut images = Array4::zeros((
        spec.num_train + spec.num_test,
        3,
        spec.side,
        spec.side,
    ));
    images
        .slice_mut(ndarray::s![..spec.num_train, .., .., ..])
        .assign(&train_imgs);
    images
        .slice_mut(ndarray::s![spec.num_train.., .., .., ..])
        .assign(&test_imgs);
    let mut labels = train_labels;
    labels.extend(test_labels);

    Ok(Dataset {
        images,
        labels,
        num_classes: spec.num_classes,
        num_train: spec.num_train,
        side: spec.side,
        channels: 3,
    })
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format
// ---------------------------------------------------------------------------

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

fn read_cifar_file(path: &Path, images: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Decode {
            offset: bytes.len(),
            reason: format!(
                "{} is not a multiple of the {CIFAR_RECORD}-byte CIFAR-10 record",
                path.display()
            ),
        });
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = usize::from(rec[0]);
        if label > 9 {
            return Err(Error::Decode {
                offset: 0,
                reason: format!("label {label} out of range in {}", path.display()),
            });
        }
        labels.push(label);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

/// Load the CIFAR-10 binary distribution (`data_batch_1..5.bin`,
/// `test_batch.bin`) from a directory.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        read_cifar_file(&dir.join(format!("data_batch_{i}.bin")), &mut images, &mut labels)?;
    }
    let num_train = labels.len();
    read_cifar_file(&dir.join("test_batch.bin"), &mut images, &mut labels)?;

    let n = labels.len();
    let images = Array4::from_shape_vec((n, 3, CIFAR_SIDE, CIFAR_SIDE), images)
        .map_err(|e| Error::Decode {
            offset: 0,
            reason: format!("CIFAR-10 byte count does not form image tensor: {e}"),
        })?;
    Ok(Dataset {
        images,
        labels,
        num_classes: 10,
        num_train,
        side: CIFAR_SIDE,
        channels: 3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            num_train: 40,
            num_test: 12,
            side: 8,
            seed: 3,
        }
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_balanced() {
        let a = synthetic_dataset(&tiny_spec()).unwrap();
        let b = synthetic_dataset(&tiny_spec()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);

        let mut counts = vec![0usize; 4];
        for &l in a.train_labels() {
            counts[l] += 1;
        }
        assert_eq!(counts, vec![10, 10, 10, 10]);
        assert_eq!(a.num_test(), 12);
        assert_eq!(a.test_offset(), 40);
    }

    #[test]
    fn classes_are_visually_distinct_on_average() {
        // Mean per-class images should differ clearly more across classes
        // than the per-sample noise within a class.
        let ds = synthetic_dataset(&SyntheticSpec {
            num_classes: 3,
            num_train: 90,
            num_test: 0,
            side: 8,
            seed: 11,
        })
        .unwrap();
        let mut means = vec![vec![0f64; 3 * 64]; 3];
        let mut counts = vec![0usize; 3];
        for i in 0..ds.num_train {
            let c = ds.label(i);
            counts[c] += 1;
            for (j, &px) in ds.image(i).iter().enumerate() {
                means[c][j] += f64::from(px) / 255.0;
            }
        }
        for c in 0..3 {
            for v in &mut means[c] {
                *v /= counts[c] as f64;
            }
        }
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
        };
        assert!(dist(&means[0], &means[1]) > 0.03);
        assert!(dist(&means[0], &means[2]) > 0.03);
        assert!(dist(&means[1], &means[2]) > 0.03);
    }

    #[test]
    fn batches_are_normalized_and_bounds_checked() {
        let ds = synthetic_dataset(&tiny_spec()).unwrap();
        let batch: Batch<f32> = ds.batch(&[0, 5, 41]).unwrap();
        match batch {
            Batch::Images(x) => {
                assert_eq!(x.dim(), (3, 3, 8, 8));
                assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            Batch::Vectors(_) => panic!("expected images"),
        }
        assert!(ds.batch::<f32>(&[]).is_err());
        assert!(ds.batch::<f32>(&[9999]).is_err());
    }

    #[test]
    fn unlabeled_view_exposes_images_by_position_only() {
        let ds = synthetic_dataset(&tiny_spec()).unwrap();
        let indices = vec![3usize, 17, 22];
        let view = UnlabeledView::new(&ds, &indices);
        assert_eq!(view.len(), 3);
        let b: Batch<f32> = view.batch(&[0, 2]).unwrap();
        assert_eq!(b.len(), 2);
        assert!(view.batch::<f32>(&[3]).is_err());
    }

    #[test]
    fn cifar_loader_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; 100]).unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(err.to_string().contains("record") || err.to_string().contains("decode"));
    }

    #[test]
    fn cifar_loader_parses_well_formed_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![3u8]; // label
        rec.extend(std::iter::repeat_n(128u8, 3072));
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), &rec).unwrap();
        }
        let mut test_rec = vec![9u8];
        test_rec.extend(std::iter::repeat_n(255u8, 3072));
        std::fs::write(dir.path().join("test_batch.bin"), &test_rec).unwrap();

        let ds = load_cifar10(dir.path()).unwrap();
        assert_eq!(ds.num_train, 5);
        assert_eq!(ds.num_test(), 1);
        assert_eq!(ds.side, 32);
        assert_eq!(ds.train_labels(), &[3, 3, 3, 3, 3]);
        assert_eq!(ds.test_labels(), &[9]);
    }
}
