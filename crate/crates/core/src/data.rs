//! Procedural labelled shape images, their file format, and PGM/PPM export.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::io::{read_json_header, read_tensor_as, write_json_header, write_tensor};
use crate::numeric::{DType, RandomSource, Tensor};
use crate::par;

/// Additive pixel noise (before clamping).
pub const PIXEL_NOISE_STD: f64 = 0.05;

/// Fraction of each class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub resolution: usize,
    pub channels: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 8,
            resolution: 16,
            channels: 1,
            samples_per_class: 400,
            seed: 3407,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=ShapeFamily::ALL.len()).contains(&self.num_classes) {
            return Err(Error::config(format!(
                "num_classes must be in [2, {}], got {}",
                ShapeFamily::ALL.len(),
                self.num_classes
            )));
        }
        if self.resolution < 8 {
            return Err(Error::config(format!(
                "resolution must be at least 8, got {}",
                self.resolution
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.samples_per_class < 5 {
            return Err(Error::config("samples_per_class must be at least 5"));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.resolution, self.resolution]
    }

    fn train_per_class(&self) -> usize {
        ((self.samples_per_class as f64 * TRAIN_FRACTION).round() as usize)
            .clamp(1, self.samples_per_class - 1)
    }
}

/// Images `[B, C, H, W]` in `[0, 1]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "labeled_batch",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::IndexOutOfRange {
                op: "labeled_batch",
                index: bad,
                extent: num_classes,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("pixel values must lie in [0, 1]"));
        }
        Ok(LabeledBatch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledBatch> {
        Ok(LabeledBatch {
            images: self.images.select_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// First `n` images (or all of them).
    pub fn head(&self, n: usize) -> Result<LabeledBatch> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Images whose label is in `classes`, relabelled to their position in it.
    pub fn restrict_classes(&self, classes: &[usize]) -> Result<LabeledBatch> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        let mut out = self.subset(&idx)?;
        for l in &mut out.labels {
            *l = classes.iter().position(|c| c == l).unwrap();
        }
        Ok(out)
    }
}

/// Procedural shape families; class `k` draws from `ShapeFamily::ALL[k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Disk,
    Square,
    Cross,
    HorizontalStripes,
    Diagonal,
    Ring,
    VerticalStripes,
    Triangle,
    XMark,
    Frame,
    AntiDiagonal,
    Checker,
    HorizontalBar,
    VerticalBar,
    DotGrid,
    Ellipse,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 16] = [
        ShapeFamily::Disk,
        ShapeFamily::Square,
        ShapeFamily::Cross,
        ShapeFamily::HorizontalStripes,
        ShapeFamily::Diagonal,
        ShapeFamily::Ring,
        ShapeFamily::VerticalStripes,
        ShapeFamily::Triangle,
        ShapeFamily::XMark,
        ShapeFamily::Frame,
        ShapeFamily::AntiDiagonal,
        ShapeFamily::Checker,
        ShapeFamily::HorizontalBar,
        ShapeFamily::VerticalBar,
        ShapeFamily::DotGrid,
        ShapeFamily::Ellipse,
    ];
}

/// Randomized placement of one shape instance, in pixel units.
#[derive(Clone, Copy, Debug)]
struct Placement {
    cx: f64,
    cy: f64,
    scale: f64,
    period: f64,
    phase: f64,
}

fn soft(d: f64) -> f64 {
    (d + 0.5).clamp(0.0, 1.0)
}

/// Foreground coverage of pixel `(px, py)` in `[0, 1]`.
fn coverage(family: ShapeFamily, p: &Placement, px: f64, py: f64) -> f64 {
    let (dx, dy) = (px - p.cx, py - p.cy);
    let s = p.scale;
    let r = (dx * dx + dy * dy).sqrt();
    let box_d = s - dx.abs().max(dy.abs());
    let stripe = |u: f64| {
        let w = (u - p.phase).rem_euclid(p.period);
        p.period / 4.0 - (w - p.period / 2.0).abs()
    };
    let line = |dist: f64| 1.2 - dist;
    let d = match family {
        ShapeFamily::Disk => s - r,
        ShapeFamily::Square => s - dx.abs().max(dy.abs()),
        ShapeFamily::Cross => {
            let w = (0.28 * s).max(1.0);
            (w - dx.abs()).min(s - dy.abs()).max((w - dy.abs()).min(s - dx.abs()))
        }
        ShapeFamily::HorizontalStripes => stripe(py),
        ShapeFamily::VerticalStripes => stripe(px),
        ShapeFamily::Diagonal => line((dx - dy).abs() / 2f64.sqrt()).min(box_d),
        ShapeFamily::AntiDiagonal => line((dx + dy).abs() / 2f64.sqrt()).min(box_d),
        ShapeFamily::XMark => line((dx - dy).abs() / 2f64.sqrt())
            .max(line((dx + dy).abs() / 2f64.sqrt()))
            .min(box_d),
        ShapeFamily::Ring => 1.3 - (r - 0.85 * s).abs(),
        ShapeFamily::Triangle => {
            let half_width = (dy + s) * 0.6;
            (0.7 * s - dy).min(half_width - dx.abs()).min(dy + s)
        }
        ShapeFamily::Frame => 1.2 - (dx.abs().max(dy.abs()) - 0.8 * s).abs(),
        ShapeFamily::Checker => {
            let cell = p.period;
            let a = ((px - p.phase) / cell).floor() as i64;
            let b = ((py - p.phase) / cell).floor() as i64;
            return if (a + b).rem_euclid(2) == 0 { 1.0 } else { 0.0 };
        }
        ShapeFamily::HorizontalBar => (1.5 - dy.abs()).min(s - dx.abs()),
        ShapeFamily::VerticalBar => (1.5 - dx.abs()).min(s - dy.abs()),
        ShapeFamily::DotGrid => {
            let fx = (px - p.phase).rem_euclid(p.period) - p.period / 2.0;
            let fy = (py - p.phase).rem_euclid(p.period) - p.period / 2.0;
            1.1 - (fx * fx + fy * fy).sqrt()
        }
        ShapeFamily::Ellipse => {
            let q = ((dx / s).powi(2) + (dy / (0.5 * s)).powi(2)).sqrt();
            (1.0 - q) * 0.5 * s
        }
    };
    soft(d)
}

fn render_sample(spec: &DatasetSpec, family: ShapeFamily, rng: &mut RandomSource) -> Vec<f64> {
    let res = spec.resolution as f64;
    let mid = res / 2.0 - 0.5;
    let jitter = 0.15 * res;
    let place = Placement {
        cx: mid + rng.uniform_range(-jitter, jitter),
        cy: mid + rng.uniform_range(-jitter, jitter),
        scale: rng.uniform_range(0.22, 0.38) * res,
        period: rng.uniform_range(3.0, 5.0) * res / 16.0,
        phase: rng.uniform_range(0.0, 5.0),
    };
    let fg = rng.uniform_range(0.6, 1.0);
    let bg = rng.uniform_range(0.0, 0.25);
    let tints: Vec<(f64, f64)> = (0..spec.channels)
        .map(|_| {
            if spec.channels == 1 {
                (1.0, 1.0)
            } else {
                (rng.uniform_range(0.6, 1.0), rng.uniform_range(0.6, 1.0))
            }
        })
        .collect();
    let n = spec.resolution;
    let mut out = Vec::with_capacity(spec.channels * n * n);
    for &(tf, tb) in &tints {
        for y in 0..n {
            for x in 0..n {
                let m = coverage(family, &place, x as f64, y as f64);
                let v = bg * tb + (fg * tf - bg * tb) * m + PIXEL_NOISE_STD * rng.normal();
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Generates the stratified 80/20 train/test split. Pure in `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<(LabeledBatch, LabeledBatch)> {
    spec.validate()?;
    let per = spec.samples_per_class;
    let total = spec.num_classes * per;
    let images: Vec<Vec<f64>> = par::map_range(total, |i| {
        let class = i / per;
        let mut rng = RandomSource::new(spec.seed, i as u64);
        render_sample(spec, ShapeFamily::ALL[class], &mut rng)
    });

    let n_train = spec.train_per_class();
    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    for i in 0..total {
        if i % per < n_train {
            train_idx.push(i);
        } else {
            test_idx.push(i);
        }
    }
    let mut shuffle = RandomSource::new(spec.seed, u64::MAX);
    let build = |idx: &[usize], perm: Vec<usize>| -> Result<LabeledBatch> {
        let [c, h, w] = spec.image_shape();
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        let mut labels = Vec::with_capacity(idx.len());
        for &p in &perm {
            let i = idx[p];
            data.extend_from_slice(&images[i]);
            labels.push(i / per);
        }
        let images = Tensor::new(vec![idx.len(), c, h, w], data)?;
        LabeledBatch::new(images, labels, spec.num_classes)
    };
    let train = build(&train_idx, shuffle.permutation(train_idx.len()))?;
    let test = build(&test_idx, shuffle.permutation(test_idx.len()))?;
    Ok((train, test))
}

/// Dataset file: length-prefixed JSON [`DatasetSpec`], then an images block
/// and a labels block, both stored as f64.
pub fn save_batch(path: &Path, spec: &DatasetSpec, batch: &LabeledBatch) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_json_header(&mut f, spec)?;
    write_tensor(&mut f, &batch.images, DType::F64)?;
    let labels = Tensor::new(
        vec![batch.len()],
        batch.labels.iter().map(|&l| l as f64).collect(),
    )?;
    write_tensor(&mut f, &labels, DType::F64)?;
    f.flush()?;
    Ok(())
}

pub fn load_batch(path: &Path) -> Result<(DatasetSpec, LabeledBatch)> {
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            name: "dataset".into(),
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    let mut r = std::io::BufReader::new(f);
    let spec: DatasetSpec = read_json_header(&mut r)?;
    spec.validate()?;
    let images = read_tensor_as(&mut r, DType::F64)?;
    let labels_t = read_tensor_as(&mut r, DType::F64)?;
    let [c, h, w] = spec.image_shape();
    if images.rank() != 4 || images.shape()[1..] != [c, h, w] {
        return Err(Error::Format(format!(
            "images block {:?} does not match spec {:?}",
            images.shape(),
            [c, h, w]
        )));
    }
    let labels = labels_t
        .data()
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || v < 0.0 {
                Err(Error::Format(format!("non-integral label {v}")))
            } else {
                Ok(v as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = LabeledBatch::new(images, labels, spec.num_classes)?;
    Ok((spec, batch))
}

/// Writes a plain PGM (`C = 1`) or PPM (`C = 3`), maxval 255, quantized with
/// round-half-to-even. Accepts `[C, H, W]` or `[1, C, H, W]`.
pub fn export_image(img: &Tensor, path: &Path) -> Result<()> {
    let text = encode_portable(img)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round_ties_even() as u8
}

pub fn encode_portable(img: &Tensor) -> Result<String> {
    let shape = match img.shape() {
        [c, h, w] => [*c, *h, *w],
        [1, c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::InvalidShape {
                shape: other.to_vec(),
                reason: "expected [C, H, W]".into(),
            })
        }
    };
    let [c, h, w] = shape;
    if c != 1 && c != 3 {
        return Err(Error::config(format!("cannot export {c}-channel image")));
    }
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::config(format!("pixel value {v} outside [0, 1]")));
    }
    let d = img.data();
    let mut out = String::new();
    out.push_str(if c == 1 { "P2\n" } else { "P3\n" });
    out.push_str(&format!("{w} {h}\n255\n"));
    for y in 0..h {
        let mut row = Vec::with_capacity(w * c);
        for x in 0..w {
            for ch in 0..c {
                row.push(quantize(d[(ch * h + y) * w + x]).to_string());
            }
        }
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// Test accuracy of a nearest-class-mean classifier (Euclidean).
pub fn nearest_centroid_accuracy(
    train: &LabeledBatch,
    test: &LabeledBatch,
    num_classes: usize,
) -> f64 {
    let d = train.images.item_len();
    let mut centroids = vec![0.0; num_classes * d];
    let mut counts = vec![0usize; num_classes];
    for (img, &l) in train.images.data().chunks(d).zip(&train.labels) {
        counts[l] += 1;
        for (c, v) in centroids[l * d..(l + 1) * d].iter_mut().zip(img) {
            *c += v;
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        for c in &mut centroids[k * d..(k + 1) * d] {
            *c /= n.max(1) as f64;
        }
    }
    let correct = test
        .images
        .data()
        .chunks(d)
        .zip(&test.labels)
        .filter(|(img, &l)| {
            let best = (0..num_classes)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a * d..(a + 1) * d]
                        .iter()
                        .zip(img.iter())
                        .map(|(c, v)| (c - v).powi(2))
                        .sum();
                    let db: f64 = centroids[b * d..(b + 1) * d]
                        .iter()
                        .zip(img.iter())
                        .map(|(c, v)| (c - v).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best == l
        })
        .count();
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            samples_per_class: 60,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invariants_hold_and_split_is_80_20() {
        let spec = small_spec();
        let (train, test) = generate(&spec).unwrap();
        assert_eq!(train.len(), 8 * 48);
        assert_eq!(test.len(), 8 * 12);
        for b in [&train, &test] {
            assert!(b.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(b.labels.iter().all(|&l| l < spec.num_classes));
            assert_eq!(b.images.shape()[1..], [1, 16, 16]);
        }
    }

    #[test]
    fn classes_are_separable_by_nearest_centroid() {
        let spec = DatasetSpec::default();
        let (train, test) = generate(&spec).unwrap();
        let acc = nearest_centroid_accuracy(&train, &test, spec.num_classes);
        assert!(acc > 1.0 / spec.num_classes as f64 + 0.2, "accuracy {acc}");
    }

    #[test]
    fn too_many_classes_is_rejected() {
        let spec = DatasetSpec {
            num_classes: 17,
            ..DatasetSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rgb_generation_works() {
        let spec = DatasetSpec {
            channels: 3,
            num_classes: 16,
            samples_per_class: 5,
            ..DatasetSpec::default()
        };
        let (train, _) = generate(&spec).unwrap();
        assert_eq!(train.images.shape()[1], 3);
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let spec = small_spec();
        let (_, test) = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.stds");
        save_batch(&path, &spec, &test).unwrap();
        let (spec2, back) = load_batch(&path).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(back, test);

        let bytes = std::fs::read(&path).unwrap();
        let trunc = dir.path().join("trunc.stds");
        std::fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_batch(&trunc), Err(Error::Format(_))));

        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut bad = bytes.clone();
        bad[8 + header_len] = b'Z';
        let badp = dir.path().join("bad.stds");
        std::fs::write(&badp, &bad).unwrap();
        assert!(matches!(load_batch(&badp), Err(Error::BadMagic { .. })));

        assert!(matches!(
            load_batch(&dir.path().join("absent.stds")),
            Err(Error::MissingArtifact { .. })
        ));
    }

    #[test]
    fn export_quantization() {
        let zeros = encode_portable(&Tensor::zeros(&[1, 2, 2])).unwrap();
        assert_eq!(zeros, "P2\n2 2\n255\n0 0\n0 0\n");
        let ones = encode_portable(&Tensor::ones(&[1, 1, 2])).unwrap();
        assert_eq!(ones, "P2\n2 1\n255\n255 255\n");
        assert_eq!(quantize(0.5), 128);
        let rgb = encode_portable(&Tensor::full(&[3, 1, 1], 0.5)).unwrap();
        assert_eq!(rgb, "P3\n1 1\n255\n128 128 128\n");
        assert!(encode_portable(&Tensor::full(&[1, 1, 1], 1.2)).is_err());
    }
}
