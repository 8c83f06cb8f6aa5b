//! Probes of how class capsules respond to transformed inputs: per-dimension
//! perturbation sweeps through the decoder, difference vectors under families
//! of transformations, their alignment ratios and the cosine between the
//! alignment directions of opposite families.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::align::{self, Histogram};
use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ArCapsNet;
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::transform::{self, ImageDims};

/// A single input transformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Identity,
    Rotate { degrees: f64 },
    Translate { dx: i64, dy: i64 },
}

impl Transform {
    pub fn apply(&self, image: &[f32], dims: ImageDims) -> Result<alloc::vec::Vec<f32>> {
        match *self {
            Transform::Identity => Ok(image.to_vec()),
            Transform::Rotate { degrees } => transform::rotate(image, dims, degrees),
            Transform::Translate { dx, dy } => transform::translate(image, dims, dx, dy),
        }
    }
}

/// Transformation families, each five increasing magnitudes of one kind:
/// rotations by 5..25 degrees, shifts by 1..5 pixels. `x` shifts move
/// content right, `y` shifts move it down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    RotPos,
    XPos,
    YPos,
    RotNeg,
    XNeg,
    YNeg,
}

impl Family {
    /// Report column order.
    pub const ALL: [Family; 6] = [
        Family::RotPos,
        Family::XPos,
        Family::YPos,
        Family::RotNeg,
        Family::XNeg,
        Family::YNeg,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::RotPos => "Rot+",
            Family::XPos => "x+",
            Family::YPos => "y+",
            Family::RotNeg => "Rot-",
            Family::XNeg => "x-",
            Family::YNeg => "y-",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        Family::ALL
            .into_iter()
            .find(|f| f.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown transformation family {s:?}")))
    }

    pub fn opposite(self) -> Family {
        match self {
            Family::RotPos => Family::RotNeg,
            Family::XPos => Family::XNeg,
            Family::YPos => Family::YNeg,
            Family::RotNeg => Family::RotPos,
            Family::XNeg => Family::XPos,
            Family::YNeg => Family::YPos,
        }
    }

    pub fn is_positive(self) -> bool {
        matches!(self, Family::RotPos | Family::XPos | Family::YPos)
    }

    pub fn transforms(self) -> [Transform; 5] {
        core::array::from_fn(|i| {
            let k = i as i64 + 1;
            match self {
                Family::RotPos => Transform::Rotate { degrees: 5.0 * k as f64 },
                Family::RotNeg => Transform::Rotate { degrees: -5.0 * k as f64 },
                Family::XPos => Transform::Translate { dx: k, dy: 0 },
                Family::XNeg => Transform::Translate { dx: -k, dy: 0 },
                Family::YPos => Transform::Translate { dx: 0, dy: k },
                Family::YNeg => Transform::Translate { dx: 0, dy: -k },
            }
        })
    }
}

fn image_tensor(images: &[Vec<f32>], dims: ImageDims) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * dims.len());
    for img in images {
        data.extend_from_slice(img);
    }
    Tensor::from_vec(&[images.len(), dims.rows, dims.cols, dims.channels], data)
}

/// Infer-mode class capsules `(B, D, N)` of `images`.
pub fn class_capsules(
    model: &ArCapsNet,
    store: &ParameterStore<f32>,
    images: &[Vec<f32>],
    dims: ImageDims,
) -> Result<Tensor<f32>> {
    Ok(model.infer(store, &image_tensor(images, dims)?)?.capsules)
}

fn capsule_of(caps: &Tensor<f32>, b: usize, class: usize) -> Vec<f64> {
    let (d, n) = (caps.dims()[1], caps.dims()[2]);
    (0..d).map(|k| caps.data()[(b * d + k) * n + class] as f64).collect()
}

/// Reconstructions while one coordinate of the kept class capsule sweeps
/// through [`align::perturbation_offsets`].
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbSweep {
    pub class: usize,
    pub dim: usize,
    pub offsets: [f64; 11],
    /// One `(rows, cols, channels)` image per offset.
    pub reconstructions: Vec<Vec<f32>>,
}

/// Decodes `image`'s class capsule (the given class, or the predicted one)
/// with `offset` added to coordinate `dim`, for every sweep offset.
pub fn perturb_and_decode(
    model: &ArCapsNet,
    store: &ParameterStore<f32>,
    image: &[f32],
    dims: ImageDims,
    class: Option<usize>,
    dim: usize,
) -> Result<PerturbSweep> {
    let cfg = model.config();
    if dim >= cfg.class_dim {
        return Err(Error::Input(format!("dimension {dim} outside [0, {})", cfg.class_dim)));
    }
    let inf = model.infer(store, &image_tensor(&[image.to_vec()], dims)?)?;
    let class = class.unwrap_or(inf.predictions[0]);
    if class >= cfg.classes {
        return Err(Error::Input(format!("class {class} outside [0, {})", cfg.classes)));
    }
    let mask = model.capsule_mask::<f32>(&[class])?;
    let masked: Vec<f32> = inf.capsules.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
    let offsets = align::perturbation_offsets(cfg.class_dim);
    let width = masked.len();
    let mut flat = Vec::with_capacity(width * offsets.len());
    let at = dim * cfg.classes + class;
    for &o in &offsets {
        let mut row = masked.clone();
        if o != 0.0 {
            row[at] += o as f32;
        }
        flat.extend_from_slice(&row);
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.input(Tensor::from_vec(&[offsets.len(), width], flat)?);
    let out = model.decode_flat(&mut g, &p, x)?;
    let reconstructions = g
        .value(out)
        .data()
        .chunks_exact(cfg.pixels())
        .map(|c| c.to_vec())
        .collect();
    Ok(PerturbSweep {
        class,
        dim,
        offsets,
        reconstructions,
    })
}

/// Rows `u(T_i(x)) - u(x)` of the `class` capsule, flattened `(N, D)`.
pub fn difference_vectors(
    model: &ArCapsNet,
    store: &ParameterStore<f32>,
    image: &[f32],
    dims: ImageDims,
    class: usize,
    transforms: &[Transform],
) -> Result<Vec<f64>> {
    let mut batch = Vec::with_capacity(transforms.len() + 1);
    batch.push(image.to_vec());
    for t in transforms {
        batch.push(t.apply(image, dims)?);
    }
    let caps = class_capsules(model, store, &batch, dims)?;
    Ok(differences_from(&caps, 0, 1..batch.len(), class))
}

fn differences_from(caps: &Tensor<f32>, base: usize, rows: core::ops::Range<usize>, class: usize) -> Vec<f64> {
    let u0 = capsule_of(caps, base, class);
    let mut v = Vec::with_capacity(rows.len() * u0.len());
    for b in rows {
        v.extend(capsule_of(caps, b, class).iter().zip(&u0).map(|(a, z)| a - z));
    }
    v
}

/// Alignment of one image under one family.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyAlignment {
    pub family: Family,
    pub direction: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub ratios: Vec<f64>,
    pub excluded: usize,
}

/// Alignments of one image under every requested family, from a single
/// batched forward pass.
pub fn image_alignments(
    model: &ArCapsNet,
    store: &ParameterStore<f32>,
    image: &[f32],
    dims: ImageDims,
    class: usize,
    families: &[Family],
) -> Result<Vec<FamilyAlignment>> {
    let mut batch = Vec::with_capacity(1 + 5 * families.len());
    batch.push(image.to_vec());
    for f in families {
        for t in f.transforms() {
            batch.push(t.apply(image, dims)?);
        }
    }
    let caps = class_capsules(model, store, &batch, dims)?;
    let d = model.config().class_dim;
    families
        .iter()
        .enumerate()
        .map(|(k, &family)| {
            let v = differences_from(&caps, 0, 1 + 5 * k..6 + 5 * k, class);
            let a = align::align_vector(&v, d)?;
            let r = align::relative_ratios(&v, d, &a.direction)?;
            Ok(FamilyAlignment {
                family,
                direction: a.direction,
                coefficients: a.coefficients,
                ratios: r.values,
                excluded: r.excluded.len(),
            })
        })
        .collect()
}

/// Ratio sums per (class, family).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub families: Vec<Family>,
    pub classes: usize,
    /// `sums[class][family]` and matching counts.
    pub sums: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    /// Every ratio in sample order.
    pub ratios: Vec<f64>,
    /// Images skipped because some family's difference vectors all vanished.
    pub degenerate: usize,
    /// Rows left out as zero.
    pub excluded_rows: usize,
    pub samples: usize,
}

impl AlignmentReport {
    pub fn new(families: &[Family], classes: usize) -> Self {
        AlignmentReport {
            families: families.to_vec(),
            classes,
            sums: vec![vec![0.0; families.len()]; classes],
            counts: vec![vec![0; families.len()]; classes],
            ratios: Vec::new(),
            degenerate: 0,
            excluded_rows: 0,
            samples: 0,
        }
    }

    /// NaN for an empty cell.
    pub fn mean(&self, class: usize, family: usize) -> f64 {
        self.sums[class][family] / self.counts[class][family] as f64
    }

    /// Column mean over all classes.
    pub fn family_mean(&self, family: usize) -> f64 {
        let s: f64 = self.sums.iter().map(|r| r[family]).sum();
        let c: usize = self.counts.iter().map(|r| r[family]).sum();
        s / c as f64
    }

    /// Mean and population standard deviation of every ratio.
    pub fn overall(&self) -> (f64, f64) {
        align::mean_std(&self.ratios)
    }

    /// Appends the images of `other`, which must cover the same families.
    pub fn merge(&mut self, other: &AlignmentReport) -> Result<()> {
        if other.families != self.families || other.classes != self.classes {
            return Err(Error::Input("cannot merge alignment reports over different families".into()));
        }
        for (row, orow) in self.sums.iter_mut().zip(&other.sums) {
            row.iter_mut().zip(orow).for_each(|(a, b)| *a += b);
        }
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            row.iter_mut().zip(orow).for_each(|(a, b)| *a += b);
        }
        self.ratios.extend_from_slice(&other.ratios);
        self.degenerate += other.degenerate;
        self.excluded_rows += other.excluded_rows;
        self.samples += other.samples;
        Ok(())
    }
}

/// Cosines between the alignment directions of each positive family and its
/// opposite, per image.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineReport {
    /// `(positive family, cosines)` in family order.
    pub cosines: Vec<(Family, Vec<f64>)>,
    pub degenerate: usize,
}

impl CosineReport {
    pub fn new(positives: &[Family]) -> Self {
        CosineReport {
            cosines: positives.iter().map(|&f| (f, Vec::new())).collect(),
            degenerate: 0,
        }
    }

    /// 50-bin histograms over `[-1, 1]`, one per positive family.
    pub fn histograms(&self) -> Vec<(Family, Histogram)> {
        self.cosines
            .iter()
            .map(|(f, c)| {
                let mut h = Histogram::cosine();
                c.iter().for_each(|&x| h.add(x));
                (*f, h)
            })
            .collect()
    }

    pub fn merge(&mut self, other: &CosineReport) -> Result<()> {
        if self.cosines.len() != other.cosines.len()
            || self.cosines.iter().zip(&other.cosines).any(|(a, b)| a.0 != b.0)
        {
            return Err(Error::Input("cannot merge cosine reports over different families".into()));
        }
        for (a, b) in self.cosines.iter_mut().zip(&other.cosines) {
            a.1.extend_from_slice(&b.1);
        }
        self.degenerate += other.degenerate;
        Ok(())
    }
}

/// `samples` distinct test positions drawn with `seed` (all of them, in
/// order, when `samples` reaches `len`). The flag reports whether the
/// request had to be clamped.
pub fn sample_indices(len: usize, samples: usize, seed: u64) -> (Vec<usize>, bool) {
    if samples >= len {
        return ((0..len).collect(), samples > len);
    }
    let mut idx = rand::seq::index::sample(&mut crate::rng_from_seed(seed), len, samples).into_vec();
    idx.sort_unstable();
    (idx, false)
}

/// Positive families whose cosine with their opposite is reported for
/// `families`: every family's positive member, in canonical order.
pub fn cosine_families(families: &[Family]) -> Vec<Family> {
    let mut positives: Vec<Family> = families
        .iter()
        .map(|&f| if f.is_positive() { f } else { f.opposite() })
        .collect();
    positives.sort();
    positives.dedup();
    positives
}

/// Alignment ratios for `families` and positive/negative cosines for
/// [`cosine_families`] over the test images at `indices`, using each image's
/// true label as the class. One batched forward pass per image serves both
/// reports.
pub fn equivariance_analysis(
    model: &ArCapsNet,
    store: &ParameterStore<f32>,
    test: &Dataset,
    indices: &[usize],
    families: &[Family],
) -> Result<(AlignmentReport, CosineReport)> {
    let classes = model.config().classes;
    let positives = cosine_families(families);
    let mut wanted: Vec<Family> = families.to_vec();
    for &p in &positives {
        for f in [p, p.opposite()] {
            if !wanted.contains(&f) {
                wanted.push(f);
            }
        }
    }
    let slot = |f: Family| wanted.iter().position(|&w| w == f).unwrap_or(0);
    let mut report = AlignmentReport::new(families, classes);
    let mut cosines = CosineReport::new(&positives);
    for &i in indices {
        if i >= test.len() {
            return Err(Error::Input(format!("test index {i} outside dataset of {}", test.len())));
        }
        let label = test.label(i);
        report.samples += 1;
        match image_alignments(model, store, test.image(i), test.dims(), label, &wanted) {
            Ok(all) => {
                for (k, fa) in all.iter().take(families.len()).enumerate() {
                    report.sums[label][k] += fa.ratios.iter().sum::<f64>();
                    report.counts[label][k] += fa.ratios.len();
                    report.excluded_rows += fa.excluded;
                    report.ratios.extend_from_slice(&fa.ratios);
                }
                for (p, c) in cosines.cosines.iter_mut() {
                    let (pos, neg) = (&all[slot(*p)], &all[slot(p.opposite())]);
                    c.push(align::cosine(&pos.direction, &neg.direction));
                }
            }
            Err(Error::Input(_)) => {
                report.degenerate += 1;
                cosines.degenerate += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((report, cosines))
}

/// Alignment ratios alone; see [`equivariance_analysis`].
pub fn alignment_experiment(
    model: &ArCapsNet,
    store: &ParameterStore<f32>,
    test: &Dataset,
    indices: &[usize],
    families: &[Family],
) -> Result<AlignmentReport> {
    Ok(equivariance_analysis(model, store, test, indices, families)?.0)
}

/// Positive/negative cosines alone; see [`equivariance_analysis`].
pub fn pos_neg_cosine(
    model: &ArCapsNet,
    store: &ParameterStore<f32>,
    test: &Dataset,
    indices: &[usize],
    families: &[Family],
) -> Result<CosineReport> {
    Ok(equivariance_analysis(model, store, test, indices, families)?.1)
}
