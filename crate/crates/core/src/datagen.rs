//! Labeled dataset production: synthetic class-conditional data, imbalanced
//! subsampling (long-tail and step priors), backdoor poisoning with three
//! trigger embeddings, the small balanced clean set, and external-file
//! ingestion (CSV and a raw binary format).

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{BufRead, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub label: usize,
    pub poisoned: bool,
}

/// Labeled sample collection; every feature lies in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, input_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.x.shape() != input_shape {
                return Err(Error::InvalidDataset(format!(
                    "sample {i} has shape {:?}, expected {input_shape:?}",
                    s.x.shape()
                )));
            }
            if s.label >= num_classes {
                return Err(Error::InvalidDataset(format!(
                    "sample {i} has label {} outside 0..{num_classes}",
                    s.label
                )));
            }
            if s.x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidDataset(format!("sample {i} leaves [0,1]")));
            }
        }
        Ok(Self { samples, input_shape, num_classes })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn poisoned_count(&self) -> usize {
        self.samples.iter().filter(|s| s.poisoned).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
        }
    }

    /// Stack all samples into a [N, ...] batch plus the label vector.
    pub fn batched(&self) -> Result<(Tensor, Vec<usize>)> {
        if self.samples.is_empty() {
            return Err(Error::InvalidDataset("empty dataset".to_string()));
        }
        let dim: usize = self.input_shape.iter().product();
        let mut data = Vec::with_capacity(self.samples.len() * dim);
        let mut labels = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            data.extend_from_slice(s.x.data());
            labels.push(s.label);
        }
        let mut shape = vec![self.samples.len()];
        shape.extend_from_slice(&self.input_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }
}

/// Small balanced mitigation set: equally many samples per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanSet {
    per_class: Vec<Vec<Tensor>>,
    input_shape: Vec<usize>,
}

impl CleanSet {
    pub fn new(per_class: Vec<Vec<Tensor>>, input_shape: Vec<usize>) -> Result<Self> {
        if per_class.is_empty() || per_class[0].is_empty() {
            return Err(Error::InvalidDataset("clean set must be nonempty".to_string()));
        }
        let size = per_class[0].len();
        if per_class.iter().any(|c| c.len() != size) {
            return Err(Error::InvalidDataset("clean set must be balanced".to_string()));
        }
        Ok(Self { per_class, input_shape })
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn per_class_count(&self) -> usize {
        self.per_class[0].len()
    }

    pub fn len(&self) -> usize {
        self.per_class.len() * self.per_class[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn class(&self, c: usize) -> &[Tensor] {
        &self.per_class[c]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// All samples as (x, label), class-major order.
    pub fn labeled(&self) -> Vec<(&Tensor, usize)> {
        self.per_class
            .iter()
            .enumerate()
            .flat_map(|(c, xs)| xs.iter().map(move |x| (x, c)))
            .collect()
    }

    pub fn all_tensors(&self) -> Vec<Tensor> {
        self.per_class.iter().flatten().cloned().collect()
    }

    /// Batch of all samples plus labels, class-major order.
    pub fn batched(&self) -> Result<(Tensor, Vec<usize>)> {
        let dim: usize = self.input_shape.iter().product();
        let n = self.len();
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for (x, y) in self.labeled() {
            data.extend_from_slice(x.data());
            labels.push(y);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.input_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImbalanceKind {
    /// Exponential (long-tail) prior: n_i = n_0 * mu_e^i.
    Lt,
    /// Step prior: n_i = n_0 for i < C/2, n_0 / gamma otherwise.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImbalanceSpec {
    pub kind: ImbalanceKind,
    /// Sample-size ratio between the most and least frequent class.
    pub gamma: f64,
    /// Most-frequent class size.
    pub n0: usize,
}

impl ImbalanceSpec {
    /// mu_e = gamma^(-1/(C-1)).
    pub fn mu_exponential(&self, num_classes: usize) -> f64 {
        self.gamma.powf(-1.0 / (num_classes as f64 - 1.0))
    }

    /// mu_s = 1/gamma.
    pub fn mu_step(&self) -> f64 {
        1.0 / self.gamma
    }

    /// Per-class retained counts. Round-half-up, with the final (rarest)
    /// class forced to exactly n0/gamma so the realized ratio is exact.
    pub fn class_counts(&self, num_classes: usize) -> Result<Vec<usize>> {
        if self.gamma < 1.0 {
            return Err(Error::InvalidConfig(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        let n0 = self.n0 as f64;
        let rarest = (n0 / self.gamma).round().max(1.0) as usize;
        let counts: Vec<usize> = match self.kind {
            ImbalanceKind::Lt => {
                let mu = self.mu_exponential(num_classes);
                (0..num_classes)
                    .map(|i| {
                        if i + 1 == num_classes {
                            rarest
                        } else {
                            round_half_up(n0 * mu.powi(i as i32))
                        }
                    })
                    .collect()
            }
            ImbalanceKind::Step => (0..num_classes)
                .map(|i| if i < num_classes / 2 { self.n0 } else { rarest })
                .collect(),
        };
        Ok(counts)
    }
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerKind {
    AdditiveGlobal,
    PatchReplace,
    PatchBlend,
}

/// Backdoor embedding description.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    /// Full-size perturbation for additive triggers, patch content otherwise.
    pub pattern: Tensor,
    /// Patch placement: (row, col) for images, (0, offset) for vectors.
    pub position: (usize, usize),
    /// Blend coefficient, used by PatchBlend only.
    pub alpha: f64,
    /// Attack target class; sources are all classes != target.
    pub target: usize,
}

impl TriggerSpec {
    /// L2 norm of the embedded pattern.
    pub fn pattern_norm(&self) -> f64 {
        self.pattern.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Global alternating-sign pattern of the given amplitude.
    pub fn chessboard(input_shape: &[usize], amplitude: f64, target: usize) -> Self {
        let data: Vec<f64> = if input_shape.len() == 3 {
            let (h, w) = (input_shape[1], input_shape[2]);
            let mut v = Vec::with_capacity(input_shape.iter().product());
            for _c in 0..input_shape[0] {
                for y in 0..h {
                    for x in 0..w {
                        v.push(if (x + y) % 2 == 0 { amplitude } else { -amplitude });
                    }
                }
            }
            v
        } else {
            (0..input_shape.iter().product())
                .map(|i| if i % 2 == 0 { amplitude } else { -amplitude })
                .collect()
        };
        Self {
            kind: TriggerKind::AdditiveGlobal,
            pattern: Tensor::new(input_shape.to_vec(), data)
                .map_err(|_| ())
                .unwrap_or_else(|_| Tensor::zeros(input_shape.to_vec())),
            position: (0, 0),
            alpha: 1.0,
            target,
        }
    }

    /// 3x3 checkered patch in the top-left corner (first 3 coordinates for
    /// vector data).
    pub fn corner_patch(input_shape: &[usize], kind: TriggerKind, alpha: f64, target: usize) -> Self {
        let pattern = if input_shape.len() == 3 {
            let data: Vec<f64> = (0..9).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
            Tensor::new(vec![1, 3, 3], data).unwrap()
        } else {
            Tensor::vector(&[1.0, 0.0, 1.0]).unwrap()
        };
        Self { kind, pattern, position: (0, 0), alpha, target }
    }
}

/// Geometry of synthetic inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataGeometry {
    Vector { dim: usize },
    Image { side: usize },
}

impl DataGeometry {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            DataGeometry::Vector { dim } => vec![*dim],
            DataGeometry::Image { side } => vec![1, *side, *side],
        }
    }
}

/// Class-conditional Gaussian mixture clamped to [0,1]^d. Class means sit on
/// directions from the hypercube center, at a radius that puts the typical
/// inter-mean distance at `separation` noise standard deviations; the
/// per-coordinate noise scale itself is fixed, so the conditioning of the
/// inputs does not change with separation. Classes are not equidistant:
/// class c and class C-1-c form a neighborhood (their means share most of
/// their direction), the way long-tailed data puts rare categories close to
/// common ones. Larger separation means less Bayes overlap. Deterministic
/// per seed.
pub fn synth_classes(
    num_classes: usize,
    geometry: DataGeometry,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if separation <= 0.0 {
        return Err(Error::InvalidConfig(format!("separation must be > 0, got {separation}")));
    }
    let shape = geometry.shape();
    let dim: usize = shape.iter().product();
    let noise = 0.12;
    let radius = separation * noise / std::f64::consts::SQRT_2;
    let neighborhood = 0.75; // admixture of a fresh direction for paired classes

    let unit = |c: usize, slot: u64| -> Vec<f64> {
        let mut rng = stream(seed, "synth-mean", c as u64, slot);
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        dir.into_iter().map(|v| v / norm).collect()
    };
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            let partner = num_classes - 1 - c;
            let dir = if c <= partner {
                unit(c, 0)
            } else {
                let base = unit(partner, 0);
                let own = unit(c, 1);
                let mixed: Vec<f64> = base
                    .iter()
                    .zip(&own)
                    .map(|(b, o)| b + neighborhood * o)
                    .collect();
                let norm = mixed.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                mixed.into_iter().map(|v| v / norm).collect()
            };
            dir.into_iter().map(|v| 0.5 + radius * v).collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for i in 0..per_class {
            let mut rng = stream(seed, "synth-sample", c as u64, i as u64);
            let data: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let g: f64 = rng.sample(StandardNormal);
                    (m + noise * g).clamp(0.0, 1.0)
                })
                .collect();
            samples.push(Sample {
                x: Tensor::new(shape.clone(), data)?,
                label: c,
                poisoned: false,
            });
        }
    }
    Dataset::new(samples, shape, num_classes)
}

/// Subsample a balanced dataset to the prior described by `spec`. Sample
/// contents are untouched; only membership changes.
pub fn apply_imbalance(ds: &Dataset, spec: &ImbalanceSpec, seed: u64) -> Result<Dataset> {
    let counts = spec.class_counts(ds.num_classes())?;
    let available = ds.class_counts();
    for (i, (&want, &have)) in counts.iter().zip(&available).enumerate() {
        if want > have {
            return Err(Error::InvalidDataset(format!(
                "class {i}: requested {want} samples, only {have} available"
            )));
        }
    }
    let mut keep = Vec::new();
    for c in 0..ds.num_classes() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples()[i].label == c).collect();
        let mut rng = stream(seed, "imbalance", c as u64, 0);
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..counts[c]]);
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

/// Embed the trigger into one input; the result stays in [0,1]^d.
pub fn embed_trigger(x: &Tensor, spec: &TriggerSpec) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    match spec.kind {
        TriggerKind::AdditiveGlobal => {
            if spec.pattern.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "embed_trigger",
                    detail: format!("pattern {:?} vs input {shape:?}", spec.pattern.shape()),
                });
            }
            let data = x
                .data()
                .iter()
                .zip(spec.pattern.data())
                .map(|(v, d)| (v + d).clamp(0.0, 1.0))
                .collect();
            Tensor::new(shape, data)
        }
        TriggerKind::PatchReplace | TriggerKind::PatchBlend => {
            let mut data = x.data().to_vec();
            let blend = matches!(spec.kind, TriggerKind::PatchBlend);
            let a = if blend { spec.alpha } else { 1.0 };
            for (flat, pv) in patch_indices(&shape, spec)? {
                data[flat] = ((1.0 - a) * data[flat] + a * pv).clamp(0.0, 1.0);
            }
            Tensor::new(shape, data)
        }
    }
}

fn patch_indices(shape: &[usize], spec: &TriggerSpec) -> Result<Vec<(usize, f64)>> {
    let p = &spec.pattern;
    let (row, col) = spec.position;
    let mut out = Vec::with_capacity(p.numel());
    if shape.len() == 3 {
        let (h, w) = (shape[1], shape[2]);
        let ps = p.shape();
        if ps.len() != 3 || row + ps[1] > h || col + ps[2] > w {
            return Err(Error::InvalidDataset(format!(
                "patch {ps:?} at ({row},{col}) leaves image {shape:?}"
            )));
        }
        for (i, &pv) in p.data().iter().enumerate() {
            let py = (i / ps[2]) % ps[1];
            let px = i % ps[2];
            out.push(((row + py) * w + (col + px), pv));
        }
    } else {
        let d = shape[0];
        let len = p.numel();
        if col + len > d {
            return Err(Error::InvalidDataset(format!(
                "patch of length {len} at offset {col} leaves vector of dim {d}"
            )));
        }
        for (i, &pv) in p.data().iter().enumerate() {
            out.push((col + i, pv));
        }
    }
    Ok(out)
}

/// Poison a training set: a `rate` fraction of the non-target-class samples
/// receive the trigger and are relabeled to the target class.
pub fn poison(ds: &Dataset, spec: &TriggerSpec, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0 < rate && rate < 1.0) {
        return Err(Error::InvalidConfig(format!("poison rate must be in (0,1), got {rate}")));
    }
    if spec.target >= ds.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "target class {} outside 0..{}",
            spec.target,
            ds.num_classes()
        )));
    }
    let eligible: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.samples()[i].label != spec.target)
        .collect();
    let count = (rate * eligible.len() as f64).round() as usize;
    if count == 0 {
        return Err(Error::InvalidConfig(format!(
            "rate {rate} yields zero poisoned samples out of {} eligible",
            eligible.len()
        )));
    }
    let mut order = eligible;
    let mut rng = stream(seed, "poison", 0, 0);
    order.shuffle(&mut rng);
    let chosen: std::collections::HashSet<usize> = order[..count].iter().copied().collect();
    let mut samples = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples().iter().enumerate() {
        if chosen.contains(&i) {
            samples.push(Sample {
                x: embed_trigger(&s.x, spec)?,
                label: spec.target,
                poisoned: true,
            });
        } else {
            samples.push(s.clone());
        }
    }
    Dataset::new(samples, ds.input_shape().to_vec(), ds.num_classes())
}

/// Draw a balanced clean set of `per_class` samples per class out of a
/// source pool; returns the clean set and the untouched remainder.
pub fn split_clean_set(source: &Dataset, per_class: usize, seed: u64) -> Result<(CleanSet, Dataset)> {
    let counts = source.class_counts();
    for (c, &have) in counts.iter().enumerate() {
        if have < per_class {
            return Err(Error::InvalidDataset(format!(
                "class {c} has {have} samples, cannot take {per_class}"
            )));
        }
    }
    let mut taken = vec![Vec::new(); source.num_classes()];
    let mut taken_idx = std::collections::HashSet::new();
    for c in 0..source.num_classes() {
        let mut idx: Vec<usize> = (0..source.len())
            .filter(|&i| source.samples()[i].label == c)
            .collect();
        let mut rng = stream(seed, "clean-set", c as u64, 0);
        idx.shuffle(&mut rng);
        for &i in &idx[..per_class] {
            taken[c].push(source.samples()[i].x.clone());
            taken_idx.insert(i);
        }
    }
    let rest: Vec<usize> = (0..source.len()).filter(|i| !taken_idx.contains(i)).collect();
    Ok((
        CleanSet::new(taken, source.input_shape().to_vec())?,
        source.subset(&rest),
    ))
}

// ---------------------------------------------------------------------------
// external formats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Raw,
}

const DATA_MAGIC: &[u8; 6] = b"MMDATA";
const DATA_VERSION: u8 = 1;

/// Read a dataset from disk. CSV rows are `label,f0,...,f{d-1}` under a
/// matching header; the raw format is the binary layout written by
/// [`save_external`]. Feature values are min-max scaled into [0,1] when any
/// value falls outside that range.
pub fn load_external(path: &Path, format: FileFormat, num_classes: Option<usize>) -> Result<Dataset> {
    match format {
        FileFormat::Csv => load_csv(path, num_classes),
        FileFormat::Raw => load_raw(path, num_classes),
    }
}

pub fn save_external(ds: &Dataset, path: &Path, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Csv => save_csv(ds, path),
        FileFormat::Raw => save_raw(ds, path),
    }
}

fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidDataset("empty CSV".to_string()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::InvalidDataset(format!("bad CSV header: {header}")));
    }
    let dim = cols.len() - 1;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::InvalidDataset(format!(
                "row {}: expected {} fields, got {}",
                lineno + 2,
                dim + 1,
                fields.len()
            )));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| Error::InvalidDataset(format!("row {}: bad label '{}'", lineno + 2, fields[0])))?;
        let mut feats = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::InvalidDataset(format!("row {}: bad value '{f}'", lineno + 2)))?;
            feats.push(v);
        }
        rows.push((label, feats));
    }
    if rows.is_empty() {
        return Err(Error::InvalidDataset("CSV has no data rows".to_string()));
    }
    let max_label = rows.iter().map(|(l, _)| *l).max().unwrap();
    let classes = match num_classes {
        Some(c) => {
            if max_label >= c {
                return Err(Error::InvalidDataset(format!(
                    "label {max_label} out of range for {c} classes"
                )));
            }
            c
        }
        None => max_label + 1,
    };
    let scale = UnitScale::fit(rows.iter().flat_map(|(_, f)| f.iter().copied()));
    let samples = rows
        .into_iter()
        .map(|(label, feats)| Sample {
            x: Tensor::new(vec![dim], feats.into_iter().map(|v| scale.apply(v)).collect()).unwrap(),
            label,
            poisoned: false,
        })
        .collect();
    Dataset::new(samples, vec![dim], classes)
}

/// Identity when all values already sit in [0,1]; min-max otherwise.
struct UnitScale {
    lo: f64,
    span: f64,
    identity: bool,
}

impl UnitScale {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Self {
            lo,
            span: if hi > lo { hi - lo } else { 1.0 },
            identity: lo >= 0.0 && hi <= 1.0,
        }
    }

    fn apply(&self, v: f64) -> f64 {
        if self.identity {
            v
        } else {
            ((v - self.lo) / self.span).clamp(0.0, 1.0)
        }
    }
}

fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let dim: usize = ds.input_shape().iter().product();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("label");
    for i in 0..dim {
        header.push_str(&format!(",f{i}"));
    }
    writeln!(w, "{header}")?;
    for s in ds.samples() {
        let mut row = s.label.to_string();
        for v in s.x.data() {
            row.push(',');
            row.push_str(&format!("{v}"));
        }
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

fn save_raw(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DATA_MAGIC)?;
    w.write_all(&[DATA_VERSION])?;
    w.write_all(&(ds.num_classes() as u32).to_le_bytes())?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    w.write_all(&[ds.input_shape().len() as u8])?;
    for &d in ds.input_shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in ds.samples() {
        w.write_all(&(s.label as u32).to_le_bytes())?;
        w.write_all(&[s.poisoned as u8])?;
        for v in s.x.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn load_raw(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::InvalidDataset("truncated raw dataset".to_string()))?;
    if &magic != DATA_MAGIC {
        return Err(Error::InvalidDataset("not a raw dataset (bad magic)".to_string()));
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)
        .map_err(|_| Error::InvalidDataset("truncated raw dataset".to_string()))?;
    if b1[0] != DATA_VERSION {
        return Err(Error::InvalidDataset(format!("unsupported raw dataset version {}", b1[0])));
    }
    let mut u4 = [0u8; 4];
    r.read_exact(&mut u4).map_err(|_| Error::InvalidDataset("truncated raw dataset".to_string()))?;
    let classes = u32::from_le_bytes(u4) as usize;
    r.read_exact(&mut u4).map_err(|_| Error::InvalidDataset("truncated raw dataset".to_string()))?;
    let n = u32::from_le_bytes(u4) as usize;
    r.read_exact(&mut b1).map_err(|_| Error::InvalidDataset("truncated raw dataset".to_string()))?;
    let rank = b1[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u4).map_err(|_| Error::InvalidDataset("truncated raw dataset".to_string()))?;
        shape.push(u32::from_le_bytes(u4) as usize);
    }
    if let Some(c) = num_classes {
        if c != classes {
            return Err(Error::InvalidDataset(format!(
                "raw dataset declares {classes} classes, expected {c}"
            )));
        }
    }
    let dim: usize = shape.iter().product();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u4).map_err(|_| Error::InvalidDataset("truncated raw dataset".to_string()))?;
        let label = u32::from_le_bytes(u4) as usize;
        r.read_exact(&mut b1).map_err(|_| Error::InvalidDataset("truncated raw dataset".to_string()))?;
        let mut buf = vec![0u8; dim * 8];
        r.read_exact(&mut buf).map_err(|_| Error::InvalidDataset("truncated raw dataset".to_string()))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(Sample {
            x: Tensor::new(shape.clone(), data)?,
            label,
            poisoned: b1[0] != 0,
        });
    }
    Dataset::new(samples, shape, classes)
}
