//! Synthetic dataset generation, CSV ingestion, and k-shot sampling.
//!
//! The CSV layout is `f0,...,f{d-1},label` with floats printed at 17
//! significant digits so a save/load round trip is bit-exact.

use crate::error::{Error, Result};
use crate::numcore::{RandomStream, RealVector};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

/// Immutable labeled dataset with equal-length inputs.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    inputs: Vec<RealVector>,
    labels: Vec<usize>,
    num_classes: usize,
    name: String,
}

impl LabeledDataset {
    pub fn new(
        inputs: Vec<RealVector>,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::DimMismatch {
                context: "dataset inputs vs labels",
                left: inputs.len(),
                right: labels.len(),
            });
        }
        let dim = inputs[0].len();
        if inputs.iter().any(|x| x.len() != dim) {
            return Err(Error::DimMismatch {
                context: "dataset input dims",
                left: dim,
                right: 0,
            });
        }
        if num_classes == 0 {
            return Err(Error::config("data.num_classes", "must be at least 1"));
        }
        let mut seen = vec![false; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::IndexOutOfRange {
                    index: y,
                    len: num_classes,
                });
            }
            seen[y] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::config(
                "data.num_classes",
                "every class needs at least one example",
            ));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input(&self, i: usize) -> &RealVector {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn inputs(&self) -> &[RealVector] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RealVector, usize)> {
        self.inputs.iter().zip(self.labels.iter().copied())
    }
}

/// One N(0,1) draw via Box-Muller; consumes exactly two uniforms.
fn gaussian(stream: &mut RandomStream) -> f64 {
    let u1 = 1.0 - stream.next_f64(); // (0, 1]: keeps the log finite
    let u2 = stream.next_f64();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Gaussian blobs around separation-scaled standard-basis centers (a
/// simplex-like arrangement), class-major order.
pub fn gen_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    noise_sd: f64,
    stream: &mut RandomStream,
) -> Result<LabeledDataset> {
    if num_classes < 1 || per_class < 1 || dim < 1 {
        return Err(Error::config("data", "counts must be at least 1"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::config("data.separation", "must be positive"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::config("data.noise_sd", "must be non-negative"));
    }
    if dim < num_classes {
        return Err(Error::config(
            "data.dim",
            format!("need dim >= num_classes ({num_classes}) to place centers"),
        ));
    }
    let mut inputs = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        for _ in 0..per_class {
            let mut point = vec![0.0; dim];
            point[class] = separation;
            for v in point.iter_mut() {
                *v += noise_sd * gaussian(stream);
            }
            inputs.push(RealVector::from_vec(point)?);
            labels.push(class);
        }
    }
    LabeledDataset::new(inputs, labels, num_classes, "blobs")
}

/// Two interleaved unit half-circles with Gaussian noise; exactly balanced.
pub fn gen_two_moons(
    per_class: usize,
    noise_sd: f64,
    stream: &mut RandomStream,
) -> Result<LabeledDataset> {
    if per_class < 1 {
        return Err(Error::config("data.per_class", "must be at least 1"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::config("data.noise_sd", "must be non-negative"));
    }
    let mut inputs = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    let angle = |i: usize| {
        if per_class == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (per_class - 1) as f64
        }
    };
    for i in 0..per_class {
        let t = angle(i);
        let x = t.cos() + noise_sd * gaussian(stream);
        let y = t.sin() + noise_sd * gaussian(stream);
        inputs.push(RealVector::from_vec(vec![x, y])?);
        labels.push(0);
    }
    for i in 0..per_class {
        let t = angle(i);
        let x = 1.0 - t.cos() + noise_sd * gaussian(stream);
        let y = 0.5 - t.sin() + noise_sd * gaussian(stream);
        inputs.push(RealVector::from_vec(vec![x, y])?);
        labels.push(1);
    }
    LabeledDataset::new(inputs, labels, 2, "two_moons")
}

/// Exactly k examples per class, sampled without replacement, original
/// order preserved within each class.
pub fn k_shot_sample(
    dataset: &LabeledDataset,
    k: usize,
    stream: &mut RandomStream,
) -> Result<LabeledDataset> {
    if k < 1 {
        return Err(Error::config("data.k_shot", "must be at least 1"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut inputs = Vec::with_capacity(k * dataset.num_classes());
    let mut labels = Vec::with_capacity(k * dataset.num_classes());
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::config(
                "data.k_shot",
                format!(
                    "class {class} has {} examples, fewer than k = {k}",
                    members.len()
                ),
            ));
        }
        // partial Fisher-Yates over a copy, then restore original order
        let mut pool = members.clone();
        let mut chosen = Vec::with_capacity(k);
        for slot in 0..k {
            let j = slot + stream.next_below((pool.len() - slot) as u64) as usize;
            pool.swap(slot, j);
            chosen.push(pool[slot]);
        }
        chosen.sort_unstable();
        for idx in chosen {
            inputs.push(dataset.inputs[idx].clone());
            labels.push(dataset.labels[idx]);
        }
    }
    LabeledDataset::new(
        inputs,
        labels,
        dataset.num_classes(),
        format!("{}_k{}", dataset.name, k),
    )
}

/// 17-significant-digit float formatting; parses back to the same bits.
pub fn fmt_f64_exact(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write the dataset as CSV with header `f0,...,f{d-1},label`.
pub fn save_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let dim = dataset.dim();
    for i in 0..dim {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "f{i}");
    }
    out.push_str(",label\n");
    for (x, y) in dataset.iter() {
        for (i, v) in x.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&fmt_f64_exact(*v));
        }
        let _ = writeln!(out, ",{y}");
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Load a dataset CSV; malformed rows are reported with their line number.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::EmptyInput("dataset csv")),
    };
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 2 || cols[cols.len() - 1] != "label" {
        return Err(Error::Parse {
            line: 1,
            message: "header must be f0,...,f{d-1},label".into(),
        });
    }
    let dim = cols.len() - 1;
    for (i, c) in cols[..dim].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected feature column `{c}`"),
            });
        }
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut max_label = 0usize;
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        let row = line.trim_end();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", dim + 1, fields.len()),
            });
        }
        let mut point = Vec::with_capacity(dim);
        for f in &fields[..dim] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("non-numeric feature `{f}`"),
            })?;
            point.push(v);
        }
        let label: usize = fields[dim].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("non-integer label `{}`", fields[dim]),
        })?;
        max_label = max_label.max(label);
        inputs.push(RealVector::from_vec(point).map_err(|_| Error::Parse {
            line: line_no,
            message: "non-finite feature value".into(),
        })?);
        labels.push(label);
    }
    if inputs.is_empty() {
        return Err(Error::EmptyInput("dataset csv (header only)"));
    }
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    LabeledDataset::new(inputs, labels, max_label + 1, name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_zero_noise_sits_on_centers() {
        let mut s = RandomStream::new(1);
        let ds = gen_blobs(3, 4, 3, 10.0, 0.0, &mut s).unwrap();
        assert_eq!(ds.len(), 12);
        for (x, y) in ds.iter() {
            for (i, &v) in x.iter().enumerate() {
                let expect = if i == y { 10.0 } else { 0.0 };
                assert_eq!(v, expect);
            }
        }
    }

    #[test]
    fn blobs_deterministic_and_dim_checked() {
        let mut s1 = RandomStream::new(5).split_str("data");
        let mut s2 = RandomStream::new(5).split_str("data");
        let a = gen_blobs(2, 10, 2, 5.0, 0.3, &mut s1).unwrap();
        let b = gen_blobs(2, 10, 2, 5.0, 0.3, &mut s2).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.input(i), b.input(i));
        }
        assert!(gen_blobs(3, 4, 2, 5.0, 0.3, &mut s1).is_err());
    }

    #[test]
    fn moons_zero_noise_on_unit_half_circles() {
        let mut s = RandomStream::new(2);
        let ds = gen_two_moons(50, 0.0, &mut s).unwrap();
        assert_eq!(ds.len(), 100);
        let balance = ds.labels().iter().filter(|&&y| y == 0).count();
        assert_eq!(balance, 50);
        for (x, y) in ds.iter() {
            let (cx, cy) = if y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((x[0] - cx).powi(2) + (x[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12, "off-circle point {:?}", x);
        }
    }

    #[test]
    fn k_shot_stratified_and_order_preserving() {
        let mut s = RandomStream::new(3);
        let ds = gen_blobs(3, 20, 3, 5.0, 0.5, &mut s).unwrap();
        let sub = k_shot_sample(&ds, 4, &mut s).unwrap();
        assert_eq!(sub.len(), 12);
        for class in 0..3 {
            let count = sub.labels().iter().filter(|&&y| y == class).count();
            assert_eq!(count, 4);
        }
        // within-class original order: blobs are class-major so positions in
        // the subset must be increasing within each class block
        for block in 0..3 {
            let xs: Vec<f64> = (0..4).map(|i| sub.input(block * 4 + i)[0]).collect();
            let original: Vec<f64> = (0..20).map(|i| ds.input(block * 20 + i)[0]).collect();
            let mut last_pos = 0;
            for v in xs {
                let pos = original.iter().position(|&o| o == v).unwrap();
                assert!(pos >= last_pos, "order not preserved");
                last_pos = pos;
            }
        }
    }

    #[test]
    fn k_shot_full_class_is_identity_subset() {
        let mut s = RandomStream::new(4);
        let ds = gen_blobs(2, 5, 2, 5.0, 0.1, &mut s).unwrap();
        let sub = k_shot_sample(&ds, 5, &mut s).unwrap();
        assert_eq!(sub.len(), ds.len());
        for i in 0..ds.len() {
            assert_eq!(sub.input(i), ds.input(i));
        }
        assert!(k_shot_sample(&ds, 6, &mut s).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("evoprompt_dataio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        let mut s = RandomStream::new(6);
        let ds = gen_two_moons(25, 0.2, &mut s).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.num_classes(), 2);
        for i in 0..ds.len() {
            assert_eq!(back.input(i), ds.input(i), "row {i} not bit-exact");
            assert_eq!(back.label(i), ds.label(i));
        }
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = std::env::temp_dir().join("evoprompt_dataio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let header_only = dir.join("header_only.csv");
        std::fs::write(&header_only, "f0,f1,label\n").unwrap();
        assert!(matches!(
            load_csv(&header_only),
            Err(Error::EmptyInput(_))
        ));

        let missing_label = dir.join("missing_label.csv");
        std::fs::write(&missing_label, "f0,f1,label\n0.5,0.25\n").unwrap();
        match load_csv(&missing_label) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        let bad_number = dir.join("bad_number.csv");
        std::fs::write(&bad_number, "f0,label\n0.5,0\nxyz,1\n").unwrap();
        match load_csv(&bad_number) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn gaussian_moments_sane() {
        let mut s = RandomStream::new(8);
        let n = 50_000;
        let draws: Vec<f64> = (0..n).map(|_| gaussian(&mut s)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }
}
