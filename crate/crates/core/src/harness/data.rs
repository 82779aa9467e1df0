use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Train-split statistics used to put inputs in `[0, 1]` and standardize targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Normalization {
    pub fn fit(x: &Matrix, y: &[f64]) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Empty("normalization"));
        }
        let (mut x_min, mut x_max) = (Vec::new(), Vec::new());
        for d in 0..x.cols() {
            let col = x.column(d);
            x_min.push(col.iter().copied().fold(f64::INFINITY, f64::min));
            x_max.push(col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        let n = y.len() as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let var = if y.len() > 1 { y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        // A constant target keeps unit scale rather than dividing by zero.
        let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Normalization { x_min, x_max, y_mean, y_std })
    }

    /// `(x − min) / (max − min)` per dimension; constant dimensions map to 0.5.
    pub fn inputs(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, d| {
            let range = self.x_max[d] - self.x_min[d];
            if range > 0.0 {
                (x[(i, d)] - self.x_min[d]) / range
            } else {
                0.5
            }
        })
    }

    /// Maps normalized inputs back to data units.
    pub fn inputs_back(&self, u: &Matrix) -> Matrix {
        Matrix::from_fn(u.rows(), u.cols(), |i, d| self.x_min[d] + u[(i, d)] * (self.x_max[d] - self.x_min[d]))
    }

    pub fn targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_std).collect()
    }

    pub fn targets_back(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.y_std + self.y_mean).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Matrix,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    /// Set once the data have been normalized.
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Data(format!("{} input rows but {} targets", x.rows(), y.len())));
        }
        if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in dataset".into()));
        }
        let feature_names = (0..x.cols()).map(|d| format!("x{d}")).collect();
        Ok(Dataset { name: name.into(), x, y, feature_names, normalization: None })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// Writes the raw data as CSV with the target in the last column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        let mut header = self.feature_names.clone();
        header.push("y".into());
        w.write_record(&header).map_err(csv_error)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            row.push(self.y[i].to_string());
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

/// Disjoint train/test parts, both normalized with train statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

pub fn split(data: &Dataset, test_fraction: f64, rng: &mut Rng) -> Result<Split> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("test_fraction", "must lie in [0, 1)"));
    }
    let n = data.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test >= n {
        return Err(Error::Data(format!("{n} points leave nothing to train on")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let (test_idx, train_idx) = idx.split_at(n_test);
    let mut train = data.subset(train_idx);
    let mut test = data.subset(test_idx);
    let norm = Normalization::fit(&train.x, &train.y)?;
    for part in [&mut train, &mut test] {
        part.x = norm.inputs(&part.x);
        part.y = norm.targets(&part.y);
        part.normalization = Some(norm.clone());
    }
    Ok(Split { train, test, normalization: norm })
}

/// Piecewise-constant regression target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepSpec {
    pub levels: Vec<f64>,
    pub boundaries: Vec<f64>,
    pub noise: f64,
}

impl Default for StepSpec {
    fn default() -> Self {
        StepSpec { levels: vec![0.0, 1.0, 0.0, -1.0, 0.0], boundaries: vec![0.2, 0.4, 0.6, 0.8], noise: 0.05 }
    }
}

impl StepSpec {
    pub fn level_at(&self, x: f64) -> f64 {
        self.levels[self.boundaries.iter().take_while(|b| x >= **b).count()]
    }
}

pub fn gen_multistep(n: usize, spec: &StepSpec, rng: &mut Rng) -> Result<Dataset> {
    if spec.levels.len() != spec.boundaries.len() + 1 {
        return Err(Error::config("levels", "need exactly one more level than boundaries"));
    }
    let ok = spec.boundaries.windows(2).all(|w| w[0] < w[1]) && spec.boundaries.iter().all(|b| (0.0..=1.0).contains(b));
    if !ok {
        return Err(Error::config("boundaries", "must be strictly increasing within [0, 1]"));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::config("noise", "must be non-negative"));
    }
    let x: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let y = x.iter().map(|&v| spec.level_at(v) + spec.noise * rng.normal()).collect();
    Dataset::new("multistep", Matrix::column_vector(x), y)
}

/// Amplitude-modulated sinusoid sampled on an even grid over `[0, 1]`:
/// `amplitude · (1 + depth · sin(2π·envelope·t)) · sin(2π·carrier·t) + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalSpec {
    pub carrier: f64,
    pub envelope: f64,
    pub depth: f64,
    pub amplitude: f64,
    pub noise: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        SignalSpec { carrier: 4.0, envelope: 1.0, depth: 0.8, amplitude: 1.0, noise: 0.1 }
    }
}

impl SignalSpec {
    pub fn clean(&self, t: f64) -> f64 {
        use std::f64::consts::TAU;
        self.amplitude * (1.0 + self.depth * (TAU * self.envelope * t).sin()) * (TAU * self.carrier * t).sin()
    }
}

pub fn gen_modulated_signal(n: usize, spec: &SignalSpec, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("n", "need at least one point"));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::config("noise", "must be non-negative"));
    }
    let t: Vec<f64> = (0..n).map(|i| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 }).collect();
    let y = t.iter().map(|&v| spec.clean(v) + spec.noise * rng.normal()).collect();
    Dataset::new("modulated", Matrix::column_vector(t), y)
}

/// Reads a numeric CSV with one header row; the last column is the target.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_error)?;
    let header: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 2 {
        return Err(Error::Data(format!("{}: need at least one feature and a target column", path.display())));
    }
    let width = header.len();
    let mut values = Vec::new();
    let mut y = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        // Row numbers count the header as row 1.
        let row = r + 2;
        if record.len() != width {
            return Err(Error::Data(format!("row {row}: expected {width} fields, found {}", record.len())));
        }
        for (c, field) in record.iter().enumerate() {
            let field = field.trim();
            if field.is_empty() {
                return Err(Error::Data(format!("row {row}, column `{}`: missing value", header[c])));
            }
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Data(format!("row {row}, column `{}`: `{field}` is not a number", header[c])))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {row}, column `{}`: non-finite value `{field}`", header[c])));
            }
            if c + 1 == width {
                y.push(v);
            } else {
                values.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let x = Matrix::from_vec(y.len(), width - 1, values)?;
    let name = path.file_stem().map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    let mut ds = Dataset::new(name, x, y)?;
    ds.feature_names = header[..width - 1].to_vec();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn noiseless_plateau() {
        let spec = StepSpec { noise: 0.0, ..StepSpec::default() };
        assert_eq!(spec.level_at(0.1), 0.0);
        assert_eq!(spec.level_at(0.3), 1.0);
        assert_eq!(spec.level_at(0.7), -1.0);
        let d = gen_multistep(50, &spec, &mut Rng::new(1)).unwrap();
        for i in 0..50 {
            assert_eq!(d.y[i], spec.level_at(d.x[(i, 0)]));
        }
    }

    #[test]
    fn generators_repeat_per_seed() {
        let a = gen_multistep(30, &StepSpec::default(), &mut Rng::new(7)).unwrap();
        let b = gen_multistep(30, &StepSpec::default(), &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
        let s = SignalSpec { noise: 0.0, ..SignalSpec::default() };
        let c = gen_modulated_signal(40, &s, &mut Rng::new(1)).unwrap();
        let d = gen_modulated_signal(40, &s, &mut Rng::new(2)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn bad_boundaries_rejected() {
        let spec = StepSpec { boundaries: vec![0.2, 0.2, 0.6, 0.8], ..StepSpec::default() };
        assert!(gen_multistep(10, &spec, &mut Rng::new(0)).is_err());
        let spec = StepSpec { boundaries: vec![0.2, 0.4, 0.6, 1.5], ..StepSpec::default() };
        assert!(gen_multistep(10, &spec, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn plateau_occupancy_passes_chi_square() {
        let spec = StepSpec::default();
        let n = 10_000;
        let d = gen_multistep(n, &spec, &mut Rng::new(3)).unwrap();
        let mut counts = [0usize; 5];
        for i in 0..n {
            counts[spec.boundaries.iter().take_while(|b| d.x[(i, 0)] >= **b).count()] += 1;
        }
        let expected = n as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Upper 1% point of chi-square with 4 degrees of freedom.
        assert!(chi2 < 13.2767, "chi2 = {chi2}");
    }

    #[test]
    fn zero_envelope_is_pure_noise() {
        let s = SignalSpec { amplitude: 0.0, noise: 1.0, ..SignalSpec::default() };
        let d = gen_modulated_signal(2000, &s, &mut Rng::new(4)).unwrap();
        let mean = d.y.iter().sum::<f64>() / 2000.0;
        let var = d.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1999.0;
        assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.1);
    }

    #[test]
    fn default_signal_is_strongly_autocorrelated() {
        let d = gen_modulated_signal(3500, &SignalSpec::default(), &mut Rng::new(5)).unwrap();
        let n = d.len() as f64;
        let mean = d.y.iter().sum::<f64>() / n;
        let c0: f64 = d.y.iter().map(|v| (v - mean).powi(2)).sum();
        let c1: f64 = d.y.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        assert!(c1 / c0 > 0.9, "lag-1 autocorrelation {}", c1 / c0);
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_two_rows() {
        let f = write("a,target\n1.5,2\n3,4.25\n");
        let d = load_csv(f.path()).unwrap();
        assert_eq!((d.len(), d.dims()), (2, 1));
        assert_eq!(d.y, vec![2.0, 4.25]);
        assert_eq!(d.feature_names, vec!["a"]);
    }

    #[test]
    fn csv_errors_name_row_and_column() {
        let err = load_csv(write("a,b,y\n1,2,3\n1,NaN,3\n").path()).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("`b`"), "{err}");
        let err = load_csv(write("a,y\n1,\n").path()).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("missing"), "{err}");
        let err = load_csv(write("a,y\n1,abc\n").path()).unwrap_err().to_string();
        assert!(err.contains("not a number"), "{err}");
        assert!(load_csv(write("a,y\n").path()).is_err());
        assert!(load_csv(write("").path()).is_err());
    }

    #[test]
    fn constant_feature_maps_to_half() {
        let f = write("a,b,y\n1,5,0\n2,5,1\n3,5,2\n4,5,3\n5,5,4\n");
        let d = load_csv(f.path()).unwrap();
        let s = split(&d, 0.4, &mut Rng::new(0)).unwrap();
        assert!(s.train.x.column(1).iter().chain(s.test.x.column(1).iter()).all(|v| *v == 0.5));
    }

    #[test]
    fn split_is_disjoint_and_reproducible() {
        let d = gen_multistep(100, &StepSpec::default(), &mut Rng::new(0)).unwrap();
        let a = split(&d, 0.4, &mut Rng::new(9)).unwrap();
        let b = split(&d, 0.4, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.test.len()), (60, 40));
        let train: Vec<u64> = a.train.x.column(0).iter().map(|v| v.to_bits()).collect();
        assert!(a.test.x.column(0).iter().all(|v| !train.contains(&v.to_bits())));
        let xs = a.train.x.column(0);
        assert_eq!(xs.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(xs.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        let m = a.train.y.iter().sum::<f64>() / 60.0;
        assert!(m.abs() < 1e-12);
    }
}
