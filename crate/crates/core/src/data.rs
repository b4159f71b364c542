//! Right-censored datasets: CSV ingestion, normalization, the two-group
//! synthetic benchmark and k-fold splits.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{RngStream, SampleError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("row {row}: event flag `{value}` is not 0/1")]
    BadEvent { row: usize, value: String },
    #[error("row {row}: observed time {time} must be positive and finite")]
    BadTime { row: usize, time: f64 },
    #[error("row {row}: expected {expected} covariates, got {got}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("no usable rows")]
    Empty,
    #[error("cannot split {n} observations into {k} folds")]
    Folds { n: usize, k: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    feature_names: Vec<String>,
    covariates: Vec<Vec<f64>>,
    times: Vec<f64>,
    events: Vec<bool>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        covariates: Vec<Vec<f64>>,
        times: Vec<f64>,
        events: Vec<bool>,
    ) -> Result<Self, DataError> {
        let n = times.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        if covariates.len() != n || events.len() != n {
            return Err(DataError::Ragged { row: 0, expected: n, got: covariates.len().min(events.len()) });
        }
        let p = feature_names.len();
        for (row, x) in covariates.iter().enumerate() {
            if x.len() != p {
                return Err(DataError::Ragged { row, expected: p, got: x.len() });
            }
        }
        for (row, &time) in times.iter().enumerate() {
            if !(time > 0.0) || !time.is_finite() {
                return Err(DataError::BadTime { row, time });
            }
        }
        Ok(Self { feature_names, covariates, times, events })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&d| d).count()
    }

    pub fn censoring_rate(&self) -> f64 {
        1.0 - self.n_events() as f64 / self.len() as f64
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn max_time(&self) -> f64 {
        self.times.iter().copied().fold(0.0, f64::max)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            covariates: indices.iter().map(|&i| self.covariates[i].clone()).collect(),
            times: indices.iter().map(|&i| self.times[i]).collect(),
            events: indices.iter().map(|&i| self.events[i]).collect(),
        }
    }

    /// Writes `time,event,<features...>` with a header row.
    pub fn write_csv(&self, writer: impl Write) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["time".to_string(), "event".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![format!("{}", self.times[i]), (self.events[i] as u8).to_string()];
            rec.extend(self.covariates[i].iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Which columns hold covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Features {
    /// Every column other than time and event, in file order.
    Rest,
    Named(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub time_col: String,
    pub event_col: String,
    pub features: Features,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { time_col: "time".into(), event_col: "event".into(), features: Features::Rest }
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim().to_ascii_lowercase().as_str(), "" | "na" | "nan" | "null" | "none")
}

/// Reads a dataset in original units. Rows with any missing cell are dropped.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset, DataError> {
    read_csv(std::fs::File::open(path)?, schema)
}

pub fn read_csv(reader: impl Read, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.to_string()));
    let time_idx = find(&schema.time_col)?;
    let event_idx = find(&schema.event_col)?;
    let feature_idx: Vec<usize> = match &schema.features {
        Features::Rest => (0..header.len()).filter(|&c| c != time_idx && c != event_idx).collect(),
        Features::Named(names) => names.iter().map(|n| find(n)).collect::<Result<_, _>>()?,
    };
    let names = feature_idx.iter().map(|&c| header[c].clone()).collect();

    let mut covariates = Vec::new();
    let mut times = Vec::new();
    let mut events = Vec::new();
    let mut dropped = 0usize;
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let cells: Vec<&str> = std::iter::once(time_idx).chain([event_idx]).chain(feature_idx.iter().copied()).map(|c| rec.get(c).unwrap_or("")).collect();
        if cells.iter().any(|c| is_missing(c)) {
            dropped += 1;
            continue;
        }
        let parse = |c: usize, cell: &str| -> Result<f64, DataError> {
            cell.parse::<f64>().map_err(|_| DataError::NotNumeric { row, column: header[c].clone(), value: cell.to_string() })
        };
        let time = parse(time_idx, cells[0])?;
        if !(time > 0.0) || !time.is_finite() {
            return Err(DataError::BadTime { row, time });
        }
        let event = match cells[1] {
            "1" | "1.0" | "true" | "TRUE" | "True" => true,
            "0" | "0.0" | "false" | "FALSE" | "False" => false,
            other => return Err(DataError::BadEvent { row, value: other.to_string() }),
        };
        let x = feature_idx.iter().zip(&cells[2..]).map(|(&c, cell)| parse(c, cell)).collect::<Result<Vec<_>, _>>()?;
        covariates.push(x);
        times.push(time);
        events.push(event);
    }
    if dropped > 0 {
        log::info!("dropped {dropped} rows with missing values");
    }
    Dataset::new(names, covariates, times, events)
}

/// Time scaling and covariate standardization fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub t_max: f64,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Normalization {
    /// Times divided by the largest observed time; covariates centred and
    /// scaled by the population standard deviation (1 for constant columns).
    pub fn fit(data: &Dataset) -> Self {
        let n = data.len() as f64;
        let p = data.n_features();
        let mut means = vec![0.0; p];
        for x in &data.covariates {
            for (m, v) in means.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut sds = vec![0.0; p];
        for x in &data.covariates {
            for ((s, v), m) in sds.iter_mut().zip(x).zip(&means) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut sds {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        Self { t_max: data.max_time(), means, sds }
    }

    pub fn time(&self, t: f64) -> f64 {
        t / self.t_max
    }

    pub fn original_time(&self, t: f64) -> f64 {
        t * self.t_max
    }

    pub fn covariates(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.means).zip(&self.sds).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        Dataset {
            feature_names: data.feature_names.clone(),
            covariates: data.covariates.iter().map(|x| self.covariates(x)).collect(),
            times: data.times.iter().map(|&t| self.time(t)).collect(),
            events: data.events.clone(),
        }
    }
}

/// Parameters of the two-group log-normal benchmark with exponential censoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    /// Log-scale (mean, sd) of event times in group 0.
    pub group0: (f64, f64),
    /// Log-scale (mean, sd) of event times in group 1.
    pub group1: (f64, f64),
    pub censor_rate: f64,
    pub n_noise: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { group0: (3.0, 0.8), group1: (3.5, 1.0), censor_rate: 0.025, n_noise: 3 }
    }
}

/// One synthetic subject before censoring is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSubject {
    pub group: bool,
    pub event_time: f64,
    pub censor_time: f64,
    pub noise: Vec<f64>,
}

pub fn draw_subject(spec: &SyntheticSpec, rng: &mut RngStream) -> Result<LatentSubject, DataError> {
    let group = rng.coin();
    let (mu, sigma) = if group { spec.group1 } else { spec.group0 };
    let event_time = rng.lognormal(mu, sigma)?;
    let censor_time = rng.exponential(spec.censor_rate)?;
    let noise = (0..spec.n_noise).map(|_| rng.standard_normal()).collect();
    Ok(LatentSubject { group, event_time, censor_time, noise })
}

/// `n` subjects with covariates `[group, noise_1, ..., noise_k]`, in original units.
pub fn gen_synthetic_with(n: usize, spec: &SyntheticSpec, rng: &mut RngStream) -> Result<Dataset, DataError> {
    let mut names = vec!["group".to_string()];
    names.extend((1..=spec.n_noise).map(|k| format!("noise{k}")));
    let mut covariates = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        let s = draw_subject(spec, rng)?;
        let mut x = vec![if s.group { 1.0 } else { 0.0 }];
        x.extend(s.noise);
        covariates.push(x);
        times.push(s.event_time.min(s.censor_time));
        events.push(s.event_time <= s.censor_time);
    }
    Dataset::new(names, covariates, times, events)
}

pub fn gen_synthetic(n: usize, rng: &mut RngStream) -> Result<Dataset, DataError> {
    gen_synthetic_with(n, &SyntheticSpec::default(), rng)
}

/// Shuffled `k`-fold partition of `0..n` as (train, test) index pairs.
pub fn kfold(n: usize, k: usize, rng: &mut RngStream) -> Result<Vec<(Vec<usize>, Vec<usize>)>, DataError> {
    if k < 2 || n < k {
        return Err(DataError::Folds { n, k });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.index(i + 1);
        idx.swap(i, j);
    }
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        let test: Vec<usize> = idx[start..start + size].to_vec();
        let train: Vec<usize> = idx[..start].iter().chain(&idx[start + size..]).copied().collect();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let text = "time,event,a,b\n1.5,1,0.1,2\n2.0,0,-3,4.5\n0.25,1,7,8\n";
        let d = read_csv(text.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(d.times(), &[1.5, 2.0, 0.25]);
        assert_eq!(d.events(), &[true, false, true]);
        assert_eq!(d.covariates(), &[vec![0.1, 2.0], vec![-3.0, 4.5], vec![7.0, 8.0]]);
        let mut out = Vec::new();
        d.write_csv(&mut out).unwrap();
        let back = read_csv(out.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn missing_rows_dropped() {
        let text = "time,event,a\n1,1,0.5\n2,0,NaN\n3,1,1.5\n4,0,2.5\n";
        assert_eq!(read_csv(text.as_bytes(), &CsvSchema::default()).unwrap().len(), 3);
        let text = "time,event,a\n1,1,\n2,NA,1\n3,1,1.5\n";
        assert_eq!(read_csv(text.as_bytes(), &CsvSchema::default()).unwrap().len(), 1);
    }

    #[test]
    fn named_features_and_errors() {
        let text = "id,t,d,x,y\n9,1,1,2,3\n";
        let schema = CsvSchema { time_col: "t".into(), event_col: "d".into(), features: Features::Named(vec!["y".into()]) };
        let d = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(d.covariates(), &[vec![3.0]]);
        assert!(matches!(read_csv(text.as_bytes(), &CsvSchema::default()), Err(DataError::MissingColumn(_))));
        let bad = "time,event,a\n1,1,abc\n";
        assert!(matches!(read_csv(bad.as_bytes(), &CsvSchema::default()), Err(DataError::NotNumeric { .. })));
        let zero = "time,event,a\n0,1,1\n";
        assert!(matches!(read_csv(zero.as_bytes(), &CsvSchema::default()), Err(DataError::BadTime { .. })));
        let ev = "time,event,a\n1,2,1\n";
        assert!(matches!(read_csv(ev.as_bytes(), &CsvSchema::default()), Err(DataError::BadEvent { .. })));
        let empty = "time,event,a\n1,1,NA\n";
        assert!(matches!(read_csv(empty.as_bytes(), &CsvSchema::default()), Err(DataError::Empty)));
    }

    #[test]
    fn standardization() {
        let mut rng = RngStream::new(1);
        let d = gen_synthetic(500, &mut rng).unwrap();
        let norm = Normalization::fit(&d);
        let z = norm.apply(&d);
        for j in 0..z.n_features() {
            let col: Vec<f64> = z.covariates().iter().map(|x| x[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
        assert!(z.times().iter().all(|&t| t > 0.0 && t <= 1.0));
        assert_eq!(z.max_time(), 1.0);
        for (&t, &tz) in d.times().iter().zip(z.times()) {
            assert!((norm.original_time(tz) - t).abs() <= 1e-12 * t);
        }
        let constant = Dataset::new(vec!["c".into()], vec![vec![2.0]; 3], vec![1.0, 2.0, 3.0], vec![true; 3]).unwrap();
        let nc = Normalization::fit(&constant);
        assert_eq!(nc.sds, vec![1.0]);
        assert_eq!(nc.covariates(&[2.0]), vec![0.0]);
    }

    #[test]
    fn synthetic_shape_and_group_median() {
        let mut rng = RngStream::new(7);
        let d = gen_synthetic(10, &mut rng).unwrap();
        assert_eq!(d.n_features(), 4);
        let spec = SyntheticSpec::default();
        let mut t0: Vec<f64> = Vec::new();
        while t0.len() < 100_000 {
            let s = draw_subject(&spec, &mut rng).unwrap();
            if !s.group {
                t0.push(s.event_time);
            }
        }
        t0.sort_by(f64::total_cmp);
        assert!((t0[50_000] / 3f64.exp() - 1.0).abs() < 0.02);
    }

    #[test]
    fn synthetic_censoring_rate() {
        // The generating law implies P(C < T) ≈ 0.4988 (numerical integral of
        // ½ Σ_g ∫ (1 − e^{−0.025 t}) f_g(t) dt).
        let mut rng = RngStream::new(8);
        let d = gen_synthetic(100_000, &mut rng).unwrap();
        assert!((d.censoring_rate() - 0.4988).abs() < 0.01, "{}", d.censoring_rate());
    }

    #[test]
    fn group_swap_matches_other_law() {
        // Observed times for group 1 against an independent draw from the
        // group-1 law with censoring applied: KS must not separate them.
        let spec = SyntheticSpec::default();
        let mut rng = RngStream::new(9);
        let mut a = Vec::new();
        while a.len() < 10_000 {
            let s = draw_subject(&spec, &mut rng).unwrap();
            if s.group {
                a.push(s.event_time.min(s.censor_time));
            }
        }
        let swapped = SyntheticSpec { group0: spec.group1, group1: spec.group0, ..spec };
        let mut b = Vec::new();
        while b.len() < 10_000 {
            let s = draw_subject(&swapped, &mut rng).unwrap();
            if !s.group {
                b.push(s.event_time.min(s.censor_time));
            }
        }
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        // Two-sample critical value at level 0.001: 1.95·√(2/n).
        assert!(d < 1.95 * (2.0 / 10_000.0f64).sqrt(), "D = {d}");
    }

    #[test]
    fn folds() {
        let mut rng = RngStream::new(3);
        let f = kfold(125, 5, &mut rng).unwrap();
        assert!(f.iter().all(|(tr, te)| te.len() == 25 && tr.len() == 100));
        let mut all: Vec<usize> = f.iter().flat_map(|(_, te)| te.clone()).collect();
        all.sort();
        assert_eq!(all, (0..125).collect::<Vec<_>>());
        let g = kfold(125, 5, &mut RngStream::new(3)).unwrap();
        assert_eq!(f, g);
        let h = kfold(12, 5, &mut rng).unwrap();
        let sizes: Vec<usize> = h.iter().map(|(_, te)| te.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(kfold(3, 5, &mut rng).is_err());
        assert!(kfold(3, 1, &mut rng).is_err());
    }

    #[test]
    fn subset_keeps_rows() {
        let mut rng = RngStream::new(4);
        let d = gen_synthetic(20, &mut rng).unwrap();
        let s = d.subset(&[3, 7]);
        assert_eq!(s.times(), &[d.times()[3], d.times()[7]]);
        assert_eq!(s.covariates()[1], d.covariates()[7]);
    }
}
