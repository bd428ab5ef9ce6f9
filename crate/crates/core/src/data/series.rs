use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Univariate or multivariate series stored row-major as `T x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries<T> {
    pub name: String,
    values: Vec<T>,
    dims: usize,
    labels: Option<Vec<u8>>,
}

impl<T: Scalar> TimeSeries<T> {
    pub fn new(
        name: impl Into<String>,
        values: Vec<T>,
        dims: usize,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        if dims == 0 || !values.len().is_multiple_of(dims) {
            return Err(Error::invalid(format!(
                "{} values cannot form rows of {dims} dimensions",
                values.len()
            )));
        }
        let len = values.len() / dims;
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(Error::invalid(format!(
                    "{} labels for a series of length {len}",
                    l.len()
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("time series"));
        }
        Ok(Self {
            name: name.into(),
            values,
            dims,
            labels,
        })
    }

    pub fn univariate(
        name: impl Into<String>,
        values: Vec<T>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        Self::new(name, values, 1, labels)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn point(&self, t: usize) -> &[T] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn column(&self, d: usize) -> Vec<T> {
        self.values
            .iter()
            .skip(d)
            .step_by(self.dims)
            .copied()
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> TimeSeries<U> {
        TimeSeries {
            name: self.name.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            dims: self.dims,
            labels: self.labels.clone(),
        }
    }

    pub fn with_labels(mut self, labels: Option<Vec<u8>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.len() {
                return Err(Error::invalid("label length differs from series length"));
            }
        }
        self.labels = labels;
        Ok(self)
    }
}

/// Column roles for [`load_csv`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Ignored for the math; excluded from value columns.
    pub timestamp: Option<String>,
    /// Value columns in order. Empty means every column that is neither the
    /// timestamp nor the label.
    #[serde(default)]
    pub values: Vec<String>,
    pub label: Option<String>,
}

impl CsvSchema {
    pub fn new(timestamp: Option<&str>, values: &[&str], label: Option<&str>) -> Self {
        Self {
            timestamp: timestamp.map(str::to_string),
            values: values.iter().map(|s| s.to_string()).collect(),
            label: label.map(str::to_string),
        }
    }
}

pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TimeSeries<T>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Empty("csv header"));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("missing column `{name}`"),
            })
    };
    let ts_col = schema.timestamp.as_deref().map(col).transpose()?;
    let label_col = schema.label.as_deref().map(col).transpose()?;
    let value_cols: Vec<usize> = if schema.values.is_empty() {
        (0..headers.len())
            .filter(|i| Some(*i) != ts_col && Some(*i) != label_col)
            .collect()
    } else {
        schema
            .values
            .iter()
            .map(|v| col(v))
            .collect::<Result<_>>()?
    };
    if value_cols.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "no value columns".into(),
        });
    }

    let mut values = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        for &c in &value_cols {
            let field = rec
                .get(c)
                .ok_or_else(|| parse_err(format!("missing field {c}")))?
                .trim();
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("`{field}` is not finite")));
            }
            values.push(T::lit(v));
        }
        if let (Some(c), Some(labels)) = (label_col, labels.as_mut()) {
            let field = rec
                .get(c)
                .ok_or_else(|| parse_err("missing label".into()))?
                .trim();
            let l: u8 = match field {
                "0" => 0,
                "1" => 1,
                other => return Err(parse_err(format!("label `{other}` is not 0 or 1"))),
            };
            labels.push(l);
        }
    }
    if values.is_empty() {
        return Err(Error::Empty("csv rows"));
    }
    let name = path
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    TimeSeries::new(name, values, value_cols.len(), labels)
}

/// Per-dimension z-score statistics, fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit<T: Scalar>(series: &TimeSeries<T>) -> Result<Self> {
        let n = series.len();
        if n < 2 {
            return Err(Error::invalid("normalization needs at least two points"));
        }
        let mut mean = vec![0.0; series.dims()];
        let mut std = vec![0.0; series.dims()];
        for d in 0..series.dims() {
            let col: Vec<f64> = series.column(d).iter().map(|v| v.as_f64()).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            mean[d] = m;
            std[d] = var.sqrt();
            if std[d] == 0.0 {
                log::warn!(
                    "dimension {d} of `{}` has zero variance; centering only",
                    series.name
                );
            }
        }
        Ok(Self { mean, std })
    }

    fn scale(&self, d: usize) -> f64 {
        if self.std[d] > 0.0 {
            self.std[d]
        } else {
            1.0
        }
    }

    pub fn apply<T: Scalar>(&self, series: &TimeSeries<T>) -> Result<TimeSeries<T>> {
        self.check_dims(series)?;
        let dims = series.dims();
        let values = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let d = i % dims;
                T::lit((v.as_f64() - self.mean[d]) / self.scale(d))
            })
            .collect();
        TimeSeries::new(
            series.name.clone(),
            values,
            dims,
            series.labels().map(<[u8]>::to_vec),
        )
    }

    pub fn invert<T: Scalar>(&self, series: &TimeSeries<T>) -> Result<TimeSeries<T>> {
        self.check_dims(series)?;
        let dims = series.dims();
        let values = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let d = i % dims;
                T::lit(v.as_f64() * self.scale(d) + self.mean[d])
            })
            .collect();
        TimeSeries::new(
            series.name.clone(),
            values,
            dims,
            series.labels().map(<[u8]>::to_vec),
        )
    }

    fn check_dims<T: Scalar>(&self, series: &TimeSeries<T>) -> Result<()> {
        if series.dims() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                lhs: vec![self.mean.len()],
                rhs: vec![series.dims()],
            });
        }
        Ok(())
    }
}

/// Fits z-score statistics on `series` and applies them.
pub fn normalize<T: Scalar>(series: &TimeSeries<T>) -> Result<(TimeSeries<T>, NormStats)> {
    let stats = NormStats::fit(series)?;
    Ok((stats.apply(series)?, stats))
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_three_rows() {
        let f = write("t,v\n0,1.0\n1,2.0\n2,3.0\n");
        let s: TimeSeries<f64> = load_csv(f.path(), &CsvSchema::new(Some("t"), &[], None)).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.dims(), 1);
        assert_eq!(s.values(), &[1.0, 2.0, 3.0]);
        assert!(s.labels().is_none());
    }

    #[test]
    fn zero_label_column() {
        let f = write("t,v,y\n0,1.0,0\n1,2.0,0\n");
        let s: TimeSeries<f64> =
            load_csv(f.path(), &CsvSchema::new(Some("t"), &["v"], Some("y"))).unwrap();
        assert_eq!(s.labels().unwrap(), &[0, 0]);
    }

    #[test]
    fn bad_number_names_line() {
        let f = write("t,v\n0,abc\n");
        let err = load_csv::<f64>(f.path(), &CsvSchema::new(Some("t"), &[], None)).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_file_rejected() {
        let f = write("t,v\n");
        assert!(load_csv::<f64>(f.path(), &CsvSchema::default()).is_err());
        let f = write("");
        assert!(load_csv::<f64>(f.path(), &CsvSchema::default()).is_err());
    }

    #[test]
    fn z_score_population_sigma() {
        let s = TimeSeries::univariate("x", vec![0.0, 2.0], None).unwrap();
        let (n, stats) = normalize(&s).unwrap();
        assert_eq!(n.values(), &[-1.0, 1.0]);
        assert_eq!(stats.std, vec![1.0]);
    }

    #[test]
    fn constant_series_is_centered() {
        let s = TimeSeries::univariate("c", vec![3.0; 5], None).unwrap();
        let (n, stats) = normalize(&s).unwrap();
        assert!(n.values().iter().all(|&v| v == 0.0));
        assert_eq!(stats.std, vec![0.0]);
    }

    #[test]
    fn test_split_uses_train_stats() {
        let train = TimeSeries::univariate("a", vec![0.0, 2.0], None).unwrap();
        let test = TimeSeries::univariate("b", vec![10.0, 20.0], None).unwrap();
        let (_, stats) = normalize(&train).unwrap();
        let t = stats.apply(&test).unwrap();
        assert_eq!(t.values(), &[9.0, 19.0]);
    }

    #[test]
    fn normalize_then_invert_is_identity() {
        let s =
            TimeSeries::<f64>::new("m", vec![1.5, -2.0, 3.25, 7.0, -0.5, 0.125], 2, None).unwrap();
        let (n, stats) = normalize(&s).unwrap();
        let back = stats.invert(&n).unwrap();
        for (&a, &b) in back.values().iter().zip(s.values()) {
            assert!((a - b).abs() < 1e-12_f64);
        }
    }

    #[test]
    fn too_short_to_normalize() {
        let s = TimeSeries::univariate("x", vec![1.0], None).unwrap();
        assert!(normalize(&s).is_err());
    }
}
