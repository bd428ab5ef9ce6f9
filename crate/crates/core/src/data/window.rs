use crate::data::series::TimeSeries;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Sliding-window view of a series, materialized as `[N, w, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet<T> {
    windows: Tensor<T>,
    starts: Vec<usize>,
    stride: usize,
    width: usize,
    /// Window is anomalous iff any covered point is labeled; evaluation only.
    labels: Option<Vec<u8>>,
}

impl<T: Scalar> WindowSet<T> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn dims(&self) -> usize {
        self.windows.shape()[2]
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.windows
    }

    /// Flattened `w * D` values of window `i`.
    pub fn window(&self, i: usize) -> &[T] {
        let n = self.width * self.dims();
        &self.windows.data()[i * n..(i + 1) * n]
    }

    /// Gathers windows into a `[B, w, D]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let n = self.width * self.dims();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "window index {i} out of range {}",
                    self.len()
                )));
            }
            data.extend_from_slice(self.window(i));
        }
        Tensor::new(&[indices.len(), self.width, self.dims()], data)
    }

    /// New window set holding only the listed windows.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            windows: self.batch(indices)?,
            starts: indices.iter().map(|&i| self.starts[i]).collect(),
            stride: self.stride,
            width: self.width,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        })
    }
}

pub fn make_windows<T: Scalar>(
    series: &TimeSeries<T>,
    width: usize,
    stride: usize,
) -> Result<WindowSet<T>> {
    let len = series.len();
    if width == 0 || stride == 0 {
        return Err(Error::invalid("window width and stride must be positive"));
    }
    if width > len {
        return Err(Error::invalid(format!(
            "window width {width} exceeds series length {len}"
        )));
    }
    let n = (len - width) / stride + 1;
    let dims = series.dims();
    let starts: Vec<usize> = (0..n).map(|i| i * stride).collect();
    let mut data = Vec::with_capacity(n * width * dims);
    for &s in &starts {
        data.extend_from_slice(&series.values()[s * dims..(s + width) * dims]);
    }
    let labels = series.labels().map(|l| {
        starts
            .iter()
            .map(|&s| u8::from(l[s..s + width].contains(&1)))
            .collect()
    });
    Ok(WindowSet {
        windows: Tensor::new(&[n, width, dims], data)?,
        starts,
        stride,
        width,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ramp(n: usize) -> TimeSeries<f64> {
        TimeSeries::univariate("r", (0..n).map(|i| i as f64).collect(), None).unwrap()
    }

    #[test]
    fn count_formula() {
        let w = make_windows(&ramp(5), 3, 1).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.starts(), &[0, 1, 2]);
        assert_eq!(make_windows(&ramp(5), 5, 1).unwrap().len(), 1);
        assert!(make_windows(&ramp(4), 5, 1).is_err());
    }

    #[test]
    fn any_point_labeling() {
        let s = TimeSeries::univariate("l", vec![0.0; 6], Some(vec![0, 0, 0, 1, 0, 0])).unwrap();
        let w = make_windows(&s, 3, 1).unwrap();
        assert_eq!(w.labels().unwrap(), &[0, 1, 1, 1]);
    }

    proptest! {
        #[test]
        fn windows_match_source(len in 2usize..60, width in 1usize..20, stride in 1usize..5, dims in 1usize..3) {
            prop_assume!(width <= len);
            let values: Vec<f64> = (0..len * dims).map(|i| (i as f64).sin()).collect();
            let s = TimeSeries::new("p", values, dims, None).unwrap();
            let w = make_windows(&s, width, stride).unwrap();
            prop_assert_eq!(w.len(), (len - width) / stride + 1);
            for i in 0..w.len() {
                let st = w.starts()[i];
                prop_assert_eq!(w.window(i), &s.values()[st * dims..(st + width) * dims]);
            }
        }
    }
}
