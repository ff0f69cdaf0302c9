use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f32`.
///
/// Every value is finite; constructors reject NaN and infinities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

#[derive(Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl TryFrom<RawTensor> for Tensor2D {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor2D::new(raw.rows, raw.cols, raw.data)
    }
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from values the caller guarantees to be finite and
    /// correctly sized. Results of arithmetic on finite inputs go through here.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Column vector (`len x 1`).
    pub fn column(values: Vec<f32>) -> Result<Self> {
        let len = values.len();
        Self::new(len, 1, values)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Elementwise map. Non-finite results are rejected.
    pub fn try_map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self::from_parts(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self::from_parts(self.rows, self.cols, data))
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|v| v * factor)
    }

    /// Adds a `rows x 1` column to every column of `self`.
    pub fn add_column(&self, col: &Self) -> Result<Self> {
        if col.cols != 1 || col.rows != self.rows {
            return Err(Error::Shape(format!(
                "broadcast add: {}x{} tensor with {}x{} column",
                self.rows, self.cols, col.rows, col.cols
            )));
        }
        let mut data = self.data.clone();
        for (r, row) in data.chunks_mut(self.cols.max(1)).enumerate().take(self.rows) {
            let b = col.data[r];
            row.iter_mut().for_each(|v| *v += b);
        }
        Ok(Self::from_parts(self.rows, self.cols, data))
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self::from_parts(self.cols, self.rows, data)
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(Error::Shape(format!(
                "row slice {start}..{end} of {} rows",
                self.rows
            )));
        }
        Ok(Self::from_parts(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        ))
    }

    /// Stacks tensors vertically (row concatenation).
    pub fn vcat(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |t| t.cols);
        if parts.iter().any(|t| t.cols != cols) {
            return Err(Error::Shape("vcat: column counts differ".into()));
        }
        let rows = parts.iter().map(|t| t.rows).sum();
        let data = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
        Ok(Self::from_parts(rows, cols, data))
    }

    /// Concatenates tensors horizontally (column concatenation), preserving order.
    pub fn hcat(parts: &[Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |t| t.rows);
        if parts.iter().any(|t| t.rows != rows) {
            return Err(Error::Shape("hcat: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|t| t.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for t in parts {
                data.extend_from_slice(t.row(r));
            }
        }
        Ok(Self::from_parts(rows, cols, data))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Mean of squared elementwise differences, accumulated in f64.
    pub fn mean_sq_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "mean_sq_diff")?;
        if self.is_empty() {
            return Ok(0.0);
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(sum / self.len() as f64)
    }
}

/// Matrix product with f64 accumulation in a fixed (row, inner-index) order.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = a.data[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += aip * bv as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Ok(Tensor2D::from_parts(m, n, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(matches!(
            Tensor2D::new(1, 2, vec![1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Tensor2D::new(1, 2, vec![f32::INFINITY, 0.0]).is_err());
        assert!(matches!(Tensor2D::new(2, 3, vec![0.0; 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = Tensor2D::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        assert_eq!(matmul(&Tensor2D::identity(2), &m).unwrap(), m);
        assert_eq!(matmul(&m, &Tensor2D::identity(2)).unwrap(), m);
        assert_eq!(matmul(&Tensor2D::zeros(2, 2), &m).unwrap(), Tensor2D::zeros(2, 2));
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor2D::column(vec![1.0, -1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[-1.0, -1.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor2D::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_and_concat() {
        let x = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor2D::column(vec![10.0, 20.0]).unwrap();
        assert_eq!(x.add_column(&b).unwrap().data(), &[11.0, 12.0, 23.0, 24.0]);
        let h = Tensor2D::hcat(&[x.clone(), b.clone()]).unwrap();
        assert_eq!(h.shape(), (2, 3));
        assert_eq!(h.row(1), &[3.0, 4.0, 20.0]);
        let v = Tensor2D::vcat(&[x.clone(), x.clone()]).unwrap();
        assert_eq!(v.slice_rows(2, 4).unwrap(), x);
        assert_eq!(x.transpose().transpose(), x);
    }

    #[test]
    fn serde_rejects_bad_payload() {
        let ok: Tensor2D = serde_json::from_str(r#"{"rows":1,"cols":2,"data":[1.0,2.0]}"#).unwrap();
        assert_eq!(ok.shape(), (1, 2));
        assert!(serde_json::from_str::<Tensor2D>(r#"{"rows":2,"cols":2,"data":[1.0]}"#).is_err());
    }
}
