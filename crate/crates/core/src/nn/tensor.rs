//! Row-major 2-D feature storage shared by points and voxels.

/// A dense `rows x cols` matrix of `f32` features, one row per point or voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Wraps an existing row-major buffer. Panics if the length is not
    /// `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major buffer length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates two matrices with equal row counts along the channel axis.
    pub fn hcat(a: &FeatureMatrix, b: &FeatureMatrix) -> FeatureMatrix {
        assert_eq!(a.rows, b.rows, "hcat row mismatch");
        let cols = a.cols + b.cols;
        let mut out = FeatureMatrix::zeros(a.rows, cols);
        for r in 0..a.rows {
            out.row_mut(r)[..a.cols].copy_from_slice(a.row(r));
            out.row_mut(r)[a.cols..].copy_from_slice(b.row(r));
        }
        out
    }

    /// Splits along the channel axis; inverse of [`FeatureMatrix::hcat`].
    pub fn hsplit(&self, left_cols: usize) -> (FeatureMatrix, FeatureMatrix) {
        assert!(left_cols <= self.cols);
        let mut a = FeatureMatrix::zeros(self.rows, left_cols);
        let mut b = FeatureMatrix::zeros(self.rows, self.cols - left_cols);
        for r in 0..self.rows {
            a.row_mut(r).copy_from_slice(&self.row(r)[..left_cols]);
            b.row_mut(r).copy_from_slice(&self.row(r)[left_cols..]);
        }
        (a, b)
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &FeatureMatrix) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}
