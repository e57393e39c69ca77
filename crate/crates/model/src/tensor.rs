/// Dense row-major matrix of `f64`.
///
/// Every product computes each output row independently and sums the inner
/// dimension in ascending order, so a row's value does not depend on how many
/// other rows share the call. Step-by-step decoding and batched re-evaluation
/// rely on this to agree bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "{rows}x{cols} matrix from {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
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

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} matrix", self.rows, self.cols);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Self {
        assert_eq!(self.cols, other.rows, "matmul {:?}·{:?}", self.shape(), other.shape());
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let o = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b = &other.data[k * other.cols..(k + 1) * other.cols];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Mat) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t {:?}·{:?}ᵀ", self.shape(), other.shape());
        let mut out = Mat::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for c in 0..other.rows {
                let b = other.row(c);
                let mut s = 0.0;
                for (x, y) in a.iter().zip(b) {
                    s += x * y;
                }
                out.data[r * other.rows + c] = s;
            }
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Mat) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul {:?}ᵀ·{:?}", self.shape(), other.shape());
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
