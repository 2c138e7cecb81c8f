//! Dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Thin SVD `(U, s, V)` computed by faer; nalgebra's bidiagonal SVD can
/// return factors whose product is off by far more than rounding.
fn svd_thin(m: &Mat) -> (Mat, Vec<f64>, Mat) {
    let f = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    match f.thin_svd() {
        Ok(svd) => {
            let (u, v, s) = (svd.U(), svd.V(), svd.S().column_vector());
            let k = s.nrows();
            (
                Mat::from_fn(m.nrows(), k, |i, j| u[(i, j)]),
                (0..k).map(|i| s[i]).collect(),
                Mat::from_fn(m.ncols(), k, |i, j| v[(i, j)]),
            )
        }
        // Non-convergence only happens on non-finite input.
        Err(_) => {
            let k = m.nrows().min(m.ncols());
            (Mat::zeros(m.nrows(), k), vec![f64::NAN; k], Mat::zeros(m.ncols(), k))
        }
    }
}

fn singular_values(m: &Mat) -> Vec<f64> {
    let f = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    f.singular_values()
        .unwrap_or_else(|_| vec![f64::NAN; m.nrows().min(m.ncols())])
}

/// Largest singular value; zero for empty matrices.
pub fn norm2(m: &Mat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    singular_values(m).into_iter().fold(0.0, f64::max)
}

/// Moore-Penrose pseudoinverse with singular values below `rtol * s_max` discarded.
pub fn pinv(m: &Mat, rtol: f64) -> Mat {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Mat::zeros(m.ncols(), m.nrows());
    }
    let (u, s, v) = svd_thin(m);
    let smax = s.iter().copied().fold(0.0, f64::max);
    let cut = rtol * smax;
    let mut out = Mat::zeros(m.ncols(), m.nrows());
    for (k, &sk) in s.iter().enumerate() {
        if sk > cut && sk > 0.0 {
            out += (v.column(k) / sk) * u.column(k).transpose();
        }
    }
    out
}

/// Numerical rank with threshold `rtol * s_max`.
pub fn rank(m: &Mat, rtol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let s = singular_values(m);
    let cut = rtol * s.iter().copied().fold(0.0, f64::max);
    s.iter().filter(|&&v| v > cut && v > 0.0).count()
}

/// 2-norm condition number; infinite when rank deficient.
pub fn cond(m: &Mat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 1.0;
    }
    let s = singular_values(m);
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(0.0, f64::max);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves `m x = rhs` for unit lower-triangular `m` by forward substitution.
/// Entries on and above the diagonal of `m` are not read.
pub fn solve_unit_lower(m: &Mat, rhs: &Mat) -> Mat {
    let n = m.nrows();
    let mut x = rhs.clone();
    for i in 0..n {
        for j in 0..i {
            let lij = m[(i, j)];
            if lij != 0.0 {
                for c in 0..x.ncols() {
                    let v = x[(j, c)];
                    x[(i, c)] -= lij * v;
                }
            }
        }
    }
    x
}

/// Block-diagonal matrix from a list of blocks.
pub fn block_diag(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Max absolute entry; zero for empty input.
pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |a, &v| a.max(v.abs()))
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Largest magnitude among blocks strictly above the block diagonal, for a
/// matrix partitioned into `rb`-row and `cb`-column blocks.
pub fn upper_block_magnitude(m: &Mat, rb: usize, cb: usize) -> f64 {
    let mut worst = 0.0_f64;
    if rb == 0 || cb == 0 {
        return worst;
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j / cb > i / rb {
                worst = worst.max(m[(i, j)].abs());
            }
        }
    }
    worst
}

/// Zeroes every block strictly above the block diagonal; returns the Frobenius
/// norm of what was removed.
pub fn zero_upper_blocks(m: &mut Mat, rb: usize, cb: usize) -> f64 {
    let mut removed = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j / cb > i / rb {
                removed += m[(i, j)] * m[(i, j)];
                m[(i, j)] = 0.0;
            }
        }
    }
    removed.sqrt()
}

/// Row-major nested-array serde for dense matrices.
pub mod serde_mat {
    use super::Mat;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat, String> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err("ragged matrix rows".into());
        }
        Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub mod vec {
        use super::super::Mat;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(super::to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Mat>, D::Error> {
            let raw = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            raw.iter()
                .map(|r| super::from_rows(r).map_err(serde::de::Error::custom))
                .collect()
        }
    }
}

/// Plain-array serde for dense vectors.
pub mod serde_vec {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }

    pub mod opt {
        use super::Vector;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<Vector>, s: S) -> Result<S::Ok, S::Error> {
            v.as_ref().map(|v| v.as_slice().to_vec()).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vector>, D::Error> {
            Ok(Option::<Vec<f64>>::deserialize(d)?.map(Vector::from_vec))
        }
    }

    pub mod list {
        use super::Vector;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(v: &[Vector], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(|x| x.as_slice().to_vec()).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector>, D::Error> {
            Ok(Vec::<Vec<f64>>::deserialize(d)?
                .into_iter()
                .map(Vector::from_vec)
                .collect())
        }
    }
}
