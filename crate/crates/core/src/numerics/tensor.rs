use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {dims:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} hold {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Panicking constructor for internal call sites where the shape is known to be right.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        Self::from_parts(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.dims);
        self.data[0]
    }

    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        Tensor::new(dims, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides for `dims`.
pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Splits `dims` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(m, k, n, a, (k, 1), b, (1, k), c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(m, k, n, a, (1, m), b, (n, 1), c);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserted lengths cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Block-wise maximum over non-overlapping `patch`×`patch` tiles of an H×W map.
pub fn max_pool_patches(x: &Tensor, patch: usize) -> Result<Tensor> {
    let [h, w] = x.dims() else {
        return Err(Error::shape(format!(
            "max_pool_patches expects a 2-d map, got {:?}",
            x.dims()
        )));
    };
    let (h, w) = (*h, *w);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "patch size {patch} does not divide {h}×{w}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = vec![f64::NEG_INFINITY; gh * gw];
    for r in 0..h {
        for c in 0..w {
            let cell = &mut out[(r / patch) * gw + c / patch];
            *cell = cell.max(x.data[r * w + c]);
        }
    }
    Ok(Tensor::from_parts(vec![gh, gw], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(axis_extents(&[2, 3, 4], 1), (2, 3, 4));
    }

    #[test]
    fn max_pool_zero_map() {
        let x = Tensor::zeros(&[4, 4]);
        assert_eq!(max_pool_patches(&x, 2).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn max_pool_single_hot() {
        let mut x = Tensor::zeros(&[4, 4]);
        x.data_mut()[4] = 1.0; // row 1, col 0
        let y = max_pool_patches(&x, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_matches_nested_loops() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[8, 8], |_| rng.random::<f64>());
        let y = max_pool_patches(&x, 4).unwrap();
        for bi in 0..2 {
            for bj in 0..2 {
                let mut m = f64::MIN;
                for r in 0..4 {
                    for c in 0..4 {
                        m = m.max(x.data()[(bi * 4 + r) * 8 + bj * 4 + c]);
                    }
                }
                assert_eq!(y.data()[bi * 2 + bj], m);
            }
        }
    }

    #[test]
    fn max_pool_rejects_non_divisible() {
        assert!(max_pool_patches(&Tensor::zeros(&[5, 4]), 2).is_err());
    }
}
