use core::fmt;

use super::TensorError;

pub const MAX_RANK: usize = 4;

/// Extents of a dense row-major array: rank 1 to 4, every extent at least 1.
/// Scalars are rank-1 with a single element.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; MAX_RANK],
    rank: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > MAX_RANK || dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape { dims: dims.to_vec() });
        }
        let mut out = [1; MAX_RANK];
        out[..dims.len()].copy_from_slice(dims);
        Ok(Self { dims: out, rank: dims.len() })
    }

    pub const fn scalar() -> Self {
        Self { dims: [1; MAX_RANK], rank: 1 }
    }

    pub fn vector(len: usize) -> Result<Self, TensorError> {
        Self::new(&[len])
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank]
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    #[inline]
    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Extent of the leading axis.
    #[inline]
    pub fn leading(&self) -> usize {
        self.dims[0]
    }

    /// Elements per index of the leading axis.
    #[inline]
    pub fn inner(&self) -> usize {
        self.numel() / self.dims[0]
    }

    /// Same shape with the leading extent replaced.
    pub fn with_leading(&self, lead: usize) -> Result<Self, TensorError> {
        let mut d = self.dims;
        d[0] = lead;
        Self::new(&d[..self.rank])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims().iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}
