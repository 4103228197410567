//! Dense vector helpers shared by every stage.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ‖a‖`, or `None` when the norm is below `min_norm`.
pub fn normalized(a: &[f64], min_norm: f64) -> Option<Vec<f64>> {
    let n = norm(a);
    if !(n >= min_norm) || !n.is_finite() {
        return None;
    }
    Some(a.iter().map(|x| x / n).collect())
}

/// `out = m · x` for a row-major `rows × x.len()` matrix.
pub fn matvec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    debug_assert_eq!(m.len(), rows * cols);
    m.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
