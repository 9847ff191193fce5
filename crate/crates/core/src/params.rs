//! Named parameter tensors.
//!
//! Models and their gradients share one struct type; everything that needs
//! to walk all tensors generically (optimizer, checkpoints, gradient checks)
//! goes through [`Parameters::visit`] in declaration order.

use ndarray::{Array1, Array2};

/// Callback receiving `(name, shape, values)` of one tensor.
pub type Visitor<'a> = dyn FnMut(&str, &[usize], &[f64]) + 'a;
pub type VisitorMut<'a> = dyn FnMut(&str, &[usize], &mut [f64]) + 'a;

pub trait Parameters {
    fn visit(&self, f: &mut Visitor);
    fn visit_mut(&mut self, f: &mut VisitorMut);

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// Overwrite every value from a flat buffer in visit order.
    fn load_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_mut(&mut |_, _, d| {
            d.copy_from_slice(&flat[at..at + d.len()]);
            at += d.len();
        });
        assert_eq!(at, flat.len(), "flat buffer length mismatch");
    }

    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut at = 0;
        self.visit_mut(&mut |_, _, d| {
            for (x, y) in d.iter_mut().zip(&flat[at..]) {
                *x += scale * y;
            }
            at += d.len();
        });
    }

    fn scale(&mut self, s: f64) {
        self.visit_mut(&mut |_, _, d| d.iter_mut().for_each(|x| *x *= s));
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, _, d| d.fill(value));
    }

    /// Name of the first tensor holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.visit(&mut |name, _, d| {
            if bad.is_none() && d.iter().any(|x| !x.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        bad
    }

    fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        self.visit(&mut |_, _, d| d.iter().for_each(|x| m = m.max(x.abs())));
        m
    }
}

pub(crate) fn visit_matrix(name: &str, a: &Array2<f64>, f: &mut Visitor) {
    f(name, a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit_matrix_mut(
    name: &str,
    a: &mut Array2<f64>,
    f: &mut VisitorMut,
) {
    let shape = a.shape().to_vec();
    f(name, &shape, a.as_slice_mut().expect("standard layout"));
}

pub(crate) fn visit_vector(name: &str, a: &Array1<f64>, f: &mut Visitor) {
    f(name, a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit_vector_mut(
    name: &str,
    a: &mut Array1<f64>,
    f: &mut VisitorMut,
) {
    let shape = a.shape().to_vec();
    f(name, &shape, a.as_slice_mut().expect("standard layout"));
}

/// Forward `visit` of a nested struct with a name prefix.
pub(crate) fn visit_nested<P: Parameters + ?Sized>(
    prefix: &str,
    p: &P,
    f: &mut Visitor,
) {
    p.visit(&mut |n, s, d| f(&format!("{prefix}.{n}"), s, d));
}

pub(crate) fn visit_nested_mut<P: Parameters + ?Sized>(
    prefix: &str,
    p: &mut P,
    f: &mut VisitorMut,
) {
    p.visit_mut(&mut |n, s, d| f(&format!("{prefix}.{n}"), s, d));
}

/// Gradient of `loss` with respect to every parameter by central differences.
///
/// Test and diagnostics helper; the closure must be a pure function of the
/// parameters it is handed.
pub fn finite_difference<P, F>(params: &P, step: f64, mut loss: F) -> Vec<f64>
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    let base = params.flatten();
    let mut probe = params.clone();
    let mut grad = vec![0.0; base.len()];
    let mut buf = base.clone();
    for i in 0..base.len() {
        buf[i] = base[i] + step;
        probe.load_flat(&buf);
        let plus = loss(&probe);
        buf[i] = base[i] - step;
        probe.load_flat(&buf);
        let minus = loss(&probe);
        buf[i] = base[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest relative disagreement between two gradients, ignoring entries
/// where both sides are below `floor` in absolute difference.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff = (a - n).abs();
            if diff <= floor {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}
