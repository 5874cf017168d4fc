use crate::error::Result;
use crate::scalar::Scalar;

use super::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Absolute floor of the relative-error denominator.
    pub floor: f64,
    /// Floor of the denominator as a fraction of the largest numeric
    /// gradient component. Components far below the gradient's own scale
    /// are dominated by rounding in single precision and are compared
    /// against this fraction of the scale instead of their own size.
    pub scale_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-3, floor: 1e-8, scale_floor: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// max over checked elements of
    /// |analytic − numeric| / max(|analytic|, |numeric|, floor, scale_floor·scale)
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    /// Largest |numeric| over checked elements.
    pub scale: f64,
    /// Elements whose difference stencil crosses a kink (relu or abs at 0,
    /// a max-pool tie, a change of selected hard keypoints) and so carries
    /// no derivative information.
    pub excluded: Vec<usize>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients of `f` at `x` against central differences
/// of the same function.
pub fn finite_diff_check<'a, T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Graph<'a, T>, Var) -> Result<Var>,
{
    finite_diff_check_with(f, x, GradCheckOptions { step, ..Default::default() })
}

pub fn finite_diff_check_with<'a, T, F>(f: F, x: &Tensor<T>, opts: GradCheckOptions) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Graph<'a, T>, Var) -> Result<Var>,
{
    let analytic = reverse_mode(&f, x)?;
    compare(&analytic, x, opts, |xp: &Tensor<T>| evaluate(&f, xp.clone()))
}

/// Checks the `f32` reverse-mode gradient of `lo` against central
/// differences of `hi`, the same function evaluated in `f64`.
///
/// In single precision the rounding error of a difference quotient,
/// roughly `eps·|f|/step`, is of the same order as the tolerance one wants
/// to verify, so the reference side is taken in double precision at exactly
/// the same (f32-representable) points.
pub fn finite_diff_check_mixed<'a, 'b, F, G>(
    lo: F,
    hi: G,
    x: &Tensor<f32>,
    opts: GradCheckOptions,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'a, f32>, Var) -> Result<Var>,
    G: Fn(&mut Graph<'b, f64>, Var) -> Result<Var>,
{
    let analytic = reverse_mode(&lo, x)?;
    let x64: Tensor<f64> = x.cast();
    compare(&analytic, &x64, opts, |xp: &Tensor<f64>| evaluate(&hi, xp.clone()))
}

fn reverse_mode<'a, T, F>(f: &F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<'a, T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    Ok(grads.wrt(&g, xv))
}

/// Value and smooth-piece fingerprint.
fn evaluate<'a, T, F>(f: &F, x: Tensor<T>) -> Result<(f64, u64)>
where
    T: Scalar,
    F: Fn(&mut Graph<'a, T>, Var) -> Result<Var>,
{
    let mut g = Graph::tracking_pieces();
    let xv = g.leaf(x, false);
    let out = f(&mut g, xv)?;
    Ok((g.value(out).item().to_f64_lossy(), g.piece().unwrap_or(0)))
}

fn compare<A: Scalar, T: Scalar>(
    analytic: &Tensor<A>,
    x: &Tensor<T>,
    opts: GradCheckOptions,
    eval: impl Fn(&Tensor<T>) -> Result<(f64, u64)>,
) -> Result<GradCheck> {
    let (_, piece0) = eval(x)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        scale: 0.0,
        excluded: Vec::new(),
    };
    let mut pairs = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let base = x.data()[i];
        // f at base + k·step for k = -2, -1, 1, 2, with the representable
        // offsets actually taken
        let mut same_piece = true;
        let mut at = |k: f64| -> Result<(f64, f64)> {
            let moved = base + T::from_f64_lossy(k * opts.step);
            probe.data_mut()[i] = moved;
            let (v, piece) = eval(&probe)?;
            probe.data_mut()[i] = base;
            same_piece &= piece == piece0;
            Ok(((moved - base).to_f64_lossy(), v))
        };
        let (hm2, fm2) = at(-2.0)?;
        let (hm1, fm1) = at(-1.0)?;
        let (hp1, fp1) = at(1.0)?;
        let (hp2, fp2) = at(2.0)?;
        if !same_piece {
            report.excluded.push(i);
            continue;
        }
        let c1 = (fp1 - fm1) / (hp1 - hm1);
        let c2 = (fp2 - fm2) / (hp2 - hm2);
        // Richardson extrapolation of the two central quotients
        // (the five-point stencil)
        pairs.push((i, analytic.data()[i].to_f64_lossy(), (4.0 * c1 - c2) / 3.0));
    }
    report.checked = pairs.len();
    report.scale = pairs.iter().map(|p| p.2.abs()).fold(0.0, f64::max);
    let floor = opts.floor.max(opts.scale_floor * report.scale);
    for (i, a, numeric) in pairs {
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if report.worst_index.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let x = Tensor::<f64>::from_fn(&[7], |i| i as f64 * 0.3 - 1.0);
        let w = Tensor::<f64>::from_fn(&[7], |i| 1.0 + i as f64);
        let r = finite_diff_check(
            |g, xv| {
                let wv = g.constant(w.clone());
                let m = g.mul(xv, wv)?;
                Ok(g.sum(m))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert!(r.excluded.is_empty());
    }

    #[test]
    fn sigmoid_abs_away_from_zero() {
        let x = Tensor::<f32>::new(&[4], vec![-1.5, -0.4, 0.7, 2.0]).unwrap();
        let r = finite_diff_check(
            |g, xv| {
                let a = g.abs(xv);
                let s = g.sigmoid(a);
                Ok(g.sum(s))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn abs_kink_element_excluded() {
        let x = Tensor::<f64>::new(&[3], vec![-1.0, 0.0, 0.5]).unwrap();
        let r = finite_diff_check(
            |g, xv| {
                let a = g.abs(xv);
                let s = g.sigmoid(a);
                Ok(g.sum(s))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(r.excluded, vec![1]);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-6);
    }
}
