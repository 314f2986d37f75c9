//! Central finite-difference verification of analytic gradients.

use ndarray::Array3;

use super::params::Params;

/// Relative errors below this magnitude of both gradients are measured
/// against the floor instead, so round-off on vanishing entries does not
/// dominate.
pub const RELATIVE_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

impl GradCheck {
    fn new() -> Self {
        Self { checked: 0, max_rel_error: 0.0, worst: String::new() }
    }

    fn record(&mut self, name: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", name());
        }
    }

    pub fn merge(mut self, other: GradCheck) -> Self {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self
    }

    pub fn assert_below(&self, tol: f64) {
        assert!(self.checked > 0, "no gradient entries checked");
        assert!(
            self.max_rel_error < tol,
            "max relative error {:e} ≥ {tol:e} at {}",
            self.max_rel_error,
            self.worst
        );
    }

    /// Checks the gradient of `loss` with respect to an input map.
    pub fn input(
        x: &Array3<f64>,
        analytic: &Array3<f64>,
        h: f64,
        loss: impl Fn(&Array3<f64>) -> f64,
    ) -> Self {
        let mut report = Self::new();
        for (idx, &a) in analytic.indexed_iter() {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let numeric = (loss(&xp) - loss(&xm)) / (2.0 * h);
            report.record(|| format!("input{idx:?}"), a, numeric);
        }
        report
    }
}

/// Perturbs every entry of every tensor of `params` by ±`h` and compares the
/// central difference of `loss` with the matching entry of `grad`.
pub fn check_gradients<P, L>(params: &P, grad: &P, h: f64, loss: L) -> GradCheck
where
    P: Params<f64> + Clone,
    L: Fn(&P) -> f64,
{
    check_gradients_filtered(params, grad, h, loss, |_| true)
}

/// As [`check_gradients`], restricted to tensors whose name passes `keep`.
pub fn check_gradients_filtered<P, L, K>(params: &P, grad: &P, h: f64, loss: L, keep: K) -> GradCheck
where
    P: Params<f64> + Clone,
    L: Fn(&P) -> f64,
    K: Fn(&str) -> bool,
{
    let mut report = GradCheck::new();
    let names: Vec<(String, usize)> = params
        .named_tensors("")
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let grads: Vec<Vec<f64>> = grad
        .named_tensors("")
        .into_iter()
        .map(|(_, t)| t.iter().copied().collect())
        .collect();
    let mut work = params.clone();
    for (ti, (name, len)) in names.iter().enumerate() {
        if !keep(name) {
            continue;
        }
        for j in 0..*len {
            let original = nth(&mut work, ti, j, None);
            nth(&mut work, ti, j, Some(original + h));
            let up = loss(&work);
            nth(&mut work, ti, j, Some(original - h));
            let down = loss(&work);
            nth(&mut work, ti, j, Some(original));
            let numeric = (up - down) / (2.0 * h);
            report.record(|| format!("{name}[{j}]"), grads[ti][j], numeric);
        }
    }
    report
}

fn nth<P: Params<f64>>(p: &mut P, tensor: usize, index: usize, set: Option<f64>) -> f64 {
    let mut tensors = p.tensors_mut();
    let slot = tensors[tensor].iter_mut().nth(index).expect("index in range");
    let old = *slot;
    if let Some(v) = set {
        *slot = v;
    }
    old
}
