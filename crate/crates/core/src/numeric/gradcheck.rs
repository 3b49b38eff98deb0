//! Central-difference verification of tape gradients.

use std::fmt;

use crate::error::Result;
use crate::numeric::{Graph, ParamId, ParamStore, Rng, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates beyond this count are subsampled.
    pub max_coords: usize,
    pub seed: u64,
    /// Test hook: multiplies the analytic gradient before comparing.
    pub corrupt_factor: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-4,
            max_coords: 5_000,
            seed: 0,
            corrupt_factor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub total: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "status\t{}", if self.passed() { "pass" } else { "fail" })?;
        writeln!(f, "checked\t{}/{}", self.checked, self.total)?;
        writeln!(f, "failures\t{}", self.failures)?;
        writeln!(f, "tolerance\t{:e}", self.tol)?;
        writeln!(f, "max_rel_error\t{:e}", self.max_rel_error)?;
        if let Some(w) = &self.worst {
            writeln!(
                f,
                "worst\t{}[{}]\tanalytic={:e}\tnumeric={:e}",
                w.param, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares the tape gradient of `loss_fn` against central differences
/// `(f(θ+ε) − f(θ−ε)) / (θ₊ − θ₋)` for every coordinate of `params`
/// (or a seeded subset of `max_coords`). The divisor is the step actually
/// realized after rounding θ±ε to `f32`.
///
/// `loss_fn` records the loss on a fresh graph and must be deterministic.
/// Gradients in `store` are reset before the analytic pass and left holding
/// the analytic gradient afterwards.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    opts: &GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    store.zero_grad();
    let mut graph = Graph::new();
    let loss = loss_fn(store, &mut graph)?;
    graph.backward(loss, store)?;
    drop(graph);

    let mut coords: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|&id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect();
    let total = coords.len();
    if total > opts.max_coords {
        let mut rng = Rng::stream(opts.seed, "gradcheck", 0);
        let mut picked = rng.sample_indices(total, opts.max_coords);
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let mut eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(s, &mut g)?;
        Ok(g.scalar(l))
    };

    let mut report = GradCheckReport {
        checked: coords.len(),
        total,
        failures: 0,
        max_rel_error: 0.0,
        worst: None,
        tol: opts.tol,
    };
    for (id, i) in coords {
        let original = store.get(id).values[i];
        let analytic = f64::from(store.get(id).grad[i]) * opts.corrupt_factor.unwrap_or(1.0);
        let plus = (f64::from(original) + opts.eps) as f32;
        let minus = (f64::from(original) - opts.eps) as f32;
        store.get_mut(id).values[i] = plus;
        let f_plus = eval(store);
        store.get_mut(id).values[i] = minus;
        let f_minus = eval(store);
        store.get_mut(id).values[i] = original;
        let numeric = (f_plus? - f_minus?) / (f64::from(plus) - f64::from(minus));
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel_error = (analytic - numeric).abs() / denom;
        if !(rel_error <= opts.tol) {
            report.failures += 1;
        }
        if !(rel_error <= report.max_rel_error) || report.worst.is_none() {
            report.max_rel_error = rel_error;
            report.worst = Some(Coordinate {
                param: store.get(id).name().to_string(),
                index: i,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::ParamTensor;

    fn quadratic_store() -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .insert(ParamTensor::from_values("w", &[4], vec![0.3, -1.2, 2.0, 0.05]).unwrap())
            .unwrap();
        (s, id)
    }

    fn quadratic(s: &ParamStore, g: &mut Graph) -> Result<Var> {
        let w = g.param(s, s.id("w").unwrap());
        let sq = g.mul(w, w);
        Ok(g.sum(sq))
    }

    #[test]
    fn quadratic_passes_tightly() {
        let (mut s, id) = quadratic_store();
        let report = finite_diff_check(&mut s, &[id], &GradCheckOptions::default(), quadratic).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error < 1e-6, "{report}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (mut s, id) = quadratic_store();
        let opts = GradCheckOptions {
            corrupt_factor: Some(1.1),
            ..Default::default()
        };
        let report = finite_diff_check(&mut s, &[id], &opts, quadratic).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error > 0.05);
    }

    #[test]
    fn subsamples_large_parameter_sets() {
        let mut s = ParamStore::new();
        let id = s.insert_filled("w", &[60, 100], 0.5).unwrap();
        let opts = GradCheckOptions {
            max_coords: 50,
            ..Default::default()
        };
        let report = finite_diff_check(&mut s, &[id], &opts, |s, g| {
            let w = g.param(s, s.id("w").unwrap());
            Ok(g.sum(w))
        })
        .unwrap();
        assert_eq!(report.total, 6000);
        assert_eq!(report.checked, 50);
        assert!(report.passed());
    }
}
