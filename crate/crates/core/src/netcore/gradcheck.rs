//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Entries checked per parameter tensor; `None` checks all of them.
    pub max_points_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_points_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Points whose ±step evaluations cross a relu, pooling or clamp boundary.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked() > 0 && self.max_rel_err() < tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a − n| / max(|a|, |n|, 1e−8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backward-pass gradients of `loss_fn` against central differences
/// for every parameter in `store`.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let evaluate = |s: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new(s);
        let loss = loss_fn(&mut g)?;
        g.check_finite()?;
        Ok((g.scalar(loss), g.kink_signature()))
    };

    let (analytic, base_sig) = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.check_finite()?;
        (g.backward(loss)?, g.kink_signature())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for (id, param) in store.iter() {
        let n = param.value.len();
        let points: Vec<usize> = match cfg.max_points_per_param {
            Some(k) if k < n => {
                let mut p = sample(&mut rng, n, k).into_vec();
                p.sort_unstable();
                p
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: param.name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in points {
            let original = param.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = original + cfg.step;
            let (plus, sig_plus) = evaluate(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = original - cfg.step;
            let (minus, sig_minus) = evaluate(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = original;
            if sig_plus != base_sig || sig_minus != base_sig {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            check.checked += 1;
            if err >= check.max_rel_err {
                check.max_rel_err = err;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
