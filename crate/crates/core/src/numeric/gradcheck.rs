//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamKind, ParamStore, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to round-off do not produce spurious failures.
    pub abs_floor: f64,
    /// Check at most this many coordinates per parameter tensor (sampled
    /// without replacement). `None` checks every coordinate.
    pub max_per_param: Option<usize>,
    /// A coordinate that fails at `step` is retried this many times, each
    /// with a step ten times smaller, and keeps its best agreement. A step
    /// that straddles a ReLU kink gives a wrong difference quotient, while a
    /// wrong backward rule disagrees at every step.
    pub kink_retries: u32,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn with_tol(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            max_per_param: None,
            kink_retries: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares the gradients produced by [`Graph::backward`] against central
/// differences for every trainable parameter of `store`.
///
/// `loss_fn` must build a scalar loss from the parameters; it is called once
/// for the analytic pass and twice per checked coordinate.
pub fn grad_check<F>(
    store: &mut ParamStore,
    loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, store)?;
    check_finite(graph.value(loss).data()[0], "analytic loss")?;
    let grads = graph.backward(loss)?;
    store.zero_grads();
    grads.write_to(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, s)?;
        let v = g.value(l).data()[0];
        check_finite(v, "perturbed loss")?;
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_err: 0.0,
        coords_checked: 0,
        passed: true,
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = store.value(id).len();
        let analytic = match &store.get(id).grad {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = match cfg.max_per_param {
            Some(k) if k < n => {
                let mut v = index::sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut pc = ParamCheck {
            name: store.get(id).name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
        };
        for &i in &coords {
            let a = analytic[i];
            let mut err = f64::INFINITY;
            let mut step = cfg.step;
            for _ in 0..=cfg.kink_retries {
                let orig = store.value(id).data()[i];
                store.value_mut(id).data_mut()[i] = orig + step;
                let plus = eval(store);
                store.value_mut(id).data_mut()[i] = orig - step;
                let minus = eval(store);
                store.value_mut(id).data_mut()[i] = orig;
                let numeric = (plus? - minus?) / (2.0 * step);
                let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
                err = err.min((a - numeric).abs() / denom);
                if err < cfg.rel_tol {
                    break;
                }
                step /= 10.0;
            }
            if err > pc.max_rel_err {
                pc.max_rel_err = err;
                pc.worst_index = i;
            }
        }
        report.coords_checked += pc.checked;
        report.max_rel_err = report.max_rel_err.max(pc.max_rel_err);
        report.params.push(pc);
    }
    report.passed = report.max_rel_err < cfg.rel_tol;
    Ok(report)
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
