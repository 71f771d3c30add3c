//! Central finite differences against autodiff gradients.
//!
//! A difference is only meaningful where the loss is smooth on `[θ−h, θ+h]`.
//! When a perturbation flips the sign of any rectifier input on the tape,
//! the step crossed a kink; that element is left out of the comparison and
//! counted in [`ParamCheck::kinks`].

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore, Session};

/// Per-parameter comparison of analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`; zero when both
    /// gradients vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
    /// Elements skipped because a perturbation crossed a rectifier kink.
    pub kinks: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    /// Skipped elements over all parameters.
    pub fn kinks(&self) -> usize {
        self.params.iter().map(|p| p.kinks).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Checks every element of every parameter in `store` (optionally only the
/// named subset) by perturbing it by `±h` and re-running `loss_fn`.
pub fn check_gradients<F>(store: &mut ParamStore<f64>, h: f64, only: Option<&[ParamId]>, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Session<f64>) -> Result<Var>,
{
    let (analytic, base) = {
        let mut s = Session::new(store, Graph::new());
        let loss = loss_fn(&mut s)?;
        let base = rectifier_pattern(&s);
        s.backward(loss)?;
        (s.param_grads(), base)
    };
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut eval = |store: &ParamStore<f64>| -> Result<(f64, bool)> {
        let mut s = Session::new(store, Graph::no_grad());
        let loss = loss_fn(&mut s)?;
        Ok((s.value(loss).data()[0], rectifier_pattern(&s) == base))
    };
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).numel();
        let mut grad_a = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map_or_else(|| vec![0.0; n], |(_, g)| g.clone());
        let mut grad_n = vec![0.0; n];
        let mut kinks = 0;
        for j in 0..n {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let (plus, smooth_plus) = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - h;
            let (minus, smooth_minus) = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            if smooth_plus && smooth_minus {
                grad_n[j] = (plus - minus) / (2.0 * h);
            } else {
                grad_a[j] = 0.0;
                kinks += 1;
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = grad_a.iter().zip(&grad_n).map(|(a, b)| a - b).collect();
        let scale = norm(&grad_a).max(norm(&grad_n));
        let rel_error = if scale < 1e-12 { norm(&diff) } else { norm(&diff) / scale };
        out.push(ParamCheck {
            name: store.name(id).to_string(),
            numel: n,
            rel_error,
            analytic_norm: norm(&grad_a),
            kinks,
        });
    }
    Ok(GradCheckReport { params: out })
}

/// Which rectifier outputs are positive, in tape order.
fn rectifier_pattern(g: &Graph<f64>) -> Vec<bool> {
    g.vars()
        .filter(|&v| g.op_name(v) == "relu")
        .flat_map(|v| g.value(v).data().iter().map(|&x| x > 0.0).collect::<Vec<_>>())
        .collect()
}
