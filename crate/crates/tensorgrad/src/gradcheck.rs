use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{ParamId, ParamSet};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which errors are measured in absolute rather than relative terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub frozen: bool,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares backward gradients with central finite differences, one report
/// row per parameter. Frozen parameters are not perturbed and report 0.
///
/// `model_fn` must be deterministic: it is re-run twice per element.
pub fn grad_check<F>(params: &mut ParamSet<f64>, tolerance: f64, model_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = model_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new(p);
        let loss = model_fn(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut groups = Vec::with_capacity(params.len());
    for idx in 0..params.len() {
        let id = ParamId(idx);
        let name = params.name(id).to_string();
        let n = params.get(id).numel();
        if !params.get(id).requires_grad() {
            groups.push(GroupReport {
                name,
                elements: n,
                max_rel_error: 0.0,
                frozen: true,
                passed: true,
            });
            continue;
        }
        let grad = analytic.param_grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut worst = 0.0f64;
        for (i, &a) in grad.iter().enumerate() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a, numeric));
        }
        groups.push(GroupReport {
            name,
            elements: n,
            max_rel_error: worst,
            frozen: false,
            passed: worst <= tolerance,
        });
    }
    Ok(GradCheckReport { tolerance, groups })
}
