use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Tape gradients against central finite differences, per parameter tensor.
///
/// The relative error of a tensor is `max_i |a_i − n_i| / max(‖a‖∞, ‖n‖∞, 1e-8)`,
/// i.e. the worst entry measured against the gradient's own scale.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.iter().all(|e| *e <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<F>(f: &F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Checks `f`'s tape gradient w.r.t. each tensor in `params`.
///
/// `f` must build a scalar on the given tape from leaf vars holding `params`
/// and be deterministic.
pub fn grad_check<F>(f: F, params: &[Tensor], tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).expect("grad_check: function must return a scalar");
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut numeric = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let mut fd = Tensor::zeros(p.shape());
        for i in 0..p.len() {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + FD_STEP;
            let up = eval(&f, &work);
            work[pi].data_mut()[i] = orig - FD_STEP;
            let down = eval(&f, &work);
            work[pi].data_mut()[i] = orig;
            fd.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
        }
        numeric.push(fd);
    }

    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let scale = a.max_abs().max(n.max_abs()).max(1e-8);
            a.data()
                .iter()
                .zip(n.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
                / scale
        })
        .collect();

    GradCheckReport {
        max_rel_err,
        analytic,
        numeric,
        tolerance,
    }
}
