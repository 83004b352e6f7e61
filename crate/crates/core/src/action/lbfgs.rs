use std::cell::RefCell;
use std::rc::Rc;

use argmin::core::{CostFunction, Error, Executor, Gradient, State, TerminationReason, TerminationStatus};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;

#[derive(Clone, Debug)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when the Euclidean norm of the gradient falls below this.
    pub gtol: f64,
    /// Stop when the change of f between iterations falls below this.
    pub ftol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { memory: 10, max_iter: 500, gtol: 1e-10, ftol: 1e-13 }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsReport {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize f with argmin's L-BFGS and a More-Thuente line search. `f`
/// writes the gradient into its second argument and returns the value.
/// On a solver error the best point evaluated so far is kept.
pub fn minimize<F>(f: F, x: &mut [f64], opts: &LbfgsOptions) -> LbfgsReport
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let best = Rc::new(RefCell::new(None));
    let problem = Fused { f: RefCell::new(f), last: RefCell::new(None), best: Rc::clone(&best) };
    let solver = match LBFGS::new(MoreThuenteLineSearch::new(), opts.memory.max(1))
        .with_tolerance_grad(opts.gtol)
        .and_then(|s| s.with_tolerance_cost(opts.ftol))
    {
        Ok(s) => s,
        Err(_) => return LbfgsReport { value: f64::NAN, iterations: 0, converged: false },
    };
    let start = x.to_vec();
    let run = Executor::new(problem, solver).configure(|st| st.param(start).max_iters(opts.max_iter as u64)).run();
    match run {
        Ok(res) => {
            let st = res.state();
            let converged = matches!(st.get_termination_status(), TerminationStatus::Terminated(TerminationReason::SolverConverged));
            if let Some(p) = st.get_best_param() {
                x.copy_from_slice(p);
            }
            LbfgsReport { value: st.get_best_cost(), iterations: st.get_iter() as usize, converged }
        }
        Err(_) => {
            let best = best.borrow();
            match &*best {
                Some((bx, v)) => {
                    x.copy_from_slice(bx);
                    LbfgsReport { value: *v, iterations: 0, converged: false }
                }
                None => LbfgsReport { value: f64::NAN, iterations: 0, converged: false },
            }
        }
    }
}

// argmin asks for cost and gradient separately; one call of `f` serves both.
struct Fused<F> {
    f: RefCell<F>,
    last: RefCell<Option<(Vec<f64>, f64, Vec<f64>)>>,
    best: Rc<RefCell<Option<(Vec<f64>, f64)>>>,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Fused<F> {
    fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        if let Some((lx, v, g)) = &*self.last.borrow() {
            if lx.as_slice() == x {
                return (*v, g.clone());
            }
        }
        let mut g = vec![0.0; x.len()];
        let v = (self.f.borrow_mut())(x, &mut g);
        if v.is_finite() && self.best.borrow().as_ref().is_none_or(|b| v < b.1) {
            *self.best.borrow_mut() = Some((x.to_vec(), v));
        }
        *self.last.borrow_mut() = Some((x.to_vec(), v, g.clone()));
        (v, g)
    }
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> CostFunction for Fused<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> Result<f64, Error> {
        Ok(self.eval(x).0)
    }
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Gradient for Fused<F> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, x: &Vec<f64>) -> Result<Vec<f64>, Error> {
        Ok(self.eval(x).1)
    }
}
