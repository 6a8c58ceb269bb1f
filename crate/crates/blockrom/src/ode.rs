//! Classical fixed-step fourth-order Runge-Kutta integration shared by the
//! full-order and reduced-order models.

use nalgebra::{DMatrix, DVector};

/// States grow without bound past this magnitude; treated as blow-up.
pub(crate) const BLOW_UP_LIMIT: f64 = 1e10;

pub(crate) struct Rk4Output {
    /// Columns 0..valid hold the trajectory; column 0 is the initial state.
    pub states: DMatrix<f64>,
    /// Step index at which the state left the finite/bounded region, if any.
    pub blow_up: Option<usize>,
}

/// Integrate `dq/dt = rhs(q)` for `cols - 1` steps of size `dt`, sampling
/// every state. Stops early when a state goes non-finite or exceeds the
/// blow-up limit; the returned matrix is truncated to the valid prefix.
pub(crate) fn rk4_sample<F>(mut rhs: F, q0: &DVector<f64>, dt: f64, cols: usize) -> Rk4Output
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>),
{
    let n = q0.len();
    let mut states = DMatrix::zeros(n, cols);
    states.column_mut(0).copy_from(q0);

    let mut q = q0.clone();
    let mut k1 = DVector::zeros(n);
    let mut k2 = DVector::zeros(n);
    let mut k3 = DVector::zeros(n);
    let mut k4 = DVector::zeros(n);
    let mut stage = DVector::zeros(n);

    for step in 1..cols {
        rhs(&q, &mut k1);
        stage.copy_from(&q);
        stage.axpy(0.5 * dt, &k1, 1.0);
        rhs(&stage, &mut k2);
        stage.copy_from(&q);
        stage.axpy(0.5 * dt, &k2, 1.0);
        rhs(&stage, &mut k3);
        stage.copy_from(&q);
        stage.axpy(dt, &k3, 1.0);
        rhs(&stage, &mut k4);

        for i in 0..n {
            q[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }

        if q.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_LIMIT) {
            return Rk4Output {
                states: states.columns(0, step).into_owned(),
                blow_up: Some(step),
            };
        }
        states.column_mut(step).copy_from(&q);
    }

    Rk4Output { states, blow_up: None }
}
