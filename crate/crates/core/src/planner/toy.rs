//! Analytic linear point-mass system used as a planner test harness: known
//! dynamics stand in for the learned model, so planner behavior can be
//! checked against brute-force and closed-form optima.

use ndarray::prelude::*;

use crate::error::{Error, Result};

use super::LatentSystem;

/// `z' = A z + B a`, cost = mean squared distance of `z_T` to a goal point.
pub struct PointMass {
    pub a_mat: Array2<f64>,
    pub b_mat: Array2<f64>,
    pub z0: Array1<f64>,
    pub goal: Array1<f64>,
    pub horizon: usize,
    pub bound: f64,
}

impl PointMass {
    /// Classic double integrator in 2-D: state [x, y, vx, vy], actions are
    /// accelerations with damping 0.8.
    pub fn double_integrator(horizon: usize, bound: f64) -> Self {
        let mut a_mat = Array2::eye(4);
        a_mat[[0, 2]] = 1.0;
        a_mat[[1, 3]] = 1.0;
        a_mat[[2, 2]] = 0.8;
        a_mat[[3, 3]] = 0.8;
        let mut b_mat = Array2::zeros((4, 2));
        b_mat[[2, 0]] = 1.0;
        b_mat[[3, 1]] = 1.0;
        PointMass {
            a_mat,
            b_mat,
            z0: Array1::zeros(4),
            goal: Array1::zeros(4),
            horizon,
            bound,
        }
    }

    pub fn rollout_final(&self, actions: &ArrayView2<'_, f64>) -> Array1<f64> {
        let mut z = self.z0.clone();
        for t in 0..self.horizon {
            z = self.a_mat.dot(&z) + self.b_mat.dot(&actions.row(t));
        }
        z
    }

    pub fn final_cost(&self, actions: &ArrayView2<'_, f64>) -> f64 {
        let z = self.rollout_final(actions);
        let d = &z - &self.goal;
        d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64
    }

    /// Set the goal to the final state reached under `actions` (feasible by
    /// construction).
    pub fn set_reachable_goal(&mut self, actions: &ArrayView2<'_, f64>) {
        self.goal = self.rollout_final(actions);
    }
}

impl LatentSystem for PointMass {
    fn eff_action_dim(&self) -> usize {
        self.b_mat.ncols()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn action_bound(&self) -> f64 {
        self.bound
    }

    fn batch_final_costs(&self, actions: &Array3<f64>) -> Result<Vec<f64>> {
        Ok((0..actions.shape()[0])
            .map(|i| self.final_cost(&actions.slice(s![i, .., ..])))
            .collect())
    }

    fn cost_and_grad(&self, actions: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        if actions.nrows() != self.horizon || actions.ncols() != self.b_mat.ncols() {
            return Err(Error::ShapeMismatch("action sequence shape".into()));
        }
        let d = self.z0.len() as f64;
        let z_final = self.rollout_final(&actions.view());
        let resid = &z_final - &self.goal;
        let cost = resid.iter().map(|v| v * v).sum::<f64>() / d;
        // dC/da_t = (2/D) B^T (A^{T-1-t})^T resid
        let mut grad = Array2::<f64>::zeros(actions.raw_dim());
        let mut back = resid.clone(); // (A^{T-1-t})^T resid accumulated backwards
        for t in (0..self.horizon).rev() {
            let g = self.b_mat.t().dot(&back) * (2.0 / d);
            grad.row_mut(t).assign(&g);
            back = self.a_mat.t().dot(&back);
        }
        Ok((cost, grad))
    }
}
