//! Shared fixtures for the benchmarks.

use gplift_core::gp::{Dataset, GpModel, KernelParams};
use gplift_core::{AgentInput, CoupledState, CoupledSystem, PayloadState, ScenarioConfig};
use nalgebra::{DVector, Vector3};

/// Default two-agent plant in the rigid hover layout with a small twist.
pub fn plant() -> (CoupledSystem, CoupledState) {
    let sys = ScenarioConfig::default().build_system().expect("default plant");
    let mut p = PayloadState::at_rest(Vector3::new(0.0, 0.0, 1.0));
    p.v = Vector3::new(0.2, -0.1, 0.05);
    p.omega = Vector3::new(0.1, -0.2, 0.3);
    let z = sys.rigid_layout(&p).expect("rigid layout");
    (sys, z)
}

/// Thrust sharing the total weight, with small torques.
pub fn hover_inputs(sys: &CoupledSystem) -> Vec<AgentInput> {
    let share = sys.payload.mass / sys.agents.len() as f64;
    sys.agents
        .iter()
        .map(|a| AgentInput {
            thrust: (a.total_mass() + share) * 9.81,
            torque: Vector3::new(0.01, -0.01, 0.0),
            joint_torque: DVector::from_element(a.n_joints(), 0.01),
        })
        .collect()
}

/// Deterministic `n`-sample, `dim`-input, single-output model.
pub fn gp_model(n: usize, dim: usize) -> (GpModel, Vec<f64>) {
    let mut data = Dataset::new(dim, 1);
    for i in 0..n {
        let x: Vec<f64> = (0..dim).map(|d| ((i * (d + 3)) as f64 * 0.37).sin()).collect();
        let y = x.iter().map(|v| v.sin()).sum::<f64>();
        data.push(x, vec![y]).expect("sample");
    }
    let params = vec![KernelParams::isotropic(dim, 1.0, 0.8, 1e-4)];
    let query = (0..dim).map(|d| 0.1 * d as f64).collect();
    (GpModel::fit(&data, params).expect("fit"), query)
}
