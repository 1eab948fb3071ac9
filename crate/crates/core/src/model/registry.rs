//! Named plug-in registry for callable kernels and costs.
//!
//! Tabular and affine forms are the canonical serializable representations;
//! a callable form serializes as its name only and is resolved through this
//! registry when a model file is loaded.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::model::Stage;

/// Transition probability `(t, y, x, u, d) -> P(y | x, u, d)`.
pub type KernelFn = Arc<dyn Fn(Stage, usize, usize, usize, &[f64]) -> f64 + Send + Sync>;

/// Full-coupling cost `(t, x, u, D, n) -> cost`, `D` indexed `[state][action]`.
pub type CostFn = Arc<dyn Fn(Stage, usize, usize, &[Vec<f64>], usize) -> f64 + Send + Sync>;

/// State-marginal cost `(t, x, u, d, n) -> cost`.
pub type MarginalCostFn = Arc<dyn Fn(Stage, usize, usize, &[f64], usize) -> f64 + Send + Sync>;

struct Registry {
    kernels: HashMap<String, KernelFn>,
    costs: HashMap<String, CostFn>,
    marginal_costs: HashMap<String, MarginalCostFn>,
}

fn registry() -> &'static Mutex<Registry> {
    static REG: OnceLock<Mutex<Registry>> = OnceLock::new();
    REG.get_or_init(|| {
        Mutex::new(Registry {
            kernels: HashMap::new(),
            costs: HashMap::new(),
            marginal_costs: HashMap::new(),
        })
    })
}

/// Registers a callable transition kernel under `name`.
pub fn register_kernel_fn(name: &str, f: KernelFn) {
    registry().lock().unwrap().kernels.insert(name.to_string(), f);
}

/// Registers a callable full-coupling cost under `name`.
pub fn register_cost_fn(name: &str, f: CostFn) {
    registry().lock().unwrap().costs.insert(name.to_string(), f);
}

/// Registers a callable state-marginal cost under `name`.
pub fn register_marginal_cost_fn(name: &str, f: MarginalCostFn) {
    registry()
        .lock()
        .unwrap()
        .marginal_costs
        .insert(name.to_string(), f);
}

pub(crate) fn lookup_kernel(name: &str) -> Option<KernelFn> {
    registry().lock().unwrap().kernels.get(name).cloned()
}

pub(crate) fn lookup_cost(name: &str) -> Option<CostFn> {
    registry().lock().unwrap().costs.get(name).cloned()
}

pub(crate) fn lookup_marginal_cost(name: &str) -> Option<MarginalCostFn> {
    registry()
        .lock()
        .unwrap()
        .marginal_costs
        .get(name)
        .cloned()
}
