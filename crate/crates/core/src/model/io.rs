//! Model file ingestion and serialization.
//!
//! Files are JSON with a fixed field order so that byte-level hashing of a
//! saved model is reproducible:
//! `{schema_version, states, actions, n, horizon, kernel, cost, initial_dist}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ActionSpace, CostSpec, GameSpec, Horizon, StateSpace, TransitionKernel,
};

/// Schema identifier written to and expected in model files.
pub const SCHEMA_VERSION: &str = "popgame.model.v1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: String,
    states: StateSpace,
    actions: ActionSpace,
    n: usize,
    horizon: Horizon,
    kernel: TransitionKernel,
    cost: CostSpec,
    initial_dist: Vec<f64>,
}

/// Serializes a spec to the canonical JSON text.
pub fn save_string(spec: &GameSpec) -> Result<String> {
    let file = ModelFile {
        schema_version: SCHEMA_VERSION.to_string(),
        states: spec.states.clone(),
        actions: spec.actions.clone(),
        n: spec.n,
        horizon: spec.horizon,
        kernel: spec.kernel.clone(),
        cost: spec.cost.clone(),
        initial_dist: spec.initial_dist.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Writes the canonical JSON model file.
pub fn save(spec: &GameSpec, path: &Path) -> Result<()> {
    let text = save_string(spec)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses a model from JSON text and validates it.
pub fn load_str(text: &str) -> Result<GameSpec> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::ModelFormat {
        path: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>")
        .to_string();
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found,
            expected: SCHEMA_VERSION.to_string(),
        });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::ModelFormat {
        path: "<model>".to_string(),
        message: e.to_string(),
    })?;
    let spec = GameSpec {
        states: file.states,
        actions: file.actions,
        n: file.n,
        horizon: file.horizon,
        kernel: file.kernel,
        cost: file.cost,
        initial_dist: file.initial_dist,
    };
    spec.checked()
}

/// Reads and validates a model file.
pub fn load(path: &Path) -> Result<GameSpec> {
    let text = std::fs::read_to_string(path)?;
    load_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_example1;

    #[test]
    fn example1_roundtrip_is_identity() {
        let spec = build_example1();
        let text = save_string(&spec).unwrap();
        let back = load_str(&text).unwrap();
        assert_eq!(spec, back);
        // Bit-exact: a second save emits identical bytes.
        assert_eq!(text, save_string(&back).unwrap());
    }

    #[test]
    fn unknown_schema_rejected() {
        let spec = build_example1();
        let text = save_string(&spec)
            .unwrap()
            .replace(SCHEMA_VERSION, "popgame.model.v999");
        match load_str(&text) {
            Err(Error::SchemaVersion { found, .. }) => assert_eq!(found, "popgame.model.v999"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_rejected() {
        let spec = build_example1();
        let mut value: serde_json::Value =
            serde_json::from_str(&save_string(&spec).unwrap()).unwrap();
        value.as_object_mut().unwrap().remove("initial_dist");
        let text = serde_json::to_string(&value).unwrap();
        assert!(matches!(load_str(&text), Err(Error::ModelFormat { .. })));
    }

    #[test]
    fn zero_horizon_file_rejected() {
        let mut spec = build_example1();
        spec.horizon = Horizon::Finite { t: 1 };
        let text = save_string(&spec).unwrap().replace("\"t\": 1", "\"t\": 0");
        assert!(matches!(load_str(&text), Err(Error::InvalidModel(_))));
    }
}
