use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;
use tlrda::hyper::HyperParams;

pub const REPORT_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

/// JSON document written by every command. Maps are ordered so that the same
/// inputs give the same bytes.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub config_echo: Value,
    pub hyperparams: Option<HyperParams<f64>>,
    pub weights: BTreeMap<String, Value>,
    pub risk: BTreeMap<String, Value>,
    /// Table name to CSV file name, relative to the report.
    pub experiment_tables: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Self {
        Self {
            schema_version: REPORT_VERSION,
            command: command.to_string(),
            seed,
            config_echo: serde_json::to_value(config).unwrap_or(Value::Null),
            hyperparams: None,
            weights: BTreeMap::new(),
            risk: BTreeMap::new(),
            experiment_tables: BTreeMap::new(),
            notes: Vec::new(),
        }
    }
}

pub fn to_value(x: &impl Serialize) -> Value {
    serde_json::to_value(x).unwrap_or(Value::Null)
}
