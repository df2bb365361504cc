//! JSON documents and number formatting.

use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use convmix::quadrature::BootstrapResult;
use convmix::FitResult;

pub const SCHEMA_VERSION: u32 = 1;

/// Output precision: `None` prints the shortest round-trip decimal.
#[derive(Debug, Clone, Copy)]
pub struct Digits(pub Option<usize>);

impl Digits {
    pub fn round(self, x: f64) -> f64 {
        match self.0 {
            Some(d) if x.is_finite() => format!("{:.*e}", d.max(1) - 1, x).parse().unwrap_or(x),
            _ => x,
        }
    }

    /// JSON number, or `null` when not finite.
    pub fn num(self, x: f64) -> Value {
        serde_json::Number::from_f64(self.round(x)).map_or(Value::Null, Value::Number)
    }

    pub fn text(self, x: f64) -> String {
        self.round(x).to_string()
    }

    fn vector(self, v: &DVector<f64>) -> Value {
        Value::Array(v.iter().map(|&x| self.num(x)).collect())
    }

    fn matrix(self, m: &DMatrix<f64>) -> Value {
        Value::Array(
            (0..m.nrows())
                .map(|r| Value::Array((0..m.ncols()).map(|c| self.num(m[(r, c)])).collect()))
                .collect(),
        )
    }
}

/// Fields shared by all documents. `timestamp` is the only field that
/// changes between identical runs.
pub fn envelope(command: &str, config: Value) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("schema".into(), json!(format!("convmix.{command}")));
    m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    m.insert(
        "software".into(),
        json!({"name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION")}),
    );
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    m.insert("timestamp".into(), json!(now));
    m.insert("config".into(), config);
    m
}

pub fn fit_json(f: &FitResult, digits: Digits) -> Value {
    let fixed: Vec<Value> = f
        .fixed_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            json!({
                "name": name,
                "estimate": digits.num(f.beta[k]),
                "se": f.se_beta.as_ref().map_or(Value::Null, |se| digits.num(se[k])),
            })
        })
        .collect();
    let mut out = json!({
        "kind": f.kind.to_string(),
        "method": f.method,
        "cov_structure": f.structure.to_string(),
        "residual_mode": f.residual_mode,
        "converged": f.converged,
        "iterations": f.iterations,
        "message": f.message,
        "loglik": digits.num(f.loglik),
        "loglik_nodes": f.loglik_nodes,
        "loglik_exact": f.loglik_nodes.is_none(),
        "se_method": f.se_method,
        "fixed_effects": fixed,
        "random_names": f.random_names,
        "xi": digits.vector(&f.xi),
        "sigma1": digits.matrix(&f.sigma1),
        "sigma2": digits.num(f.sigma2),
    });
    if f.sigma1.nrows() == 1 {
        out["tau2"] = digits.num(f.sigma1[(0, 0)]);
    }
    out
}

pub fn bootstrap_json(b: &BootstrapResult, digits: Digits) -> Value {
    let params: Vec<Value> = b
        .names
        .iter()
        .zip(b.se.iter())
        .map(|(name, &se)| json!({"name": name, "se": digits.num(se)}))
        .collect();
    json!({
        "replicates": b.replicates,
        "dropped": b.dropped,
        "parameters": params,
    })
}
