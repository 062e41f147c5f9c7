//! Graph JSON and result JSON.
//!
//! ```json
//! {"variables": [{"id": "a", "dim": 1, "prior": {"eta": [0], "lambda": [[1]]}}],
//!  "factors":   [{"id": "f", "type": "offset1d", "neighbors": ["a"], "d": 2, "sigma": 1}]}
//! ```

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{GbpError, Result};
use crate::factor_graph::{FactorGraph, GraphConfig, VarId};
use crate::factors::{matrix_from_rows, matrix_to_rows, FactorParams};
use crate::gaussian::{GaussianCanonical, GaussianMoments};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorJson {
    pub eta: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableJson {
    pub id: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorJson>,
    /// Initial estimate, used to linearize nonlinear factors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorJson {
    pub id: String,
    pub neighbors: Vec<String>,
    #[serde(flatten)]
    pub params: FactorParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub variables: Vec<VariableJson>,
    pub factors: Vec<FactorJson>,
}

impl GraphJson {
    pub fn from_graph(g: &FactorGraph) -> Result<Self> {
        let variables = g
            .variables()
            .map(|(_, v)| VariableJson {
                id: v.name().to_string(),
                dim: v.dim(),
                prior: v.prior().map(|p| PriorJson {
                    eta: p.info.iter().copied().collect(),
                    lambda: matrix_to_rows(&p.precision),
                }),
                init: v.init().map(|x| x.iter().copied().collect()),
            })
            .collect();
        let factors = g
            .factors()
            .map(|(_, f)| {
                let params = f
                    .params()
                    .cloned()
                    .ok_or_else(|| GbpError::NotSerializable(f.name().to_string()))?;
                Ok(FactorJson {
                    id: f.name().to_string(),
                    neighbors: f
                        .neighbors()
                        .iter()
                        .map(|v| g.variable(*v).expect("live").name().to_string())
                        .collect(),
                    params,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { variables, factors })
    }

    pub fn to_graph(&self, config: GraphConfig) -> Result<FactorGraph> {
        let mut g = FactorGraph::with_config(config);
        for v in &self.variables {
            let prior = v
                .prior
                .as_ref()
                .map(|p| GaussianCanonical::new(DVector::from_column_slice(&p.eta), matrix_from_rows(&p.lambda)?))
                .transpose()?;
            let init = v.init.as_deref().map(DVector::from_column_slice);
            g.add_variable(&v.id, v.dim, prior, init)?;
        }
        for f in &self.factors {
            let neighbors: Vec<VarId> = f.neighbors.iter().map(|n| g.var_id(n)).collect::<Result<_>>()?;
            g.add_factor_params(&f.id, &neighbors, f.params.clone())?;
        }
        Ok(g)
    }
}

pub fn graph_to_string(g: &FactorGraph) -> Result<String> {
    Ok(serde_json::to_string_pretty(&GraphJson::from_graph(g)?)?)
}

/// Parse graph JSON. Damping is chosen from the structure (1 on forests).
pub fn graph_from_str(s: &str) -> Result<FactorGraph> {
    let parsed: GraphJson = serde_json::from_str(s)?;
    let mut g = parsed.to_graph(GraphConfig::default())?;
    g.config.damping = g.default_damping();
    Ok(g)
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<FactorGraph> {
    graph_from_str(&std::fs::read_to_string(path)?)
}

pub fn write_graph(g: &FactorGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, graph_to_string(g)? + "\n")?;
    Ok(())
}

/// `{mean: [...], cov: [[...]]}`, or nulls for an undefined belief.
pub fn moments_value(m: Option<&GaussianMoments>) -> Value {
    match m {
        Some(m) => serde_json::json!({
            "mean": m.mean.iter().copied().collect::<Vec<f64>>(),
            "cov": matrix_to_rows(&m.covariance),
        }),
        None => serde_json::json!({"mean": null, "cov": null}),
    }
}

/// Result JSON: `{variable id → {mean, cov}}` for the current beliefs.
pub fn beliefs_value(g: &FactorGraph) -> Value {
    let mut map = Map::new();
    for (id, v) in g.variables() {
        map.insert(v.name().to_string(), moments_value(g.belief_moments(id).as_ref()));
    }
    Value::Object(map)
}

/// Result JSON for per-slot moments such as oracle marginals.
pub fn moments_map_value(g: &FactorGraph, moments: &[Option<GaussianMoments>]) -> Value {
    let mut map = Map::new();
    for (id, v) in g.variables() {
        map.insert(v.name().to_string(), moments_value(moments.get(id.0).and_then(Option::as_ref)));
    }
    Value::Object(map)
}

/// Ground-truth side file: `{id → [x, y]}`.
pub fn ground_truth_value(truth: &[(String, [f64; 2])]) -> Value {
    let mut map = Map::new();
    for (id, p) in truth {
        map.insert(id.clone(), serde_json::json!(p));
    }
    Value::Object(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems;

    #[test]
    fn round_trip_is_bit_exact() {
        let graphs = [
            problems::preset("chain").unwrap(),
            problems::preset("loop").unwrap(),
            problems::preset("linefit_outlier").unwrap(),
            problems::preset("pose_sim").unwrap(),
            problems::random_tree(3, 10, 3),
        ];
        for g in graphs {
            let text = graph_to_string(&g).unwrap();
            let back = graph_from_str(&text).unwrap();
            assert_eq!(graph_to_string(&back).unwrap(), text);
            for (a, b) in g.factors().zip(back.factors()) {
                assert_eq!(a.1.gaussian(), b.1.gaussian());
            }
        }
    }

    #[test]
    fn parses_documented_shape() {
        let g = graph_from_str(
            r#"{"variables": [{"id": "a", "dim": 1, "prior": {"eta": [0], "lambda": [[1]]}},
                              {"id": "b", "dim": 1}],
                "factors": [{"id": "f", "type": "custom_linear", "neighbors": ["a", "b"],
                             "J": [[-1, 1]], "d": [1], "sigma_n": [[1]]}]}"#,
        )
        .unwrap();
        assert_eq!(g.num_edges(), 2);
        assert!(matches!(
            graph_from_str(r#"{"variables": [], "factors": [{"id": "f", "type": "smooth1d", "neighbors": ["x"], "sigma": 1}]}"#),
            Err(GbpError::UnknownNode(_))
        ));
    }

    #[test]
    fn undefined_belief_is_null() {
        let v = moments_value(None);
        assert_eq!(v.to_string(), r#"{"cov":null,"mean":null}"#);
    }
}
