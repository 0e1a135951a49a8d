//! Scenario configuration: a single JSON document naming the linear model,
//! the drift and noise families, an optional deterministic orbit, the solver
//! settings and the seed list. Flags override individual fields.

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use rps_core::cocycle::LinearModel;
use rps_core::ihrie::SolverConfig;
use rps_core::models::{
    builtin_field, reduce_about_orbit, AdditiveNoise, DeterministicOrbit, PeriodicField,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Vec<Vec<Vec<f64>>>,
    /// Constant additive noise vectors gamma_k (paired with channels of b).
    #[serde(default)]
    pub gamma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family: String,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub tau: f64,
    pub model: ModelSpec,
    pub field: FamilySpec,
    #[serde(default)]
    pub beta: Option<FamilySpec>,
    #[serde(default)]
    pub orbit: Option<FamilySpec>,
    pub solver: SolverConfig,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Initial state for forward simulation (defaults to the origin).
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

/// A scenario resolved into solver-ready objects. When an orbit is present
/// the solve runs in the reduced coordinates u = x - z(t) while simulation
/// stays in the original coordinates.
pub struct Assembled {
    pub scenario: Scenario,
    pub model: LinearModel,
    /// Drift of the integral equation (reduced about the orbit if present).
    pub field: PeriodicField,
    pub beta: Option<AdditiveNoise>,
    pub orbit: Option<DeterministicOrbit>,
    /// Drift for direct simulation in original coordinates.
    pub sim_field: PeriodicField,
    /// Additive coefficients for direct simulation (the constants gamma_k).
    pub sim_beta: Option<AdditiveNoise>,
    pub x0: DVector<f64>,
}

fn parse_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        bail!("matrix must be square and non-empty");
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn build_beta(spec: &FamilySpec, tau: f64, dim: usize) -> Result<AdditiveNoise> {
    let getf = |k: &str, dflt: f64| spec.params.get(k).and_then(|v| v.as_f64()).unwrap_or(dflt);
    match spec.family.as_str() {
        "zero" => Ok(AdditiveNoise::zero(tau, dim, 1)),
        "sine" => {
            if dim != 1 {
                bail!("the sine additive family is one dimensional");
            }
            Ok(AdditiveNoise::sine(getf("amp", 10.0)))
        }
        "constant" => {
            let gammas = spec
                .params
                .get("gamma")
                .and_then(|v| v.as_array())
                .ok_or_else(|| anyhow!("constant beta needs a `gamma` array of vectors"))?
                .iter()
                .map(|row| {
                    let v: Vec<f64> = row
                        .as_array()
                        .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
                        .unwrap_or_default();
                    DVector::from_vec(v)
                })
                .collect();
            Ok(AdditiveNoise::constant(tau, gammas))
        }
        other => bail!("unknown beta family `{other}`"),
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario> {
        serde_json::from_str(text).context("parsing scenario JSON")
    }

    /// Named built-in scenarios.
    pub fn builtin(name: &str) -> Result<Scenario> {
        let json = match name {
            // dX = -X dt + cos t dt + 10 sin t dW
            "ou_periodic" => serde_json::json!({
                "name": "ou_periodic",
                "tau": TAU,
                "model": { "a": [[-1.0]], "b": [] },
                "field": { "family": "cosine_forcing", "params": { "c": 1.0 } },
                "beta": { "family": "sine", "params": { "amp": 10.0 } },
                "solver": { "t_core": 8.0, "horizon": 20.0, "dt": 1e-3, "tol": 1e-10 },
                "seeds": [1]
            }),
            // dX = -X dt + cos t dt + 10 X o dW
            "mult_linear_scalar" => serde_json::json!({
                "name": "mult_linear_scalar",
                "tau": TAU,
                "model": { "a": [[-1.0]], "b": [[[10.0]]] },
                "field": { "family": "cosine_forcing", "params": { "c": 1.0 } },
                "solver": { "t_core": 8.0, "horizon": 20.0, "dt": 1e-3, "tol": 1e-10 },
                "seeds": [1]
            }),
            // A = diag(-1, 2), F = (cos t, cos t), optional isotropic noise.
            "hyperbolic_2d" => serde_json::json!({
                "name": "hyperbolic_2d",
                "tau": TAU,
                "model": { "a": [[-1.0, 0.0], [0.0, 2.0]], "b": [] },
                "field": { "family": "cosine_forcing", "params": { "c": 1.0, "dim": 2.0 } },
                "solver": { "t_core": TAU, "horizon": 20.0, "dt": 1e-3, "tol": 1e-10 },
                "seeds": [1]
            }),
            // Limit cycle with strong additive noise (reduced about the orbit
            // for the integral equation).
            "limit_cycle_additive" => serde_json::json!({
                "name": "limit_cycle_additive",
                "tau": TAU,
                "model": {
                    "a": [[-1.0, -1.0], [1.0, -1.0]],
                    "b": [],
                    "gamma": [[10.0, 0.0], [0.0, 10.0]]
                },
                "field": { "family": "limit_cycle", "params": {} },
                "orbit": { "family": "unit_circle", "params": {} },
                "solver": { "t_core": TAU, "horizon": 10.0, "dt": 1e-3, "tol": 1e-8 },
                "seeds": [1],
                "x0": [1.0, 0.0]
            }),
            // Limit cycle with multiplicative linear noise: non-commutative but
            // one-sided spectrum, so the numerical cocycle route applies.
            "limit_cycle_mult" => serde_json::json!({
                "name": "limit_cycle_mult",
                "tau": TAU,
                "model": {
                    "a": [[-1.0, -1.0], [1.0, -1.0]],
                    "b": [[[10.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 10.0]]]
                },
                "field": { "family": "limit_cycle", "params": {} },
                "solver": { "t_core": TAU, "horizon": 10.0, "dt": 1e-3, "tol": 1e-8 },
                "seeds": [1],
                "x0": [1.0, 0.0]
            }),
            other => bail!("unknown builtin scenario `{other}`"),
        };
        Ok(serde_json::from_value(json).expect("builtin scenarios are valid"))
    }

    pub fn assemble(self) -> Result<Assembled> {
        let a = parse_matrix(&self.model.a)?;
        let d = a.nrows();
        let b: Vec<DMatrix<f64>> = self
            .model
            .b
            .iter()
            .map(|m| parse_matrix(m))
            .collect::<Result<_>>()
            .context("parsing noise matrices")?;
        let gamma: Vec<DVector<f64>> = self
            .model
            .gamma
            .iter()
            .map(|g| {
                if g.len() != d {
                    bail!("gamma vectors must have the state dimension {d}");
                }
                Ok(DVector::from_vec(g.clone()))
            })
            .collect::<Result<_>>()?;
        let model = LinearModel::new(a.clone(), b.clone()).map_err(|e| anyhow!(e.to_string()))?;

        let mut params = self.field.params.clone();
        params.entry("tau".to_string()).or_insert(serde_json::json!(self.tau));
        let base_field =
            builtin_field(&self.field.family, &params).map_err(|e| anyhow!(e.to_string()))?;
        if base_field.dim != d {
            bail!("field dimension {} does not match the model dimension {d}", base_field.dim);
        }
        if (base_field.tau - self.tau).abs() > 1e-9 * self.tau {
            bail!("field period {} does not match scenario tau {}", base_field.tau, self.tau);
        }

        let orbit = match &self.orbit {
            None => None,
            Some(spec) => match spec.family.as_str() {
                "unit_circle" => Some(DeterministicOrbit::unit_circle()),
                other => bail!("unknown orbit family `{other}`"),
            },
        };

        let sim_beta = if gamma.is_empty() {
            self.beta
                .as_ref()
                .map(|spec| build_beta(spec, self.tau, d))
                .transpose()?
        } else {
            Some(AdditiveNoise::constant(self.tau, gamma.clone()))
        };

        let (field, beta) = match &orbit {
            Some(z) => {
                let (g, reduced_beta) =
                    reduce_about_orbit(&a, &base_field, z, &b, &gamma, 1e-8)
                        .map_err(|e| anyhow!(e.to_string()))?;
                (g, Some(reduced_beta))
            }
            None => (base_field.clone(), sim_beta.clone()),
        };

        let x0 = match &self.x0 {
            Some(v) if v.len() == d => DVector::from_vec(v.clone()),
            Some(v) => bail!("x0 has length {} but the state dimension is {d}", v.len()),
            None => DVector::zeros(d),
        };

        Ok(Assembled {
            model,
            field,
            beta,
            orbit,
            sim_field: base_field,
            sim_beta,
            x0,
            scenario: self,
        })
    }
}
