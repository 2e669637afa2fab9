//! Experiment configuration: JSON schema, semantic validation, and the
//! canonical hash stamped into every output file.
//!
//! Parsing and validation are deliberately separate stages with distinct
//! exit codes: a file that is not well-formed JSON for this schema is a
//! *parse* failure, while a well-formed file whose values are out of range
//! (for example `isp.sigma = 0`) is a *validation* failure that names the
//! offending key.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Top-level experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Spatial domain.
    pub domain: DomainSpec,
    /// Space-time grid sizes.
    pub grid: GridSpec,
    /// Elliptic coefficient preset.
    #[serde(default)]
    pub coefficients: CoefficientsSpec,
    /// Weight parameters for estimate verification and row weighting.
    pub carleman: CarlemanSpec,
    /// Inverse-problem block; required by `forward`, `invert`, and `sweep`.
    #[serde(default)]
    pub isp: Option<IspSpec>,
    /// Output directory (overridden by `--out`).
    #[serde(default = "default_output")]
    pub output: String,
}

fn default_output() -> String {
    "out".to_string()
}

/// Spatial domain selector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    /// One-dimensional box `(a, b)`.
    Interval {
        /// Left endpoint (must satisfy `a >= 0`).
        a: f64,
        /// Right endpoint.
        b: f64,
    },
    /// Box `(0, 1/4) x (-1/2, 1/2)^(dim-1)` inscribed in the paraboloid slab.
    Prism {
        /// Spatial dimension (>= 1).
        dim: usize,
    },
    /// Paraboloid slab `{0 < x1 + |x_bar|^2/2 < 1/2}`.
    Paraboloid {
        /// Spatial dimension (>= 1).
        dim: usize,
    },
}

/// Grid sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Nodes per spatial axis.
    pub resolution: usize,
    /// Final time `T`.
    pub t_final: f64,
    /// Number of time levels (including both ends).
    pub nt: usize,
}

/// Elliptic coefficient preset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSpec {
    /// One of `laplacian`, `variable_a`, `full_lower_order`.
    pub preset: String,
}

impl Default for CoefficientsSpec {
    fn default() -> Self {
        Self { preset: "laplacian".to_string() }
    }
}

/// Weight parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarlemanSpec {
    /// Single weight strength (used by `invert`/`sweep`, and by
    /// `verify-carleman` when no sweep list is given).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Strength sweep for `verify-carleman` (one CSV row per entry).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_sweep: Option<Vec<f64>>,
    /// Weight shape exponent.
    pub mu: f64,
}

/// Inverse-problem block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IspSpec {
    /// Source modulation preset: `manufactured` or `exp_decay`.
    #[serde(default = "default_manufactured")]
    pub r_preset: String,
    /// Source factor truth preset: `manufactured`, `random`, or `constant`.
    #[serde(default = "default_manufactured")]
    pub b_preset: String,
    /// Certified positivity floor for the modulation `R`.
    pub sigma: f64,
    /// Data coverage: `full_lateral` or `gamma_only`.
    #[serde(default = "default_boundary")]
    pub boundary: String,
    /// Fixed penalty strength (mutually exclusive with `alpha_rule`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Data-driven penalty selection (mutually exclusive with `alpha`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_rule: Option<AlphaRuleSpec>,
    /// Perturbation magnitudes for `sweep`.
    #[serde(default)]
    pub deltas: Vec<f64>,
    /// Base RNG seed (overridden by `--seed`).
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Optional explicit seed list for `sweep` (defaults to `[seed]`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Optional interior-subdomain margin: sweep errors are then measured
    /// only on nodes whose level-function value stays at least `epsilon`
    /// below its supremum over the domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

fn default_manufactured() -> String {
    "manufactured".to_string()
}

fn default_boundary() -> String {
    "full_lateral".to_string()
}

fn default_seed() -> u64 {
    1
}

/// Data-driven penalty selection rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum AlphaRuleSpec {
    /// Largest penalty whose equation residual drops below `1.5 x noise`.
    Discrepancy {
        /// Estimated data-noise magnitude.
        noise: f64,
    },
}

/// Which subcommand the configuration is being validated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    VerifyCarleman,
    Forward,
    Invert,
    Sweep,
}

impl ExperimentConfig {
    /// Parses a configuration from raw JSON bytes (parse failures map to
    /// exit code 2).
    pub fn from_json(bytes: &[u8]) -> Result<Self, CliError> {
        serde_json::from_slice(bytes)
            .map_err(|e| CliError::ConfigParse(format!("invalid configuration JSON: {e}")))
    }

    /// Applies command-line overrides to the parsed configuration; the
    /// resulting *effective* configuration is what gets hashed.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<&str>) {
        if let Some(s) = seed {
            if let Some(isp) = self.isp.as_mut() {
                isp.seed = s;
            }
        }
        if let Some(dir) = out {
            self.output = dir.to_string();
        }
    }

    /// Hex SHA-256 of the canonical serialization of the effective
    /// configuration. Field order is fixed by the struct definitions, so the
    /// hash is stable across runs and platforms.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Semantic validation. Returns the offending key path on failure
    /// (exit code 3).
    pub fn validate(&self, cmd: CommandKind) -> Result<(), CliError> {
        let bad = |key: &str, message: String| {
            Err(CliError::Validation { key: Some(key.to_string()), message })
        };

        match self.domain {
            DomainSpec::Interval { a, b } => {
                if !(a >= 0.0 && b > a) {
                    return bad(
                        "domain",
                        format!("interval needs 0 <= a < b, got a = {a}, b = {b}"),
                    );
                }
            }
            DomainSpec::Prism { dim } | DomainSpec::Paraboloid { dim } => {
                if dim == 0 {
                    return bad("domain.dim", "dimension must be at least 1".to_string());
                }
            }
        }

        if !(self.grid.t_final > 0.0) {
            return bad(
                "grid.t_final",
                format!("final time must be positive, got {}", self.grid.t_final),
            );
        }
        if self.grid.resolution < 5 {
            return bad(
                "grid.resolution",
                format!("need at least 5 nodes per axis, got {}", self.grid.resolution),
            );
        }
        if self.grid.nt < 5 {
            return bad(
                "grid.nt",
                format!("need at least 5 time levels, got {}", self.grid.nt),
            );
        }

        if !(self.carleman.mu >= 1.0) {
            return bad(
                "carleman.mu",
                format!("weight exponent must satisfy mu >= 1, got {}", self.carleman.mu),
            );
        }
        if let Some(l) = self.carleman.lambda {
            if !(l >= 1.0) {
                return bad(
                    "carleman.lambda",
                    format!("weight strength must satisfy lambda >= 1, got {l}"),
                );
            }
        }
        if let Some(sweep) = &self.carleman.lambda_sweep {
            if sweep.is_empty() {
                return bad("carleman.lambda_sweep", "sweep list is empty".to_string());
            }
            for &l in sweep {
                if !(l >= 1.0) {
                    return bad(
                        "carleman.lambda_sweep",
                        format!("every sweep entry must satisfy lambda >= 1, got {l}"),
                    );
                }
            }
        }

        match self.coefficients.preset.as_str() {
            "laplacian" | "variable_a" | "full_lower_order" => {}
            other => {
                return bad(
                    "coefficients.preset",
                    format!(
                        "unknown preset `{other}`; expected one of \
                         laplacian, variable_a, full_lower_order"
                    ),
                )
            }
        }

        match cmd {
            CommandKind::VerifyCarleman => {
                if self.carleman.lambda.is_none() && self.carleman.lambda_sweep.is_none() {
                    return bad(
                        "carleman.lambda",
                        "set either carleman.lambda or carleman.lambda_sweep".to_string(),
                    );
                }
            }
            CommandKind::Forward | CommandKind::Invert | CommandKind::Sweep => {
                if self.carleman.lambda.is_none() {
                    return bad(
                        "carleman.lambda",
                        "this command needs the single weight strength carleman.lambda"
                            .to_string(),
                    );
                }
                let isp = match &self.isp {
                    Some(isp) => isp,
                    None => {
                        return bad(
                            "isp",
                            "this command needs the isp configuration block".to_string(),
                        )
                    }
                };
                self.validate_isp(isp, cmd)?;
            }
        }
        Ok(())
    }

    fn validate_isp(&self, isp: &IspSpec, cmd: CommandKind) -> Result<(), CliError> {
        let bad = |key: &str, message: String| {
            Err(CliError::Validation { key: Some(key.to_string()), message })
        };

        if !(isp.sigma > 0.0) {
            return bad(
                "isp.sigma",
                format!("positivity floor must be strictly positive, got {}", isp.sigma),
            );
        }
        match isp.boundary.as_str() {
            "full_lateral" | "gamma_only" => {}
            other => {
                return bad(
                    "isp.boundary",
                    format!("unknown boundary mode `{other}`; expected full_lateral or gamma_only"),
                )
            }
        }
        match isp.r_preset.as_str() {
            "manufactured" | "exp_decay" => {}
            other => {
                return bad(
                    "isp.r_preset",
                    format!("unknown preset `{other}`; expected manufactured or exp_decay"),
                )
            }
        }
        match isp.b_preset.as_str() {
            "manufactured" | "random" | "constant" => {}
            other => {
                return bad(
                    "isp.b_preset",
                    format!("unknown preset `{other}`; expected manufactured, random, or constant"),
                )
            }
        }
        let r_manufactured = isp.r_preset == "manufactured";
        let b_manufactured = isp.b_preset == "manufactured";
        if r_manufactured != b_manufactured {
            let key = if r_manufactured { "isp.b_preset" } else { "isp.r_preset" };
            return bad(
                key,
                "the manufactured modulation and the manufactured source factor \
                 describe one joint scenario; use `manufactured` for both or for neither"
                    .to_string(),
            );
        }
        if r_manufactured {
            if !matches!(self.domain, DomainSpec::Interval { .. }) {
                return bad(
                    "domain",
                    "the manufactured scenario is one-dimensional; use an interval domain"
                        .to_string(),
                );
            }
            if self.coefficients.preset != "laplacian" {
                return bad(
                    "coefficients.preset",
                    "the manufactured scenario is built for the laplacian preset".to_string(),
                );
            }
        }

        match cmd {
            CommandKind::Invert | CommandKind::Sweep => match (isp.alpha, &isp.alpha_rule) {
                (Some(_), Some(_)) => {
                    return bad(
                        "isp.alpha",
                        "set either isp.alpha or isp.alpha_rule, not both".to_string(),
                    )
                }
                (None, None) => {
                    return bad(
                        "isp.alpha",
                        "reconstruction needs either isp.alpha or isp.alpha_rule".to_string(),
                    )
                }
                (Some(a), None) => {
                    if !(a >= 0.0) {
                        return bad(
                            "isp.alpha",
                            format!("penalty strength must be nonnegative, got {a}"),
                        );
                    }
                }
                (None, Some(AlphaRuleSpec::Discrepancy { noise })) => {
                    if !(*noise > 0.0) {
                        return bad(
                            "isp.alpha_rule",
                            format!("noise estimate must be positive, got {noise}"),
                        );
                    }
                }
            },
            _ => {}
        }

        if cmd == CommandKind::Sweep {
            if isp.deltas.len() < 2 {
                return bad(
                    "isp.deltas",
                    format!(
                        "a sweep needs at least two perturbation magnitudes, got {}",
                        isp.deltas.len()
                    ),
                );
            }
            for &d in &isp.deltas {
                if !(d > 0.0) {
                    return bad(
                        "isp.deltas",
                        format!("perturbation magnitudes must be positive, got {d}"),
                    );
                }
            }
            if let Some(seeds) = &isp.seeds {
                if seeds.is_empty() {
                    return bad("isp.seeds", "seed list is empty".to_string());
                }
            }
        }
        if let Some(eps) = isp.epsilon {
            if !(eps > 0.0) {
                return bad(
                    "isp.epsilon",
                    format!("subdomain margin must be positive, got {eps}"),
                );
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra_isp: &str) -> String {
        format!(
            r#"{{
              "domain": {{"kind": "interval", "a": 0.0, "b": 0.5}},
              "grid": {{"resolution": 17, "t_final": 0.5, "nt": 9}},
              "carleman": {{"lambda": 2.0, "mu": 1.0}},
              "isp": {{"sigma": 0.25{extra_isp}}}
            }}"#
        )
    }

    #[test]
    fn round_trip_hash_is_stable() {
        let cfg = ExperimentConfig::from_json(minimal("").as_bytes()).unwrap();
        let h1 = cfg.hash();
        let h2 = cfg.hash();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn seed_override_changes_the_hash() {
        let mut a = ExperimentConfig::from_json(minimal("").as_bytes()).unwrap();
        let b = a.clone();
        a.apply_overrides(Some(99), None);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let text = r#"{"domain": {"kind": "interval", "a": 0, "b": 1}, "grate": 3}"#;
        let err = ExperimentConfig::from_json(text.as_bytes()).unwrap_err();
        assert!(matches!(err, CliError::ConfigParse(_)));
    }

    #[test]
    fn zero_sigma_names_its_key() {
        let mut cfg = ExperimentConfig::from_json(minimal("").as_bytes()).unwrap();
        cfg.isp.as_mut().unwrap().sigma = 0.0;
        cfg.isp.as_mut().unwrap().alpha = Some(1e-6);
        let err = cfg.validate(CommandKind::Invert).unwrap_err();
        match err {
            CliError::Validation { key, .. } => assert_eq!(key.as_deref(), Some("isp.sigma")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn alpha_exclusivity_is_enforced() {
        let extra = r#", "alpha": 1e-6, "alpha_rule": {"kind": "discrepancy", "noise": 1e-3}"#;
        let cfg = ExperimentConfig::from_json(minimal(extra).as_bytes()).unwrap();
        let err = cfg.validate(CommandKind::Invert).unwrap_err();
        match err {
            CliError::Validation { key, .. } => assert_eq!(key.as_deref(), Some("isp.alpha")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
