//! Built-in configurations, selectable with `--preset NAME`.

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Scalar integrator with Bernoulli transition noise, `g(x) = -x`, T = 40.
/// Seed count (100) is a default here.
pub const APPENDIX_C: &str = r#"
[system]
horizon = 40
x0 = [0.0]
A = [[1.0]]
B = [[1.0]]
C = [[1.0]]

[system.transition_noise]
kind = "finite"
atoms = [[0.0], [1.0]]
masses = [0.5, 0.5]
subgaussian_m = 4.0

[system.obs_noise]
kind = "gaussian"
variances = [1.0]

[policy]
kind = "linear"
gain = [[-1.0]]

[reward]
kind = "avg_l1"

[oracle]
kind = "enumeration"

[run]
n_list = [10, 100, 1000]
seeds = 100
master_seed = 0
"#;

pub const GAUSSIAN: &str = r#"
[system]
horizon = 5
x0 = [0.0]
A = [[0.9]]
B = [[1.0]]
C = [[1.0]]

[system.transition_noise]
kind = "gaussian"
variances = [1.0]
subgaussian_m = 1.0

[system.obs_noise]
kind = "gaussian"
variances = [1.0]

[policy]
kind = "linear"
gain = [[-0.5]]

[reward]
kind = "avg_l1"

[oracle]
kind = "kalman"

[run]
n_list = [64, 4096]
seeds = 100
master_seed = 0
"#;

/// Two-atom transition noise with Gaussian observations, T = 6.
pub const ENUMERATION: &str = r#"
[system]
horizon = 6
x0 = [0.0]
A = [[1.0]]
B = [[1.0]]
C = [[1.0]]

[system.transition_noise]
kind = "rademacher"
subgaussian_m = 1.0

[system.obs_noise]
kind = "gaussian"
variances = [1.0]

[policy]
kind = "linear"
gain = [[-0.5]]

[reward]
kind = "avg_l1"

[oracle]
kind = "enumeration"

[run]
n_list = [100, 100000]
seeds = 100
master_seed = 0

[concentration]
particles = [100, 1000, 10000]
beta = 0.25
replications = 2000
"#;

pub const LOWERBOUND: &str = r#"
[lowerbound]
horizons = [1, 3, 5, 8]
particles = [1, 2, 8, 64]
replications = 10000
k = 2

[bounds]
variants = ["nonlinear", "linear"]
horizons = [4, 8, 12, 16]
p_from_lowerbound = true

[run]
master_seed = 0
"#;

/// Deterministic dynamics and exact observations.
pub const ZERO_NOISE: &str = r#"
[system]
horizon = 10
x0 = [1.0]
A = [[1.0]]
B = [[1.0]]
C = [[1.0]]

[system.transition_noise]
kind = "zero"

[system.obs_noise]
kind = "zero"

[policy]
kind = "linear"
gain = [[-0.5]]

[reward]
kind = "avg_l1"

[oracle]
kind = "kalman"

[run]
n_list = [1]
seeds = 3
master_seed = 0
"#;

pub const NAMES: [&str; 5] = ["appendix-c", "gaussian", "enumeration", "lowerbound", "zero-noise"];

pub fn preset_text(name: &str) -> Result<&'static str> {
    Ok(match name {
        "appendix-c" => APPENDIX_C,
        "gaussian" => GAUSSIAN,
        "enumeration" => ENUMERATION,
        "lowerbound" => LOWERBOUND,
        "zero-noise" => ZERO_NOISE,
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (available: {})",
                NAMES.join(", ")
            )))
        }
    })
}

pub fn preset(name: &str) -> Result<RunConfig> {
    RunConfig::from_toml(preset_text(name)?, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_parse_and_validate() {
        for name in NAMES {
            let cfg = preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            if let Some(spec) = &cfg.spec {
                assert!(spec.validate().is_valid(), "{name}: {}", spec.validate());
                assert_eq!(cfg.require_policy().unwrap().action_dim(), spec.action_dim);
            }
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn appendix_c_contents() {
        let cfg = preset("appendix-c").unwrap();
        let spec = cfg.spec.unwrap();
        assert_eq!(spec.horizon, 40);
        assert_eq!(cfg.n_list, vec![10, 100, 1000]);
        assert_eq!(cfg.seeds, 100);
        let atoms = spec.transition_noise_seq[0].atoms().unwrap();
        assert_eq!(atoms.masses(), &[0.5, 0.5]);
        assert_eq!(cfg.policy.unwrap().gain().unwrap()[(0, 0)], -1.0);
    }
}
