use bcq_core::Observable;
use clap::Args;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Everything a run depends on; echoed into every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub a: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub big_n: usize,
    pub p_max: usize,
    pub horizon_certify: usize,
    pub horizon_anchor: usize,
    /// T_max of the induced map.
    pub horizon_induce: usize,
    /// n of the Lebesgue pressure P_n.
    pub horizon_ldp: usize,
    pub precision_bits: usize,
    pub seed: u64,
    pub observables: Vec<String>,
    pub out: PathBuf,
    /// 0 lets rayon decide.
    pub workers: usize,
    /// Pieces lighter than this fraction of |Λ⁺| are aggregated.
    pub explicit_threshold: f64,
    /// Stratified points of Λ⁺ behind the equilibrium family.
    pub family_samples: usize,
    pub alpha_points: usize,
    pub ldp_window: (f64, f64),
    pub ldp_deviation_n: usize,
    pub ldp_samples: usize,
    pub ldp_tilt: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            a: 2.0,
            lambda: 0.9 * std::f64::consts::LN_2,
            epsilon: 0.02,
            big_n: 1,
            p_max: 30,
            horizon_certify: 1000,
            horizon_anchor: 1000,
            horizon_induce: 60,
            horizon_ldp: 20,
            precision_bits: 128,
            seed: 0x7e57,
            observables: vec!["x".into(), "x2".into(), "cospix".into()],
            out: PathBuf::from("bcq-out"),
            workers: 0,
            explicit_threshold: 1e-4,
            family_samples: 400_000,
            alpha_points: 41,
            ldp_window: (0.3, 0.5),
            ldp_deviation_n: 30,
            ldp_samples: 200_000,
            ldp_tilt: 3.0,
        }
    }
}

/// Shared flags; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// key = value config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long = "bigN")]
    pub big_n: Option<usize>,
    #[arg(long)]
    pub p_max: Option<usize>,
    #[arg(long = "horizon-certify", alias = "horizon")]
    pub horizon_certify: Option<usize>,
    #[arg(long)]
    pub horizon_anchor: Option<usize>,
    #[arg(long)]
    pub horizon_induce: Option<usize>,
    #[arg(long)]
    pub horizon_ldp: Option<usize>,
    #[arg(long)]
    pub precision_bits: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated: x, x2, cospix, poly:c0,c1,…
    #[arg(long = "obs")]
    pub observables: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub explicit_threshold: Option<f64>,
    #[arg(long)]
    pub family_samples: Option<usize>,
    #[arg(long)]
    pub alpha_points: Option<usize>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.trim().parse().map_err(|_| ConfigError(format!("bad value for {key}: '{v}'")))
}

/// Observables are separated by ';' or by commas outside a `poly:` list.
fn split_observables(v: &str) -> Vec<String> {
    if v.contains(';') {
        return v.split(';').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    let mut out: Vec<String> = Vec::new();
    for part in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let is_number = part.parse::<f64>().is_ok();
        match out.last_mut() {
            Some(prev) if is_number && prev.contains(':') => {
                prev.push(',');
                prev.push_str(part);
            }
            _ => out.push(part.to_string()),
        }
    }
    out
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "a" => self.a = num(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "epsilon" => self.epsilon = num(key, v)?,
            "bigN" | "big_n" | "N" => self.big_n = num(key, v)?,
            "p_max" => self.p_max = num(key, v)?,
            "horizon_certify" | "horizon" => self.horizon_certify = num(key, v)?,
            "horizon_anchor" => self.horizon_anchor = num(key, v)?,
            "horizon_induce" | "t_max" => self.horizon_induce = num(key, v)?,
            "horizon_ldp" => self.horizon_ldp = num(key, v)?,
            "precision_bits" => self.precision_bits = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "obs" | "observables" => self.observables = split_observables(v),
            "out" => self.out = PathBuf::from(v.trim()),
            "workers" => self.workers = num(key, v)?,
            "explicit_threshold" => self.explicit_threshold = num(key, v)?,
            "family_samples" => self.family_samples = num(key, v)?,
            "alpha_points" => self.alpha_points = num(key, v)?,
            "ldp_window" => {
                let (lo, hi) = v.split_once(',').ok_or_else(|| ConfigError("ldp_window needs 'lo, hi'".into()))?;
                self.ldp_window = (num(key, lo)?, num(key, hi)?);
            }
            "ldp_deviation_n" => self.ldp_deviation_n = num(key, v)?,
            "ldp_samples" => self.ldp_samples = num(key, v)?,
            "ldp_tilt" => self.ldp_tilt = num(key, v)?,
            _ => return Err(ConfigError(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(o: &Overrides) -> Result<RunConfig, ConfigError> {
        let mut c = RunConfig::default();
        if let Some(path) = &o.config {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            c.apply_file_text(&text)?;
        }
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { c.$f = v; } )* };
        }
        over!(a, lambda, epsilon, big_n, p_max, horizon_certify, horizon_anchor, horizon_induce, horizon_ldp);
        over!(precision_bits, seed, out, workers, explicit_threshold, family_samples, alpha_points);
        if let Some(v) = &o.observables {
            c.observables = split_observables(v);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.a > 0.0 && self.a <= 2.0) {
            return Err(ConfigError(format!("domain error: a = {} not in (0, 2]", self.a)));
        }
        if !(self.lambda > 0.0) || !(self.epsilon > 0.0) {
            return Err(ConfigError("lambda and epsilon must be positive".into()));
        }
        let counts = [
            ("bigN", self.big_n),
            ("p_max", self.p_max),
            ("horizon_certify", self.horizon_certify),
            ("horizon_anchor", self.horizon_anchor),
            ("horizon_induce", self.horizon_induce),
            ("horizon_ldp", self.horizon_ldp),
            ("precision_bits", self.precision_bits),
            ("family_samples", self.family_samples),
            ("alpha_points", self.alpha_points),
            ("ldp_deviation_n", self.ldp_deviation_n),
            ("ldp_samples", self.ldp_samples),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError(format!("{k} must be ≥ 1")));
        }
        if self.big_n >= self.p_max {
            return Err(ConfigError("bigN must be below p_max".into()));
        }
        if self.observables.is_empty() {
            return Err(ConfigError("no observables".into()));
        }
        self.parsed_observables()?;
        if self.ldp_window.0 > self.ldp_window.1 {
            return Err(ConfigError("ldp_window must be ordered".into()));
        }
        Ok(())
    }

    pub fn parsed_observables(&self) -> Result<Vec<Observable>, ConfigError> {
        self.observables
            .iter()
            .map(|s| Observable::parse(s).map_err(|e| ConfigError(e.to_string())))
            .collect()
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_defaults() {
        let mut c = RunConfig::default();
        c.apply_file_text("# comment\na = 1.9\nobs = x, poly:0,1,2 , cospix\nldp_window = 0.1, 0.2\n").unwrap();
        assert_eq!(c.a, 1.9);
        assert_eq!(c.observables, vec!["x", "poly:0,1,2", "cospix"]);
        assert_eq!(c.ldp_window, (0.1, 0.2));
        assert!(c.apply_file_text("nonsense = 1").is_err());
        assert!(c.apply_file_text("a 1").is_err());
    }

    #[test]
    fn domain_checked() {
        let c = RunConfig { a: 2.5, ..Default::default() };
        assert!(c.validate().unwrap_err().0.contains("domain"));
        let c = RunConfig { horizon_ldp: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
