//! Settings resolved from defaults, an optional `key = value` file, and
//! command-line flags, in increasing precedence.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use focusfuse_core::{HyperParams, PipelineParams};

pub const CONFIG_ENV: &str = "FOCUSFUSE_CONFIG";

/// Training blur levels when none are given.
pub const DEFAULT_SIGMAS: [f64; 6] = [0.0, 0.5, 1.0, 2.0, 3.0, 4.0];
pub const DEFAULT_SIGMA_BLUR: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub pipeline: PipelineParams,
    pub hyper: HyperParams,
    pub sigmas: Vec<f64>,
    pub sigma_blur: f64,
    /// 0 means one worker per hardware thread.
    pub threads: usize,
    pub verbose: bool,
    pub model: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub dump_intermediates: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            pipeline: PipelineParams::default(),
            hyper: HyperParams::default(),
            sigmas: DEFAULT_SIGMAS.to_vec(),
            sigma_blur: DEFAULT_SIGMA_BLUR,
            threads: 0,
            verbose: false,
            model: None,
            labels: None,
            dump_intermediates: false,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value {value:?} for {key}: {e}"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => bail!("invalid value {value:?} for {key}: expected true or false"),
    }
}

impl Settings {
    /// Apply one setting. Keys are the long flag names; `-` and `_` are
    /// interchangeable.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "sigma_xy" => self.pipeline.solver.sigma_xy = num(k, value)?,
            "sigma_in" => self.pipeline.solver.sigma_in = num(k, value)?,
            "lambda" => self.pipeline.solver.lambda = num(k, value)?,
            "cg_tol" => self.pipeline.solver.cg_tol = num(k, value)?,
            "cg_max_iters" => self.pipeline.solver.cg_max_iters = num(k, value)?,
            "bistoch_iters" => self.pipeline.solver.bistoch_iters = num(k, value)?,
            "threshold" => self.pipeline.threshold = num(k, value)?,
            "sigmoid_mean" => self.pipeline.sigmoid.mean = num(k, value)?,
            "sigmoid_slope" => self.pipeline.sigmoid.slope = num(k, value)?,
            "learning_rate" => self.hyper.learning_rate = num(k, value)?,
            "batch_size" => self.hyper.batch_size = num(k, value)?,
            "epochs" => self.hyper.epochs = num(k, value)?,
            "seed" => self.hyper.seed = num(k, value)?,
            "sigmas" => {
                self.sigmas = value
                    .split(',')
                    .map(|s| num::<f64>(k, s.trim()))
                    .collect::<Result<_>>()?
            }
            "sigma_blur" => self.sigma_blur = num(k, value)?,
            "threads" => self.threads = num(k, value)?,
            "verbose" => self.verbose = flag(k, value)?,
            "model" => self.model = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "dump_intermediates" => self.dump_intermediates = flag(k, value)?,
            _ => bail!("unknown setting {key:?}"),
        }
        Ok(())
    }

    /// Parse a config file body: one `key = value` per line, `#` comments.
    pub fn apply_file_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key = value", origin.display(), i + 1))?;
            self.apply(key, value)
                .with_context(|| format!("{}:{}", origin.display(), i + 1))?;
        }
        Ok(())
    }

    /// Defaults, then the config file (explicit path, else the environment
    /// fallback), then flag overrides.
    pub fn resolve(config: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut settings = Self::default();
        let path = match config {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from),
        };
        if let Some(path) = path {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            settings.apply_file_text(&text, &path)?;
        }
        for (key, value) in overrides {
            settings.apply(key, value)?;
        }
        Ok(settings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_library() {
        let s = Settings::default();
        assert_eq!(s.pipeline.solver.sigma_xy, 8);
        assert_eq!(s.pipeline.solver.lambda, 64.0);
        assert_eq!(s.pipeline.threshold, 0.1);
        assert_eq!(s.pipeline.sigmoid.mean, 0.5);
        assert_eq!(s.pipeline.sigmoid.slope, 40.0);
    }

    #[test]
    fn file_then_flags() {
        let mut s = Settings::default();
        s.apply_file_text("# comment\nlambda = 3\nsigma-xy=4 # trailing\nverbose = true\n", Path::new("t"))
            .unwrap();
        assert_eq!(s.pipeline.solver.lambda, 3.0);
        assert_eq!(s.pipeline.solver.sigma_xy, 4);
        assert!(s.verbose);
        s.apply("lambda", "5").unwrap();
        assert_eq!(s.pipeline.solver.lambda, 5.0);
        assert_eq!(s.pipeline.solver.sigma_xy, 4);
    }

    #[test]
    fn sigma_list() {
        let mut s = Settings::default();
        s.apply("sigmas", "0, 1,2.5").unwrap();
        assert_eq!(s.sigmas, vec![0.0, 1.0, 2.5]);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut s = Settings::default();
        assert!(s.apply("lamda", "1").is_err());
        assert!(s.apply("epochs", "many").is_err());
        assert!(s.apply_file_text("lambda 3\n", Path::new("t")).is_err());
    }
}
