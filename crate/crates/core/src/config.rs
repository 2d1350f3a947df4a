//! Run configuration: defaults, `key = value` files and the echo written
//! next to every run's outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::atlas::{AtlasHyperparams, ConsistencyParams, FitParams, PatchParams};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, LayerSpec, DEFAULT_CHART_LAYERS};
use crate::transport::SinkhornOptions;

/// Name of the echo file written into every output directory.
pub const CONFIG_ECHO_NAME: &str = "config.txt";

/// Every effective parameter of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    /// Center spacing as a fraction of the bounding-box diagonal.
    pub r: f64,
    pub c: f64,
    pub c_tilde: f64,
    pub alpha_deg: f64,
    /// Inverse entropy weight: `eps = 1 / lambda`.
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub layers: Vec<usize>,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub w_fit: f64,
    /// Phase-two re-matching period in sweeps, 0 for never.
    pub refresh_interval: usize,
    pub sinkhorn_iters: usize,
    pub grid_m: usize,
    pub margin: f64,
    pub seed: u64,
    /// Worker threads, 0 for the available parallelism.
    pub threads: usize,
    /// Neighbors used when normals have to be estimated.
    pub normals_k: usize,
    pub n_bins: usize,
    /// Points drawn from a ground-truth mesh before measuring distances.
    pub gt_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            out: PathBuf::from("out"),
            r: 0.025,
            c: 1.5,
            c_tilde: 1.5,
            alpha_deg: 100.0,
            lambda: 1000.0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            layers: DEFAULT_CHART_LAYERS.to_vec(),
            phase1_iters: 2000,
            phase2_iters: 1000,
            w_fit: 1.0,
            refresh_interval: 250,
            sinkhorn_iters: 500,
            grid_m: 32,
            margin: 0.0,
            seed: 0,
            threads: 0,
            normals_k: 16,
            n_bins: 100,
            gt_samples: crate::eval::DEFAULT_MESH_SAMPLES,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{key} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn eps(&self) -> f64 {
        1.0 / self.lambda
    }

    /// Sets one parameter from its textual form. Underscores and dashes in
    /// keys are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        match key.as_str() {
            "input" => self.input = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "r" => self.r = parse(&key, value)?,
            "c" => self.c = parse(&key, value)?,
            "c-tilde" => self.c_tilde = parse(&key, value)?,
            "alpha-deg" | "alpha" => self.alpha_deg = parse(&key, value)?,
            "lambda" => self.lambda = parse(&key, value)?,
            "eps" => {
                let eps: f64 = parse(&key, value)?;
                positive("eps", eps)?;
                self.lambda = 1.0 / eps;
            }
            "lr" => self.lr = parse(&key, value)?,
            "beta1" => self.beta1 = parse(&key, value)?,
            "beta2" => self.beta2 = parse(&key, value)?,
            "betas" => {
                let parts: Vec<&str> = value.split(',').collect();
                let [b1, b2] = parts.as_slice() else {
                    return Err(Error::invalid(format!(
                        "betas needs two values, got {value:?}"
                    )));
                };
                self.beta1 = parse(&key, b1.trim())?;
                self.beta2 = parse(&key, b2.trim())?;
            }
            "eps-adam" => self.eps_adam = parse(&key, value)?,
            "layers" => {
                self.layers = value
                    .split(',')
                    .map(|s| parse(&key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "phase1-iters" => self.phase1_iters = parse(&key, value)?,
            "phase2-iters" => self.phase2_iters = parse(&key, value)?,
            "w-fit" => self.w_fit = parse(&key, value)?,
            "refresh-interval" => self.refresh_interval = parse(&key, value)?,
            "sinkhorn-iters" => self.sinkhorn_iters = parse(&key, value)?,
            "grid-m" => self.grid_m = parse(&key, value)?,
            "margin" => self.margin = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "threads" => self.threads = parse(&key, value)?,
            "normals-k" => self.normals_k = parse(&key, value)?,
            "n-bins" => self.n_bins = parse(&key, value)?,
            "gt-samples" => self.gt_samples = parse(&key, value)?,
            _ => return Err(Error::invalid(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of the current values. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected key = value", k + 1))
            })?;
            self.set(key, value)
                .map_err(|e| Error::invalid(format!("config line {}: {e}", k + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_str(&text)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("r", self.r),
            ("c", self.c),
            ("c-tilde", self.c_tilde),
            ("alpha-deg", self.alpha_deg),
            ("lambda", self.lambda),
            ("lr", self.lr),
            ("eps-adam", self.eps_adam),
        ] {
            positive(k, v)?;
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.w_fit >= 0.0 && self.w_fit.is_finite()) {
            return Err(Error::invalid(format!(
                "w-fit must be non-negative, got {}",
                self.w_fit
            )));
        }
        if self.grid_m < 2 {
            return Err(Error::invalid(format!(
                "grid-m must be at least 2, got {}",
                self.grid_m
            )));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return Err(Error::invalid(format!(
                "margin must lie in [0, 0.5), got {}",
                self.margin
            )));
        }
        for (k, v) in [
            ("sinkhorn-iters", self.sinkhorn_iters),
            ("normals-k", self.normals_k),
            ("gt-samples", self.gt_samples),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{k} must be positive")));
            }
        }
        if self.n_bins < 2 {
            return Err(Error::invalid("n-bins must be at least 2"));
        }
        LayerSpec::chart(self.layers.clone())?;
        Ok(())
    }

    /// `key = value` lines that reproduce this configuration exactly.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let layers: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        let input = self
            .input
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        // `{:?}` on f64 prints the shortest string that parses back exactly
        let lines: [(&str, String); 24] = [
            ("input", input),
            ("out", self.out.display().to_string()),
            ("r", format!("{:?}", self.r)),
            ("c", format!("{:?}", self.c)),
            ("c-tilde", format!("{:?}", self.c_tilde)),
            ("alpha-deg", format!("{:?}", self.alpha_deg)),
            ("lambda", format!("{:?}", self.lambda)),
            ("lr", format!("{:?}", self.lr)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("eps-adam", format!("{:?}", self.eps_adam)),
            ("layers", layers.join(",")),
            ("phase1-iters", self.phase1_iters.to_string()),
            ("phase2-iters", self.phase2_iters.to_string()),
            ("w-fit", format!("{:?}", self.w_fit)),
            ("refresh-interval", self.refresh_interval.to_string()),
            ("sinkhorn-iters", self.sinkhorn_iters.to_string()),
            ("grid-m", self.grid_m.to_string()),
            ("margin", format!("{:?}", self.margin)),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("normals-k", self.normals_k.to_string()),
            ("n-bins", self.n_bins.to_string()),
            ("gt-samples", self.gt_samples.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "# eps = 1/lambda = {:?}", self.eps());
        s
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.eps_adam,
        }
    }

    pub fn sinkhorn(&self) -> SinkhornOptions {
        SinkhornOptions {
            eps: self.eps(),
            max_iters: self.sinkhorn_iters,
            ..SinkhornOptions::default()
        }
    }

    pub fn patch_params(&self) -> PatchParams {
        PatchParams {
            r: self.r,
            c: self.c,
            c_tilde: self.c_tilde,
            alpha_deg: self.alpha_deg,
            seed: self.seed,
        }
    }

    pub fn fit_params(&self) -> Result<FitParams> {
        Ok(FitParams {
            layers: LayerSpec::chart(self.layers.clone())?,
            sinkhorn: self.sinkhorn(),
            adam: self.adam(),
            max_iters: self.phase1_iters,
            seed: self.seed,
            ..FitParams::default()
        })
    }

    pub fn consistency_params(&self) -> ConsistencyParams {
        ConsistencyParams {
            w_fit: self.w_fit,
            max_sweeps: self.phase2_iters,
            refresh_interval: self.refresh_interval,
            adam: self.adam(),
            sinkhorn: self.sinkhorn(),
            ..ConsistencyParams::default()
        }
    }

    pub fn hyperparams(&self) -> AtlasHyperparams {
        AtlasHyperparams {
            r: self.r,
            c: self.c,
            c_tilde: self.c_tilde,
            alpha_deg: self.alpha_deg,
            eps: self.eps(),
            layers: self.layers.clone(),
            phase1_iters: self.phase1_iters,
            phase2_iters: self.phase2_iters,
            w_fit: self.w_fit,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.r, c.c, c.c_tilde, c.alpha_deg), (0.025, 1.5, 1.5, 100.0));
        assert_eq!(c.eps(), 1e-3);
        assert_eq!(
            (c.lr, c.beta1, c.beta2, c.eps_adam),
            (1e-3, 0.9, 0.999, 1e-8)
        );
        c.validate().unwrap();
    }

    #[test]
    fn echo_round_trips_exactly() {
        let c = RunConfig {
            input: Some("in put.xyz".into()),
            r: 0.1 + 0.2,
            lambda: 3.0,
            layers: vec![2, 7, 3],
            seed: u64::MAX,
            ..RunConfig::default()
        };
        let mut back = RunConfig::default();
        back.merge_str(&c.echo()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn file_syntax_and_errors() {
        let mut c = RunConfig::default();
        c.merge_str("# comment\n\nalpha_deg = 90\nbetas = 0.5, 0.6\neps=0.01\n")
            .unwrap();
        assert_eq!(c.alpha_deg, 90.0);
        assert_eq!((c.beta1, c.beta2), (0.5, 0.6));
        assert!((c.lambda - 100.0).abs() < 1e-12);
        let err = c.merge_str("r = 1\nbogus = 2\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"));
        assert!(c.merge_str("r 1\n").is_err());
        assert!(c.merge_str("seed = -1\n").is_err());
    }

    #[test]
    fn validation() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.r = 0.0));
        assert!(bad(|c| c.lambda = -1.0));
        assert!(bad(|c| c.beta2 = 1.0));
        assert!(bad(|c| c.grid_m = 1));
        assert!(bad(|c| c.margin = 0.5));
        assert!(bad(|c| c.layers = vec![2, 8, 4]));
    }
}
