//! Experiment configuration: a TOML document with CLI flag overrides
//! (flags win over the file). The fully resolved config is embedded in
//! every output file so results are regenerable from their own artifacts.

use std::path::{Path, PathBuf};

use bup_core::train::TrainConfig;
use bup_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Normal,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MethodSelection {
    Bup,
    Gcn,
    Both,
}

impl MethodSelection {
    pub fn includes_bup(self) -> bool {
        matches!(self, MethodSelection::Bup | MethodSelection::Both)
    }

    pub fn includes_gcn(self) -> bool {
        matches!(self, MethodSelection::Gcn | MethodSelection::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Experiment label used in provenance and the aggregate table.
    pub name: String,
    pub mode: Mode,
    /// Directory holding `<dataset_name>.content` / `<dataset_name>.cites`;
    /// ignored when explicit paths are given.
    pub dataset_dir: Option<PathBuf>,
    pub dataset_name: String,
    pub content_path: Option<PathBuf>,
    pub cites_path: Option<PathBuf>,
    pub per_class: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seeds: Vec<u64>,
    /// Held-out class for OOD mode; defaults to the last class index.
    pub ood_class: Option<usize>,
    pub out_dir: PathBuf,
    pub method: MethodSelection,
    pub row_normalize: bool,
    pub num_bins: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            mode: Mode::Normal,
            dataset_dir: None,
            dataset_name: "cora".into(),
            content_path: None,
            cites_path: None,
            per_class: 20,
            val_size: 200,
            test_size: 2000,
            seeds: (0..10).collect(),
            ood_class: None,
            out_dir: PathBuf::from("runs/experiment"),
            method: MethodSelection::Both,
            row_normalize: true,
            num_bins: 10,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))
    }

    /// Paths to the content/cites pair, from explicit settings or
    /// `dataset_dir`/`dataset_name`.
    pub fn resolved_paths(&self) -> Result<(PathBuf, PathBuf)> {
        match (&self.content_path, &self.cites_path) {
            (Some(c), Some(e)) => Ok((c.clone(), e.clone())),
            (None, None) => {
                let dir = self.dataset_dir.as_ref().ok_or_else(|| {
                    Error::input(
                        "set either content_path/cites_path or dataset_dir in the config (or pass --dataset-dir)",
                    )
                })?;
                Ok((
                    dir.join(format!("{}.content", self.dataset_name)),
                    dir.join(format!("{}.cites", self.dataset_name)),
                ))
            }
            _ => Err(Error::input(
                "content_path and cites_path must be set together",
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::input("at least one seed is required"));
        }
        if self.num_bins == 0 {
            return Err(Error::input("num_bins must be positive"));
        }
        self.train.validate()
    }

    /// Full resolved provenance for one command invocation; embedded in
    /// every output file.
    pub fn provenance(&self, command: &str, seed: Option<u64>) -> serde_json::Value {
        let mut value = serde_json::json!({
            "command": command,
            "config": self,
        });
        if let Some(s) = seed {
            value["seed"] = serde_json::json!(s);
        }
        value
    }
}

/// Flag overrides shared by all subcommands; flags win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset_dir: Option<PathBuf>,
    pub per_class: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub mode: Option<Mode>,
    pub ood_class: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(dir) = &o.dataset_dir {
            self.dataset_dir = Some(dir.clone());
            self.content_path = None;
            self.cites_path = None;
        }
        if let Some(p) = o.per_class {
            self.per_class = p;
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(c) = o.ood_class {
            self.ood_class = Some(c);
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_with_partial_file() {
        let text = r#"
            name = "toy"
            mode = "ood"
            dataset_dir = "data"
            dataset_name = "toy"
            per_class = 2
            seeds = [1, 2]

            [train]
            learning_rate = 0.02
            adam_beta1 = 0.9
            adam_beta2 = 0.999
            adam_eps = 1e-8
            weight_decay = 0.0005
            max_epochs = 50
            patience = 10
            seed = 0
            lambda = 1.0
            hidden_width = 8
            num_layers = 2
            mc_samples_eval = 64
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.mode, Mode::Ood);
        assert_eq!(cfg.per_class, 2);
        assert_eq!(cfg.train.max_epochs, 50);
        // unspecified fields fall back to defaults
        assert_eq!(cfg.val_size, 200);
        assert_eq!(cfg.method, MethodSelection::Both);
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.per_class = 5;
        let o = Overrides {
            per_class: Some(10),
            mode: Some(Mode::Ood),
            seeds: Some(vec![7]),
            ..Default::default()
        };
        cfg.apply_overrides(&o);
        assert_eq!(cfg.per_class, 10);
        assert_eq!(cfg.mode, Mode::Ood);
        assert_eq!(cfg.seeds, vec![7]);
    }

    #[test]
    fn dataset_dir_override_clears_explicit_paths() {
        let mut cfg = ExperimentConfig::default();
        cfg.content_path = Some("x.content".into());
        cfg.cites_path = Some("x.cites".into());
        cfg.apply_overrides(&Overrides {
            dataset_dir: Some("data".into()),
            ..Default::default()
        });
        let (content, cites) = cfg.resolved_paths().unwrap();
        assert_eq!(content, PathBuf::from("data/cora.content"));
        assert_eq!(cites, PathBuf::from("data/cora.cites"));
    }

    #[test]
    fn missing_paths_are_an_input_error() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.resolved_paths().is_err());
    }
}
