//! Flat `key = value` run configuration.
//!
//! Every key must be present and unknown keys are rejected, so a config file
//! (or the manifest written next to every output) fully determines a run.
//! Command-line flags may override `seed`, `out_dir` and `mode`; nothing is
//! read from the environment.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticConfig;
use crate::error::{FclError, Result};
use crate::evaluation::ProbeConfig;
use crate::federation::{ExperimentConfig, Mode, RoundConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,

    pub num_clients: usize,
    pub volumes_per_client: usize,
    pub slices_per_volume: usize,
    pub partitions: usize,
    pub image_side: usize,
    pub template_strength: f64,
    pub noise_sigma: f64,

    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub bank_capacity: usize,
    pub min_bank_fill: usize,
    pub temperature: f64,
    pub mode: String,
    pub serialize_exchange: bool,

    pub label_budgets: Vec<usize>,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub folds: usize,
    pub eval_arms: Vec<String>,
    pub eval_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_experiment(&ExperimentConfig::default(), "out", &Mode::ALL, 3)
    }
}

impl RunConfig {
    pub fn from_experiment(
        cfg: &ExperimentConfig,
        out_dir: &str,
        arms: &[Mode],
        eval_seeds: usize,
    ) -> Self {
        let d = &cfg.data;
        let r = &cfg.round;
        let p = &cfg.probe;
        RunConfig {
            seed: cfg.seed,
            out_dir: out_dir.to_string(),
            num_clients: d.num_clients,
            volumes_per_client: d.volumes_per_client,
            slices_per_volume: d.slices_per_volume,
            partitions: d.partitions,
            image_side: d.image_side,
            template_strength: d.template_strength,
            noise_sigma: d.noise_sigma,
            hidden_dim: r.hidden_dim,
            embed_dim: r.embed_dim,
            rounds: r.rounds,
            local_steps: r.local_steps,
            batch_size: r.batch_size,
            lr: r.lr,
            momentum: r.momentum,
            bank_capacity: r.bank_capacity,
            min_bank_fill: r.min_bank_fill,
            temperature: r.temperature,
            mode: r.mode.to_string(),
            serialize_exchange: r.serialize_exchange,
            label_budgets: p.budgets.clone(),
            probe_epochs: p.epochs,
            probe_lr: p.lr,
            folds: p.folds,
            eval_arms: arms.iter().map(Mode::to_string).collect(),
            eval_seeds,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = field_from_message(&msg).unwrap_or("<file>").to_string();
            FclError::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            FclError::config("--config", format!("cannot read {}: {e}", path.display()))
        })?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment()?.validate()?;
        self.arms()?;
        if self.eval_seeds == 0 {
            return Err(FclError::config("eval_seeds", "must be ≥ 1"));
        }
        if self.label_budgets.is_empty() {
            return Err(FclError::config(
                "label_budgets",
                "must list at least one budget",
            ));
        }
        Ok(())
    }

    pub fn mode(&self) -> Result<Mode> {
        self.mode.parse()
    }

    pub fn arms(&self) -> Result<Vec<Mode>> {
        if self.eval_arms.is_empty() {
            return Err(FclError::config("eval_arms", "must list at least one arm"));
        }
        self.eval_arms
            .iter()
            .map(|a| {
                a.parse()
                    .map_err(|_| FclError::config("eval_arms", format!("unknown arm `{a}`")))
            })
            .collect()
    }

    /// `seed, seed + 1, …` for the ablation.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.eval_seeds as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            seed: self.seed,
            data: SyntheticConfig {
                num_clients: self.num_clients,
                volumes_per_client: self.volumes_per_client,
                slices_per_volume: self.slices_per_volume,
                partitions: self.partitions,
                image_side: self.image_side,
                template_strength: self.template_strength,
                noise_sigma: self.noise_sigma,
                seed: self.seed,
            },
            round: RoundConfig {
                rounds: self.rounds,
                local_steps: self.local_steps,
                batch_size: self.batch_size,
                lr: self.lr,
                momentum: self.momentum,
                bank_capacity: self.bank_capacity,
                min_bank_fill: self.min_bank_fill,
                temperature: self.temperature,
                mode: self.mode()?,
                hidden_dim: self.hidden_dim,
                embed_dim: self.embed_dim,
                serialize_exchange: self.serialize_exchange,
            },
            probe: ProbeConfig {
                budgets: self.label_budgets.clone(),
                epochs: self.probe_epochs,
                lr: self.probe_lr,
                folds: self.folds,
            },
        })
    }

    /// Canonical text form; parsing it yields this config again.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical().as_bytes()))
    }

    /// A manifest is the canonical config preceded by comment lines, so it
    /// can be fed back as `--config`.
    pub fn manifest(&self, command: &str) -> String {
        format!(
            "# fedcl manifest\n# command = {command}\n# config_hash = {}\n# seed = {}\n{}",
            self.hash(),
            self.seed,
            self.to_canonical()
        )
    }
}

fn field_from_message(msg: &str) -> Option<&str> {
    // serde messages quote the offending field in backticks
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_text_and_manifest() {
        let cfg = RunConfig::default();
        let text = cfg.to_canonical();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        let manifest = cfg.manifest("pretrain");
        let back = RunConfig::parse(&manifest).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(manifest.contains(&cfg.hash()));
    }

    #[test]
    fn missing_and_unknown_fields_are_named() {
        let text = RunConfig::default().to_canonical();
        let without: String = text
            .lines()
            .filter(|l| !l.starts_with("rounds "))
            .map(|l| format!("{l}\n"))
            .collect();
        match RunConfig::parse(&without) {
            Err(FclError::Config { field, .. }) => assert_eq!(field, "rounds"),
            other => panic!("{other:?}"),
        }
        let extra = format!("{text}bogus = 1\n");
        match RunConfig::parse(&extra) {
            Err(FclError::Config { field, .. }) => assert_eq!(field, "bogus"),
            other => panic!("{other:?}"),
        }
        let bad_arm = text.replace("mode = \"fe_gsm\"", "mode = \"swav\"");
        match RunConfig::parse(&bad_arm) {
            Err(FclError::Config { field, .. }) => assert_eq!(field, "mode"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_depends_on_content() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: 1,
            ..a.clone()
        };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_eq!(a.seeds(), vec![0, 1, 2]);
    }
}
