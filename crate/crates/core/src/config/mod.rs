//! Run configuration: one text file with `[maze]`, `[data]`, `[model]`,
//! `[train]`, `[eval]` and `[paths]` sections. Unknown sections and keys
//! are rejected; omitted keys take the desk-scale defaults.

pub mod text;

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::DataConfig;
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::train::TrainerConfig;
use text::{write_section, ConfigError, Document};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub eval_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            run_dir: "runs/default".into(),
            eval_dir: "runs/default/eval".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainerConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}


impl RunConfig {
    pub fn from_text(text: &str) -> Result<RunConfig, ConfigError> {
        let mut doc = Document::parse(text)?;
        let d = RunConfig::default();

        let mut s = doc.take("maze");
        let width = s.get("width", d.data.width)?;
        let height = s.get("height", d.data.height)?;
        let n_objects = s.get("n_objects", d.data.n_objects)?;
        let window_radius = s.get("window_radius", d.data.window_radius)?;
        s.finish()?;

        let mut s = doc.take("data");
        let data = DataConfig {
            n_envs: s.get("n_envs", d.data.n_envs)?,
            stream_length: s.get("stream_length", d.data.stream_length)?,
            master_seed: s.get("seed", d.data.master_seed)?,
            width,
            height,
            n_objects,
            window_radius,
        };
        s.finish()?;

        let mut s = doc.take("model");
        let model = ModelConfig::read_dims(
            &mut s,
            ModelConfig {
                window_radius,
                n_objects,
                ..d.model
            },
        )?;
        s.finish()?;

        let mut s = doc.take("train");
        let train = TrainerConfig::read(&mut s)?;
        s.finish()?;

        let mut s = doc.take("eval");
        let eval = EvalConfig::read(&mut s)?;
        s.finish()?;

        let mut s = doc.take("paths");
        let paths = Paths {
            data_dir: s.get("data_dir", d.paths.data_dir)?,
            run_dir: s.get("run_dir", d.paths.run_dir)?,
            eval_dir: s.get("eval_dir", d.paths.eval_dir)?,
        };
        s.finish()?;
        doc.finish()?;

        let cfg = RunConfig {
            data,
            model,
            train,
            eval,
            paths,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        RunConfig::from_text(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.data.validate().map_err(|e| invalid(&e))?;
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.eval.validate().map_err(|e| invalid(&e))?;
        if self.train.seg_len > self.data.stream_length {
            return Err(ConfigError::Invalid(format!(
                "segment_length {} exceeds stream_length {}",
                self.train.seg_len, self.data.stream_length
            )));
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_section(
            &mut out,
            "maze",
            &[
                ("width", self.data.width.to_string()),
                ("height", self.data.height.to_string()),
                ("n_objects", self.data.n_objects.to_string()),
                ("window_radius", self.data.window_radius.to_string()),
            ],
        );
        out.push('\n');
        write_section(
            &mut out,
            "data",
            &[
                ("n_envs", self.data.n_envs.to_string()),
                ("stream_length", self.data.stream_length.to_string()),
                ("seed", self.data.master_seed.to_string()),
            ],
        );
        out.push('\n');
        write_section(&mut out, "model", &self.model.dim_entries());
        out.push('\n');
        self.train.write(&mut out);
        out.push('\n');
        self.eval.write(&mut out);
        out.push('\n');
        write_section(
            &mut out,
            "paths",
            &[
                ("data_dir", self.paths.data_dir.display().to_string()),
                ("run_dir", self.paths.run_dir.display().to_string()),
                ("eval_dir", self.paths.eval_dir.display().to_string()),
            ],
        );
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::StateMode;
    use crate::train::Mode;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(RunConfig::from_text("").unwrap(), cfg);
    }

    #[test]
    fn overrides_and_shared_maze_keys() {
        let text = "[maze]\nwindow_radius = 1\nn_objects = 3\n[train]\nmode = stateless\n[eval]\nstate_mode = reset-per-task\n";
        let cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.model.window_radius, 1);
        assert_eq!(cfg.model.n_objects, 3);
        assert_eq!(cfg.data.window_radius, 1);
        assert_eq!(cfg.train.mode, Mode::Stateless);
        assert_eq!(cfg.eval.state_mode, StateMode::ResetPerTask);
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            RunConfig::from_text("[train]\nmomentum = 0.9\n"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(RunConfig::from_text("[optim]\nx = 1\n"), Err(ConfigError::UnknownSection(_))));
        assert!(matches!(RunConfig::from_text("[data]\nstream_length = 0\n"), Err(ConfigError::Invalid(_))));
        assert!(RunConfig::from_text("[train]\nmode = sometimes\n").is_err());
        assert!(RunConfig::from_text("[data]\nstream_length = 10\n[train]\nsegment_length = 64\n").is_err());
    }
}
