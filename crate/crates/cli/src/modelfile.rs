//! `model.json`: what `train` leaves next to `model.ntw` so that the other
//! subcommands can rebuild the network.

use std::fs;
use std::path::Path;

use anyhow::Context;
use musa::model::{load_weights, LayerSpec, Model};
use musa::Shape4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Architecture;

pub const WEIGHTS_FILE: &str = "model.ntw";
pub const DESCRIPTION_FILE: &str = "model.json";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub architecture: Architecture,
    /// Height, width, channels.
    pub input: [usize; 3],
    pub class_names: Vec<String>,
    pub layers: Vec<LayerSpec>,
}

impl ModelFile {
    pub fn describe(architecture: Architecture, model: &Model, class_names: &[String]) -> Self {
        let s = model.input_shape();
        Self {
            architecture,
            input: [s.height, s.width, s.channels],
            class_names: class_names.to_vec(),
            layers: model.layers().to_vec(),
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(DESCRIPTION_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Rebuilds the model described in `dir` and binds its weights strictly.
pub fn load(dir: &Path) -> anyhow::Result<(Model, ModelFile)> {
    let path = dir.join(DESCRIPTION_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| musa::Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| musa::Error::Data(format!("{}: {e}", path.display())))?;
    let [h, w, c] = file.input;
    let input = Shape4::new(h, w, c)?;
    let mut model = Model::new(input, file.layers.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    if model.num_outputs() != file.class_names.len() {
        return Err(musa::Error::Data(format!(
            "{} lists {} classes but the model predicts {}",
            path.display(),
            file.class_names.len(),
            model.num_outputs()
        ))
        .into());
    }
    load_weights(&mut model, &dir.join(WEIGHTS_FILE))?;
    Ok((model, file))
}
