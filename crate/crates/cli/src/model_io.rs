//! Checkpoints with a configuration sidecar, so a saved network can be
//! rebuilt with the architecture it was trained with.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use deepicp_autodiff::{read_checkpoint, write_checkpoint};
use deepicp_net::model::DeepIcp;

use crate::config::Config;
use crate::{CliError, Result};

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".config");
    PathBuf::from(name)
}

pub fn save_model(model: &DeepIcp, config: &Config, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_checkpoint(&model.store, BufWriter::new(file))?;
    let side = sidecar_path(path);
    std::fs::write(&side, config.render()).map_err(|e| CliError::io(&side, e))
}

pub fn load_model(path: &Path) -> Result<(DeepIcp, Config)> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let config = Config::read(&sidecar_path(path))?;
    let mut model = DeepIcp::new(config.model()?)?;
    let values = read_checkpoint(BufReader::new(file)).map_err(|e| CliError::malformed(path, e.to_string()))?;
    model
        .store
        .load_values(values)
        .map_err(|e| CliError::malformed(path, e.to_string()))?;
    Ok((model, config))
}
