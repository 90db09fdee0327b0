//! Training settings as ordered key=value assignments. A config file, the
//! repeatable `--set` flag, and the dedicated flags all funnel through the
//! same table, applied in that order so later sources win.

use std::fmt;
use std::path::Path;

use gsavatar::render::ShSource;
use gsavatar::training::TrainConfig;

/// A bad key or value; reported as a usage error, not a data error.
#[derive(Debug)]
pub struct SettingError(pub String);

impl fmt::Display for SettingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for SettingError {}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, SettingError> {
    value.parse().map_err(|_| {
        SettingError(format!("setting `{key}`: cannot parse value `{value}`"))
    })
}

/// Applies one assignment to the config. Unknown keys are rejected by name.
pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), SettingError> {
    match key {
        "epochs" => cfg.epochs = parse(key, value)?,
        "ao_start_epoch" => cfg.ao_start_epoch = parse(key, value)?,
        "ao_enabled" => cfg.ao_enabled = parse(key, value)?,
        "sh_mode" => {
            cfg.sh_source = match value {
                "hash" => ShSource::Field,
                "uv" => ShSource::Atlas,
                _ => {
                    return Err(SettingError(format!(
                        "setting `sh_mode`: expected `hash` or `uv`, got `{value}`"
                    )))
                }
            }
        }
        "lambda" => cfg.loss.lambda = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "upsampling" => cfg.upsampling = parse(key, value)?,
        "init_radius" => cfg.init_radius = parse(key, value)?,
        "atlas_size" => cfg.atlas_size = parse(key, value)?,
        "lr_centers" => cfg.rates.centers = parse(key, value)?,
        "lr_rotations" => cfg.rates.rotations = parse(key, value)?,
        "lr_log_scales" => cfg.rates.log_scales = parse(key, value)?,
        "lr_opacities" => cfg.rates.opacities = parse(key, value)?,
        "lr_joints" => cfg.rates.joints = parse(key, value)?,
        "lr_hash_tables" => cfg.rates.hash_tables = parse(key, value)?,
        "lr_mlps" => cfg.rates.mlps = parse(key, value)?,
        "lr_atlas" => cfg.rates.atlas = parse(key, value)?,
        "grid_levels" => {
            let v = parse(key, value)?;
            cfg.field_config.sh_grid.levels = v;
            cfg.field_config.disp_grid.levels = v;
            cfg.field_config.ao_grid.levels = v;
        }
        "grid_features" => {
            let v = parse(key, value)?;
            cfg.field_config.sh_grid.features = v;
            cfg.field_config.disp_grid.features = v;
            cfg.field_config.ao_grid.features = v;
        }
        "grid_table_log2" => {
            let v: u32 = parse(key, value)?;
            if v >= usize::BITS {
                return Err(SettingError(format!(
                    "setting `grid_table_log2`: {v} overflows a table size"
                )));
            }
            cfg.field_config.sh_grid.table_size = 1 << v;
            cfg.field_config.disp_grid.table_size = 1 << v;
            cfg.field_config.ao_grid.table_size = 1 << v;
        }
        "grid_base_res" => {
            let v = parse(key, value)?;
            cfg.field_config.sh_grid.base_resolution = v;
            cfg.field_config.disp_grid.base_resolution = v;
            cfg.field_config.ao_grid.base_resolution = v;
        }
        "grid_max_res" => {
            let v = parse(key, value)?;
            cfg.field_config.sh_grid.max_resolution = v;
            cfg.field_config.disp_grid.max_resolution = v;
            cfg.field_config.ao_grid.max_resolution = v;
        }
        "mlp_hidden" => cfg.field_config.mlp_hidden = parse(key, value)?,
        "mlp_hidden_layers" => cfg.field_config.mlp_hidden_layers = parse(key, value)?,
        "time_frequencies" => cfg.field_config.time_frequencies = parse(key, value)?,
        "max_displacement" => cfg.field_config.max_displacement = parse(key, value)?,
        _ => return Err(SettingError(format!("unknown setting key `{key}`"))),
    }
    Ok(())
}

/// Splits a `key=value` argument.
pub fn split_pair(arg: &str) -> Result<(&str, &str), SettingError> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| SettingError(format!("expected key=value, got `{arg}`")))
}

/// Reads a config file of `key = value` lines. Blank lines and `#` comments
/// are ignored.
pub fn load_file(cfg: &mut TrainConfig, path: &Path) -> Result<(), SettingError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SettingError(format!("config file {}: {e}", path.display())))?;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = split_pair(line)
            .map_err(|e| SettingError(format!("{} line {}: {e}", path.display(), ln + 1)))?;
        apply(cfg, key, value)
            .map_err(|e| SettingError(format!("{} line {}: {e}", path.display(), ln + 1)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignments_land_in_the_right_fields() {
        let mut cfg = TrainConfig::default();
        apply(&mut cfg, "epochs", "3").unwrap();
        apply(&mut cfg, "lambda", "0.5").unwrap();
        apply(&mut cfg, "sh_mode", "uv").unwrap();
        apply(&mut cfg, "grid_table_log2", "10").unwrap();
        apply(&mut cfg, "lr_mlps", "5e-4").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.loss.lambda, 0.5);
        assert_eq!(cfg.sh_source, ShSource::Atlas);
        assert_eq!(cfg.field_config.ao_grid.table_size, 1024);
        assert_eq!(cfg.rates.mlps, 5e-4);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_problem() {
        let mut cfg = TrainConfig::default();
        let err = apply(&mut cfg, "epoch", "3").unwrap_err();
        assert!(err.0.contains("epoch"), "{err}");
        let err = apply(&mut cfg, "epochs", "three").unwrap_err();
        assert!(err.0.contains("three"), "{err}");
        let err = apply(&mut cfg, "sh_mode", "texture").unwrap_err();
        assert!(err.0.contains("texture"), "{err}");
    }

    #[test]
    fn config_files_skip_comments_and_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        std::fs::write(&path, "# settings\nepochs = 7\n\nseed=42\n").unwrap();
        let mut cfg = TrainConfig::default();
        load_file(&mut cfg, &path).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.seed, 42);

        std::fs::write(&path, "epochs = 7\nbogus = 1\n").unwrap();
        let err = load_file(&mut cfg, &path).unwrap_err();
        assert!(err.0.contains("line 2"), "{err}");
        assert!(err.0.contains("bogus"), "{err}");
    }
}
