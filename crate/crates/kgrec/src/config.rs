//! Plain `key = value` run-configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Keys mirror the [`TrainConfig`] field names. Values given on the command
//! line take precedence over the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
}

/// Apply one key/value pair to a config. Unknown keys are an error.
pub fn apply_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "epochs" => cfg.epochs = parse_as(key, value)?,
        "batch_size" => cfg.batch_size = parse_as(key, value)?,
        "lr" => cfg.lr = parse_as(key, value)?,
        "theta1" => cfg.theta1 = parse_as(key, value)?,
        "theta2" => cfg.theta2 = parse_as(key, value)?,
        "tau" => cfg.tau = parse_as(key, value)?,
        "dim" => cfg.dim = parse_as(key, value)?,
        "layers" => cfg.layers = parse_as(key, value)?,
        "xi" => cfg.xi = parse_as(key, value)?,
        "num_paths" => cfg.num_paths = parse_as(key, value)?,
        "path_length" => cfg.path_length = parse_as(key, value)?,
        "restart_prob" => cfg.restart_prob = parse_as(key, value)?,
        "t_max" => cfg.t_max = parse_as(key, value)?,
        "beta_start" => cfg.beta_start = parse_as(key, value)?,
        "beta_end" => cfg.beta_end = parse_as(key, value)?,
        "top_q" => cfg.top_q = parse_as(key, value)?,
        "refresh_period" => cfg.refresh_period = parse_as(key, value)?,
        "denoiser_epochs" => cfg.denoiser_epochs = parse_as(key, value)?,
        "denoiser_lr" => cfg.denoiser_lr = parse_as(key, value)?,
        "denoiser_batch" => cfg.denoiser_batch = parse_as(key, value)?,
        "denoiser_hidden" => cfg.denoiser_hidden = parse_as(key, value)?,
        "step_dim" => cfg.step_dim = parse_as(key, value)?,
        "negatives" => cfg.negatives = parse_as(key, value)?,
        "init_scale" => cfg.init_scale = parse_as(key, value)?,
        "seed" => cfg.seed = parse_as(key, value)?,
        "top_n" => cfg.top_n = parse_as(key, value)?,
        "eval_every" => cfg.eval_every = parse_as(key, value)?,
        "disable_attention" => cfg.disable_attention = parse_as(key, value)?,
        "disable_guidance" => cfg.disable_guidance = parse_as(key, value)?,
        "disable_contrastive" => cfg.disable_contrastive = parse_as(key, value)?,
        _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

/// Load a config file on top of the defaults.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    apply_config_file(&mut cfg, path)?;
    Ok(cfg)
}

/// Apply a config file to an existing config.
pub fn apply_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected `key = value`, got {raw:?}",
                path.display(),
                lineno + 1
            )));
        };
        apply_key(cfg, key.trim(), value.trim())
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn parses_values_comments_and_blanks() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# a comment").unwrap();
        writeln!(f, "epochs = 7").unwrap();
        writeln!(f).unwrap();
        writeln!(f, "lr = 0.5   # trailing comment").unwrap();
        writeln!(f, "disable_guidance = true").unwrap();
        let cfg = load_config(f.path()).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.lr, 0.5);
        assert!(cfg.disable_guidance);
        assert_eq!(cfg.dim, TrainConfig::default().dim);
    }

    #[test]
    fn unknown_key_fails_with_location() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "not_a_key = 1").unwrap();
        let err = load_config(f.path()).unwrap_err().to_string();
        assert!(err.contains("not_a_key"), "{err}");
        assert!(err.contains(":1"), "{err}");
    }

    #[test]
    fn bad_value_and_missing_equals_fail() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "epochs = banana").unwrap();
        assert!(load_config(f.path()).is_err());

        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "epochs 5").unwrap();
        assert!(load_config(g.path()).is_err());
    }

    #[test]
    fn every_field_is_reachable() {
        let mut cfg = TrainConfig::default();
        for (k, v) in [
            ("epochs", "1"),
            ("batch_size", "2"),
            ("lr", "0.1"),
            ("theta1", "0.2"),
            ("theta2", "0.3"),
            ("tau", "0.4"),
            ("dim", "3"),
            ("layers", "4"),
            ("xi", "0.5"),
            ("num_paths", "5"),
            ("path_length", "6"),
            ("restart_prob", "0.6"),
            ("t_max", "7"),
            ("beta_start", "0.001"),
            ("beta_end", "0.01"),
            ("top_q", "8"),
            ("refresh_period", "9"),
            ("denoiser_epochs", "10"),
            ("denoiser_lr", "0.7"),
            ("denoiser_batch", "11"),
            ("denoiser_hidden", "12"),
            ("step_dim", "13"),
            ("negatives", "14"),
            ("init_scale", "0.8"),
            ("seed", "15"),
            ("top_n", "16"),
            ("eval_every", "17"),
            ("disable_attention", "true"),
            ("disable_guidance", "true"),
            ("disable_contrastive", "true"),
        ] {
            apply_key(&mut cfg, k, v).unwrap();
        }
        assert_eq!(cfg.epochs, 1);
        assert_eq!(cfg.seed, 15);
        assert!(cfg.disable_contrastive);
    }
}
