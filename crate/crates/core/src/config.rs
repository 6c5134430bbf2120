//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! falls back to its default; unknown or repeated keys are errors.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// `(key, description)` for every accepted key, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "base seed for init, shuffling and angle draws"),
    ("mode", "pretraining objective: ti, recon_only or invariance"),
    ("epochs", "pretraining epochs"),
    ("batch_size", "pretraining mini-batch size"),
    ("learning_rate", "pretraining learning rate (reference setting 1.5e-3)"),
    ("weight_decay", "decoupled weight decay for every optimizer"),
    ("w", "weight of the consistency terms (reference setting 0.001)"),
    ("d", "latent dimension"),
    ("r", "rank of each latent residual, 0 < r < d"),
    ("n_emb", "rotation embedding width"),
    ("emb_hidden", "hidden width of the rotation embedding"),
    ("hidden1", "first hidden width of encoder and decoder"),
    ("hidden2", "second hidden width of encoder and decoder"),
    ("head_hidden", "hidden width of the pose head"),
    ("img_size", "image side in pixels"),
    ("sigma", "rendering blob width in pixels"),
    ("n_train", "training samples"),
    ("n_val", "validation samples"),
    ("n_test", "test samples"),
    ("data_seed", "base seed of the synthetic dataset"),
    ("classic_include_original", "also reconstruct the untransformed image"),
    ("finetune_epochs", "supervised finetuning epochs"),
    ("finetune_lr", "finetuning learning rate"),
    ("finetune_batch_size", "finetuning mini-batch size"),
    ("n_seeds", "number of seeds in multi-seed comparisons"),
    ("loss_norm", "discrepancy measure of every loss term; only mse is supported"),
];

/// Keys left out of the checkpoint hash: they set how long a run lasts or
/// only affect later stages, so a run can be resumed with a longer budget.
const UNHASHED: &[&str] = &["epochs", "finetune_epochs", "finetune_lr", "finetune_batch_size", "n_seeds"];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: {key} = {v:?} is not a valid number")))
}

fn parse_bool(key: &str, v: &str, line: usize) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: {key} must be true or false, got {v:?}"))),
    }
}

/// Sets one key. `line` is used in error messages.
pub fn set_key(cfg: &mut TrainConfig, key: &str, value: &str, line: usize) -> Result<()> {
    let v = value;
    match key {
        "seed" => cfg.seed = parse_num(key, v, line)?,
        "mode" => cfg.mode = v.parse().map_err(|e: Error| Error::Config(format!("line {line}: {e}")))?,
        "epochs" => cfg.epochs = parse_num(key, v, line)?,
        "batch_size" => cfg.batch_size = parse_num(key, v, line)?,
        "learning_rate" => cfg.learning_rate = parse_num(key, v, line)?,
        "weight_decay" => cfg.weight_decay = parse_num(key, v, line)?,
        "w" => cfg.w = parse_num(key, v, line)?,
        "d" => cfg.d = parse_num(key, v, line)?,
        "r" => cfg.r = parse_num(key, v, line)?,
        "n_emb" => cfg.n_emb = parse_num(key, v, line)?,
        "emb_hidden" => cfg.emb_hidden = parse_num(key, v, line)?,
        "hidden1" => cfg.hidden1 = parse_num(key, v, line)?,
        "hidden2" => cfg.hidden2 = parse_num(key, v, line)?,
        "head_hidden" => cfg.head_hidden = parse_num(key, v, line)?,
        "img_size" => cfg.img_size = parse_num(key, v, line)?,
        "sigma" => cfg.sigma = parse_num(key, v, line)?,
        "n_train" => cfg.n_train = parse_num(key, v, line)?,
        "n_val" => cfg.n_val = parse_num(key, v, line)?,
        "n_test" => cfg.n_test = parse_num(key, v, line)?,
        "data_seed" => cfg.data_seed = parse_num(key, v, line)?,
        "classic_include_original" => cfg.classic_include_original = parse_bool(key, v, line)?,
        "finetune_epochs" => cfg.finetune_epochs = parse_num(key, v, line)?,
        "finetune_lr" => cfg.finetune_lr = parse_num(key, v, line)?,
        "finetune_batch_size" => cfg.finetune_batch_size = parse_num(key, v, line)?,
        "n_seeds" => cfg.n_seeds = parse_num(key, v, line)?,
        "loss_norm" => {
            if v != "mse" {
                return Err(Error::Config(format!("line {line}: loss_norm must be mse, got {v:?}")));
            }
        }
        _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
    }
    Ok(())
}

/// Parses config text over the defaults and validates the result.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {n}: expected key = value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if seen.iter().any(|s| s == k) {
            return Err(Error::Config(format!("line {n}: key {k:?} given twice")));
        }
        set_key(&mut cfg, k, v, n)?;
        seen.push(k.to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn value_of(cfg: &TrainConfig, key: &str) -> String {
    match key {
        "seed" => cfg.seed.to_string(),
        "mode" => cfg.mode.to_string(),
        "epochs" => cfg.epochs.to_string(),
        "batch_size" => cfg.batch_size.to_string(),
        "learning_rate" => format!("{:?}", cfg.learning_rate),
        "weight_decay" => format!("{:?}", cfg.weight_decay),
        "w" => format!("{:?}", cfg.w),
        "d" => cfg.d.to_string(),
        "r" => cfg.r.to_string(),
        "n_emb" => cfg.n_emb.to_string(),
        "emb_hidden" => cfg.emb_hidden.to_string(),
        "hidden1" => cfg.hidden1.to_string(),
        "hidden2" => cfg.hidden2.to_string(),
        "head_hidden" => cfg.head_hidden.to_string(),
        "img_size" => cfg.img_size.to_string(),
        "sigma" => format!("{:?}", cfg.sigma),
        "n_train" => cfg.n_train.to_string(),
        "n_val" => cfg.n_val.to_string(),
        "n_test" => cfg.n_test.to_string(),
        "data_seed" => cfg.data_seed.to_string(),
        "classic_include_original" => cfg.classic_include_original.to_string(),
        "finetune_epochs" => cfg.finetune_epochs.to_string(),
        "finetune_lr" => format!("{:?}", cfg.finetune_lr),
        "finetune_batch_size" => cfg.finetune_batch_size.to_string(),
        "n_seeds" => cfg.n_seeds.to_string(),
        "loss_norm" => "mse".to_string(),
        _ => unreachable!("key list and accessor disagree"),
    }
}

/// Canonical text form; parses back to an equal config.
pub fn config_to_text(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    for (k, doc) in KEYS {
        out.push_str(&format!("# {doc}\n{k} = {}\n", value_of(cfg, k)));
    }
    out
}

/// Hash over every key that shapes a pretraining trajectory.
pub fn config_hash(cfg: &TrainConfig) -> u64 {
    let mut h = Sha256::new();
    for (k, _) in KEYS {
        if !UNHASHED.contains(k) {
            h.update(format!("{k}={}\n", value_of(cfg, k)).as_bytes());
        }
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Mode;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), TrainConfig::default());
        assert_eq!(parse_config("# nothing\n\n   \n").unwrap(), TrainConfig::default());
    }

    #[test]
    fn keys_comments_and_whitespace() {
        let cfg = parse_config("epochs = 3 # short\n  w=0.5\nmode = invariance\nclassic_include_original = false\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.w, 0.5);
        assert_eq!(cfg.mode, Mode::Invariance);
        assert!(!cfg.classic_include_original);
    }

    #[test]
    fn rejects_bad_input_with_line_numbers() {
        let cases = [
            ("epochs = 3\nbogus = 1\n", "line 2"),
            ("epochs = three\n", "line 1"),
            ("\n\njust text\n", "line 3"),
            ("w = 1\nw = 2\n", "line 2"),
            ("mode = fancy\n", "line 1"),
            ("loss_norm = l1\n", "line 1"),
            ("classic_include_original = yes\n", "line 1"),
        ];
        for (text, needle) in cases {
            match parse_config(text) {
                Err(Error::Config(msg)) => assert!(msg.contains(needle), "{text:?}: {msg}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
        assert!(matches!(parse_config("w = -1\n"), Err(Error::Config(_))));
        assert!(matches!(parse_config("r = 64\n"), Err(Error::Config(_))));
    }

    #[test]
    fn text_form_round_trips() {
        let cfg = TrainConfig {
            seed: 9,
            w: 0.125,
            mode: Mode::ReconOnly,
            sigma: 0.7,
            ..TrainConfig::default()
        };
        let text = config_to_text(&cfg);
        assert_eq!(parse_config(&text).unwrap(), cfg);
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), KEYS.len());
    }

    #[test]
    fn hash_ignores_budget_keys_only() {
        let base = TrainConfig::default();
        let longer = TrainConfig { epochs: 99, finetune_epochs: 7, ..base.clone() };
        assert_eq!(config_hash(&base), config_hash(&longer));
        let other = TrainConfig { seed: 1, ..base.clone() };
        assert_ne!(config_hash(&base), config_hash(&other));
        let other = TrainConfig { mode: Mode::Invariance, ..base.clone() };
        assert_ne!(config_hash(&base), config_hash(&other));
    }
}
