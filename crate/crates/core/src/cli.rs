//! Command-line front end. Every command writes into one output directory.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::{config_hash, parse_config};
use crate::data::{make_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRow, CSV_COLUMNS};
use crate::train::{evaluate_pose, run_finetune, run_pretrain, Mode, Network, PretrainState, TrainConfig};
use crate::verify::{correct_compose, sign_flipped_compose, verify_group, ComposeFn, VERIFY_TOL};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

pub const DATASET_FILE: &str = "dataset.bin";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Parser)]
#[command(name = "isomorph", version, about = "Flip/rotation-isomorphic latent pretraining for hand pose regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the flip/rotation group laws on random operands.
    VerifyGroup {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Generate the synthetic dataset cache.
    GenData(Common),
    /// Pretrain encoder, decoder and latent transforms.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
        /// Continue from the checkpoint of the same mode and seed.
        #[arg(long)]
        resume: bool,
    },
    /// Finetune an encoder with a fresh pose head.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretraining checkpoint; a random encoder is used without one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a finetuned checkpoint on every split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Merge every metrics CSV in the output directory.
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Dataset cache to use instead of the output directory's.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) => EXIT_CONFIG,
        Error::NonFinite(_) | Error::Degenerate(_) => EXIT_NUMERIC,
        Error::Data(_) | Error::Io(_) | Error::Shape { .. } | Error::State(_) => EXIT_DATA,
    }
}

/// Exclusive hold on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "{} is held by another run; delete it if that run is gone",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            parse_config(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                other => other,
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The dataset for `cfg`: `--data` if given, else the cache in the output
/// directory, generated on first use.
fn obtain_dataset(common: &Common, cfg: &TrainConfig) -> Result<Dataset> {
    let dc = cfg.data_config();
    if let Some(p) = &common.data {
        return Dataset::load_checked(p, &dc);
    }
    let p = common.out.join(DATASET_FILE);
    if p.exists() {
        return Dataset::load_checked(&p, &dc);
    }
    let ds = make_dataset(&dc)?;
    ds.save(&p)?;
    Ok(ds)
}

pub fn pretrain_stem(mode: Mode, seed: u64) -> String {
    format!("pretrain_{mode}_s{seed}")
}

pub fn finetune_stem(label: &str, seed: u64) -> String {
    format!("finetune_{label}_s{seed}")
}

fn csv_writer(path: &Path, append: bool) -> Result<csv::Writer<File>> {
    let exists = append && path.exists() && fs::metadata(path)?.len() > 0;
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    if !exists {
        w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    }
    Ok(w)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Data(format!("csv: {other:?}")),
    }
}

fn write_rows(w: &mut csv::Writer<File>, rows: &[MetricsRow]) -> Result<()> {
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::VerifyGroup { trials, seed, fault } => verify_cmd(trials, seed, fault.as_deref()),
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            let _lock = DirLock::acquire(&common.out)?;
            let ds = make_dataset(&cfg.data_config())?;
            let p = common.out.join(DATASET_FILE);
            ds.save(&p)?;
            println!(
                "wrote {} ({} train, {} val, {} test, {}×{} px)",
                p.display(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                cfg.img_size,
                cfg.img_size
            );
            Ok(0)
        }
        Command::Pretrain { common, mode, resume } => pretrain_cmd(&common, mode, resume),
        Command::Finetune { common, checkpoint } => finetune_cmd(&common, checkpoint.as_deref()),
        Command::Eval { common, checkpoint } => eval_cmd(&common, &checkpoint),
        Command::Report { out } => {
            let s = report(&out)?;
            print!("{}", s.table);
            fs::write(out.join("summary.json"), serde_json::to_string_pretty(&s.summary).map_err(|e| Error::Data(e.to_string()))? + "\n")?;
            Ok(0)
        }
    }
}

fn verify_cmd(trials: usize, seed: u64, fault: Option<&str>) -> Result<i32> {
    let compose: ComposeFn = match fault {
        None => correct_compose,
        Some("sign-flip") => sign_flipped_compose,
        Some(f) => return Err(Error::Config(format!("unknown fault {f:?}"))),
    };
    let report = verify_group(trials, seed, compose)?;
    print!("{}", report.render(VERIFY_TOL));
    Ok(if report.passed(VERIFY_TOL) { 0 } else { EXIT_VERIFY })
}

fn pretrain_cmd(common: &Common, mode: Option<Mode>, resume: bool) -> Result<i32> {
    let mut cfg = load_config(common)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let _lock = DirLock::acquire(&common.out)?;
    let ds = obtain_dataset(common, &cfg)?;
    let stem = pretrain_stem(cfg.mode, cfg.seed);
    let ckpt_path = common.out.join(format!("{stem}.ckpt"));
    let csv_path = common.out.join(format!("{stem}.csv"));
    let mut state = if resume {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.kind != CheckpointKind::Pretrain || ck.config_hash != config_hash(&cfg) {
            return Err(Error::Config(format!(
                "{} was written with a different configuration",
                ckpt_path.display()
            )));
        }
        let mut st = ck.to_pretrain()?;
        st.config = cfg.clone();
        log::info!("resuming {stem} after epoch {}", st.epoch);
        st
    } else {
        PretrainState::new(&cfg)?
    };
    let mut w = csv_writer(&csv_path, resume)?;
    let run_id = format!("{}-s{}", cfg.mode, cfg.seed);
    run_pretrain(&mut state, &ds, &run_id, |st, rows| {
        write_rows(&mut w, rows)?;
        Checkpoint::from_pretrain(st).save(&ckpt_path)
    })?;
    println!("{run_id}: {} epochs, wrote {} and {}", state.epoch, csv_path.display(), ckpt_path.display());
    Ok(0)
}

fn finetune_cmd(common: &Common, checkpoint: Option<&Path>) -> Result<i32> {
    let cfg = load_config(common)?;
    let _lock = DirLock::acquire(&common.out)?;
    let (init, label) = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let st = ck.to_pretrain()?;
            if st.config.d == cfg.d && st.config.dims() != cfg.dims() {
                return Err(Error::Shape {
                    op: "finetune encoder",
                    left: (st.config.hidden1, st.config.hidden2),
                    right: (cfg.hidden1, cfg.hidden2),
                });
            }
            (st.net.model, ck.label.clone())
        }
        None => (Network::init(&cfg)?.model, "random".to_string()),
    };
    let ds = obtain_dataset(common, &cfg)?;
    let stem = finetune_stem(&label, cfg.seed);
    let run_id = format!("ft-{label}-s{}", cfg.seed);
    let (model, outcome) = run_finetune(&init, &cfg, &ds, &run_id, &label)?;
    let csv_path = common.out.join(format!("{stem}.csv"));
    let mut w = csv_writer(&csv_path, false)?;
    write_rows(&mut w, &outcome.rows)?;
    let ckpt_path = common.out.join(format!("{stem}.ckpt"));
    Checkpoint::from_finetune(&cfg, &label, &model, &outcome).save(&ckpt_path)?;
    let last = outcome.rows.last().and_then(|r| r.mpjpe).unwrap_or(f64::NAN);
    println!("{run_id}: final val mpjpe {last:.6}, wrote {}", csv_path.display());
    Ok(0)
}

fn eval_cmd(common: &Common, checkpoint: &Path) -> Result<i32> {
    let ck = Checkpoint::load(checkpoint)?;
    let (cfg, model) = ck.to_pose()?;
    let _lock = DirLock::acquire(&common.out)?;
    let ds = obtain_dataset(common, &cfg)?;
    let run_id = format!("eval-{}-s{}", ck.label, cfg.seed);
    let mut rows = Vec::new();
    for (split, samples) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        if samples.is_empty() {
            continue;
        }
        let (m, pa) = evaluate_pose(&model, samples)?;
        println!("{run_id} {split:<5} mpjpe {m:.6} pa_mpjpe {pa:.6}");
        rows.push(MetricsRow {
            run_id: run_id.clone(),
            mode: ck.label.clone(),
            seed: cfg.seed,
            epoch: ck.epoch as usize,
            split: split.to_string(),
            l_classic: None,
            l_ord: None,
            l_sec: None,
            l_ti: None,
            mpjpe: Some(m),
            pa_mpjpe: Some(pa),
        });
    }
    let path = common.out.join(format!("eval_{}_s{}.csv", ck.label, cfg.seed));
    write_rows(&mut csv_writer(&path, false)?, &rows)?;
    Ok(0)
}

/// Parses one metrics CSV, naming `file:line` on malformed rows.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_COLUMNS {
        return Err(Error::Data(format!(
            "{}: schema mismatch, expected columns {}",
            path.display(),
            CSV_COLUMNS.join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: MetricsRow = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Data(format!("{}:{line}: {e}", path.display()))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ModeSummary {
    pub seeds: Vec<u64>,
    /// Median final held-out consistency loss (ordinary plus secondary).
    pub median_final_consistency: Option<f64>,
    /// Median final held-out ÷ epoch-0 held-out consistency loss.
    pub median_consistency_ratio: Option<f64>,
    pub median_final_classic: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct InitSummary {
    pub seeds: Vec<u64>,
    pub median_final_mpjpe: Option<f64>,
    pub median_final_pa_mpjpe: Option<f64>,
    /// Median epochs until validation MPJPE reaches the same seed's final
    /// recon_only MPJPE; seeds that never reach it are left out.
    pub median_epochs_to_threshold: Option<f64>,
    pub reached_threshold: usize,
    pub median_test_mpjpe: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Summary {
    pub pretrain: BTreeMap<String, ModeSummary>,
    pub finetune: BTreeMap<String, InitSummary>,
}

pub struct Report {
    pub table: String,
    pub summary: Summary,
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// First epoch whose validation MPJPE is at most `threshold`.
pub fn epochs_to_threshold(rows: &[&MetricsRow], threshold: f64) -> Option<usize> {
    rows.iter()
        .filter(|r| r.split == "val")
        .find(|r| r.mpjpe.is_some_and(|m| m <= threshold))
        .map(|r| r.epoch)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

/// Reads every `*.csv` in `dir` and summarizes per mode and per encoder
/// init.
pub fn report(dir: &Path) -> Result<Report> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_metrics(f)?);
    }
    // run_id → rows, in file order
    let mut runs: BTreeMap<String, Vec<&MetricsRow>> = BTreeMap::new();
    for r in &rows {
        runs.entry(r.run_id.clone()).or_default().push(r);
    }

    let mut table = format!(
        "{:<24} {:<12} {:>5} {:>6} {:>12} {:>12} {:>12} {:>12}\n",
        "run", "mode", "seed", "epoch", "l_classic", "l_ord+l_sec", "mpjpe", "pa_mpjpe"
    );
    let mut pre: BTreeMap<String, Vec<(u64, f64, f64, f64)>> = BTreeMap::new();
    let mut fine: BTreeMap<String, Vec<(u64, &str)>> = BTreeMap::new();
    let mut tests: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (id, rs) in &runs {
        let val: Vec<&&MetricsRow> = rs.iter().filter(|r| r.split == "val").collect();
        let Some(last) = val.last() else { continue };
        let cons = |r: &MetricsRow| r.l_ord.zip(r.l_sec).map(|(a, b)| a + b);
        table.push_str(&format!(
            "{:<24} {:<12} {:>5} {:>6} {:>12} {:>12} {:>12} {:>12}\n",
            id,
            last.mode,
            last.seed,
            last.epoch,
            fmt_opt(last.l_classic),
            fmt_opt(cons(last)),
            fmt_opt(last.mpjpe),
            fmt_opt(last.pa_mpjpe)
        ));
        if id.starts_with("eval-") {
            if let Some(t) = rs.iter().find(|r| r.split == "test").and_then(|r| r.mpjpe) {
                tests.entry(last.mode.clone()).or_default().push(t);
            }
        } else if last.mpjpe.is_some() {
            fine.entry(last.mode.clone()).or_default().push((last.seed, id.as_str()));
        } else if let (Some(c), Some(first), Some(cl)) = (cons(last), val.first().and_then(|r| cons(r)), last.l_classic) {
            pre.entry(last.mode.clone()).or_default().push((last.seed, c, c / first, cl));
        }
    }

    let mut summary = Summary::default();
    for (mode, v) in &pre {
        summary.pretrain.insert(
            mode.clone(),
            ModeSummary {
                seeds: v.iter().map(|x| x.0).collect(),
                median_final_consistency: median(&v.iter().map(|x| x.1).collect::<Vec<_>>()),
                median_consistency_ratio: median(&v.iter().map(|x| x.2).collect::<Vec<_>>()),
                median_final_classic: median(&v.iter().map(|x| x.3).collect::<Vec<_>>()),
            },
        );
    }
    let final_mpjpe = |id: &str| runs[id].iter().rev().find(|r| r.split == "val").and_then(|r| r.mpjpe);
    let thresholds: BTreeMap<u64, f64> = fine
        .get(Mode::ReconOnly.as_str())
        .map(|v| v.iter().filter_map(|&(s, id)| final_mpjpe(id).map(|m| (s, m))).collect())
        .unwrap_or_default();
    for (label, v) in &fine {
        let mut reach = Vec::new();
        for &(seed, id) in v {
            if let Some(&t) = thresholds.get(&seed) {
                if let Some(e) = epochs_to_threshold(&runs[id], t) {
                    reach.push(e as f64);
                }
            }
        }
        let finals: Vec<f64> = v.iter().filter_map(|&(_, id)| final_mpjpe(id)).collect();
        let pas: Vec<f64> = v
            .iter()
            .filter_map(|&(_, id)| runs[id].iter().rev().find(|r| r.split == "val").and_then(|r| r.pa_mpjpe))
            .collect();
        summary.finetune.insert(
            label.clone(),
            InitSummary {
                seeds: v.iter().map(|x| x.0).collect(),
                median_final_mpjpe: median(&finals),
                median_final_pa_mpjpe: median(&pas),
                median_epochs_to_threshold: median(&reach),
                reached_threshold: reach.len(),
                median_test_mpjpe: tests.get(label).and_then(|t| median(t)),
            },
        );
    }
    Ok(Report { table, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, mode: &str, seed: u64, epoch: usize, m: f64) -> MetricsRow {
        MetricsRow {
            run_id: id.into(),
            mode: mode.into(),
            seed,
            epoch,
            split: "val".into(),
            l_classic: None,
            l_ord: None,
            l_sec: None,
            l_ti: None,
            mpjpe: Some(m),
            pa_mpjpe: Some(m / 2.0),
        }
    }

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Invalid("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::State("x".into())), 3);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 4);
        assert_eq!(exit_code(&Error::Degenerate("x".into())), 4);
    }

    #[test]
    fn median_and_threshold() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        let rs = [row("a", "ti", 0, 0, 1.0), row("a", "ti", 0, 1, 0.5), row("a", "ti", 0, 2, 0.3)];
        let refs: Vec<&MetricsRow> = rs.iter().collect();
        assert_eq!(epochs_to_threshold(&refs, 0.5), Some(1));
        assert_eq!(epochs_to_threshold(&refs, 0.1), None);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(Error::State(_))));
        drop(a);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn report_thresholds_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, rows: &[MetricsRow]| {
            let mut w = csv_writer(&dir.path().join(name), false).unwrap();
            write_rows(&mut w, rows).unwrap();
        };
        write(
            "finetune_recon_only_s0.csv",
            &[row("ft-recon_only-s0", "recon_only", 0, 0, 1.0), row("ft-recon_only-s0", "recon_only", 0, 1, 0.4)],
        );
        write(
            "finetune_ti_s0.csv",
            &[row("ft-ti-s0", "ti", 0, 0, 1.0), row("ft-ti-s0", "ti", 0, 1, 0.3)],
        );
        let r = report(dir.path()).unwrap();
        let ti = &r.summary.finetune["ti"];
        assert_eq!(ti.median_final_mpjpe, Some(0.3));
        assert_eq!(ti.median_epochs_to_threshold, Some(1.0));
        assert_eq!(ti.reached_threshold, 1);
        assert!(r.table.contains("ft-ti-s0"));
    }

    #[test]
    fn malformed_rows_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, format!("{}\nr,ti,0,0,val,,,,,0.5,0.2\nr,ti,zero,1,val,,,,,0.5,0.2\n", CSV_COLUMNS.join(","))).unwrap();
        match read_metrics(&p) {
            Err(Error::Data(m)) => assert!(m.contains("bad.csv:3"), "{m}"),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "a,b\n1,2\n").unwrap();
        match read_metrics(&p) {
            Err(Error::Data(m)) => assert!(m.contains("schema mismatch"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
