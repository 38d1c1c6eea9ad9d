//! Command-line front end: `train`, `eval`, `export` and `data-stats`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{apply_preset, config_digest, load_config_file, RunManifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate, long_tail_report, EvalReport, ModelView};
use crate::graph::{DataStats, Dataset};
use crate::meta::{EpochRecord, PreparedData, TrainConfig, TrainState, Trainer};
use crate::model::Backbone;
use crate::prune::{export_sparse, load_sparse, sparsity_stats};

pub const DATA_ENV: &str = "METASD_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "metasd",
    version,
    about = "Pruned, self-distilled knowledge-graph embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train teacher and student; writes manifest, metrics, checkpoint and sparse export.
    Train(TrainArgs),
    /// Filtered evaluation of a checkpoint or a sparse export.
    Eval(EvalArgs),
    /// Write the student of a checkpoint as a sparse file.
    Export(ExportArgs),
    /// Entity/relation counts, split sizes and the long-tail histogram.
    DataStats(DataStatsArgs),
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset directory with train.txt, valid.txt and test.txt. A relative
    /// name that is not a directory is looked up under $METASD_DATA_DIR.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub backbone: Option<Backbone>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub quiz_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { cfg.$f = v; })*};
        }
        set!(gamma, alpha, beta, lambda, mu, dim, backbone, epochs, batch_size, quiz_size, seed);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Flat TOML file of config keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset; repeatable, applied in order before the config file.
    #[arg(long)]
    pub preset: Vec<String>,
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Continue from a checkpoint; its config is reused (only --epochs may change).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a sparse export instead of a checkpoint.
    #[arg(long)]
    pub sparse: Option<PathBuf>,
    /// Evaluate the pruned student (default).
    #[arg(long, conflicts_with = "teacher")]
    pub student: bool,
    /// Evaluate the dense teacher.
    #[arg(long)]
    pub teacher: bool,
    /// Also report relations with fewer training triples than this.
    #[arg(long)]
    pub long_tail: Option<usize>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataStatsArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, default_value_t = 1000)]
    pub long_tail: usize,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

/// Resolves the dataset directory from `--data` and `$METASD_DATA_DIR`.
pub fn resolve_data(arg: &DataArg, env_root: Option<PathBuf>) -> Result<PathBuf> {
    match (&arg.data, env_root) {
        (Some(p), _) if p.is_dir() => Ok(p.clone()),
        (Some(p), Some(root)) if p.is_relative() => Ok(root.join(p)),
        (Some(p), _) => Ok(p.clone()),
        (None, Some(root)) => Ok(root),
        (None, None) => Err(Error::Config(format!("no dataset: pass --data or set {DATA_ENV}"))),
    }
}

fn data_dir(arg: &DataArg) -> Result<PathBuf> {
    resolve_data(arg, std::env::var_os(DATA_ENV).map(PathBuf::from))
}

fn init_threads(threads: Option<usize>) -> usize {
    if let Some(n) = threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Config for a fresh run: defaults, presets, config file, then overrides.
pub fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for p in &args.preset {
        apply_preset(&mut cfg, p)?;
    }
    if let Some(path) = &args.config {
        cfg = load_config_file(&cfg, path)?;
    }
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

struct MetricsLog {
    w: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    fn create(path: &Path, existing: &[EpochRecord]) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = MetricsLog {
            w: BufWriter::new(f),
            path: path.to_path_buf(),
        };
        for r in existing {
            log.push(r)?;
        }
        Ok(log)
    }

    fn push(&mut self, r: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.w, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn epoch_line(r: &EpochRecord, total: usize) -> String {
    let mut s = format!(
        "epoch {:>3}/{total}  S ce {:.4} total {:.4} | T ce {:.4} total {:.4}",
        r.epoch, r.student_loss["ce"], r.student_loss["total"], r.teacher_loss["ce"], r.teacher_loss["total"]
    );
    if let Some(q) = r.quiz_ce {
        s += &format!(" | quiz {q:.4}");
    }
    if let (Some(t), Some(st)) = (&r.valid_teacher, &r.valid_student) {
        s += &format!(" | valid MRR T {:.4} S {:.4}", t.mrr, st.mrr);
    }
    s + &format!(" | sparsity {:.3} flips {}", r.sparsity, r.mask_flips)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let threads = init_threads(args.threads);
    let (cfg, state) = match &args.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let mut cfg = ck.config;
            if let Some(e) = args.overrides.epochs {
                cfg.epochs = e;
            }
            (cfg, Some(ck.state))
        }
        None => (resolve_config(args)?, None),
    };
    let dir = data_dir(&args.data)?;
    let ds = Dataset::load_dir(&dir, false)?;
    create_dir(&args.out)?;
    let manifest = RunManifest {
        config: cfg.clone(),
        presets: args.preset.clone(),
        config_file: args.config.as_ref().map(|p| p.display().to_string()),
        dataset_dir: dir.display().to_string(),
        dataset_digest: ds.digest(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: now_unix(),
        out_dir: args.out.display().to_string(),
        threads,
        resumed_from: args.resume.as_ref().map(|p| p.display().to_string()),
    };
    manifest.write(&args.out.join("manifest.json"))?;

    let data = PreparedData::new(&ds, &cfg)?;
    println!(
        "data: {} entities, {} relations, {} train / {} quiz / {} valid queries",
        data.entity_count,
        data.relation_count,
        data.train.len(),
        data.quiz.len(),
        data.valid.len()
    );
    let mut trainer = match state {
        Some(st) => Trainer::resume(cfg.clone(), &data, st)?,
        None => Trainer::new(cfg.clone(), &data)?,
    };
    let mut log = MetricsLog::create(&args.out.join("metrics.jsonl"), &trainer.state().metrics)?;
    let ck_path = args.out.join("checkpoint.msdk");
    let total = cfg.epochs;
    let result = trainer.run(|rec, st| {
        log.push(rec)?;
        println!("{}", epoch_line(rec, total));
        save_checkpoint(
            &ck_path,
            &Checkpoint {
                config: cfg.clone(),
                state: st.clone(),
            },
        )
    });
    result?;
    let st = trainer.state();
    save_checkpoint(
        &ck_path,
        &Checkpoint {
            config: cfg.clone(),
            state: st.clone(),
        },
    )?;
    let nnz = export_student(&cfg, st, &args.out.join("student.msds"))?;
    let stats = sparsity_stats(&st.mask, &st.teacher.tensor_names());
    println!(
        "done: {} epochs, teacher params {}, student nnz {} (sparsity {:.4})",
        st.epoch, stats.total, nnz, stats.sparsity
    );
    Ok(())
}

fn export_student(cfg: &TrainConfig, st: &TrainState, path: &Path) -> Result<usize> {
    let store = st.student.as_ref().unwrap_or(&st.teacher);
    export_sparse(store, &st.mask, config_digest(cfg)?, path)
}

pub fn cmd_export(args: &ExportArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let nnz = export_student(&ck.config, &ck.state, &args.out)?;
    println!("wrote {} ({nnz} values)", args.out.display());
    Ok(())
}

fn split_of<'a>(data: &'a PreparedData, name: &str) -> Result<&'a [crate::graph::Triple]> {
    match name {
        "test" => Ok(&data.test),
        "valid" => Ok(&data.valid),
        "train" => Ok(&data.train),
        other => Err(Error::Config(format!("unknown split '{other}' (test, valid, train)"))),
    }
}

/// Reports produced by `eval`, in print order.
pub fn run_eval(args: &EvalArgs) -> Result<Vec<EvalReport>> {
    init_threads(args.threads);
    let ds = Dataset::load_dir(&data_dir(&args.data)?, false)?;
    let cfg = TrainConfig {
        meta_enabled: false,
        ..TrainConfig::default()
    };
    let data = PreparedData::new(&ds, &cfg)?;
    let triples = split_of(&data, &args.split)?;
    let none = Default::default();
    let check_dims = |e: usize, r: usize| {
        if (e, r) != (data.entity_count, data.relation_count) {
            Err(Error::Shape(format!(
                "model has {e} entities / {r} relations, dataset has {} / {}",
                data.entity_count, data.relation_count
            )))
        } else {
            Ok(())
        }
    };

    if let Some(path) = &args.sparse {
        let sm = load_sparse(path)?;
        check_dims(sm.params.entity_count(), sm.params.relation_count())?;
        let mut rep = evaluate(&sm.params, None, &args.split, triples, &data.filter, &none)?;
        rep.view = ModelView::Student;
        rep.effective_params = sm.nnz;
        return Ok(vec![rep]);
    }
    let Some(ck_path) = &args.checkpoint else {
        return Err(Error::Config("eval needs --checkpoint or --sparse".into()));
    };
    let ck = load_checkpoint(ck_path)?;
    let st = &ck.state;
    check_dims(st.teacher.entity_count(), st.teacher.relation_count())?;
    if let Some(th) = args.long_tail {
        let store = st.student.as_ref().unwrap_or(&st.teacher);
        let mut lt = long_tail_report(
            store,
            &st.mask,
            &args.split,
            triples,
            &data.filter,
            &data.train_original,
            th,
        )?;
        if st.student.is_some() {
            lt.teacher = evaluate(
                &st.teacher,
                None,
                &args.split,
                triples,
                &data.filter,
                &long_tail_subsets(&lt),
            )?;
        }
        println!("long-tail threshold {th}: {} relations", lt.relations.len());
        let out = if args.teacher {
            vec![lt.teacher]
        } else if args.student {
            vec![lt.student]
        } else {
            vec![lt.teacher, lt.student]
        };
        return Ok(out);
    }
    let teacher = || evaluate(&st.teacher, None, &args.split, triples, &data.filter, &none);
    if args.teacher {
        return Ok(vec![teacher()?]);
    }
    let store = st.student.as_ref().unwrap_or(&st.teacher);
    let student = evaluate(store, Some(&st.mask), &args.split, triples, &data.filter, &none)?;
    Ok(vec![student])
}

fn long_tail_subsets(lt: &crate::eval::LongTailReport) -> std::collections::BTreeMap<String, crate::eval::Subset> {
    let rels: std::collections::BTreeSet<usize> = lt.relations.iter().copied().collect();
    [("long_tail", false), ("long_tail_tail_only", true)]
        .into_iter()
        .map(|(n, tail_only)| {
            (
                n.to_string(),
                crate::eval::Subset {
                    relations: rels.clone(),
                    tail_only,
                },
            )
        })
        .collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let reports = run_eval(args)?;
    for r in &reports {
        println!("{r}");
    }
    if let Some(path) = &args.out {
        let text = if reports.len() == 1 {
            serde_json::to_string_pretty(&reports[0])?
        } else {
            serde_json::to_string_pretty(&reports)?
        };
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn cmd_data_stats(args: &DataStatsArgs) -> Result<()> {
    let ds = Dataset::load_dir(&data_dir(&args.data)?, false)?;
    let s = DataStats::compute(&ds, args.long_tail);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
        return Ok(());
    }
    println!("entities   {}", s.entities);
    println!("relations  {}", s.relations);
    println!("train      {}", s.train);
    println!("valid      {}", s.valid);
    println!("test       {}", s.test);
    println!("duplicates {}", s.duplicates_dropped);
    println!(
        "long-tail  {} relations below {} train triples ({:.2}% of train)",
        s.long_tail_relations,
        s.long_tail_threshold,
        100.0 * s.long_tail_train_fraction
    );
    println!("relation frequency histogram:");
    for (lo, hi, n) in &s.histogram {
        let hi = if *hi == usize::MAX {
            "inf".to_string()
        } else {
            hi.to_string()
        };
        println!("  [{lo:>5}, {hi:>5})  {n}");
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
        Command::DataStats(a) => cmd_data_stats(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            1
        }
    }
}
