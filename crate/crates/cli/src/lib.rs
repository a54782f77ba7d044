//! Subcommand implementations behind the `paac` binary.

pub mod args;

use std::fmt::Write as _;
use std::io::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use paac::config::{Preset, RunConfig};
use paac::dataset::{
    build_popularity_index, build_unbiased_split, k_core_filter, load_interactions, read_split_manifest,
    write_split_manifest, write_stats, Format, InteractionDataset, Split, SplitConfig, SplitStats,
};
use paac::encoder::{build_adjacency, propagate, write_embeddings};
use paac::eval::{evaluate, separation, MetricsReport, SeparationReport};
use paac::synthetic::{generate, SyntheticConfig};
use paac::trainer::{fit_with_log, load_checkpoint, save_checkpoint, JsonLinesLog, TrainReport};
use serde::{Deserialize, Serialize};

use crate::args::{Cli, Command, ConfigArgs, EvalArgs, PrepareArgs, StatsArgs, SweepArgs, TrainArgs};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const METRICS_JSON: &str = "metrics.json";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
        Command::Stats(a) => cmd_stats(&a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_prepare(a: &PrepareArgs) -> Result<SplitStats> {
    let raw = if a.synthetic {
        generate(&SyntheticConfig {
            seed: a.seed,
            ..SyntheticConfig::default()
        })?
    } else {
        if a.input.is_empty() {
            bail!("--input is required");
        }
        let format: Format = a.format.parse()?;
        let mut rows = Vec::new();
        for input in &a.input {
            rows.extend(load_interactions(input, format)?);
        }
        rows
    };
    log::info!("read {} interactions", raw.len());
    let filtered = k_core_filter(&raw, a.k_core)?;
    log::info!("{} interactions after {}-core filtering", filtered.len(), a.k_core);
    let split = SplitConfig {
        test_fraction: a.test_fraction,
        val_fraction: a.val_fraction,
    };
    let dataset = build_unbiased_split(&filtered, split, a.seed)?;
    let popularity = build_popularity_index(&dataset)?;
    let stats = SplitStats::compute(&dataset, &popularity);

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_split_manifest(&dataset, &a.out)?;
    write_stats(&stats, a.out.join("stats.json"))?;
    let mut snapshot = String::new();
    let source = if a.synthetic {
        "synthetic".to_string()
    } else {
        a.input.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
    };
    let _ = writeln!(snapshot, "input = {source}");
    let _ = writeln!(snapshot, "format = {}", a.format);
    let _ = writeln!(snapshot, "k_core = {}", a.k_core);
    let _ = writeln!(snapshot, "test_fraction = {}", a.test_fraction);
    let _ = writeln!(snapshot, "val_fraction = {}", a.val_fraction);
    let _ = writeln!(snapshot, "seed = {}", a.seed);
    write(&a.out.join("prepare.resolved"), snapshot)?;
    log::info!(
        "M={} N={} interactions={} gini={:.4}",
        stats.num_users,
        stats.num_items,
        stats.interactions,
        stats.gini
    );
    Ok(stats)
}

/// Defaults, then `PAAC_SEED`, then the config file (or `fallback` when no
/// file is given and it exists), then the preset, then flags.
pub fn resolve_config(args: &ConfigArgs, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_env()?;
    match (&args.config, fallback) {
        (Some(file), _) => cfg.apply_file(file)?,
        (None, Some(file)) if file.exists() => cfg.apply_file(file)?,
        _ => {}
    }
    if let Some(name) = &args.preset {
        let preset: Preset = name.parse()?;
        cfg.apply_preset(preset);
    }
    for (k, v) in args.overrides()? {
        cfg.set(&k, &v).with_context(|| format!("flag --{}", k.replace('_', "-")))?;
    }
    cfg.validate()?;
    log::info!("effective config:\n{}", cfg.to_kv_string().trim_end());
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<InteractionDataset> {
    let dir = cfg.data.as_ref().ok_or_else(|| anyhow!("no data directory (use --data)"))?;
    read_split_manifest(dir).with_context(|| format!("reading split manifest from {}", dir.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().ok_or_else(|| anyhow!("no output directory (use --out)"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainReport> {
    let cfg = resolve_config(&a.config, None)?;
    run_train(&cfg)
}

/// Writes `config.resolved`, `train_log.jsonl`, `best.ckpt`, `report.json`
/// and `embeddings.bin` (propagated embeddings of the best state).
pub fn run_train(cfg: &RunConfig) -> Result<TrainReport> {
    let dataset = load_dataset(cfg)?;
    let out = out_dir(cfg)?;
    let mut cfg = cfg.clone();
    if cfg.train.checkpoint_dir.is_none() {
        cfg.train.checkpoint_dir = Some(out.clone());
    }
    write(&out.join(RESOLVED_CONFIG), cfg.to_kv_string())?;

    let log_path = out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut sink = JsonLinesLog::new(std::io::BufWriter::new(file));
    let outcome = fit_with_log(&dataset, &cfg.train, &mut sink)?;
    use std::io::Write as _;
    sink.into_inner().flush().context("flushing training log")?;

    let ckpt_dir = cfg.train.checkpoint_dir.as_ref().expect("set above");
    fs::create_dir_all(ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    save_checkpoint(ckpt_dir.join(CHECKPOINT_FILE), &outcome.state, &outcome.adam)?;
    let adj = build_adjacency(&dataset)?;
    let prop = propagate(&outcome.state, &adj, cfg.train.hp.layers);
    write_embeddings(out.join("embeddings.bin"), &prop.users, &prop.items)?;
    let report = outcome.report;
    write(&out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    log::info!(
        "trained {} epochs; best epoch {} (val ndcg@20 {:?})",
        report.epochs.len(),
        report.best_epoch,
        report.best_val_ndcg20
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub metrics: MetricsReport,
    pub separation: SeparationReport,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalOutput> {
    let beside = a.checkpoint.parent().map(|d| d.join(RESOLVED_CONFIG));
    let mut cfg = resolve_config(&a.config, beside.as_deref())?;
    if a.config.out.is_none() {
        cfg.out = Some(a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    }
    let split: Split = a.split.parse()?;
    run_eval(&cfg, &a.checkpoint, split)
}

/// Writes `metrics.json`, `metrics.csv` (or `metrics_valid.*` for the
/// validation split) and `separation.json` into the configured output.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<EvalOutput> {
    let dataset = load_dataset(cfg)?;
    let (state, _) = load_checkpoint(checkpoint, None)?;
    if state.num_users() != dataset.num_users() || state.num_items() != dataset.num_items() {
        return Err(paac::Error::Format(format!(
            "checkpoint has {} users and {} items but the split has {} and {}",
            state.num_users(),
            state.num_items(),
            dataset.num_users(),
            dataset.num_items()
        ))
        .into());
    }
    let popularity = build_popularity_index(&dataset)?;
    let adj = build_adjacency(&dataset)?;
    let prop = propagate(&state, &adj, cfg.train.hp.layers);
    let metrics = evaluate(&prop, &dataset, &popularity, split, &cfg.k_list, cfg.pareto_pct)?;
    let cap = (cfg.mmd_max_per_group > 0).then_some(cfg.mmd_max_per_group);
    let sep = separation(&prop.items, &popularity, cfg.pareto_pct, cap, cfg.train.hp.seed)?;

    let out = out_dir(cfg)?;
    let stem = match split {
        Split::Test => "metrics",
        Split::Validation => "metrics_valid",
    };
    write(&out.join(format!("{stem}.json")), metrics.to_json())?;
    write(&out.join(format!("{stem}.csv")), metrics.to_csv())?;
    write(&out.join("separation.json"), sep.to_json())?;
    write(&out.join("eval.resolved"), cfg.to_kv_string())?;
    for r in &metrics.results {
        log::info!(
            "{split:?} @{}: recall {:.4} hr {:.4} ndcg {:.4}",
            r.k,
            r.overall.recall,
            r.overall.hr,
            r.overall.ndcg
        );
    }
    let cs = if cfg.centroid_cosine { sep.centroid_cosine } else { sep.cross_cosine };
    log::info!("separation: mmd {:.5} cs {:.5}", sep.mmd, cs);
    Ok(EvalOutput {
        metrics,
        separation: sep,
    })
}

/// `key=v1,v2;key=v1` into named axes, preserving order.
pub fn parse_grid(spec: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut axes = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, vs) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("grid axis `{part}` is not `key=v1,v2`"))?;
        let values: Vec<String> = vs
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            bail!("grid axis `{k}` has no values");
        }
        let key = k.trim().to_string();
        RunConfig::default()
            .set(&key, &values[0])
            .with_context(|| format!("grid axis `{key}`"))?;
        axes.push((key, values));
    }
    if axes.is_empty() {
        bail!("empty grid");
    }
    Ok(axes)
}

/// Cartesian product, last axis varying fastest.
pub fn grid_cells(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, values) in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

fn cell_name(cell: &[(String, String)]) -> String {
    cell.iter()
        .map(|(k, v)| {
            let v: String = v
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
                .collect();
            format!("{k}={v}")
        })
        .collect::<Vec<_>>()
        .join("_")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: Vec<(String, String)>,
    pub dir: PathBuf,
    /// `ok`, `cached` or the error message.
    pub status: String,
    pub val_ndcg20: Option<f64>,
    pub metrics: Option<MetricsReport>,
}

impl SweepRow {
    fn ndcg20(&self) -> Option<f64> {
        self.metrics.as_ref()?.at(20).map(|r| r.overall.ndcg)
    }
}

fn run_cell(cfg: &RunConfig, dir: &Path) -> Result<(Option<f64>, MetricsReport)> {
    let report = run_train(cfg)?;
    let out = run_eval(cfg, &dir.join(CHECKPOINT_FILE), Split::Test)?;
    Ok((report.best_val_ndcg20, out.metrics))
}

fn read_cached(dir: &Path) -> Option<(Option<f64>, MetricsReport)> {
    let metrics: MetricsReport = serde_json::from_str(&fs::read_to_string(dir.join(METRICS_JSON)).ok()?).ok()?;
    let report: TrainReport = serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE)).ok()?).ok()?;
    Some((report.best_val_ndcg20, metrics))
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<Vec<SweepRow>> {
    let cfg = resolve_config(&a.config, None)?;
    let axes = parse_grid(&a.grid)?;
    run_sweep(&cfg, &axes)
}

/// Trains and evaluates each cell under `<out>/<cell>`; cells whose metrics
/// already exist are read back instead of retrained. Writes `sweep.csv`
/// sorted by test NDCG@20 and fails at the end if any cell failed.
pub fn run_sweep(base: &RunConfig, axes: &[(String, Vec<String>)]) -> Result<Vec<SweepRow>> {
    let root = out_dir(base)?;
    let mut base = base.clone();
    if !base.k_list.contains(&20) {
        base.k_list.push(20);
    }
    write(&root.join("sweep.resolved"), base.to_kv_string())?;
    let mut rows = Vec::new();
    for cell in grid_cells(axes) {
        let dir = root.join(cell_name(&cell));
        let mut row = SweepRow {
            cell: cell.clone(),
            dir: dir.clone(),
            status: String::new(),
            val_ndcg20: None,
            metrics: None,
        };
        if let Some((val, metrics)) = read_cached(&dir) {
            log::info!("cell {} already complete; skipping", cell_name(&cell));
            row.status = "cached".into();
            row.val_ndcg20 = val;
            row.metrics = Some(metrics);
            rows.push(row);
            continue;
        }
        let mut cfg = base.clone();
        cfg.out = Some(dir.clone());
        cfg.train.checkpoint_dir = None;
        let result = cell
            .iter()
            .try_for_each(|(k, v)| cfg.set(k, v).map_err(anyhow::Error::from))
            .and_then(|_| cfg.validate().map_err(anyhow::Error::from))
            .and_then(|_| run_cell(&cfg, &dir));
        match result {
            Ok((val, metrics)) => {
                row.status = "ok".into();
                row.val_ndcg20 = val;
                row.metrics = Some(metrics);
            }
            Err(e) => {
                log::error!("cell {} failed: {e:#}", cell_name(&cell));
                let _ = fs::create_dir_all(&dir);
                let _ = fs::write(dir.join("error.txt"), format!("{e:#}\n"));
                row.status = format!("{e:#}");
            }
        }
        rows.push(row);
    }
    rows.sort_by(|a, b| match (a.ndcg20(), b.ndcg20()) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    write(&root.join("sweep.csv"), sweep_csv(axes, &rows))?;
    let failed = rows.iter().filter(|r| r.metrics.is_none()).count();
    if failed > 0 {
        bail!("{failed} of {} sweep cells failed; see sweep.csv", rows.len());
    }
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(axes: &[(String, Vec<String>)], rows: &[SweepRow]) -> String {
    let mut s = String::new();
    for (k, _) in axes {
        s.push_str(k);
        s.push(',');
    }
    s.push_str("status,val_ndcg20,recall20,hr20,ndcg20,ndcg20_popular,ndcg20_unpopular,delta_ndcg20\n");
    for row in rows {
        for (_, v) in &row.cell {
            s.push_str(&csv_field(v));
            s.push(',');
        }
        let at20 = row.metrics.as_ref().and_then(|m| m.at(20));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            csv_field(&row.status),
            opt(row.val_ndcg20),
            opt(at20.map(|r| r.overall.recall)),
            opt(at20.map(|r| r.overall.hr)),
            opt(at20.map(|r| r.overall.ndcg)),
            opt(at20.and_then(|r| r.groups.popular.map(|m| m.ndcg))),
            opt(at20.and_then(|r| r.groups.unpopular.map(|m| m.ndcg))),
            opt(at20.and_then(|r| r.groups.delta.map(|d| d.ndcg))),
        );
    }
    s
}

pub fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let dataset = read_split_manifest(&a.data)?;
    let popularity = build_popularity_index(&dataset)?;
    let stats = SplitStats::compute(&dataset, &popularity);
    let text = serde_json::to_string_pretty(&stats)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}
