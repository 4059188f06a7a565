//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use srsupm::config::{hash_of, Provenance, RunConfig};
use srsupm::corpus::{self, Sample};
use srsupm::diffcore::{read_checkpoint, write_checkpoint};
use srsupm::eval::{self, MetricsTable};
use srsupm::model::Model;
use srsupm::pipeline::{self, train_and_evaluate};
use srsupm::store::SampleStore;
use srsupm::sweep::{self, SweepAxis, Variant};
use srsupm::synth::{self, SynthConfig};
use srsupm::train::{self, write_log_csv};

use crate::args::*;
use crate::lock::OutDirLock;

pub const STORE_FILE: &str = "samples.bin";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const LEVEL_METRICS_FILE: &str = "metrics_by_level.csv";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const DISTANCES_FILE: &str = "distances.csv";
pub const SUBGROUP_FILE: &str = "subgroup.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const INTERACTIONS_FILE: &str = "interactions";
pub const TRUTH_FILE: &str = "truth.csv";
pub const SYNTH_CONFIG_FILE: &str = "synth_config.toml";

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    let g = Globals {
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Prepare(a) => prepare(&g, a),
        Command::Train(a) => train(&g, a),
        Command::Eval(a) => evaluate(&g, a),
        Command::Ablate(a) => ablate(&g, a),
        Command::Sweep(a) => run_sweep(&g, a),
        Command::Analyze(a) => analyze(&g, a),
        Command::Synth(a) => synth(&g, a),
    }
}

struct Globals {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
}

impl Globals {
    /// `--out-dir`, then the config's output.dir, then `fallback`.
    fn out_dir(&self, cfg: Option<&RunConfig>, fallback: &Path) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| cfg.and_then(|c| c.output.dir.clone()))
            .unwrap_or_else(|| fallback.to_path_buf())
    }
}

fn load_config(arg: &ConfigArg, g: &Globals) -> Result<RunConfig> {
    let mut cfg = match &arg.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Writes a CSV whose first line is the provenance comment.
fn write_csv(path: &Path, prov: &Provenance, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{}", prov.csv_header())?;
    body(&mut w).with_context(|| format!("cannot write {}", path.display()))?;
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{}", cfg.provenance().csv_header())?;
    w.write_all(cfg.to_toml_string().as_bytes())?;
    w.flush()?;
    Ok(())
}

fn load_store(path: &Path) -> Result<SampleStore> {
    if !path.exists() {
        bail!("sample store {} not found (run `prepare` first)", path.display());
    }
    SampleStore::load(path).with_context(|| format!("cannot read sample store {}", path.display()))
}

fn check_store_matches(store: &SampleStore, cfg: &RunConfig) -> Result<()> {
    let p = &store.prepare;
    if p.levels != cfg.model.levels {
        bail!(
            "sample store was labelled with {} shift levels but model.levels is {}",
            p.levels,
            cfg.model.levels
        );
    }
    if p.max_len != cfg.model.encoder.max_len {
        bail!(
            "sample store was windowed to {} items but model.encoder.max_len is {}",
            p.max_len,
            cfg.model.encoder.max_len
        );
    }
    Ok(())
}

fn metrics_json(m: &MetricsTable) -> serde_json::Value {
    let key = |prefix: &str, k: &usize| format!("{prefix}@{k}");
    let mut obj = serde_json::Map::new();
    obj.insert("count".into(), json!(m.count));
    for (k, v) in &m.recall {
        obj.insert(key("recall", k), json!(v));
    }
    for (k, v) in &m.ndcg {
        obj.insert(key("ndcg", k), json!(v));
    }
    serde_json::Value::Object(obj)
}

fn prepare(g: &Globals, a: PrepareArgs) -> Result<()> {
    let mut cfg = load_config(&a.config, g)?;
    if let Some(input) = a.input {
        cfg.data.input = Some(input);
    }
    if let Some(f) = a.format {
        cfg.data.format = f.into();
    }
    let input = cfg
        .data
        .input
        .clone()
        .ok_or_else(|| anyhow!("no input file (set data.input or pass --input)"))?;
    let out = g.out_dir(Some(&cfg), Path::new("."));
    let _lock = OutDirLock::acquire(&out)?;
    let interactions = corpus::load_interactions(&input, cfg.data.format)
        .with_context(|| format!("cannot load {}", input.display()))?;
    let pc = cfg.prepare_config();
    let prepared = pipeline::prepare(interactions, &pc)?;
    let prov = Provenance {
        config_hash: hash_of(&pc),
        seed: cfg.train.seed,
    };
    let store = SampleStore::from_prepared(&prepared, &pc, prov.clone());
    store.save(&out.join(STORE_FILE))?;
    let r = &prepared.report;
    write_json(
        &out.join(REPORT_FILE),
        &json!({
            "provenance": prov,
            "report": r,
            "samples": {"train": store.train.len(), "val": store.val.len(), "test": store.test.len()},
        }),
    )?;
    println!("users\titems\tcategories\tinteractions\tsparsity");
    println!(
        "{}\t{}\t{}\t{}\t{:.4}%",
        r.users,
        r.items,
        r.categories,
        r.interactions,
        100.0 * r.sparsity
    );
    eprintln!(
        "{} train / {} validation / {} test samples; {} users too short to split",
        store.train.len(),
        store.val.len(),
        store.test.len(),
        store.excluded_users
    );
    Ok(())
}

fn train(g: &Globals, a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, g)?;
    let variant = Variant::from_flags(a.ablation.no_pmsid, a.ablation.no_pmsim, a.ablation.no_pmi).map_err(|e| anyhow!(e))?;
    let cfg = variant.apply(&cfg);
    cfg.validate()?;
    let out = g.out_dir(Some(&cfg), Path::new("."));
    let _lock = OutDirLock::acquire(&out)?;
    let store_path = a.store.unwrap_or_else(|| out.join(STORE_FILE));
    let store = load_store(&store_path)?;
    check_store_matches(&store, &cfg)?;
    let prov = cfg.provenance();
    let model = Model::new(cfg.model.clone(), store.num_items(), cfg.train.seed)?;
    eprintln!("training {} ({} parameters)", variant.label(), model.store().num_scalars());
    let fit = train::fit_with(model, &store.train, &store.val, &cfg.train, |e| {
        eprintln!(
            "epoch {:>3}  l_rs {:.4}  l_dec {}  l_mat {}  val R@10 {:.4}",
            e.epoch,
            e.rec,
            e.dec.map_or("-".into(), |v| format!("{v:.4}")),
            e.mat.map_or("-".into(), |v| format!("{v:.4}")),
            e.val_recall10
        )
    })?;
    let meta = json!({
        "provenance": prov,
        "num_items": store.num_items(),
        "variant": variant,
        "best_epoch": fit.best_epoch,
        "best_val_recall10": fit.best_val_recall10,
        "config": cfg,
    });
    let mut w = create(&out.join(CHECKPOINT_FILE))?;
    write_checkpoint(&mut w, fit.model.store(), &meta)?;
    w.flush()?;
    write_csv(&out.join(LOG_FILE), &prov, |w| write_log_csv(w, &fit.log))?;
    write_config(&out.join(CONFIG_FILE), &cfg)?;
    eprintln!("best epoch {} (val R@10 {:.4})", fit.best_epoch, fit.best_val_recall10);
    Ok(())
}

struct Loaded {
    model: Model,
    cfg: RunConfig,
    prov: Provenance,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    if !path.exists() {
        bail!("checkpoint {} not found", path.display());
    }
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let (params, meta) = read_checkpoint(std::io::BufReader::new(f))
        .with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_value(meta["config"].clone()).context("checkpoint has no usable config")?;
    let prov: Provenance = serde_json::from_value(meta["provenance"].clone()).context("checkpoint has no provenance")?;
    let num_items = meta["num_items"]
        .as_u64()
        .ok_or_else(|| anyhow!("checkpoint has no item count"))? as usize;
    let model = Model::from_store(cfg.model.clone(), num_items, &params)?;
    Ok(Loaded { model, cfg, prov })
}

fn sibling_store(checkpoint: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(STORE_FILE))
}

fn split_of(store: &SampleStore, split: SplitArg) -> &[Sample] {
    match split {
        SplitArg::Val => &store.val,
        SplitArg::Test => &store.test,
    }
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::Val => "val",
        SplitArg::Test => "test",
    }
}

fn evaluate(g: &Globals, a: EvalArgs) -> Result<()> {
    let loaded = load_checkpoint(&a.checkpoint)?;
    let store = load_store(&sibling_store(&a.checkpoint, a.store))?;
    check_store_matches(&store, &loaded.cfg)?;
    if store.num_items() != loaded.model.num_items() {
        bail!("checkpoint and sample store disagree on the item count");
    }
    let out = g.out_dir(None, a.checkpoint.parent().unwrap_or(Path::new(".")));
    let _lock = OutDirLock::acquire(&out)?;
    let samples = split_of(&store, a.split);
    let ks = &loaded.cfg.eval.ks;
    let ranks = eval::sample_ranks(&loaded.model, samples, loaded.cfg.eval.batch_size)?;
    let overall = eval::metrics_from_ranks(&ranks, ks);
    let by_level = eval::subgroup_by_shift(samples, &ranks, ks);
    let levels: serde_json::Map<String, serde_json::Value> =
        by_level.iter().map(|(l, m)| (l.to_string(), metrics_json(m))).collect();
    write_json(
        &out.join(METRICS_FILE),
        &json!({
            "provenance": loaded.prov,
            "split": split_name(a.split),
            "metrics": metrics_json(&overall),
            "by_level": levels,
        }),
    )?;
    write_csv(&out.join(LEVEL_METRICS_FILE), &loaded.prov, |w| {
        eval::write_subgroup_csv(w, &by_level, ks)
    })?;
    for &k in ks {
        println!("recall@{k}\t{:.4}\tndcg@{k}\t{:.4}", overall.recall_at(k), overall.ndcg_at(k));
    }
    Ok(())
}

fn ablate(g: &Globals, a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.config, g)?;
    let out = g.out_dir(Some(&cfg), Path::new("."));
    let _lock = OutDirLock::acquire(&out)?;
    let store = load_store(&a.store.unwrap_or_else(|| out.join(STORE_FILE)))?;
    check_store_matches(&store, &cfg)?;
    let splits = store.splits();
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let vc = v.apply(&cfg);
        eprintln!("training {}", v.label());
        let r = train_and_evaluate(&splits, store.num_items(), &vc)?;
        eprintln!("  test R@10 {:.4} (best epoch {})", r.test.recall_at(10), r.fit.best_epoch);
        rows.push((v, r.test, r.fit.best_epoch));
    }
    let ks = cfg.eval.ks.clone();
    write_csv(&out.join(ABLATION_FILE), &cfg.provenance(), |w| {
        let mut header = vec!["variant".to_string(), "count".into()];
        header.extend(ks.iter().map(|k| format!("recall@{k}")));
        header.extend(ks.iter().map(|k| format!("ndcg@{k}")));
        header.push("best_epoch".into());
        writeln!(w, "{}", header.join(","))?;
        for (v, m, e) in &rows {
            let mut cells = vec![v.label().to_string(), m.count.to_string()];
            cells.extend(ks.iter().map(|&k| m.recall_at(k).to_string()));
            cells.extend(ks.iter().map(|&k| m.ndcg_at(k).to_string()));
            cells.push(e.to_string());
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    })?;
    Ok(())
}

fn run_sweep(g: &Globals, a: SweepArgs) -> Result<()> {
    let mut cfg = load_config(&a.config, g)?;
    if let Some(input) = a.input {
        cfg.data.input = Some(input);
    }
    if let Some(f) = a.format {
        cfg.data.format = f.into();
    }
    let axis: SweepAxis = a.axis.parse().map_err(|e: String| anyhow!(e))?;
    let input = cfg
        .data
        .input
        .clone()
        .ok_or_else(|| anyhow!("no input file (set data.input or pass --input)"))?;
    let out = g.out_dir(Some(&cfg), Path::new("."));
    let _lock = OutDirLock::acquire(&out)?;
    let interactions = corpus::load_interactions(&input, cfg.data.format)
        .with_context(|| format!("cannot load {}", input.display()))?;
    let rows = sweep::robustness_sweep(&interactions, &cfg, axis, &a.values, |r| match (&r.metrics, &r.error) {
        (Some(m), _) => eprintln!(
            "{}={}: R@10 {:.4}  eval {:.3}s",
            r.setting,
            r.value,
            m.recall_at(10),
            r.eval_seconds
        ),
        (None, Some(e)) => eprintln!("{}={}: failed: {e}", r.setting, r.value),
        (None, None) => {}
    });
    write_csv(&out.join(SWEEP_FILE), &cfg.provenance(), |w| {
        sweep::write_sweep_csv(w, &rows, &cfg.eval.ks)
    })?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed == rows.len() {
        bail!("every sweep point failed");
    }
    if failed > 0 {
        eprintln!("{failed} of {} sweep points failed; see {SWEEP_FILE}", rows.len());
    }
    Ok(())
}

fn analyze(g: &Globals, a: AnalyzeArgs) -> Result<()> {
    let loaded = load_checkpoint(&a.checkpoint)?;
    let store = load_store(&sibling_store(&a.checkpoint, a.store))?;
    check_store_matches(&store, &loaded.cfg)?;
    let out = g.out_dir(None, a.checkpoint.parent().unwrap_or(Path::new(".")));
    let _lock = OutDirLock::acquire(&out)?;
    let cfg = &loaded.cfg;
    let samples = split_of(&store, a.split);
    let batch = cfg.eval.batch_size;

    let heatmap = eval::shift_heatmap(&loaded.model, samples, cfg.model.levels, batch)?;
    write_csv(&out.join(HEATMAP_FILE), &loaded.prov, |w| eval::write_heatmap_csv(w, &heatmap))?;
    let (diag, off) = heatmap.diagonal_contrast();
    println!("heatmap: mean diagonal {diag:.4}, mean off-diagonal {off:.4}");

    let mut rng = ChaCha8Rng::seed_from_u64(g.seed.unwrap_or(loaded.prov.seed));
    let max_pairs = a.max_pairs.unwrap_or(cfg.eval.max_pairs);
    let d = eval::pair_distance_analysis(&loaded.model, &store.train, max_pairs, batch, &mut rng)?;
    write_csv(&out.join(DISTANCES_FILE), &loaded.prov, |w| d.write_csv(w))?;
    println!(
        "distances: same level {:.4} over {} pairs, different level {:.4} over {} pairs",
        d.mean_same(),
        d.same_level.len(),
        d.mean_different(),
        d.different_level.len()
    );

    let ranks = eval::sample_ranks(&loaded.model, samples, batch)?;
    let groups = eval::subgroup_by_shift(samples, &ranks, &cfg.eval.ks);
    write_csv(&out.join(SUBGROUP_FILE), &loaded.prov, |w| {
        eval::write_subgroup_csv(w, &groups, &cfg.eval.ks)
    })?;
    Ok(())
}

fn synth(g: &Globals, a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let s = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            toml::from_str::<SynthConfig>(&s).map_err(|e| anyhow!("invalid synth config: {e}"))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = a.users {
        cfg.n_users = v;
    }
    if let Some(v) = a.items {
        cfg.n_items = v;
    }
    if let Some(v) = a.categories {
        cfg.n_categories = v;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let out_dir = g.out_dir(None, Path::new("."));
    let _lock = OutDirLock::acquire(&out_dir)?;
    let output = synth::generate(&cfg)?;
    let prov = Provenance {
        config_hash: hash_of(&cfg),
        seed: cfg.seed,
    };
    let format: corpus::Format = a.format.into();
    let ext = match format {
        corpus::Format::Tsv => "tsv",
        corpus::Format::Jsonl => "jsonl",
    };
    let path = out_dir.join(format!("{INTERACTIONS_FILE}.{ext}"));
    write_csv(&path, &prov, |w| output.write_interactions(w, format))?;
    write_csv(&out_dir.join(TRUTH_FILE), &prov, |w| output.write_truth_csv(w))?;
    let mut w = create(&out_dir.join(SYNTH_CONFIG_FILE))?;
    writeln!(w, "{}", prov.csv_header())?;
    w.write_all(toml::to_string_pretty(&cfg)?.as_bytes())?;
    w.flush()?;
    println!(
        "{} interactions, {} labelled pairs, {} realized off the intended level",
        output.interactions.len(),
        output.truth.len(),
        output.mismatches()
    );
    Ok(())
}
