use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use seqrank_core::dataset::{
    generate_synthetic, read_examples, read_store, write_examples, write_store, ExampleFile, SequenceStore,
    SyntheticConfig, TokenCounts,
};
use seqrank_core::encoder::ModelDims;
use seqrank_core::evaluation::{format_report, hit_at_k_all, predict, RunMetrics};
use seqrank_core::losses::{HeadConfig, NalConfig, NalLossType, NegativeMode};
use seqrank_core::model::{Kernel, RankingModel};
use seqrank_core::nnsearch::{assemble, NnConfig};
use seqrank_core::par::Parallelism;
use seqrank_core::seqcore::{Head, SequenceCaps};
use seqrank_core::trainer::{self, toy_nn, AblationGrid, OptimizerKind, TrainConfig, TrainData};
use seqrank_serving::batcher::BatcherConfig;
use seqrank_serving::bench::{run_bench, BenchConfig};
use seqrank_serving::logger::NnLogger;
use seqrank_serving::{Ablation, Engine, EngineConfig, FeatureStore, Server};

use crate::config::{Dur, List, Named, Resolver};
use crate::{AblateArgs, BenchArgs, CliError, Common, EvalArgs, GenDataArgs, GradCheckArgs, ServeArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

pub const STORE_FILE: &str = "store.tav2";
pub const TRAIN_FILE: &str = "train.tex2";
pub const EVAL_FILE: &str = "eval.tex2";

fn start(c: &Common) -> Result<(Resolver, u64)> {
    let mut r = Resolver::new(c.config.as_deref())?;
    let seed = r.get("seed", c.seed, 1u64)?;
    Ok((r, seed))
}

fn parallelism(sequential: bool) -> Parallelism {
    if sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    }
}

fn runtime<E: Into<anyhow::Error>>(ctx: String) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Runtime(e.into().context(ctx))
}

struct DataDir {
    store: SequenceStore,
    train: ExampleFile,
    eval: ExampleFile,
}

fn load_data(dir: &str) -> Result<DataDir> {
    let dir = Path::new(dir);
    let read = |name: &str| -> Result<ExampleFile> {
        let p = dir.join(name);
        read_examples(&p).map_err(runtime(format!("reading {}", p.display())))
    };
    let p = dir.join(STORE_FILE);
    Ok(DataDir {
        store: read_store(&p).map_err(runtime(format!("reading {}", p.display())))?,
        train: read(TRAIN_FILE)?,
        eval: read(EVAL_FILE)?,
    })
}

fn load_model(path: &str) -> Result<RankingModel> {
    RankingModel::load(path).map_err(runtime(format!("loading checkpoint {path}")))
}

fn nn_from(r: &mut Resolver, a: [Option<usize>; 4], default: NnConfig) -> Result<NnConfig> {
    let nn = NnConfig {
        r: r.get("r", a[0], default.r)?,
        k_ll: r.get("k-ll", a[1], default.k_ll)?,
        k_rt: r.get("k-rt", a[2], default.k_rt)?,
        k_imp: r.get("k-imp", a[3], default.k_imp)?,
    };
    nn.validate()?;
    Ok(nn)
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let (mut r, seed) = start(&a.common)?;
    let d = SyntheticConfig::default();
    let out = r.get("out", a.out, "data".to_string())?;
    let cfg = SyntheticConfig {
        num_users: r.get("users", a.users, d.num_users)?,
        num_interest_clusters: r.get("clusters", a.clusters, d.num_interest_clusters)?,
        tokens_per_user: TokenCounts {
            ll: r.get("ll", a.ll, d.tokens_per_user.ll)?,
            rt: r.get("rt", a.rt, d.tokens_per_user.rt)?,
            imp: r.get("imp", a.imp, d.tokens_per_user.imp)?,
        },
        chunks_per_user: r.get("chunks", a.chunks, d.chunks_per_user)?,
        candidates_per_chunk: r.get("candidates", a.candidates, d.candidates_per_chunk)?,
        noise: r.get("noise", a.noise, d.noise)?,
        sibling_cosine: r.get("sibling-cosine", a.sibling_cosine, d.sibling_cosine)?,
        rng_seed: seed,
        ..d
    };
    let with_nn = r.switch("nn-features", a.nn_features)?;
    let nn = nn_from(&mut r, [a.r, a.k_ll, a.k_rt, a.k_imp], toy_nn())?;
    r.finish("gen-data")?;
    cfg.validate()?;
    if cfg.chunks_per_user < 2 {
        return Err(CliError::Usage("chunks must be >= 2 (the last chunk is the eval split)".into()));
    }

    let data = generate_synthetic(&cfg)?;
    let (mut train, mut eval) = data.split(cfg.chunks_per_user);
    if with_nn {
        let users = data.store.index();
        for ex in train.iter_mut().chain(eval.iter_mut()) {
            if let Some(u) = users.get(&ex.user_id) {
                ex.nn_features = Some(assemble(u, &ex.candidate, &nn));
            }
        }
    }
    let dir = PathBuf::from(&out);
    std::fs::create_dir_all(&dir).map_err(runtime(format!("creating {out}")))?;
    write_store(dir.join(STORE_FILE), &data.store)?;
    write_examples(dir.join(TRAIN_FILE), &ExampleFile { nn, examples: train.clone() })?;
    write_examples(dir.join(EVAL_FILE), &ExampleFile { nn, examples: eval.clone() })?;
    println!(
        "wrote {out}: {} users, {} train / {} eval examples",
        data.store.records.len(),
        train.len(),
        eval.len()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (mut r, seed) = start(&a.common)?;
    let d = TrainConfig::default();
    let nd = NalConfig::default();
    let data_dir = r.get("data", a.data, "data".to_string())?;
    let out = r.get("out", a.out, "model.ckpt".to_string())?;
    let steps = r.get("steps", a.steps, d.steps)?;
    let batch_size = r.get("batch-size", a.batch_size, d.batch_size)?;
    let lr = r.get("lr", a.lr, d.lr)?;
    let optimizer = r.get("optimizer", a.optimizer, Named(d.optimizer))?.0;
    let w_nal = r.get("w-nal", a.w_nal, nd.w_nal)?;
    let mode = r.get("nal-mode", a.nal_mode, Named(nd.mode))?.0;
    let loss = r.get("nal-loss", a.nal_loss, Named(nd.loss))?.0;
    let negatives = r.get("negatives", a.negatives, nd.negatives)?;
    let no_nal = r.switch("no-nal", a.no_nal)?;
    let no_sequence = r.switch("no-sequence", a.no_sequence)?;
    let metrics = r.get("metrics", a.metrics, format!("{out}.metrics.jsonl"))?;
    let sequential = r.switch("sequential", a.sequential)?;
    r.finish("train")?;

    let nal = NalConfig {
        w_nal,
        negatives,
        mode,
        loss,
    };
    nal.validate()?;
    let mut cfg = TrainConfig {
        batch_size,
        steps,
        lr,
        optimizer,
        seed,
        nal: (!no_nal).then_some(nal),
        use_sequence: !no_sequence,
        parallelism: parallelism(sequential),
        ..d
    };
    cfg.validate()?;

    let data = load_data(&data_dir)?;
    cfg.nn = data.train.nn;
    let td = TrainData {
        examples: &data.train.examples,
        users: data.store.index(),
    };
    let t0 = std::time::Instant::now();
    let res = trainer::train(&td, &cfg)?;
    res.model.save(&out)?;
    trainer::write_metrics(&metrics, &res.log)?;
    let last = res.log.last().context("training produced no steps")?;
    println!(
        "trained {steps} steps in {:.1}s: ce={:.5} nal={:.5} total={:.5}; checkpoint {out}, metrics {metrics}",
        t0.elapsed().as_secs_f64(),
        last.ce,
        last.nal,
        last.total
    );
    if res.nal.fallback_warnings > 0 || res.nal.skipped > 0 {
        println!(
            "nal: {} fallback warnings, {} impression fallbacks, {} skipped",
            res.nal.fallback_warnings, res.nal.impression_fallbacks, res.nal.skipped
        );
    }
    Ok(())
}

fn run_name(path: &str) -> String {
    Path::new(path).file_stem().map_or_else(|| path.to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (mut r, _seed) = start(&a.common)?;
    let data_dir = r.get("data", a.data, "data".to_string())?;
    let models = r.get("model", a.model, List(vec!["model.ckpt".to_string()]))?;
    let k = r.get("k", a.k, 3usize)?;
    let kernel = r.get("kernel", a.kernel, Named(Kernel::Fused))?.0;
    let out = r.opt("out", a.out)?;
    let sequential = r.switch("sequential", a.sequential)?;
    r.finish("eval")?;
    if k == 0 || models.0.is_empty() {
        return Err(CliError::Usage("need k >= 1 and at least one model".into()));
    }

    let data = load_data(&data_dir)?;
    let users = data.store.index();
    let head = HeadConfig::default();
    let mut runs = Vec::new();
    for path in &models.0 {
        let model = load_model(path)?;
        let items = predict(&model, &data.eval.examples, &users, &model.nn, kernel, parallelism(sequential))?;
        runs.push(RunMetrics {
            name: run_name(path),
            hit: hit_at_k_all(&items, k, &head),
        });
    }
    print!("{}", format_report(&runs, k, runs.first().map(|r| r.name.as_str())));
    if let Some(out) = out {
        let json: Vec<_> = runs
            .iter()
            .map(|r| {
                let hits: serde_json::Map<_, _> =
                    Head::ALL.iter().map(|h| (h.name().to_string(), r.hit[*h as usize].into())).collect();
                serde_json::json!({ "run": r.name, "k": k, "hit": hits })
            })
            .collect();
        std::fs::write(&out, serde_json::to_string_pretty(&json).map_err(anyhow::Error::from)?)
            .map_err(runtime(format!("writing {out}")))?;
    }
    Ok(())
}

fn fresh_model(seed: u64) -> Result<RankingModel> {
    let nn = NnConfig::default();
    Ok(RankingModel::new(ModelDims::standard(nn.seq_len()), nn, true, seed)?)
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let (mut r, seed) = start(&a.common)?;
    let bd = BatcherConfig::default();
    let model_path = r.opt("model", a.model)?;
    let store_path = r.opt("store", a.store)?;
    let addr = r.get("addr", a.addr, "127.0.0.1:8080".to_string())?;
    let workers = r.get("workers", a.workers, bd.workers)?;
    let ablation = r.get("ablation", a.ablation, Ablation::All)?;
    let max_batch = r.get("max-batch", a.max_batch, bd.max_batch)?;
    let max_wait = r.get("max-wait", a.max_wait, Dur(bd.max_wait))?;
    let arena_mb = r.get("arena-mb", a.arena_mb, seqrank_serving::arena::DEFAULT_CAPACITY >> 20)?;
    let log_nn = r.opt("log-nn", a.log_nn)?;
    r.finish("serve")?;
    let batcher = BatcherConfig {
        workers,
        max_batch,
        max_wait: max_wait.0,
        ..bd
    };
    batcher.validate()?;

    let model = Arc::new(match &model_path {
        Some(p) => load_model(p)?,
        None => fresh_model(seed)?,
    });
    let store = match &store_path {
        Some(p) => {
            let s = read_store(p).map_err(runtime(format!("reading {p}")))?;
            FeatureStore::from_sequences(&s, SequenceCaps::default())?
        }
        None => FeatureStore::default(),
    };
    let cfg = EngineConfig {
        ablation,
        arena_capacity: arena_mb << 20,
        ..Default::default()
    };
    let mut engine = Engine::new(model.clone(), Arc::new(store), cfg)?;
    let mut collector = None;
    if log_nn.is_some() {
        let (logger, rx) = NnLogger::bounded(1 << 16);
        engine = engine.with_logger(logger);
        collector = Some(std::thread::spawn(move || rx.iter().collect::<Vec<_>>()));
    }
    let server = Arc::new(Server::start(Arc::new(engine), batcher)?);

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(runtime(format!("binding {addr}")))?;
        eprintln!("listening on {}", listener.local_addr()?);
        let stop = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        seqrank_serving::http::serve(listener, server.clone(), stop).await?;
        Ok::<_, CliError>(())
    })?;
    drop(rt);
    let report = server.report();
    drop(server);
    eprintln!(
        "served {} requests / {} items",
        report.counters.requests, report.counters.items
    );
    if let (Some(path), Some(handle)) = (log_nn, collector) {
        let examples = handle.join().map_err(|_| anyhow::anyhow!("log collector panicked"))?;
        let n = examples.len();
        write_examples(&path, &ExampleFile { nn: model.nn, examples })?;
        eprintln!("logged {n} examples to {path}");
    }
    Ok(())
}

fn parse_ablations(s: &str) -> Result<Vec<Ablation>> {
    if s.trim() == "every" {
        return Ok(Ablation::ALL.to_vec());
    }
    let list: List<Ablation> = s.parse().map_err(CliError::Usage)?;
    if list.0.is_empty() {
        return Err(CliError::Usage("--ablation needs at least one config".into()));
    }
    Ok(list.0)
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let (mut r, seed) = start(&a.common)?;
    let d = BenchConfig::default();
    let ablation = r.get("ablation", a.ablation, "every".to_string())?;
    let rate = r.get("rate", a.rate, d.rate)?;
    let duration = r.get("duration", a.duration, Dur(d.duration))?;
    let model_path = r.opt("model", a.model)?;
    let users = r.get("users", a.users, d.users)?;
    let ll = r.get("ll", a.ll, d.lifelong_len)?;
    let rt = r.get("rt", a.rt, d.realtime_len)?;
    let imp = r.get("imp", a.imp, d.impression_len)?;
    let cmin = r.get("candidates-min", a.candidates_min, d.candidates.0)?;
    let cmax = r.get("candidates-max", a.candidates_max, d.candidates.1)?;
    let workers = r.get("workers", a.workers, d.batcher.workers)?;
    let max_batch = r.get("max-batch", a.max_batch, d.batcher.max_batch)?;
    let max_wait = r.get("max-wait", a.max_wait, Dur(d.batcher.max_wait))?;
    let arena_mb = r.get("arena-mb", a.arena_mb, d.arena_capacity >> 20)?;
    let drain = r.get("drain", a.drain, Dur(d.drain_timeout))?;
    let out = r.get("out", a.out, "bench_report.txt".to_string())?;
    r.finish("bench")?;

    let cfg = BenchConfig {
        ablations: parse_ablations(&ablation)?,
        rate,
        duration: duration.0,
        seed,
        users,
        candidates: (cmin, cmax),
        lifelong_len: ll,
        realtime_len: rt,
        impression_len: imp,
        batcher: BatcherConfig {
            workers,
            max_batch,
            max_wait: max_wait.0,
            ..d.batcher
        },
        arena_capacity: arena_mb << 20,
        drain_timeout: drain.0,
    };
    cfg.validate()?;
    let model = Arc::new(match &model_path {
        Some(p) => load_model(p)?,
        None => fresh_model(seed)?,
    });
    let report = run_bench(model, &cfg)?;
    let text = report.render();
    let records = Path::new(&out).with_extension("jsonl");
    std::fs::write(&out, &text).map_err(runtime(format!("writing {out}")))?;
    std::fs::write(&records, report.records()).map_err(runtime(format!("writing {}", records.display())))?;
    print!("{text}");
    eprintln!("report {out}, records {}", records.display());
    for run in &report.runs {
        if run.saturated {
            log::warn!(
                "{}: offered load not sustained ({:.0} items/s achieved of {rate:.0})",
                run.ablation,
                run.achieved_items_per_sec
            );
        }
    }
    Ok(())
}

pub fn grad_check(a: GradCheckArgs) -> Result<()> {
    let (mut r, seed) = start(&a.common)?;
    let precision = r.get("precision", a.precision, "both".to_string())?;
    let tol = r.get("tol", a.tol, 1e-3)?;
    r.finish("grad-check")?;
    let reports = match precision.as_str() {
        "f32" => vec![trainer::grad_check::<f32>(seed)?],
        "f64" => vec![trainer::grad_check::<f64>(seed)?],
        "both" => vec![trainer::grad_check::<f32>(seed)?, trainer::grad_check::<f64>(seed)?],
        other => return Err(CliError::Usage(format!("precision must be f32, f64 or both, got {other:?}"))),
    };
    let mut failed = false;
    for rep in &reports {
        println!("precision={} step={:e}", rep.precision, rep.step);
        for t in &rep.tensors {
            let ok = t.rel_err <= tol;
            failed |= !ok;
            println!(
                "  {:<16} rel_err={:.3e} max_abs_err={:.3e} |g|inf={:.3e} {}",
                t.name,
                t.rel_err,
                t.max_abs_err,
                t.grad_norm_inf,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    if failed {
        return Err(CliError::Runtime(anyhow::anyhow!("gradient check failed at tol {tol:e}")));
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let (mut r, seed) = start(&a.common)?;
    let d = TrainConfig::default();
    let g = AblationGrid::default();
    let data_dir = r.get("data", a.data, "data".to_string())?;
    let steps = r.get("steps", a.steps, d.steps)?;
    let batch_size = r.get("batch-size", a.batch_size, d.batch_size)?;
    let lr = r.get("lr", a.lr, d.lr)?;
    let negatives = r.get("negatives", a.negatives, NalConfig::default().negatives)?;
    let w_nal = r.get("w-nal", a.w_nal, List(g.w_nal))?;
    let modes = r.get("modes", a.modes, List(g.modes.into_iter().map(Named).collect()))?;
    let losses = r.get("losses", a.losses, List(g.losses.into_iter().map(Named).collect()))?;
    let out = r.opt("out", a.out)?;
    let sequential = r.switch("sequential", a.sequential)?;
    r.finish("ablate")?;

    let grid = AblationGrid {
        w_nal: w_nal.0,
        modes: modes.0.into_iter().map(|m: Named<NegativeMode>| m.0).collect(),
        losses: losses.0.into_iter().map(|l: Named<NalLossType>| l.0).collect(),
    };
    if grid.cells().is_empty() {
        return Err(CliError::Usage("empty ablation grid".into()));
    }
    for &w in &grid.w_nal {
        NalConfig { w_nal: w, ..Default::default() }.validate()?;
    }
    let data = load_data(&data_dir)?;
    let base = TrainConfig {
        steps,
        batch_size,
        lr,
        seed,
        optimizer: OptimizerKind::Adam,
        nal: Some(NalConfig {
            negatives,
            ..Default::default()
        }),
        nn: data.train.nn,
        parallelism: parallelism(sequential),
        ..d
    };
    base.validate()?;
    let td = TrainData {
        examples: &data.train.examples,
        users: data.store.index(),
    };
    let table = trainer::run_ablation(&td, &data.eval.examples, &base, &grid)?;
    let text = table.render();
    print!("{text}");
    if let Some(out) = out {
        std::fs::write(&out, &text).map_err(runtime(format!("writing {out}")))?;
    }
    Ok(())
}
