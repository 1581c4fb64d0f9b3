//! Command implementations. Each returns the text it would print so tests
//! can drive them without a subprocess.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::info;
use pathmoe_autodiff::GradCheckOptions;
use pathmoe_core::checkpoint::{self, Checkpoint};
use pathmoe_core::eval::{evaluate_on, query_names, write_metrics, write_ranks, MetricsReport};
use pathmoe_core::forward::score_query;
use pathmoe_core::kg::SplitName;
use pathmoe_core::model::init_params;
use pathmoe_core::ppr::{GraphView, PprCache};
use pathmoe_core::trainer::{append_jsonl, EpochReport, Trainer};
use pathmoe_core::verify::{flip_attention_gradients, model_grad_check};
use pathmoe_core::{load_dataset, CoreError, Dataset, LoadOptions, Query, RunConfig};
use serde::Serialize;

use crate::args::{ConfigArgs, EvalArgs, Fault, GradcheckArgs, InspectArgs, PprArgs, TrainArgs};
use crate::error::{CliError, CliResult};

fn split_name(s: &str) -> CliResult<SplitName> {
    s.parse()
        .map_err(|_| CliError::Usage(format!("unknown split `{s}` (train, valid, test)")))
}

fn limited(queries: &[Query], limit: usize) -> &[Query] {
    if limit > 0 && limit < queries.len() {
        &queries[..limit]
    } else {
        queries
    }
}

fn graph_view<'a>(
    config: &RunConfig,
    dataset: &'a Dataset,
    cache_path: Option<&Path>,
) -> CliResult<GraphView<'a>> {
    if !config.enable_ppr {
        return Ok(GraphView::full(&dataset.graph));
    }
    let cache = match cache_path {
        Some(p) => PprCache::load(p)?,
        None => PprCache::new(config.ppr_alpha),
    };
    Ok(GraphView::with_ppr(
        &dataset.graph,
        cache,
        config.ppr_budget,
    ))
}

fn copy_file(from: &Path, to: &Path) -> CliResult<()> {
    std::fs::copy(from, to).map_err(|e| CoreError::io(to, e))?;
    Ok(())
}

/// The deterministic part of a training run, written to `metrics.json`.
#[derive(Debug, Default, Serialize)]
pub struct TrainSummary {
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub best_valid: MetricsReport,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub valid_mrr: Vec<f64>,
    pub length_importance_cv: Vec<f64>,
    pub prune_importance_cv: Vec<f64>,
    pub test: Option<MetricsReport>,
}

pub fn train(args: &TrainArgs) -> CliResult<TrainSummary> {
    let config = args.config()?;
    let dataset = load_dataset(&config.data_dir, LoadOptions::default())?;
    let out = config.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| CoreError::io(&out, e))?;
    dataset.vocab.save(&out)?;
    std::fs::write(out.join("config.txt"), config.to_text()).map_err(|e| CoreError::io(&out, e))?;
    let log_path = out.join("metrics.jsonl");
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| CoreError::io(&log_path, e))?;
    }

    let r = dataset.graph.n_relations_base();
    let params = init_params(&config.model, r, config.train.seed)?;
    let view = graph_view(&config, &dataset, args.common.ppr_cache.as_deref())?;
    let mut trainer = Trainer::new(config.clone(), params, view)?;
    let start = Instant::now();
    if config.train.time_budget > 0.0 {
        trainer.set_deadline(Some(
            start + Duration::from_secs_f64(config.train.time_budget),
        ));
    }
    let train_q = dataset.queries.split(SplitName::Train).to_vec();
    let valid_q = limited(
        dataset.queries.split(SplitName::Valid),
        config.train.valid_limit,
    )
    .to_vec();
    let best_path = out.join("best.ckpt");
    let mut summary = TrainSummary::default();
    let mut best_mrr = f64::NEG_INFINITY;

    for _ in 0..config.train.epochs {
        let mut report: EpochReport = trainer.train_epoch(&train_q)?;
        if report.batches == 0 {
            break;
        }
        let mut view = graph_view(&config, &dataset, args.common.ppr_cache.as_deref())?;
        let (valid, _) = evaluate_on(
            trainer.eval_params(),
            &config.model,
            &mut view,
            &dataset.queries,
            &valid_q,
            config.train.batch_size,
            false,
        )?;
        let ckpt = out.join(format!("epoch-{}.ckpt", report.epoch));
        checkpoint::save(&ckpt, trainer.eval_params(), &config)?;
        if valid.mrr > best_mrr {
            best_mrr = valid.mrr;
            summary.best_epoch = report.epoch;
            summary.best_valid = valid.clone();
            copy_file(&ckpt, &best_path)?;
        }
        info!(
            "epoch {} loss {:.5} valid mrr {:.4} h@10 {:.4} ({:.1}s)",
            report.epoch, report.loss.total, valid.mrr, valid.hit10, report.seconds
        );
        summary.losses.push(report.loss.total);
        summary.valid_mrr.push(valid.mrr);
        summary
            .length_importance_cv
            .push(report.length_importance_cv);
        summary.prune_importance_cv.push(report.prune_importance_cv);
        summary.final_loss = report.loss.total;
        summary.epochs_completed = report.epoch;
        report.valid = Some(valid);
        append_jsonl(&log_path, &report)?;
        if report.truncated {
            break;
        }
    }
    if summary.epochs_completed == 0 {
        return Err(CliError::Usage(
            "no training batch completed; raise epochs or time_budget".into(),
        ));
    }
    if !args.skip_test {
        let best = checkpoint::load(&best_path)?;
        let mut view = graph_view(&config, &dataset, args.common.ppr_cache.as_deref())?;
        let (test, ranked) = evaluate_on(
            &best.params,
            &config.model,
            &mut view,
            &dataset.queries,
            dataset.queries.split(SplitName::Test),
            config.train.batch_size,
            false,
        )?;
        write_ranks(
            &out.join("test_ranks.tsv"),
            &ranked,
            Some(&dataset.vocab),
            dataset.graph.n_relations_base(),
        )?;
        summary.test = Some(test);
    }
    let path = out.join("metrics.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CoreError::io(&path, e))?;
    Ok(summary)
}

/// Loads a checkpoint and applies command-line overrides on top of its
/// stored configuration.
fn load_for_inference(
    path: &Path,
    common: &ConfigArgs,
) -> CliResult<(Checkpoint, RunConfig, Dataset)> {
    let ckpt = checkpoint::load(path)?;
    let mut config = ckpt.config.clone();
    common.apply(&mut config)?;
    config.validate()?;
    let dataset = load_dataset(&config.data_dir, LoadOptions::default())?;
    ckpt.validate(&config.model, dataset.graph.n_relations_base())?;
    Ok((ckpt, config, dataset))
}

pub fn eval(args: &EvalArgs) -> CliResult<(MetricsReport, String)> {
    let (ckpt, mut config, dataset) = load_for_inference(&args.checkpoint, &args.common)?;
    if args.force_gate_open {
        config.model.early_stop = false;
    }
    let which = split_name(&args.split)?;
    let queries = limited(dataset.queries.split(which), args.limit);
    let mut view = graph_view(&config, &dataset, args.common.ppr_cache.as_deref())?;
    let (report, ranked) = evaluate_on(
        &ckpt.params,
        &config.model,
        &mut view,
        &dataset.queries,
        queries,
        config.train.batch_size,
        args.force_gate_open,
    )?;
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
        write_metrics(&out.join("metrics.json"), &report)?;
        write_ranks(
            &out.join("ranks.tsv"),
            &ranked,
            Some(&dataset.vocab),
            dataset.graph.n_relations_base(),
        )?;
    }
    let mut text = String::new();
    let _ = writeln!(text, "split {} ({} queries)", args.split, report.n_queries);
    let _ = writeln!(
        text,
        "MRR {:.4}  H@1 {:.4}  H@3 {:.4}  H@10 {:.4}",
        report.mrr, report.hit1, report.hit3, report.hit10
    );
    let _ = writeln!(
        text,
        "mean messages {:.1}  mean stop layer {:.3}  early stop rate {:.3}  mean retained {:.1}",
        report.mean_messages, report.mean_stop_layer, report.early_stop_rate, report.mean_retained
    );
    Ok((report, text))
}

pub fn ppr(args: &PprArgs) -> CliResult<String> {
    let mut config = RunConfig::default();
    args.common.apply(&mut config)?;
    if let Some(a) = args.alpha {
        config.ppr_alpha = a;
    }
    config.validate()?;
    let dataset = load_dataset(&config.data_dir, LoadOptions::default())?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| config.data_dir.join("ppr.bin"));
    let mut cache = match &args.common.ppr_cache {
        Some(p) => PprCache::load(p)?,
        None => PprCache::new(config.ppr_alpha),
    };
    let start = Instant::now();
    let mut sources = std::collections::BTreeSet::new();
    for name in args
        .splits
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
    {
        sources.extend(
            dataset
                .queries
                .split(split_name(name)?)
                .iter()
                .map(|q| q.entity),
        );
    }
    for &s in &sources {
        cache.ensure(&dataset.graph, s)?;
    }
    cache.save(&out)?;
    Ok(format!(
        "{} PPR vectors (alpha {}) written to {} in {:.1}s\n",
        cache.len(),
        cache.alpha,
        out.display(),
        start.elapsed().as_secs_f64()
    ))
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<String> {
    let opts = GradCheckOptions {
        step: args.step,
        seed: args.seed,
        kink_threshold: Some(args.tolerance),
        tamper: args.inject_fault.map(|f| match f {
            Fault::AttentionSign => flip_attention_gradients as fn(&mut _),
        }),
        ..Default::default()
    };
    let start = Instant::now();
    let report = model_grad_check(args.seed, args.draws, &opts)?;
    let mut text = String::new();
    for (component, err) in &report.per_component {
        let _ = writeln!(text, "{component:<20} max rel. error {err:.3e}");
    }
    let _ = writeln!(
        text,
        "{} elements over {} draws, {} skipped at kinks, {:.1}s",
        report.elements_checked,
        report.draws,
        report.kinks.len(),
        start.elapsed().as_secs_f64()
    );
    if report.passed(args.tolerance) {
        let _ = writeln!(
            text,
            "PASS max rel. error {:.3e} < {:.0e}",
            report.max_rel_error, args.tolerance
        );
        Ok(text)
    } else {
        let worst = report
            .worst
            .as_ref()
            .map_or("none".to_string(), |(n, k, d)| {
                format!("{n}[{k}] in draw {d}")
            });
        print!("{text}");
        Err(CliError::Verification(format!(
            "max rel. error {:.3e} at {worst}, kink fraction {:.4}",
            report.max_rel_error,
            report.kink_fraction()
        )))
    }
}

pub fn inspect(args: &InspectArgs) -> CliResult<String> {
    let (ckpt, config, dataset) = load_for_inference(&args.checkpoint, &args.common)?;
    let which = split_name(&args.split)?;
    let queries = limited(dataset.queries.split(which), args.limit);
    let mut view = graph_view(&config, &dataset, args.common.ppr_cache.as_deref())?;
    let mut out = String::from(
        "entity\trelation\tanswer\trank\tselected_lengths\tlength_weights\tstop_layer\tstopped_early\tmessages\tlayer_experts\tlayer_retained\n",
    );
    for chunk in queries.chunks(config.train.batch_size.max(1)) {
        let sources: Vec<_> = chunk.iter().map(|q| q.entity).collect();
        let graph = view.for_sources(&sources)?;
        for q in chunk {
            let (psi, trace) = score_query(&ckpt.params, &config.model, &graph, q, false)?;
            let rank = pathmoe_core::eval::rank_filtered(
                &psi,
                q.answer,
                dataset.queries.filter_mask(q.entity, q.relation),
            );
            let join = |v: Vec<String>| v.join(",");
            let experts = trace
                .layers
                .iter()
                .map(|l| {
                    l.experts
                        .iter()
                        .map(|e| e.name())
                        .collect::<Vec<_>>()
                        .join("+")
                })
                .collect::<Vec<_>>()
                .join(";");
            let (e, rel, a) =
                query_names(q, Some(&dataset.vocab), dataset.graph.n_relations_base());
            let _ = writeln!(
                out,
                "{e}\t{rel}\t{a}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                rank,
                join(
                    trace
                        .selected_lengths
                        .iter()
                        .map(|l| l.to_string())
                        .collect()
                ),
                join(
                    trace
                        .length_weights
                        .iter()
                        .map(|w| format!("{w:.4}"))
                        .collect()
                ),
                trace.stop_layer,
                trace.stopped_early,
                trace.messages,
                experts,
                join(
                    trace
                        .layers
                        .iter()
                        .map(|l| l.retained.to_string())
                        .collect()
                ),
            );
        }
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, &out).map_err(|e| CoreError::io(path, e))?;
            Ok(format!(
                "{} rows written to {}\n",
                queries.len(),
                path.display()
            ))
        }
        None => Ok(out),
    }
}

/// Default location of the best checkpoint of a run directory.
pub fn best_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join("best.ckpt")
}
