use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use moesim::engine::{self, kernels_csv, ComparisonTable, RunReport, Strategy};
use moesim::predictor::admissions_csv;
use moesim::profiler::export::{
    curve_csv, frequency_csv, heatmap_csv, spearman_csv, stat_file_name, write_text, CsvMeta,
};
use moesim::profiler::{
    cumulative_top_fraction, spearman_rho, spearman_rho_values, CumulativeCurve, Heatmap,
    LayerProfile, ProfileAccumulator,
};
use moesim::trace::{
    generate_synthetic, load_traces, load_traces_lenient, ModelSpec, PhaseFilter, RequestTrace,
    TraceError, TraceReader, TraceSet, TraceWriter,
};

use crate::config::{ExperimentConfig, Source};
use crate::CliError;

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::Data(format!("creating {}: {e}", cfg.output_dir.display())))?;
    Ok(&cfg.output_dir)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    write_text(path, text).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

fn with_header(lines: &[String], body: &str) -> String {
    let mut s: String = lines.iter().map(|l| format!("# {l}\n")).collect();
    s.push_str(body);
    s
}

fn load_trace_set(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<TraceSet, CliError> {
    match cfg.source()? {
        Source::Synth(p) => Ok(generate_synthetic(model, &p)?),
        Source::Trace(t) if t.lenient => {
            let out = load_traces_lenient(&t.path, model)?;
            for e in &out.skipped {
                log::debug!("skipped record: {e}");
            }
            if !out.skipped.is_empty() {
                log::warn!(
                    "{}: skipped {} malformed records",
                    t.path.display(),
                    out.skipped.len()
                );
            }
            Ok(out.traces)
        }
        Source::Trace(t) => Ok(load_traces(&t.path, model)?),
    }
}

pub fn gen(cfg: &ExperimentConfig, output: Option<PathBuf>) -> Result<(), CliError> {
    let model = cfg.model.resolve()?;
    let Source::Synth(params) = cfg.source()? else {
        return Err(CliError::Config(
            "gen needs a [synth] section, not a trace path".into(),
        ));
    };
    let ts = generate_synthetic(&model, &params)?;
    let path = match output {
        Some(p) => p,
        None => out_dir(cfg)?.join(format!("{}_trace.jsonl", model.name)),
    };
    let generator = serde_json::json!({ "config": cfg, "seed": cfg.seed });
    let mut w = TraceWriter::create(&path, &model, Some(&generator))?;
    for r in &ts.requests {
        w.write(r)?;
    }
    w.finish()?;
    println!(
        "wrote {}: requests={} tokens={} E={} top_k={} moe_layers={}",
        path.display(),
        ts.requests.len(),
        ts.token_count(),
        model.num_experts,
        model.top_k,
        model.num_moe_layers()
    );
    Ok(())
}

#[derive(Serialize)]
struct LayerSummary {
    layer: usize,
    phase: PhaseFilter,
    max_frequency_skew: f64,
    cross_layer_top_share: Option<f64>,
    cross_token_top_share: Option<f64>,
    coactivation_top_share: Option<f64>,
}

#[derive(Serialize)]
struct ProfileSummary<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    requests: usize,
    top_fraction: f64,
    layers: Vec<LayerSummary>,
    spearman: Vec<SpearmanRow>,
}

/// (layer, statistic, rho)
type SpearmanRow = (usize, &'static str, Option<f64>);

pub fn profile(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let model = cfg.model.resolve()?;
    let n = model.num_moe_layers();
    let layers: Vec<usize> = cfg
        .profile
        .layers
        .clone()
        .unwrap_or_else(|| (0..n).collect());
    if let Some(&bad) = layers.iter().find(|&&l| l >= n) {
        return Err(CliError::Config(format!(
            "layer {bad} out of range (model has {n} MoE layers)"
        )));
    }
    let mut phases = cfg.profile.phases.clone();
    for p in [PhaseFilter::Prefill, PhaseFilter::Decode] {
        if !phases.contains(&p) {
            phases.push(p);
        }
    }
    let mut accs: Vec<ProfileAccumulator> = phases
        .iter()
        .map(|&p| ProfileAccumulator::new(&model, p))
        .collect();
    let mut requests = 0usize;
    let mut observe = |r: &RequestTrace| {
        requests += 1;
        for a in accs.iter_mut() {
            a.observe(r);
        }
    };
    match cfg.source()? {
        Source::Synth(p) => generate_synthetic(&model, &p)?
            .requests
            .iter()
            .for_each(&mut observe),
        Source::Trace(t) => {
            let mut skipped = 0usize;
            for rec in TraceReader::open(&t.path, &model)? {
                match rec {
                    Ok(r) => observe(&r),
                    Err(e) if t.lenient && !matches!(e, TraceError::Io { .. }) => {
                        skipped += 1;
                        log::debug!("skipping record: {e}");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if skipped > 0 {
                log::warn!("{}: skipped {skipped} malformed records", t.path.display());
            }
        }
    }

    let dir = out_dir(cfg)?;
    let header = cfg.header_lines();
    let meta = |stat: &str, kind: &str, layer: String, phase: &str| CsvMeta {
        model: model.name.clone(),
        stat: stat.into(),
        kind: kind.into(),
        layer,
        phase: phase.into(),
        extra: header.clone(),
    };
    let top = |h: &Heatmap| cumulative_top_fraction(&h.values, cfg.profile.top_fraction).ok();
    let mut summaries = Vec::new();
    let mut written = 0usize;
    for (acc, &phase) in accs.iter().zip(&phases) {
        if !cfg.profile.phases.contains(&phase) {
            continue;
        }
        let ph = phase.as_str();
        for &l in &layers {
            let lp = &acc.layers[l];
            let ls = l.to_string();
            let mut emit = |stat: &str, body: String| -> Result<(), CliError> {
                written += 1;
                write(&dir.join(stat_file_name(&model.name, stat, &ls, ph)), &body)
            };
            let ct = lp.cross_token.conditional();
            emit(
                "cross_token",
                heatmap_csv(&ct, &meta("cross_token", ct.kind.as_str(), ls.clone(), ph)),
            )?;
            if let Ok(c) = CumulativeCurve::from_values(&ct.values) {
                emit(
                    "cross_token_curve",
                    curve_csv(&c, &meta("cross_token_curve", "cumulative", ls.clone(), ph)),
                )?;
            }
            let cl = lp.cross_layer.as_ref().map(|c| c.conditional());
            if let Some(h) = &cl {
                emit(
                    "cross_layer",
                    heatmap_csv(h, &meta("cross_layer", h.kind.as_str(), ls.clone(), ph)),
                )?;
                if let Ok(c) = CumulativeCurve::from_values(&h.values) {
                    emit(
                        "cross_layer_curve",
                        curve_csv(&c, &meta("cross_layer_curve", "cumulative", ls.clone(), ph)),
                    )?;
                }
            }
            let co = (model.top_k >= 2).then(|| {
                lp.coactivation
                    .normalized(model.top_k, cfg.profile.normalizer)
            });
            if let Some(h) = &co {
                emit(
                    "coactivation",
                    heatmap_csv(h, &meta("coactivation", h.kind.as_str(), ls.clone(), ph)),
                )?;
            }
            let f = moesim::profiler::FrequencyVector::from_counts(lp.frequency.clone());
            emit(
                "frequency",
                frequency_csv(&f, &meta("frequency", "frequency", ls.clone(), ph)),
            )?;
            summaries.push(LayerSummary {
                layer: l,
                phase,
                max_frequency_skew: f.max_normalized(),
                cross_layer_top_share: cl.as_ref().and_then(top),
                cross_token_top_share: top(&ct),
                coactivation_top_share: co.as_ref().and_then(top),
            });
        }
    }

    let find = |p: PhaseFilter| {
        &accs[phases
            .iter()
            .position(|&x| x == p)
            .expect("phase accumulated")]
    };
    let (pre, dec) = (find(PhaseFilter::Prefill), find(PhaseFilter::Decode));
    let mut rows = Vec::new();
    for &l in &layers {
        rows.extend(spearman_rows(l, &pre.layers[l], &dec.layers[l], &model)?);
    }
    let sp_meta = meta(
        "spearman",
        "spearman_rho",
        "all".into(),
        "prefill-vs-decode",
    );
    write(
        &dir.join(stat_file_name(
            &model.name,
            "spearman",
            "all",
            "prefill-vs-decode",
        )),
        &spearman_csv(&rows, &sp_meta),
    )?;
    let summary = ProfileSummary {
        config: cfg,
        seed: cfg.seed,
        requests,
        top_fraction: cfg.profile.top_fraction,
        layers: summaries,
        spearman: rows,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(
        &dir.join(format!("{}_profile_summary.json", model.name)),
        &json,
    )?;
    println!(
        "profiled {requests} requests: {} statistic files and a spearman table in {}",
        written,
        dir.display()
    );
    Ok(())
}

fn spearman_rows(
    layer: usize,
    pre: &LayerProfile,
    dec: &LayerProfile,
    model: &ModelSpec,
) -> Result<Vec<SpearmanRow>, CliError> {
    let err = |e: moesim::profiler::ProfileError| CliError::Data(e.to_string());
    let mut rows = vec![(
        layer,
        "cross_token",
        spearman_rho(
            &pre.cross_token.conditional(),
            &dec.cross_token.conditional(),
        )
        .map_err(err)?,
    )];
    if let (Some(a), Some(b)) = (&pre.cross_layer, &dec.cross_layer) {
        rows.push((
            layer,
            "cross_layer",
            spearman_rho(&a.conditional(), &b.conditional()).map_err(err)?,
        ));
    }
    if model.top_k >= 2 {
        rows.push((
            layer,
            "coactivation",
            spearman_rho(
                &pre.coactivation.normalized(model.top_k, Default::default()),
                &dec.coactivation.normalized(model.top_k, Default::default()),
            )
            .map_err(err)?,
        ));
    }
    let f = |v: &[u64]| v.iter().map(|&c| c as f64).collect::<Vec<_>>();
    rows.push((
        layer,
        "frequency",
        spearman_rho_values(&f(&pre.frequency), &f(&dec.frequency)).map_err(err)?,
    ));
    Ok(rows)
}

/// Run report as written to disk, with the experiment that produced it.
#[derive(Serialize, Deserialize)]
struct ReportFile {
    config: ExperimentConfig,
    seed: u64,
    report: RunReport,
}

fn print_table(t: &ComparisonTable) {
    println!(
        "{:<10} {:>14} {:>9} {:>12} {:>9} {:>8} {:>8} {:>8}",
        "strategy", "tokens/s", "speedup", "hops", "hop_red", "loc_rd", "rem_rd", "loc_wr"
    );
    for r in &t.rows {
        let hr = r.hop_reduction.map_or("inf".into(), |v| format!("{v:.2}"));
        println!(
            "{:<10} {:>14.1} {:>9.2} {:>12} {:>9} {:>8.3} {:>8.3} {:>8.3}",
            r.strategy.as_str(),
            r.throughput,
            r.speedup,
            r.hops,
            hr,
            r.dram.local_read,
            r.dram.remote_read,
            r.dram.local_write
        );
    }
}

fn write_comparison(dir: &Path, header: &[String], t: &ComparisonTable) -> Result<(), CliError> {
    write(
        &dir.join("comparison.csv"),
        &with_header(header, &t.to_csv()),
    )?;
    let json = serde_json::json!({ "header": header, "comparison": t });
    write(
        &dir.join("comparison.json"),
        &serde_json::to_string_pretty(&json).expect("serializes"),
    )
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let model = cfg.model.resolve()?;
    let ts = load_trace_set(cfg, &model)?;
    let configs = cfg
        .strategies
        .iter()
        .map(|&s| cfg.sim_config(&model, s))
        .collect::<Result<Vec<_>, _>>()?;
    let results: Vec<Result<RunReport, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| scope.spawn(|| engine::run(&ts, c).map_err(CliError::from)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread"))
            .collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let dir = out_dir(cfg)?;
    let header = cfg.header_lines();
    for r in &reports {
        let file = ReportFile {
            config: cfg.clone(),
            seed: cfg.seed,
            report: r.clone(),
        };
        let json = serde_json::to_string_pretty(&file).expect("report serializes");
        write(&dir.join(format!("report_{}.json", r.strategy())), &json)?;
        if r.strategy().uses_predictor() {
            write(
                &dir.join(format!("admissions_{}.csv", r.strategy())),
                &with_header(&header, &admissions_csv(&r.admissions)),
            )?;
        }
    }
    let refs: Vec<&RunReport> = reports.iter().collect();
    write(
        &dir.join("kernels.csv"),
        &with_header(&header, &kernels_csv(&refs)),
    )?;
    if reports.iter().any(|r| r.strategy() == Strategy::Base) {
        let table = engine::compare(&reports)?;
        write_comparison(dir, &header, &table)?;
        print_table(&table);
    } else {
        log::warn!("no base run; comparison table skipped");
    }
    println!("wrote {} run reports to {}", reports.len(), dir.display());
    Ok(())
}

pub fn compare(cfg: &ExperimentConfig, paths: &[PathBuf]) -> Result<(), CliError> {
    let mut files = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(p)
            .map_err(|e| CliError::Data(format!("reading {}: {e}", p.display())))?;
        let f: ReportFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        files.push(f);
    }
    let header = files[0].config.header_lines();
    let reports: Vec<RunReport> = files.into_iter().map(|f| f.report).collect();
    let table = engine::compare(&reports)?;
    write_comparison(out_dir(cfg)?, &header, &table)?;
    print_table(&table);
    Ok(())
}
