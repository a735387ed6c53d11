//! The pipeline commands: gen-data, train, eval, attribute, bench, report.

use crate::config::RunConfig;
use crate::manifest::ManifestWriter;
use anyhow::{anyhow, bail, Context, Result};
use brainage_core::attribution::{average_maps, fuse_to_volume, ranking_csv, rank_regions, view_gradients};
use brainage_core::checkpoint::{load_checkpoint, save_checkpoint};
use brainage_core::corpus::{build_corpus, DiskCorpus, Split};
use brainage_core::flops::{
    bench_full_self_attention, bench_stem, loglog_slope, stem_flops, full_self_attention_flops,
    BenchPoint,
};
use brainage_core::model::{BrainAgeModel, Group};
use brainage_core::stats::{
    bag, correlations_csv, evaluate, groups_csv, predictions_csv, AgePrediction, MetricsReport,
};
use brainage_core::svg;
use brainage_core::tensor::Dtype;
use brainage_core::train::fit;
use std::path::Path;

pub fn cmd_gen_data(config: &RunConfig) -> Result<()> {
    let corpus_dir = config.corpus_dir();
    let manifest = build_corpus(&config.corpus, &corpus_dir)?;
    let by_split = |s: Split| {
        manifest
            .scans
            .iter()
            .filter(|e| e.split == s)
            .count()
    };
    println!(
        "corpus: {} scans ({} train / {} valid / {} test) under {}",
        manifest.scans.len(),
        by_split(Split::Train),
        by_split(Split::Valid),
        by_split(Split::Test),
        corpus_dir.display()
    );
    Ok(())
}

pub fn cmd_train(config: &RunConfig) -> Result<Vec<String>> {
    let corpus = DiskCorpus::open(&config.corpus_dir())
        .context("opening corpus (run gen-data first)")?;
    let model = BrainAgeModel::init(config.model.clone(), corpus.manifest.volume_stats.clone())?;
    let result = fit(model, &corpus, &config.train)?;

    let ckpt_dir = config.checkpoint_dir();
    std::fs::create_dir_all(&ckpt_dir)?;
    save_checkpoint(&result.best, &ckpt_dir)?;

    let mut log_csv = String::from("epoch,lr,train_mse,valid_mae,wall_s\n");
    for l in &result.log {
        log_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            l.epoch, l.lr, l.train_mse, l.valid_mae, l.wall_s
        ));
    }
    std::fs::write(config.run_dir.join("train_log.csv"), log_csv)?;
    println!(
        "trained {} epochs; best valid MAE {:.3} at epoch {:?}; checkpoint at {}",
        result.log.len(),
        result.best_valid_mae,
        result.best_epoch,
        ckpt_dir.display()
    );
    Ok(vec!["train_log.csv".into()])
}

fn checkpoint_or_untrained(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    untrained: bool,
    corpus: &DiskCorpus,
) -> Result<BrainAgeModel> {
    if untrained {
        return Ok(BrainAgeModel::init(
            config.model.clone(),
            corpus.manifest.volume_stats.clone(),
        )?);
    }
    let dir = checkpoint
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| config.checkpoint_dir());
    Ok(load_checkpoint(&dir)?)
}

pub fn split_predictions(
    model: &BrainAgeModel,
    corpus: &DiskCorpus,
    split: Split,
) -> Result<Vec<AgePrediction>> {
    let mut preds = Vec::new();
    for &idx in corpus.split_indices(split) {
        let sample = corpus.load_sample(idx)?;
        preds.push(AgePrediction {
            scan_id: sample.scan_id.clone(),
            subject_id: sample.subject_id.clone(),
            age: sample.age,
            predicted: model.predict(&sample)?,
            group: sample.group,
            cog_score: sample.cog_score,
        });
    }
    Ok(preds)
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?}; expected train | valid | test"),
    }
}

pub fn cmd_eval(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    untrained: bool,
    split: Split,
) -> Result<Vec<String>> {
    let corpus = DiskCorpus::open(&config.corpus_dir())?;
    let model = checkpoint_or_untrained(config, checkpoint, untrained, &corpus)?;
    let preds = split_predictions(&model, &corpus, split)?;
    if preds.is_empty() {
        bail!("split has no scans");
    }
    let report = evaluate(&preds)?;

    let tables = config.run_dir.join("tables");
    let figures = config.run_dir.join("figures");
    std::fs::create_dir_all(&tables)?;
    std::fs::create_dir_all(&figures)?;

    std::fs::write(
        config.run_dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(tables.join("predictions.csv"), predictions_csv(&preds))?;
    std::fs::write(tables.join("groups.csv"), groups_csv(&report))?;
    std::fs::write(tables.join("correlations.csv"), correlations_csv(&report))?;

    let mut outputs = vec![
        "metrics.json".to_string(),
        "tables/predictions.csv".to_string(),
        "tables/groups.csv".to_string(),
        "tables/correlations.csv".to_string(),
    ];
    for group in Group::ALL {
        let pts: Vec<(f64, f64)> = preds
            .iter()
            .filter(|p| p.group == group)
            .map(|p| (p.age, p.predicted))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let scatter = svg::scatter_plot(
            &format!("{}: predicted vs chronological age", group.label()),
            "age (years)",
            "predicted (years)",
            &pts,
        );
        let rel = format!("figures/scatter_{}.svg", group.label().to_lowercase());
        std::fs::write(config.run_dir.join(&rel), scatter)?;
        outputs.push(rel);

        let bags: Vec<f64> = preds
            .iter()
            .filter(|p| p.group == group)
            .map(bag)
            .collect();
        let hist = svg::histogram(
            &format!("{}: brain age gap", group.label()),
            "BAG (years)",
            &bags,
            20,
        );
        let rel = format!("figures/bag_hist_{}.svg", group.label().to_lowercase());
        std::fs::write(config.run_dir.join(&rel), hist)?;
        outputs.push(rel);
    }

    println!(
        "eval: n={} mae={:.3} r={}",
        report.n,
        report.mae,
        report
            .pearson_r
            .map_or("n/a".into(), |r| format!("{r:.3}"))
    );
    Ok(outputs)
}

pub fn cmd_attribute(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<String>> {
    let corpus = DiskCorpus::open(&config.corpus_dir())?;
    let model = checkpoint_or_untrained(config, checkpoint, false, &corpus)?;
    let geom = corpus.geometry()?;

    // CN test scans only, mirroring the averaging population.
    let mut maps = Vec::new();
    for &idx in corpus.split_indices(Split::Test) {
        if corpus.entry(idx).group != Group::Cn {
            continue;
        }
        let sample = corpus.load_sample(idx)?;
        let grads = view_gradients(&model, &sample)?;
        maps.push(fuse_to_volume(&grads, &geom)?);
    }
    if maps.is_empty() {
        bail!("no CN test scans to attribute over");
    }
    let n_maps = maps.len();
    let gbar = average_maps(&maps)?;

    let reference = corpus.reference()?;
    let (ranking, warnings) = rank_regions(&gbar, &reference.label_map, &reference.region_volumes)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let tables = config.run_dir.join("tables");
    let figures = config.run_dir.join("figures");
    std::fs::create_dir_all(&tables)?;
    std::fs::create_dir_all(&figures)?;
    gbar.write(&config.run_dir.join("mean_gradient_map.tsr"), Dtype::F32)?;
    std::fs::write(tables.join("ranking.csv"), ranking_csv(&ranking))?;

    let top: Vec<(String, f64)> = ranking
        .iter()
        .take(15)
        .map(|r| (format!("region {:02}", r.region_id), r.score))
        .collect();
    std::fs::write(
        config.run_dir.join("figures/ranking.svg"),
        svg::bar_chart(
            "Top regions by gradient per volume",
            "mean |gradient| per mm^3",
            &top,
        ),
    )?;

    println!(
        "attribution over {} CN test scans; top regions: {:?}",
        n_maps,
        ranking.iter().take(3).map(|r| r.region_id).collect::<Vec<_>>()
    );
    Ok(vec![
        "mean_gradient_map.tsr".into(),
        "tables/ranking.csv".into(),
        "figures/ranking.svg".into(),
    ])
}

#[derive(serde::Serialize)]
struct BenchSummary {
    stem_wall_slope: f64,
    full_attention_wall_slope: f64,
    stem_flop_ratio_top_doubling: f64,
    full_attention_flop_ratio_top_doubling: f64,
    points: Vec<BenchPoint>,
}

pub fn cmd_bench(config: &RunConfig) -> Result<Vec<String>> {
    let stem_cfg = config.model.stem();
    let mut points: Vec<BenchPoint> = Vec::new();
    for &n in &config.bench.sizes {
        points.push(bench_stem(&stem_cfg, n, config.bench.reps, config.bench.seed));
    }
    for &n in &config.bench.sizes {
        points.push(bench_full_self_attention(
            config.model.d_model,
            config.model.n_heads,
            n,
            config.bench.reps,
            config.bench.seed,
        ));
    }

    let series = |name: &str| -> Vec<(f64, f64)> {
        points
            .iter()
            .filter(|p| p.component == name)
            .map(|p| (p.n as f64, p.wall_ns as f64))
            .collect()
    };
    let stem_slope = loglog_slope(&series("stem"));
    let full_slope = loglog_slope(&series("full_self_attention"));

    let mut sizes = config.bench.sizes.clone();
    sizes.sort_unstable();
    let (ratio_stem, ratio_full) = match sizes.len() {
        0 | 1 => (f64::NAN, f64::NAN),
        len => {
            let (a, b) = (sizes[len - 2] as u64, sizes[len - 1] as u64);
            (
                stem_flops(&stem_cfg, b) as f64 / stem_flops(&stem_cfg, a) as f64,
                full_self_attention_flops(config.model.d_model, b) as f64
                    / full_self_attention_flops(config.model.d_model, a) as f64,
            )
        }
    };

    let mut csv = String::from("component,n,flops,wall_ns\n");
    for p in &points {
        csv.push_str(&format!("{},{},{},{}\n", p.component, p.n, p.flops, p.wall_ns));
    }
    let tables = config.run_dir.join("tables");
    std::fs::create_dir_all(&tables)?;
    std::fs::write(tables.join("bench.csv"), csv)?;
    let summary = BenchSummary {
        stem_wall_slope: stem_slope,
        full_attention_wall_slope: full_slope,
        stem_flop_ratio_top_doubling: ratio_stem,
        full_attention_flop_ratio_top_doubling: ratio_full,
        points,
    };
    std::fs::write(
        config.run_dir.join("bench_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "bench: stem wall slope {stem_slope:.3}, full attention wall slope {full_slope:.3}; \
         flop ratios (top doubling) {ratio_stem:.3} / {ratio_full:.3}"
    );
    Ok(vec!["tables/bench.csv".into(), "bench_summary.json".into()])
}

pub fn cmd_report(run_dir: &Path) -> Result<Vec<String>> {
    let metrics_path = run_dir.join("metrics.json");
    let metrics: Option<MetricsReport> = if metrics_path.exists() {
        // Deserialize through Value: MetricsReport is Serialize-only.
        None
    } else {
        None
    };
    drop(metrics);
    let metrics_html = if metrics_path.exists() {
        let value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&metrics_path)?)?;
        let mut rows = format!(
            "<tr><td>N</td><td>{}</td></tr><tr><td>MAE</td><td>{}</td></tr>\
             <tr><td>Pearson r</td><td>{}</td></tr><tr><td>p</td><td>{}</td></tr>",
            value["n"], value["mae"], value["pearson_r"], value["pearson_p"]
        );
        if let Some(groups) = value["groups"].as_array() {
            for g in groups {
                rows.push_str(&format!(
                    "<tr><td>{} BAG mean (95% CI)</td><td>{} ({}, {})</td></tr>",
                    g["group"].as_str().unwrap_or("?"),
                    g["bag_mean"],
                    g["bag_ci95_low"],
                    g["bag_ci95_high"]
                ));
            }
        }
        format!("<table border='1' cellpadding='4'>{rows}</table>")
    } else {
        "<p>No metrics.json yet; run eval first.</p>".to_string()
    };

    let mut figures_html = String::new();
    let fig_dir = run_dir.join("figures");
    if fig_dir.exists() {
        let mut figs: Vec<_> = std::fs::read_dir(&fig_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map_or(false, |e| e == "svg"))
            .collect();
        figs.sort();
        for fig in figs {
            let svg_text = std::fs::read_to_string(&fig)?;
            figures_html.push_str(&format!(
                "<div style='display:inline-block;margin:8px'>{svg_text}</div>\n"
            ));
        }
    }

    let bench_html = {
        let path = run_dir.join("bench_summary.json");
        if path.exists() {
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            format!(
                "<p>Wall-time log-log slopes: stem {} | full self-attention {}</p>",
                v["stem_wall_slope"], v["full_attention_wall_slope"]
            )
        } else {
            String::new()
        }
    };

    let html = format!(
        "<!doctype html><html><head><meta charset='utf-8'>\
         <title>brainage run report</title></head><body>\
         <h1>Brain-age run report</h1>\
         <h2>Metrics</h2>{metrics_html}\
         <h2>Complexity</h2>{bench_html}\
         <h2>Figures</h2>{figures_html}\
         </body></html>"
    );
    std::fs::write(run_dir.join("report.html"), html)?;
    println!("report written to {}", run_dir.join("report.html").display());
    Ok(vec!["report.html".into()])
}

/// Shared wrapper: run a command, then hash its outputs into the manifest.
pub fn record_outputs(
    run_dir: &Path,
    command: &str,
    seed: Option<u64>,
    threads: usize,
    outputs: &[String],
    trees: &[&str],
) -> Result<()> {
    let mut writer = ManifestWriter::open(run_dir)?;
    writer.record_command(command, seed, threads);
    for out in outputs {
        writer.add_file(out)?;
    }
    for tree in trees {
        if run_dir.join(tree).exists() {
            writer.add_tree(tree)?;
        }
    }
    writer.save().map_err(|e| anyhow!(e))
}
