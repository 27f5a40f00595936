use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use lkareid::attention::AttentionError;
use lkareid::data::save_png;
use lkareid::evaluation::{
    evaluate, format_manifest, load_manifest, EvalConfig, EvalReport, FeatureSource, Sample, Split,
};
use lkareid::gradsuite::{gradient_suite, Scope};
use lkareid::tensor::{GradCheckOptions, TensorError};
use lkareid::training::{held_out_split, synth_generate, train as run_training, TrainError};
use lkareid::{
    build_model, count_params_flops, decompose_large_kernel, eca_kernel_size, load_checkpoint, save_checkpoint,
    LkaConfig, ModelError,
};
use serde::Serialize;

use crate::config::TrainSettings;
use crate::{EvalArgs, GradcheckArgs, InspectArgs, TrainArgs};

/// A numerical failure, reported with exit code 2.
#[derive(Debug)]
struct Numerical(String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn tensor_numerical(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. } | TensorError::ZeroNorm { .. })
}

fn attention_numerical(e: &AttentionError) -> bool {
    matches!(e, AttentionError::Tensor(t) if tensor_numerical(t))
}

fn model_numerical(e: &ModelError) -> bool {
    match e {
        ModelError::Tensor(t) => tensor_numerical(t),
        ModelError::Attention(a) => attention_numerical(a),
        _ => false,
    }
}

fn train_numerical(e: &TrainError) -> bool {
    match e {
        TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => true,
        TrainError::Model(m) => model_numerical(m),
        TrainError::Tensor(t) => tensor_numerical(t),
        _ => false,
    }
}

/// `2` for numerical failures, `1` for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.is::<Numerical>()
            || c.downcast_ref::<TensorError>().is_some_and(tensor_numerical)
            || c.downcast_ref::<AttentionError>().is_some_and(attention_numerical)
            || c.downcast_ref::<ModelError>().is_some_and(model_numerical)
            || c.downcast_ref::<TrainError>().is_some_and(train_numerical)
    });
    if numerical {
        2
    } else {
        1
    }
}

fn init_threads(n: usize) -> Result<()> {
    if n == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[derive(Serialize)]
struct InspectReport {
    decomposition: lkareid::Decomposition,
    feature_map: (usize, usize),
    flops_decomposed: u64,
    flops_depthwise_full: u64,
    flops_full_conv: u64,
    /// Whole-block cost including the input and output projections;
    /// absent when the dilated kernel extent cannot be centred.
    lka_block: Option<lkareid::Cost>,
    eca_kernel_size: usize,
    gamma: f64,
    b: f64,
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let dec = decompose_large_kernel(a.kernel, a.dilation, a.channels)?;
    let k = eca_kernel_size(a.channels, a.gamma, a.b)?;
    let positions = (a.height * a.width) as u64;
    let block = match LkaConfig::new(a.channels, a.kernel, a.dilation) {
        Ok(cfg) => Some(count_params_flops(&cfg, [1, a.channels, a.height, a.width])?),
        Err(AttentionError::EvenExtent { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let report = InspectReport {
        decomposition: dec,
        feature_map: (a.height, a.width),
        flops_decomposed: dec.flops_per_position_decomposed * positions,
        flops_depthwise_full: dec.flops_per_position_depthwise_full * positions,
        flops_full_conv: dec.flops_per_position_full * positions,
        lka_block: block,
        eca_kernel_size: k,
        gamma: a.gamma,
        b: a.b,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    let d = &report.decomposition;
    println!("large kernel K={} d={} C={}", d.kernel, d.dilation, d.channels);
    println!("  depthwise conv      {0}x{0}", d.dw_kernel);
    println!("  dilated depthwise   {0}x{0}, dilation {1}", d.dd_kernel, d.dilation);
    println!("  pointwise conv      1x1");
    println!("  receptive field     {}", d.receptive_field);
    println!();
    println!(
        "  {:<22}{:>16}{:>20}",
        "",
        "params",
        format!("FLOPs @ {}x{}", a.height, a.width)
    );
    let rows = [
        ("decomposed", d.params_decomposed, report.flops_decomposed),
        (
            "depthwise KxK + 1x1",
            d.params_depthwise_full,
            report.flops_depthwise_full,
        ),
        ("dense KxK", d.params_full_conv, report.flops_full_conv),
    ];
    for (name, p, f) in rows {
        println!("  {name:<22}{:>16}{:>20}", grouped(p as u64), grouped(f));
    }
    match block {
        Some(c) => println!(
            "  {:<22}{:>16}{:>20}",
            "LKA block (with bias)",
            grouped(c.params as u64),
            grouped(c.flops)
        ),
        None => println!("  LKA block: dilated kernel extent is even, block not constructible"),
    }
    println!();
    println!(
        "channel attention kernel k = {k} (C={}, gamma={}, b={})",
        a.channels, a.gamma, a.b
    );
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    init_threads(a.threads)?;
    let scope: Scope = a.scope.parse().map_err(anyhow::Error::msg)?;
    let opts = GradCheckOptions {
        analytic_scale: a.corrupt_analytic,
        ..GradCheckOptions::default()
    };
    let mut checks = Vec::new();
    for seed in a.seed..a.seed + a.seeds.max(1) {
        checks.extend(gradient_suite(scope, seed, opts)?);
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.block).collect();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&checks)?);
    } else {
        println!(
            "{:<15}{:>6}{:>16}{:>10}  result",
            "block", "seed", "max rel error", "elements"
        );
        for c in &checks {
            let verdict = if c.passed { "pass" } else { "FAIL" };
            println!(
                "{:<15}{:>6}{:>16.3e}{:>10}  {verdict}",
                c.block, c.seed, c.max_rel_error, c.elements
            );
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        let mut names: Vec<_> = failed.clone();
        names.dedup();
        Err(Numerical(format!("gradient check failed for {}", names.join(", "))).into())
    }
}

fn write_heldout(out: &Path, settings: &TrainSettings, data: &lkareid::data::ImageSet) -> Result<()> {
    let split = held_out_split(&settings.data);
    let images = out.join("heldout").join("images");
    fs::create_dir_all(&images)?;
    let n = settings.data.images_per_identity;
    let sample = |i: usize| -> Result<Sample> {
        let name = format!(
            "{:04}_c{:03}_{:08}_{}.png",
            data.labels[i],
            data.cameras[i],
            i % n,
            data.views[i]
        );
        let rel = format!("images/{name}");
        Ok(Sample {
            path: Some(rel),
            feature: None,
            vehicle_id: data.labels[i],
            camera_id: data.cameras[i],
            view_id: Some(data.views[i]),
        })
    };
    for &i in &split.gallery {
        let s = sample(i)?;
        let path = out.join("heldout").join(s.path.as_deref().expect("path"));
        save_png(&path, &data.images[i], data.height, data.width)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let query: Vec<Sample> = split.query.iter().map(|&i| sample(i)).collect::<Result<_>>()?;
    let gallery: Vec<Sample> = split.gallery.iter().map(|&i| sample(i)).collect::<Result<_>>()?;
    fs::write(
        out.join("heldout/query.jsonl"),
        format_manifest(Some(Split::Query), &query),
    )?;
    fs::write(
        out.join("heldout/gallery.jsonl"),
        format_manifest(Some(Split::Gallery), &gallery),
    )?;
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!(
        "mAP {:.4}  rank-1 {:.4}  rank-5 {:.4}  ({} queries, {} skipped, {} gallery)",
        r.map, r.rank1, r.rank5, r.num_queries, r.skipped_queries, r.num_gallery
    );
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut s = TrainSettings::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        s.apply_file(&text).with_context(|| format!("in {}", path.display()))?;
    }
    for kv in &a.overrides {
        s.apply_override(kv)?;
    }
    if let Some(v) = a.seed {
        s.train.seed = v;
    }
    if let Some(v) = a.steps {
        s.train.steps = v;
    }
    if let Some(v) = a.lr {
        s.train.lr = v;
    }
    if let Some(v) = a.threads {
        s.threads = v;
    }
    s.model.validate()?;
    s.train.validate()?;
    s.data.validate().map_err(anyhow::Error::msg)?;
    init_threads(s.threads)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.txt"), s.render())?;

    let data = synth_generate(&s.data).map_err(anyhow::Error::msg)?;
    let split = held_out_split(&s.data);
    let train_set = data.subset(&split.train);
    let state = build_model(&s.model, s.train.seed)?;

    let mut log = BufWriter::new(fs::File::create(a.out.join("train_log.jsonl"))?);
    let mut io_err = None;
    let every = (s.train.steps / 20).max(1);
    let (state, _) = run_training(state, &s.train, &train_set, |entry| {
        if let Err(e) = serde_json::to_writer(&mut log, entry)
            .map_err(std::io::Error::from)
            .and_then(|_| log.write_all(b"\n"))
        {
            io_err.get_or_insert(e);
        }
        if entry.step % every == 0 || entry.step + 1 == s.train.steps {
            eprintln!("step {:>5}  loss {:.4}", entry.step, entry.losses.total);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing train_log.jsonl");
    }
    log.flush()?;
    save_checkpoint(&state, a.out.join("checkpoint.lkar"))?;

    write_heldout(&a.out, &s, &data)?;
    let query = load_manifest(a.out.join("heldout/query.jsonl"))?;
    let gallery = load_manifest(a.out.join("heldout/gallery.jsonl"))?;
    let cfg = EvalConfig {
        max_rank: s.eval_max_rank,
    };
    let report = evaluate(
        &FeatureSource::Model {
            state: &state,
            batch: 64,
        },
        &query,
        &gallery,
        &cfg,
    )?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    print_report(&report);
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    init_threads(a.threads)?;
    let query = load_manifest(&a.query).with_context(|| format!("query manifest {}", a.query.display()))?;
    let gallery = load_manifest(&a.gallery).with_context(|| format!("gallery manifest {}", a.gallery.display()))?;
    let cfg = EvalConfig { max_rank: a.max_rank };
    let state = a.checkpoint.as_ref().map(load_checkpoint).transpose()?;
    let source = match &state {
        Some(state) => FeatureSource::Model { state, batch: a.batch },
        None => FeatureSource::Precomputed,
    };
    let report = evaluate(&source, &query, &gallery, &cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let shown = |p: &Option<std::path::PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
    let resolved = format!(
        "checkpoint = {}\nquery = {}\ngallery = {}\nmax_rank = {}\nbatch = {}\nseed = {}\nthreads = {}\n",
        shown(&a.checkpoint),
        a.query.display(),
        a.gallery.display(),
        a.max_rank,
        a.batch,
        a.seed,
        a.threads
    );
    fs::write(a.out.join("config.txt"), resolved)?;
    print_report(&report);
    Ok(())
}
