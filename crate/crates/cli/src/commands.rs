use std::collections::HashMap;
use std::path::Path;

use anyhow::{Context, Result};
use cbdrive_core::concepts::{
    apply_template, canonicalize, compare_concept_sets, read_concept_texts, read_embeddings,
    write_concept_texts, write_embeddings,
};
use cbdrive_core::data::{
    canonical_json, generate_synthetic, save_dataset, LoadedDataset, SplitData, SPLIT_RATIOS,
};
use cbdrive_core::explain::{explain_sequence, scene_explain_rate, ExplainMode, ExplainOptions};
use cbdrive_core::model::{read_checkpoint, write_checkpoint, Task};
use cbdrive_core::rng::derive_seed;
use cbdrive_core::training::{
    ablate_bottleneck, ablation_csv, append_loss_log, bench_inference, evaluate_with_cap, fit,
    split_dataset,
};
use cbdrive_core::{
    ConceptSet, DatasetManifest, DriveSequence, ModelConfig, ModelParams, SourceTag, Tensor,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{
    AblateArgs, BenchArgs, ConceptArgs, CurateArgs, EvalArgs, ExplainArgs, GenDataArgs, TrainArgs,
};
use crate::record::{write_text, RunContext, UsageError};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &canonical_json(value)?)
}

fn load(manifest: &Path) -> Result<LoadedDataset> {
    Ok(DatasetManifest::load(manifest)?)
}

fn concept_set(args: &ConceptArgs, data: &LoadedDataset) -> Result<ConceptSet> {
    match (&args.concepts, &args.embeddings) {
        (Some(t), Some(e)) => Ok(ConceptSet::load(t, e, SourceTag::Mixed)?),
        _ => Ok(data.concepts.clone()),
    }
}

fn check_bottleneck(config: &ModelConfig, set: &ConceptSet) -> Result<()> {
    if config.concepts() != set.len() {
        return Err(UsageError(format!(
            "checkpoint expects {} concepts but the concept set has {}",
            config.concepts(),
            set.len()
        ))
        .into());
    }
    Ok(())
}

/// Sequence ids of each split, written by `train` next to the checkpoint.
#[derive(Serialize, Deserialize)]
struct SplitIds {
    seed: u64,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn split(data: &LoadedDataset, seed: u64) -> Result<SplitData> {
    let (train, val, test) = split_dataset(&data.sequences, SPLIT_RATIOS, seed)?;
    Ok(SplitData { train, val, test })
}

fn ids(seqs: &[DriveSequence]) -> Vec<String> {
    seqs.iter().map(|s| s.id.clone()).collect()
}

fn select<'a>(data: &'a LoadedDataset, wanted: &[String]) -> Result<Vec<DriveSequence>> {
    let by_id: HashMap<&str, &'a DriveSequence> =
        data.sequences.iter().map(|s| (s.id.as_str(), s)).collect();
    wanted
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| UsageError(format!("sequence `{id}` is not in the manifest")).into())
        })
        .collect()
}

fn test_sequences(data: &LoadedDataset, split: Option<&Path>) -> Result<Vec<DriveSequence>> {
    match split {
        Some(p) => {
            let raw = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let ids: SplitIds =
                serde_json::from_slice(&raw).with_context(|| format!("parsing {}", p.display()))?;
            select(data, &ids.test)
        }
        None => Ok(data.sequences.clone()),
    }
}

pub fn gen_data(args: &GenDataArgs, ctx: &RunContext) -> Result<()> {
    let spec = args.spec();
    ctx.record(
        &args.out,
        "gen-data",
        Some(spec.seed),
        json!({ "spec": spec }),
    )?;
    let ds = generate_synthetic(&spec)?;
    save_dataset(&args.out, "synthetic", &ds.concepts, &ds.sequences)?;
    write_json(
        &args.out.join("generator.json"),
        &json!({ "rule": ds.rule, "scene_concepts": ds.scene_concepts, "spec": spec }),
    )?;
    println!(
        "wrote {} sequences of {} frames and {} concepts to {}",
        ds.sequences.len(),
        spec.frames,
        ds.concepts.len(),
        args.out.display()
    );
    Ok(())
}

/// One input list after templating and within-list dedup.
struct CuratedList {
    tag: SourceTag,
    raw: usize,
    texts: Vec<String>,
    set: Option<ConceptSet>,
}

fn curate_list(tag: SourceTag, texts: &Path, embeddings: Option<&Path>) -> Result<CuratedList> {
    let raw = read_concept_texts(texts)?;
    let templated = raw
        .iter()
        .map(|t| apply_template(t))
        .collect::<cbdrive_core::Result<Vec<_>>>()?;
    let mut seen = std::collections::HashSet::new();
    let keep: Vec<usize> = (0..templated.len())
        .filter(|&i| seen.insert(canonicalize(&templated[i])))
        .collect();
    let kept: Vec<String> = keep.iter().map(|&i| templated[i].clone()).collect();
    let set = match embeddings {
        Some(p) => {
            let emb = read_embeddings(p)?;
            if emb.rows() != raw.len() {
                return Err(UsageError(format!(
                    "{} has {} rows for {} scenarios in {}",
                    p.display(),
                    emb.rows(),
                    raw.len(),
                    texts.display()
                ))
                .into());
            }
            let rows: Vec<f64> = keep.iter().flat_map(|&i| emb.row(i).to_vec()).collect();
            Some(ConceptSet::new(
                kept.clone(),
                Tensor::matrix(keep.len(), emb.cols(), rows)?,
                tag,
            )?)
        }
        None => None,
    };
    Ok(CuratedList {
        tag,
        raw: raw.len(),
        texts: kept,
        set,
    })
}

pub fn curate(args: &CurateArgs, ctx: &RunContext) -> Result<()> {
    let mut inputs = Vec::new();
    if let Some(h) = &args.human {
        inputs.push((SourceTag::Human, h, args.human_embeddings.as_deref()));
    }
    if let Some(g) = &args.generated {
        inputs.push((
            SourceTag::Generated,
            g,
            args.generated_embeddings.as_deref(),
        ));
    }
    if inputs.is_empty() {
        return Err(UsageError("give --human and/or --generated".into()).into());
    }
    let seed = args.seed.unwrap_or(0);
    let model = args.model.resolve(0, Task::Distance);
    let train = args.train.resolve(seed);
    ctx.record(
        &args.out,
        "curate",
        args.seed,
        json!({ "compare": args.compare, "model": model, "train": train }),
    )?;
    let lists = inputs
        .into_iter()
        .map(|(tag, t, e)| curate_list(tag, t, e))
        .collect::<Result<Vec<_>>>()?;

    let mut seen = std::collections::HashSet::new();
    let merged: Vec<String> = lists
        .iter()
        .flat_map(|l| l.texts.iter())
        .filter(|t| seen.insert(canonicalize(t)))
        .cloned()
        .collect();
    if merged.is_empty() {
        return Err(cbdrive_core::Error::Validation {
            field: "concepts".into(),
            message: "curation produced an empty concept list".into(),
        }
        .into());
    }
    write_concept_texts(&args.out.join("concepts.txt"), &merged)?;
    let all_sets: Option<Vec<&ConceptSet>> = lists.iter().map(|l| l.set.as_ref()).collect();
    let merged_set = match &all_sets {
        Some(sets) => {
            let mut acc = sets[0].clone();
            for s in &sets[1..] {
                acc = acc.merge(s)?;
            }
            write_embeddings(&args.out.join("concepts.emb"), acc.embeddings())?;
            Some(acc)
        }
        None => None,
    };
    let total: usize = lists.iter().map(|l| l.texts.len()).sum();
    let report = json!({
        "lists": lists.iter().map(|l| json!({ "source": l.tag, "raw": l.raw, "unique": l.texts.len() })).collect::<Vec<_>>(),
        "merged": merged.len(),
        "cross_list_duplicates": total - merged.len(),
        "source_tag": lists.iter().map(|l| l.tag).reduce(SourceTag::merge),
        "embeddings": merged_set.is_some(),
    });
    write_json(&args.out.join("curation.json"), &report)?;
    println!(
        "{} concepts written to {}",
        merged.len(),
        args.out.join("concepts.txt").display()
    );

    if args.compare {
        let (Some(sets), Some(merged_set)) = (all_sets, merged_set.as_ref()) else {
            return Err(UsageError("--compare needs embeddings for every list".into()).into());
        };
        let manifest = args
            .manifest
            .as_ref()
            .expect("clap requires --manifest with --compare");
        let data = load(manifest)?;
        let splits = split(&data, seed)?;
        let mut named: Vec<(&str, &ConceptSet)> =
            sets.iter().map(|s| (s.source_tag().as_str(), *s)).collect();
        if sets.len() > 1 {
            named.push(("merged", merged_set));
        }
        let rows = compare_concept_sets(&named, &splits, &model, &train)?;
        let mut csv = String::from("set_tag,d_mae\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{}\n",
                r.set_tag,
                r.d_mae.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
        write_text(&args.out.join("compare.csv"), &csv)?;
        write_json(&args.out.join("compare.json"), &rows)?;
        print!("{csv}");
    }
    Ok(())
}

pub fn train(args: &TrainArgs, ctx: &RunContext) -> Result<()> {
    let data = load(&args.manifest)?;
    let set = concept_set(&args.concepts, &data)?;
    let model = args.model.resolve(set.len(), Task::Both);
    let train = args.train.resolve(args.seed);
    model.validate()?;
    train.validate()?;
    ctx.record(
        &args.out,
        "train",
        Some(args.seed),
        json!({ "model": model, "train": train }),
    )?;
    let splits = split(&data, args.seed)?;
    let fitted = fit(&splits.train, &splits.val, &set, &model, &train)?;
    write_checkpoint(&args.out.join("model.cgck"), &model, &fitted.params)?;
    let log_path = args.out.join("loss_log.csv");
    if log_path.exists() {
        std::fs::remove_file(&log_path)
            .with_context(|| format!("replacing {}", log_path.display()))?;
    }
    append_loss_log(&log_path, &fitted.log)?;
    write_json(
        &args.out.join("split.json"),
        &SplitIds {
            seed: args.seed,
            train: ids(&splits.train),
            val: ids(&splits.val),
            test: ids(&splits.test),
        },
    )?;
    write_json(
        &args.out.join("train.json"),
        &json!({
            "best_epoch": fitted.best_epoch,
            "log": fitted.log,
            "sizes": { "train": splits.train.len(), "val": splits.val.len(), "test": splits.test.len() },
        }),
    )?;
    let last = fitted.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs (best {}), final train loss {:.4}; checkpoint {}",
        fitted.log.len(),
        fitted.best_epoch,
        last.train_loss,
        args.out.join("model.cgck").display()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs, ctx: &RunContext) -> Result<()> {
    let (config, params) = read_checkpoint(&args.checkpoint)?;
    let data = load(&args.manifest)?;
    let set = concept_set(&args.concepts, &data)?;
    check_bottleneck(&config, &set)?;
    ctx.record(
        &args.out,
        "eval",
        None,
        json!({ "model": config, "distance_cap": args.distance_cap }),
    )?;
    let seqs = test_sequences(&data, args.split.as_deref())?;
    let report = evaluate_with_cap(&seqs, &set, &params, &config, args.distance_cap)?;
    write_json(&args.out.join("eval.json"), &report)?;
    if let Some(a) = &report.angle {
        println!("a-MAE {:.4} over {} sequences", a.mae, a.count);
    }
    if let Some(d) = &report.distance {
        println!("d-MAE {:.4} over {} sequences", d.mae, d.count);
    }
    Ok(())
}

pub fn explain(args: &ExplainArgs, ctx: &RunContext) -> Result<()> {
    let (config, params) = read_checkpoint(&args.checkpoint)?;
    let data = load(&args.manifest)?;
    let set = concept_set(&args.concepts, &data)?;
    check_bottleneck(&config, &set)?;
    let options = ExplainOptions {
        window_frames: args.window_frames,
        k_per_frame: args.k_per_frame,
        z_threshold: args.z_threshold,
        min_gap: args.min_gap,
        hold_off: args.hold_off,
    };
    ctx.record(
        &args.out,
        "explain",
        None,
        json!({ "model": config, "options": options }),
    )?;
    let seqs = if args.sequences.is_empty() {
        test_sequences(&data, args.split.as_deref())?
    } else {
        select(&data, &args.sequences)?
    };
    let dir = args.out.join("explain");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut events = 0;
    for seq in &seqs {
        let report = explain_sequence(seq, &set, &params, &config, &options)?;
        events += report.events.len();
        write_text(&dir.join(format!("{}.json", seq.id)), &report.to_json()?)?;
        write_text(&dir.join(format!("{}.csv", seq.id)), &report.to_csv())?;
    }
    let top1 = scene_explain_rate(&seqs, &set, ExplainMode::Top1, &options)?;
    let top3 = scene_explain_rate(&seqs, &set, ExplainMode::Top3, &options)?;
    println!(
        "{} reports, {events} attention events; scenes explained top-3 {:.3}, top-1 {:.3} ({} without description)",
        seqs.len(),
        top3.rate,
        top1.rate,
        top3.skipped
    );
    write_json(
        &args.out.join("scene_rate.json"),
        &json!({ "top1": top1, "top3": top3 }),
    )?;
    Ok(())
}

pub fn ablate(args: &AblateArgs, ctx: &RunContext) -> Result<()> {
    if args.draws == 0 {
        return Err(UsageError("--draws must be at least 1".into()).into());
    }
    let data = load(&args.manifest)?;
    let set = concept_set(&args.concepts, &data)?;
    let model = args.model.resolve(set.len(), Task::Both);
    let train = args.train.resolve(args.seed);
    model.validate()?;
    train.validate()?;
    let draw_seeds: Vec<u64> = (0..args.draws)
        .map(|i| derive_seed(args.seed, &format!("subset-{i}")))
        .collect();
    let sizes: Vec<String> = args.sizes.iter().map(ToString::to_string).collect();
    ctx.record(
        &args.out,
        "ablate",
        Some(args.seed),
        json!({ "model": model, "train": train, "sizes": sizes, "draw_seeds": draw_seeds }),
    )?;
    let splits = split(&data, args.seed)?;
    let rows = ablate_bottleneck(&set, &args.sizes, &draw_seeds, &splits, &model, &train)?;
    let csv = ablation_csv(&rows);
    write_text(&args.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn bench(args: &BenchArgs, ctx: &RunContext) -> Result<()> {
    let (config, params) = match &args.checkpoint {
        Some(p) => read_checkpoint(p)?,
        None => {
            let config = args.model.resolve(args.k, Task::Both);
            let params = ModelParams::init(&config, args.seed)?;
            (config, params)
        }
    };
    ctx.record(
        &args.out,
        "bench",
        Some(args.seed),
        json!({ "model": config, "frames": args.frames, "runs": args.runs }),
    )?;
    let mut results = Vec::new();
    for &frames in &args.frames {
        let r = bench_inference(&params, &config, frames, args.runs)?;
        println!(
            "T={frames}: median {:.3} ms, mean {:.3} ms over {} runs",
            r.median_seconds * 1e3,
            r.mean_seconds * 1e3,
            r.runs
        );
        results.push(r);
    }
    write_json(&args.out.join("bench.json"), &json!({ "results": results }))?;
    Ok(())
}
