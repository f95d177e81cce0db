use std::fs;
use std::path::Path;
use std::sync::Arc;

use amd_core::data::{generate_dataset, load_dataset, save_dataset, split_dataset, AttributeSchema, DatasetSplit, PersonRecord};
use amd_core::evaluation::{average_attention, evaluate, RetrievalMetrics};
use amd_core::export::{export_aams, export_maps};
use amd_core::interpreter::{explain_pair, AamStack};
use amd_core::training::{train_interpreter, train_target};
use amd_core::{AmdError, Embedder, Interpreter, Result};
use serde::Serialize;

use crate::config::RunConfig;

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let dir = cfg.data_path();
    if !dir.join("manifest.json").is_file() {
        return Err(AmdError::Input(format!(
            "no dataset at {} (run gen-data first)",
            dir.display()
        )));
    }
    let split = load_dataset(&dir)?;
    let emb = cfg.embedder();
    if (split.schema.height, split.schema.width) != (emb.height, emb.width) {
        return Err(AmdError::Input(format!(
            "dataset images are {}×{}, embedder expects {}×{}",
            split.schema.height, split.schema.width, emb.height, emb.width
        )));
    }
    Ok(split)
}

fn load_target(cfg: &RunConfig) -> Result<Arc<Embedder<f64>>> {
    let path = cfg.target_path();
    if !path.is_file() {
        return Err(AmdError::State(format!(
            "target weights {} not found (run train-target first)",
            path.display()
        )));
    }
    Ok(Arc::new(Embedder::load(cfg.embedder(), &path)?))
}

fn load_interpreter(cfg: &RunConfig, m: usize) -> Result<Interpreter<f64>> {
    let target = load_target(cfg)?;
    let path = cfg.interpreter_path();
    if !path.is_file() {
        return Err(AmdError::State(format!(
            "interpreter weights {} not found (run train-interpreter first)",
            path.display()
        )));
    }
    Interpreter::load(target, cfg.interpreter(m), &path)
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let schema = AttributeSchema::desk_scale();
    let total = cfg.train_ids + cfg.test_ids;
    let records = generate_dataset(&schema, total, cfg.images_per_id, cfg.cameras, cfg.seed)?;
    let split = split_dataset(&schema, records, cfg.test_ids as f64 / total as f64, cfg.seed)?;
    for w in &split.warnings {
        eprintln!("warning: {}", w);
    }
    let dir = cfg.data_path();
    save_dataset(&split, &dir)?;
    println!(
        "wrote {} train, {} query, {} gallery images to {}",
        split.train.len(),
        split.query.len(),
        split.gallery.len(),
        dir.display()
    );
    Ok(())
}

pub fn train_target_cmd(cfg: &RunConfig) -> Result<()> {
    let split = load_split(cfg)?;
    let mut embedder = Embedder::<f64>::new(cfg.embedder(), cfg.seed)?;
    let log = train_target(
        &mut embedder,
        &split.train,
        Some((&split.query, &split.gallery)),
        &cfg.target_training(),
    )?;
    fs::create_dir_all(cfg.out())?;
    write_jsonl(&cfg.out().join("target_log.jsonl"), &log)?;
    let path = cfg.target_path();
    embedder.save(&path)?;
    if let Some(last) = log.last() {
        println!("epoch {} loss {:.5}", last.epoch, last.loss);
        if let Some(r1) = last.probe_rank1 {
            println!("probe Rank-1 {:.4}", r1);
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn train_interpreter_cmd(cfg: &RunConfig) -> Result<()> {
    let split = load_split(cfg)?;
    let target = load_target(cfg)?;
    let mut interp = Interpreter::attach(target, cfg.interpreter(split.schema.m()))?;
    let log = train_interpreter(&mut interp, &split.train, &cfg.schedule(), &cfg.loss())?;
    for w in &log.warnings {
        eprintln!("warning: {}", w);
    }
    fs::create_dir_all(cfg.out())?;
    write_jsonl(&cfg.out().join("interpreter_log.jsonl"), &log.epochs)?;
    let path = cfg.interpreter_path();
    interp.save(&path)?;
    if let Some(last) = log.epochs.last() {
        println!("epoch {} total loss {:.5} (L_d {:.5})", last.epoch, last.total, last.l_d);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn print_metrics(label: &str, m: &RetrievalMetrics) {
    println!("{:<12} Rank-1 {:.4}  Rank-5 {:.4}  mAP {:.4}", label, m.rank1, m.rank5, m.map);
}

fn opt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |x| format!("{:.4}", x))
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let split = load_split(cfg)?;
    let interp = load_interpreter(cfg, split.schema.m())?;
    let (report, table) = evaluate(&interp, &split, None)?;
    fs::create_dir_all(cfg.out())?;
    write_json(&cfg.out().join("report.json"), &report)?;
    fs::write(cfg.out().join("pairs.jsonl"), table.json_lines()?)?;
    print_metrics("target", &report.target);
    print_metrics("interpreter", &report.interpreter);
    println!(
        "ADRE {}  X-mAP_e {}  X-mAP_c {}  localization {}",
        opt(report.adre),
        opt(report.xmap_e),
        opt(report.xmap_c),
        opt(report.localization)
    );
    Ok(())
}

#[derive(Serialize)]
struct ReweightReport {
    gamma: f64,
    baseline: RetrievalMetrics,
    reweighted: RetrievalMetrics,
}

pub fn reweight_cmd(cfg: &RunConfig) -> Result<()> {
    let split = load_split(cfg)?;
    let interp = load_interpreter(cfg, split.schema.m())?;
    let (report, _) = evaluate(&interp, &split, Some(cfg.gamma))?;
    let out = ReweightReport {
        gamma: cfg.gamma,
        baseline: report.target.clone(),
        reweighted: report
            .reweighted
            .clone()
            .ok_or_else(|| AmdError::Internal("re-weighted metrics missing".into()))?,
    };
    fs::create_dir_all(cfg.out())?;
    write_json(&cfg.out().join("reweight.json"), &out)?;
    print_metrics("baseline", &out.baseline);
    print_metrics("re-weighted", &out.reweighted);
    Ok(())
}

fn find<'a>(split: &'a DatasetSplit, index: usize) -> Result<&'a PersonRecord> {
    split
        .find(index)
        .ok_or_else(|| AmdError::Input(format!("image {} not in dataset", index)))
}

#[derive(Serialize)]
struct AttributeTerm {
    attribute: usize,
    name: String,
    distance: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct ExplainReport {
    query: usize,
    gallery: usize,
    query_id: usize,
    gallery_id: usize,
    d: f64,
    d_hat: f64,
    components: Vec<f64>,
    ratios: Vec<f64>,
    ratio_sum: f64,
    top3: Vec<AttributeTerm>,
    pair_attributes: Vec<u8>,
    exclusive_count: usize,
    degenerate: bool,
    query_maps: Vec<String>,
    gallery_maps: Vec<String>,
}

pub fn explain_cmd(cfg: &RunConfig, query: usize, gallery: usize) -> Result<()> {
    let split = load_split(cfg)?;
    let interp = load_interpreter(cfg, split.schema.m())?;
    let (rq, rg) = (find(&split, query)?, find(&split, gallery)?);
    let eq = interp.explain_image(&rq.image())?;
    let eg = interp.explain_image(&rg.image())?;
    let pair = explain_pair(&eq, &eg, &rq.attributes, &rg.attributes)?;
    let names = split.schema.names();
    let top: Vec<usize> = pair.ranked_attributes().into_iter().take(3).collect();
    let dir = cfg.out().join("explain").join(format!("{}_{}", query, gallery));
    let (qs, _) = export_aams(&dir, "query", &eq.aams, &names, &top)?;
    let (gs, _) = export_aams(&dir, "gallery", &eg.aams, &names, &top)?;
    let report = ExplainReport {
        query,
        gallery,
        query_id: rq.id,
        gallery_id: rg.id,
        d: pair.d,
        d_hat: pair.d_hat,
        ratio_sum: pair.ratios.iter().sum(),
        top3: top
            .iter()
            .map(|&k| AttributeTerm {
                attribute: k,
                name: names[k].clone(),
                distance: pair.components[k],
                ratio: pair.ratios[k],
            })
            .collect(),
        components: pair.components,
        ratios: pair.ratios,
        pair_attributes: pair.pair_attributes,
        exclusive_count: pair.exclusive_count,
        degenerate: pair.degenerate,
        query_maps: qs.files,
        gallery_maps: gs.files,
    };
    write_json(&dir.join("explanation.json"), &report)?;
    println!("d {:.5}  d_hat {:.5}  M_E {}", report.d, report.d_hat, report.exclusive_count);
    for t in &report.top3 {
        println!("  {:<16} r {:.4}  d^k {:.5}", t.name, t.ratio, t.distance);
    }
    if report.degenerate {
        println!("degenerate pair: reconstructed distance is zero");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct AttentionEntry {
    name: String,
    positive_count: usize,
    negative_count: usize,
    positive_absent: bool,
    negative_absent: bool,
}

pub fn avg_attention_cmd(cfg: &RunConfig) -> Result<()> {
    let split = load_split(cfg)?;
    let interp = load_interpreter(cfg, split.schema.m())?;
    let records: Vec<&PersonRecord> = split.test_records().collect();
    let stacks: Vec<AamStack<f64>> = records
        .iter()
        .map(|r| interp.interpret_forward(&r.image()))
        .collect::<Result<_>>()?;
    let items: Vec<(&[u8], &AamStack<f64>)> = records
        .iter()
        .zip(&stacks)
        .map(|(r, s)| (r.attributes.as_slice(), s))
        .collect();
    let averages = average_attention(&items);
    let (h, w) = stacks
        .first()
        .map(AamStack::dims)
        .ok_or_else(|| AmdError::Input("no test records".into()))?;
    let names = split.schema.names();
    let mut maps = Vec::new();
    let mut index = Vec::new();
    for (name, avg) in names.iter().zip(&averages) {
        if let Some(p) = &avg.positive {
            maps.push((format!("{}_positive", name), p.clone()));
        }
        if let Some(n) = &avg.negative {
            maps.push((format!("{}_negative", name), n.clone()));
        }
        index.push(AttentionEntry {
            name: name.clone(),
            positive_count: avg.positive_count,
            negative_count: avg.negative_count,
            positive_absent: avg.positive.is_none(),
            negative_absent: avg.negative.is_none(),
        });
    }
    let dir = cfg.out().join("avg_attention");
    export_maps(&dir, &maps, h, w, "maps.json")?;
    write_json(&dir.join("attributes.json"), &index)?;
    for e in index.iter().filter(|e| e.positive_absent || e.negative_absent) {
        eprintln!(
            "warning: {} has no {} records",
            e.name,
            if e.positive_absent { "positive" } else { "negative" }
        );
    }
    println!("wrote {} maps to {}", maps.len(), dir.display());
    Ok(())
}
