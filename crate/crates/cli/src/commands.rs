//! Subcommand implementations.

use crate::cli::{
    AblateArgs, Common, DiagnoseArgs, EvalArgs, GenDataArgs, Method, Split, SuppressArgs, TrainArgs,
};
use crate::config::RunConfig;
use crate::io::{self, PredictionRecord};
use anyhow::{bail, Context, Result};
use dhq::detector::{train, Model, ModelConfig, Snapshot, StageOutputs};
use dhq::eval::{
    self, homogeneity_scatter, pearson, score_iou_pairs, stage_metrics, HomogeneityPoint,
};
use dhq::loss::equilibrium_sim;
use dhq::scenes::{generate, split, Scene};
use dhq::suppress::{adaptive_nms, gt_density, nms, soft_nms};
use dhq::{iou, BBox, Detection, GateDirection, Query};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const TRAIN_LOG_HEADER: [&str; 9] = [
    "epoch", "loss", "enc_cls", "enc_box", "dec_cls", "dec_box", "ap", "mr2", "ji",
];
pub const ABLATION_HEADER: [&str; 12] = [
    "dcg",
    "aligned",
    "gqs",
    "gate",
    "dec_before",
    "dec_after",
    "queries",
    "seeds",
    "ap",
    "mr2",
    "ji",
    "params",
];
const ABLATION_RUN_HEADER: [&str; 13] = [
    "run",
    "dcg",
    "aligned",
    "gqs",
    "gate",
    "dec_before",
    "dec_after",
    "queries",
    "seed",
    "ap",
    "mr2",
    "ji",
    "params",
];

pub fn load_config(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    if cfg.threads > 0 {
        // A pool configured earlier in this process stays in place.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    Ok(cfg)
}

fn load_scenes(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Scene>> {
    match data {
        Some(p) => io::read_dataset(p),
        None => Ok(generate(&cfg.scenes.params, cfg.scenes.n_scenes)?),
    }
}

fn split_scenes(cfg: &RunConfig, scenes: Vec<Scene>) -> Result<(Vec<Scene>, Vec<Scene>)> {
    Ok(split(
        &scenes,
        cfg.scenes.train_fraction,
        cfg.scenes.params.seed,
    )?)
}

fn pick(cfg: &RunConfig, scenes: Vec<Scene>, which: Split) -> Result<Vec<Scene>> {
    Ok(match which {
        Split::All => scenes,
        Split::Train => split_scenes(cfg, scenes)?.0,
        Split::Val => split_scenes(cfg, scenes)?.1,
    })
}

fn check_grid(scenes: &[Scene], grid: usize) -> Result<()> {
    if let Some(s) = scenes.iter().find(|s| s.grid != grid) {
        bail!(
            "scene {} has grid {}, model expects {grid}",
            s.image_id,
            s.grid
        );
    }
    Ok(())
}

fn out_dir(cfg: &RunConfig, out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

pub fn gen_data(args: &GenDataArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&args.common, overrides)?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("dataset.jsonl"));
    let scenes = generate(&cfg.scenes.params, cfg.scenes.n_scenes)?;
    io::write_dataset(&path, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), path.display());
    Ok(())
}

pub fn train_cmd(args: &TrainArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&args.common, overrides)?;
    let dir = out_dir(&cfg, &args.out);
    let scenes = load_scenes(&cfg, args.data.as_deref())?;
    check_grid(&scenes, cfg.model.grid)?;
    let (tr, va) = split_scenes(&cfg, scenes)?;
    let mut model = Model::new(cfg.model.clone())?;
    let log = train(&mut model, &tr, &va, &cfg.train, |r| {
        if let Some(ap) = r.ap {
            eprintln!("epoch {:>4}  loss {:.4}  val ap {:.4}", r.epoch, r.loss, ap);
        }
    })?;
    io::write_json(&dir.join("model.json"), &model.to_snapshot())?;
    io::write_csv(&dir.join("train_log.csv"), &TRAIN_LOG_HEADER, &log)?;
    io::write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    println!(
        "wrote model.json, train_log.csv, config.toml to {}",
        dir.display()
    );
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let snap: Snapshot = io::read_json(path)?;
    Model::from_snapshot(snap).with_context(|| format!("loading {}", path.display()))
}

/// Per-image detections for every stage, from the model.
pub fn model_stage_detections(model: &Model, scenes: &[Scene]) -> Result<Vec<Vec<Vec<Detection>>>> {
    let outs: Vec<StageOutputs> = scenes
        .par_iter()
        .map(|s| model.forward(s))
        .collect::<Result<_, _>>()?;
    let stages = model.config().stage_count();
    Ok((0..stages)
        .map(|k| {
            outs.iter()
                .zip(scenes)
                .map(|(o, s)| o.detections(&s.image_id, k))
                .collect()
        })
        .collect())
}

/// Final detections and per-stage detections from a prediction file.
///
/// Lines with a stage are grouped by stage and the highest stage is the
/// final one; lines without a stage always count as final.
fn group_predictions(
    recs: &[PredictionRecord],
    scenes: &[Scene],
) -> Result<(Vec<Vec<Detection>>, Vec<(usize, Vec<Vec<Detection>>)>)> {
    let index: HashMap<&str, usize> = scenes
        .iter()
        .enumerate()
        .map(|(k, s)| (s.image_id.as_str(), k))
        .collect();
    let mut stage_ids: Vec<usize> = recs.iter().filter_map(|r| r.stage).collect();
    stage_ids.sort_unstable();
    stage_ids.dedup();
    let last = stage_ids.last().copied();
    let mut stages: Vec<(usize, Vec<Vec<Detection>>)> = stage_ids
        .iter()
        .map(|&s| (s, vec![Vec::new(); scenes.len()]))
        .collect();
    let mut fin = vec![Vec::new(); scenes.len()];
    for (k, r) in recs.iter().enumerate() {
        let Some(&img) = index.get(r.image_id.as_str()) else {
            bail!(
                "prediction {} refers to unknown image_id {:?}",
                k + 1,
                r.image_id
            );
        };
        let d = r.detection();
        match r.stage {
            Some(s) => {
                let pos = stage_ids.binary_search(&s).expect("collected above");
                stages[pos].1[img].push(d.clone());
                if Some(s) == last {
                    fin[img].push(d);
                }
            }
            None => fin[img].push(d),
        }
    }
    Ok((fin, stages))
}

#[derive(Serialize)]
struct ConfidenceRow {
    lo: f64,
    hi: f64,
    tp: usize,
    fp: usize,
}

#[derive(Serialize)]
struct DensityRow {
    min_gts: usize,
    max_gts: Option<usize>,
    images: usize,
    tp: usize,
    fp: usize,
}

pub fn eval_cmd(args: &EvalArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&args.common, overrides)?;
    let dir = out_dir(&cfg, &args.out);
    let scenes = pick(&cfg, load_scenes(&cfg, args.data.as_deref())?, args.split)?;
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gt_boxes.clone()).collect();
    let (fin, stages) = if let Some(mp) = &args.model {
        let mut model = load_model(mp)?;
        if let Some(k) = args.stages {
            model = model.truncate_decoder(k)?;
        }
        check_grid(&scenes, model.config().grid)?;
        let per_stage = model_stage_detections(&model, &scenes)?;
        if let Some(path) = &args.export_predictions {
            let mut recs = Vec::new();
            for img in 0..scenes.len() {
                for st in &per_stage {
                    recs.extend(st[img].iter().map(PredictionRecord::from));
                }
            }
            io::write_predictions(path, &recs)?;
        }
        let fin = per_stage.last().expect("encoder stage").clone();
        (fin, per_stage.into_iter().enumerate().collect::<Vec<_>>())
    } else {
        let path = args.predictions.as_ref().expect("clap requires one source");
        group_predictions(&io::read_predictions(path)?, &scenes)?
    };
    let report = eval::evaluate(&fin, &stages, &gts, &cfg.eval)?;
    io::write_json(&dir.join("metrics.json"), &report)?;
    let conf: Vec<ConfidenceRow> = report
        .tp_fp_by_confidence
        .iter()
        .map(|b| ConfidenceRow {
            lo: b.lo,
            hi: b.hi,
            tp: b.tp,
            fp: b.fp,
        })
        .collect();
    io::write_csv(
        &dir.join("tp_fp_by_confidence.csv"),
        &["lo", "hi", "tp", "fp"],
        &conf,
    )?;
    let dens: Vec<DensityRow> = report
        .tp_fp_by_density
        .iter()
        .map(|b| DensityRow {
            min_gts: b.min_gts,
            max_gts: b.max_gts,
            images: b.images,
            tp: b.tp,
            fp: b.fp,
        })
        .collect();
    io::write_csv(
        &dir.join("tp_fp_by_density.csv"),
        &["min_gts", "max_gts", "images", "tp", "fp"],
        &dens,
    )?;
    println!(
        "images {}  ap {:.4}  mr2 {}  ji {:.4}",
        report.images,
        report.ap,
        report.mr2.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        report.ji
    );
    Ok(())
}

/// One trained-and-evaluated variant.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRun {
    /// Variant and seed tag; also the snapshot name under `models/`.
    pub run: String,
    pub dcg: bool,
    pub aligned: bool,
    pub gqs: bool,
    pub gate: String,
    pub dec_before: usize,
    pub dec_after: usize,
    pub queries: usize,
    pub seed: u64,
    pub ap: f64,
    pub mr2: Option<f64>,
    pub ji: f64,
    pub params: usize,
}

/// Seed-averaged ablation row.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub dcg: bool,
    pub aligned: bool,
    pub gqs: bool,
    pub gate: String,
    pub dec_before: usize,
    pub dec_after: usize,
    pub queries: usize,
    pub seeds: usize,
    pub ap: f64,
    pub mr2: Option<f64>,
    pub ji: f64,
    pub params: usize,
}

fn parse_split(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(':')
        .with_context(|| format!("decoder split {s:?} is not before:after"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

/// Model variants of the ablation grid, in output order.
pub fn ablation_variants(base: &ModelConfig, args: &AblateArgs) -> Result<Vec<ModelConfig>> {
    let or_default = |v: &[crate::cli::Switch], d: bool| -> Vec<bool> {
        if v.is_empty() {
            vec![d]
        } else {
            v.iter().map(|&s| s.into()).collect()
        }
    };
    let dcgs: Vec<bool> = args.grid_dcg.iter().map(|&s| s.into()).collect();
    let gqss = or_default(&args.grid_gqs, base.gqs);
    let aligneds = or_default(&args.grid_aligned, base.aligned);
    let splits = if args.grid_split.is_empty() {
        vec![(base.dec_before, base.dec_after)]
    } else {
        args.grid_split
            .iter()
            .map(|s| parse_split(s))
            .collect::<Result<_>>()?
    };
    let queries = if args.grid_queries.is_empty() {
        vec![base.queries]
    } else {
        args.grid_queries.clone()
    };
    let gates: Vec<GateDirection> = args.grid_gate.iter().map(|&g| g.into()).collect();
    let mut out = Vec::new();
    for &dcg in &dcgs {
        for &gqs in &gqss {
            for &aligned in &aligneds {
                for &(dec_before, dec_after) in &splits {
                    for &k in &queries {
                        let gate_list = if dcg {
                            gates.clone()
                        } else {
                            vec![base.gate_direction]
                        };
                        for gate_direction in gate_list {
                            let c = ModelConfig {
                                dcg,
                                gqs,
                                aligned,
                                dec_before,
                                dec_after,
                                queries: k,
                                gate_direction,
                                ..base.clone()
                            };
                            c.validate()?;
                            out.push(c);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Snapshot name of one ablation run.
pub fn run_tag(c: &ModelConfig) -> String {
    let on = |b: bool| if b { "on" } else { "off" };
    let gate = if c.dcg {
        c.gate_direction.to_string()
    } else {
        "none".into()
    };
    format!(
        "dcg-{}_gqs-{}_aligned-{}_gate-{}_split-{}-{}_k-{}_seed-{}",
        on(c.dcg),
        on(c.gqs),
        on(c.aligned),
        gate,
        c.dec_before,
        c.dec_after,
        c.queries,
        c.seed
    )
}

/// Trains `config` on `train_set` and scores its final stage on `val`.
pub fn train_and_score(
    config: &ModelConfig,
    cfg: &RunConfig,
    train_set: &[Scene],
    val: &[Scene],
) -> Result<(AblationRun, Model)> {
    let mut model = Model::new(config.clone())?;
    let tc = dhq::TrainConfig {
        eval_every: 0,
        ..cfg.train.clone()
    };
    train(&mut model, train_set, &[], &tc, |_| {})?;
    let dets = model_stage_detections(&model, val)?.pop().expect("stages");
    let gts: Vec<Vec<BBox>> = val.iter().map(|s| s.gt_boxes.clone()).collect();
    let m = stage_metrics(0, &dets, &gts, cfg.eval.iou_thresh)?;
    let run = AblationRun {
        run: run_tag(config),
        dcg: config.dcg,
        aligned: config.aligned,
        gqs: config.gqs,
        gate: if config.dcg {
            config.gate_direction.to_string()
        } else {
            "-".into()
        },
        dec_before: config.dec_before,
        dec_after: config.dec_after,
        queries: config.queries,
        seed: config.seed,
        ap: m.ap,
        mr2: m.mr2,
        ji: m.ji,
        params: model.param_count().total,
    };
    Ok((run, model))
}

pub fn average_runs(runs: &[AblationRun]) -> AblationRow {
    let n = runs.len() as f64;
    let first = &runs[0];
    let mr2s: Vec<f64> = runs.iter().filter_map(|r| r.mr2).collect();
    AblationRow {
        dcg: first.dcg,
        aligned: first.aligned,
        gqs: first.gqs,
        gate: first.gate.clone(),
        dec_before: first.dec_before,
        dec_after: first.dec_after,
        queries: first.queries,
        seeds: runs.len(),
        ap: runs.iter().map(|r| r.ap).sum::<f64>() / n,
        mr2: (mr2s.len() == runs.len()).then(|| mr2s.iter().sum::<f64>() / n),
        ji: runs.iter().map(|r| r.ji).sum::<f64>() / n,
        params: first.params,
    }
}

pub fn ablate(args: &AblateArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&args.common, overrides)?;
    if args.seeds == 0 {
        bail!("--seeds must be >= 1");
    }
    let dir = out_dir(&cfg, &args.out);
    let scenes = load_scenes(&cfg, args.data.as_deref())?;
    check_grid(&scenes, cfg.model.grid)?;
    let (tr, va) = split_scenes(&cfg, scenes)?;
    let variants = ablation_variants(&cfg.model, args)?;
    let jobs: Vec<ModelConfig> = variants
        .iter()
        .flat_map(|v| {
            (0..args.seeds as u64).map(move |s| ModelConfig {
                seed: v.seed + s,
                ..v.clone()
            })
        })
        .collect();
    // runs are independent; collecting keeps job order
    let all_runs: Vec<AblationRun> = jobs
        .par_iter()
        .map(|c| -> Result<AblationRun> {
            let (r, model) = train_and_score(c, &cfg, &tr, &va)?;
            eprintln!("{}: ap {:.4} ji {:.4}", r.run, r.ap, r.ji);
            if args.save_models {
                io::write_json(
                    &dir.join("models").join(format!("{}.json", r.run)),
                    &model.to_snapshot(),
                )?;
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<AblationRow> = all_runs.chunks(args.seeds).map(average_runs).collect();
    io::write_csv(&dir.join("ablation.csv"), &ABLATION_HEADER, &rows)?;
    io::write_csv(
        &dir.join("ablation_runs.csv"),
        &ABLATION_RUN_HEADER,
        &all_runs,
    )?;
    println!(
        "wrote {} rows to {}",
        rows.len(),
        dir.join("ablation.csv").display()
    );
    Ok(())
}

fn oracle_density(rec: &PredictionRecord, gts: &[BBox], gt_dens: &[f64]) -> Result<f64> {
    let mut best = (0.0, 0.0);
    for (g, &d) in gts.iter().zip(gt_dens) {
        let o = iou(&rec.bbox, g)?;
        if o > best.0 {
            best = (o, d);
        }
    }
    Ok(best.1)
}

pub fn suppress_cmd(args: &SuppressArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&args.common, overrides)?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("suppressed.jsonl"));
    let recs = io::read_predictions(&args.predictions)?;
    let mut gt_of: HashMap<String, (Vec<BBox>, Vec<f64>)> = HashMap::new();
    if let Some(d) = &args.data {
        for s in io::read_dataset(d)? {
            let dens = gt_density(&s.gt_boxes)?;
            gt_of.insert(s.image_id, (s.gt_boxes, dens));
        }
    }
    let mut order: Vec<(String, Option<usize>)> = Vec::new();
    let mut groups: HashMap<(String, Option<usize>), Vec<usize>> = HashMap::new();
    for (k, r) in recs.iter().enumerate() {
        let key = (r.image_id.clone(), r.stage);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(k);
    }
    let mut out = Vec::new();
    for key in &order {
        let members: Vec<&PredictionRecord> = groups[key].iter().map(|&k| &recs[k]).collect();
        let dets: Vec<Detection> = members.iter().map(|r| r.detection()).collect();
        match args.method {
            Method::Nms => {
                for k in nms(&dets, args.nms_thresh)? {
                    out.push(members[k].clone());
                }
            }
            Method::Adaptive => {
                let dens = members
                    .iter()
                    .zip(&groups[key])
                    .map(|(r, &line)| match (r.density, gt_of.get(&r.image_id)) {
                        (Some(d), _) => Ok(d),
                        (None, Some((g, gd))) => oracle_density(r, g, gd),
                        (None, None) => bail!(
                            "prediction {} has no density and no dataset covers image {:?}",
                            line + 1,
                            r.image_id
                        ),
                    })
                    .collect::<Result<Vec<f64>>>()?;
                for k in adaptive_nms(&dets, &dens, args.nms_thresh)? {
                    out.push(members[k].clone());
                }
            }
            Method::Soft => {
                for d in soft_nms(&dets, args.sigma, args.score_floor)? {
                    out.push(PredictionRecord::from(&d));
                }
            }
        }
    }
    io::write_predictions(&path, &out)?;
    println!(
        "kept {} of {} detections, wrote {}",
        out.len(),
        recs.len(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct HomogeneityRow<'a> {
    image_id: &'a str,
    phase: &'static str,
    iou_distance: f64,
    cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub points: usize,
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HomogeneityReport {
    pub schema_version: u32,
    pub positive_floor: f64,
    pub before: PhaseSummary,
    pub after: Option<PhaseSummary>,
}

#[derive(Serialize)]
struct ScoreIouRow<'a> {
    image_id: &'a str,
    score: f64,
    iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreIouReport {
    pub schema_version: u32,
    pub stage: usize,
    pub pairs: usize,
    pub pearson: Option<f64>,
}

#[derive(Serialize)]
struct EquilibriumRow {
    differentiated: bool,
    step: usize,
    p1: f64,
    p2: f64,
    contrib1: f64,
    contrib2: f64,
    grad1: f64,
    grad2: f64,
}

/// Queries entering and leaving the DCG block; models without DCG report
/// the queries at the same depth as `before` only.
pub fn dcg_queries(model: &Model, out: &StageOutputs) -> (Vec<Query>, Option<Vec<Query>>) {
    if let Some(t) = &out.dcg {
        return (t.before.clone(), Some(t.after.clone()));
    }
    let k = model.config().dec_before;
    let st = &out.stages[k];
    let qs = st
        .contents
        .iter()
        .zip(&st.boxes)
        .zip(&st.scores)
        .map(|((c, b), &s)| Query {
            content: c.clone(),
            ref_box: *b,
            confidence: s,
            stage: k,
        })
        .collect();
    (qs, None)
}

fn pooled(points: &[HomogeneityPoint]) -> PhaseSummary {
    let cos: Vec<f64> = points.iter().map(|p| p.cosine).collect();
    let prox: Vec<f64> = points.iter().map(|p| 1.0 - p.iou_distance).collect();
    PhaseSummary {
        points: points.len(),
        correlation: pearson(&cos, &prox),
    }
}

/// Pooled homogeneity scatter over `scenes`, before and after DCG.
pub fn homogeneity(
    model: &Model,
    scenes: &[Scene],
    floor: f64,
) -> Result<(
    Vec<Vec<HomogeneityPoint>>,
    Option<Vec<Vec<HomogeneityPoint>>>,
)> {
    let outs: Vec<StageOutputs> = scenes
        .par_iter()
        .map(|s| model.forward(s))
        .collect::<Result<_, _>>()?;
    let mut before = Vec::new();
    let mut after: Option<Vec<Vec<HomogeneityPoint>>> = None;
    for o in &outs {
        let (b, a) = dcg_queries(model, o);
        before.push(homogeneity_scatter(&b, floor)?.points);
        if let Some(a) = a {
            after
                .get_or_insert_with(Vec::new)
                .push(homogeneity_scatter(&a, floor)?.points);
        }
    }
    Ok((before, after))
}

pub fn homogeneity_report(
    before: &[Vec<HomogeneityPoint>],
    after: Option<&[Vec<HomogeneityPoint>]>,
    floor: f64,
) -> HomogeneityReport {
    let flat = |v: &[Vec<HomogeneityPoint>]| v.iter().flatten().copied().collect::<Vec<_>>();
    HomogeneityReport {
        schema_version: REPORT_SCHEMA_VERSION,
        positive_floor: floor,
        before: pooled(&flat(before)),
        after: after.map(|a| pooled(&flat(a))),
    }
}

pub fn diagnose(args: &DiagnoseArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&args.common, overrides)?;
    let dir = out_dir(&cfg, &args.out);
    let model = load_model(&args.model)?;
    let scenes = pick(&cfg, load_scenes(&cfg, args.data.as_deref())?, args.split)?;
    check_grid(&scenes, model.config().grid)?;

    let (before, after) = homogeneity(&model, &scenes, args.positive_floor)?;
    let mut rows = Vec::new();
    for (k, s) in scenes.iter().enumerate() {
        let phases = [
            ("before", Some(&before[k])),
            ("after", after.as_ref().map(|a| &a[k])),
        ];
        for (phase, pts) in phases {
            for p in pts.into_iter().flatten() {
                rows.push(HomogeneityRow {
                    image_id: &s.image_id,
                    phase,
                    iou_distance: p.iou_distance,
                    cosine: p.cosine,
                });
            }
        }
    }
    io::write_csv(
        &dir.join("homogeneity.csv"),
        &["image_id", "phase", "iou_distance", "cosine"],
        &rows,
    )?;
    let hrep = homogeneity_report(&before, after.as_deref(), args.positive_floor);
    io::write_json(&dir.join("homogeneity.json"), &hrep)?;

    let enc = model_stage_detections(&model, &scenes)?.swap_remove(0);
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gt_boxes.clone()).collect();
    let pairs = score_iou_pairs(&enc, &gts)?;
    let mut srows = Vec::with_capacity(pairs.len());
    let mut it = pairs.iter();
    for (s, d) in scenes.iter().zip(&enc) {
        for _ in d {
            let &(score, o) = it.next().expect("one pair per detection");
            srows.push(ScoreIouRow {
                image_id: &s.image_id,
                score,
                iou: o,
            });
        }
    }
    io::write_csv(
        &dir.join("score_iou.csv"),
        &["image_id", "score", "iou"],
        &srows,
    )?;
    let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let o: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let srep = ScoreIouReport {
        schema_version: REPORT_SCHEMA_VERSION,
        stage: 0,
        pairs: pairs.len(),
        pearson: pearson(&s, &o),
    };
    io::write_json(&dir.join("score_iou.json"), &srep)?;

    let mut erows = Vec::new();
    for differentiated in [false, true] {
        let tr = equilibrium_sim(
            args.equilibrium_init,
            differentiated,
            args.equilibrium_lr,
            args.equilibrium_steps,
        )?;
        erows.extend(tr.steps.iter().map(|st| EquilibriumRow {
            differentiated,
            step: st.step,
            p1: st.p1,
            p2: st.p2,
            contrib1: st.contrib1,
            contrib2: st.contrib2,
            grad1: st.grad1,
            grad2: st.grad2,
        }));
    }
    io::write_csv(
        &dir.join("equilibrium.csv"),
        &[
            "differentiated",
            "step",
            "p1",
            "p2",
            "contrib1",
            "contrib2",
            "grad1",
            "grad2",
        ],
        &erows,
    )?;
    println!(
        "homogeneity corr before {:?} after {:?}; score-iou pearson {:?}",
        hrep.before.correlation,
        hrep.after.as_ref().and_then(|a| a.correlation),
        srep.pearson
    );
    Ok(())
}
