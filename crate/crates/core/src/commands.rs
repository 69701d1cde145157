//! Command implementations behind the CLI: dataset generation, desk-scale
//! training, inference, and evaluation. Every command writes the effective
//! config next to its outputs so a run is reproducible from its artifacts.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{RunConfig, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::eval::{evaluate, format_report, EvalReport, EvalScene};
use crate::model::ModelParams;
use crate::pipeline::{infer_scene, scene_radar_points};
use crate::plot;
use crate::scene::gen::{generate_scene, scene_seed};
use crate::scene::{
    detections_to_json, load_detections, load_scenes_dir, SceneDetections, SceneRecord, CLASS_NAMES,
};
use crate::train::train_with;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::data(format!("write {}: {e}", path.display())))
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::data(format!("create {}: {e}", out.display())))?;
    write_file(&out.join("effective-config.toml"), cfg.to_toml().as_bytes())
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

#[derive(Serialize)]
struct GenManifest {
    config_fingerprint: String,
    seed: u64,
    scenes: Vec<String>,
}

/// Generate `n_scenes` synthetic scenes into `out`, plus a manifest tying
/// them to the config fingerprint and seed.
pub fn cmd_gen(cfg: &RunConfig, n_scenes: usize, seed: u64, out: &Path) -> Result<()> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    let ids: Vec<String> = (0..n_scenes).map(|i| format!("scene-{i:04}")).collect();
    let records: Vec<SceneRecord> = pool(cfg)?.install(|| {
        ids.par_iter()
            .map(|id| generate_scene(cfg, id, scene_seed(seed, id)))
            .collect::<Result<_>>()
    })?;
    for r in &records {
        write_file(&out.join(format!("{}.json", r.scene_id)), &r.to_json())?;
    }
    let manifest = GenManifest {
        config_fingerprint: format!("{:016x}", cfg.fingerprint()),
        seed,
        scenes: ids,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join("manifest.json"), &json)?;
    println!("wrote {n_scenes} scenes and manifest.json to {}", out.display());
    Ok(())
}

/// Train from scratch on every scene in `scenes_dir`; writes the checkpoint,
/// the per-step loss log, and a loss plot.
pub fn cmd_train(cfg: &RunConfig, scenes_dir: &Path, seed: u64, out: &Path) -> Result<()> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    let scenes = load_scenes_dir(scenes_dir)?;
    let (params, log) = pool(cfg)?.install(|| {
        train_with(cfg, &scenes, seed, &mut |s| {
            println!(
                "step {:>4}  lr {:.4}  total {:.6}  heatmap {:.6}  regression {:.6}  refinement {:.6}",
                s.step, s.lr, s.total, s.focal, s.reg, s.refine
            );
        })
    })?;
    checkpoint::save(&out.join("checkpoint.bin"), &params)?;
    let json = serde_json::to_vec_pretty(&log).expect("log serializes");
    write_file(&out.join("train-log.json"), &json)?;
    write_file(&out.join("loss.svg"), plot::loss_curves(&log).as_bytes())?;
    println!("wrote checkpoint.bin, train-log.json, loss.svg to {}", out.display());
    Ok(())
}

/// Run the pipeline over every scene in `scenes_dir` with the given
/// checkpoint and the config's ablation flags; writes detections JSON and a
/// top-down scatter of the first scene.
pub fn cmd_infer(cfg: &RunConfig, checkpoint_path: &Path, scenes_dir: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    let template = ModelParams::init(cfg, 0)?;
    let params = checkpoint::load(checkpoint_path, &template)?;
    let scenes = load_scenes_dir(scenes_dir)?;
    let sets: Vec<SceneDetections> = pool(cfg)?.install(|| {
        scenes
            .par_iter()
            .map(|s| infer_scene(s, &params, cfg, &cfg.ablate))
            .collect::<Result<_>>()
    })?;
    write_file(&out.join("detections.json"), &detections_to_json(&sets))?;
    if let (Some(scene), Some(set)) = (scenes.first(), sets.first()) {
        let radar = scene_radar_points(scene, cfg)?;
        let svg = plot::bev_scatter(scene, &radar, &set.detections, &cfg.grid_spec()?);
        write_file(&out.join(format!("scatter-{}.svg", scene.scene_id)), svg.as_bytes())?;
    }
    println!("wrote detections for {} scenes to {}", sets.len(), out.display());
    Ok(())
}

/// Pair one detection set with the scene list, rejecting id mismatches.
fn align(name: &str, sets: &[SceneDetections], scenes: &[SceneRecord]) -> Result<Vec<EvalScene>> {
    let by_id: HashMap<&str, &SceneDetections> =
        sets.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let scene_ids: BTreeSet<&str> = scenes.iter().map(|s| s.scene_id.as_str()).collect();
    let missing: Vec<&str> =
        scenes.iter().map(|s| s.scene_id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
    let unknown: Vec<&str> =
        sets.iter().map(|s| s.scene_id.as_str()).filter(|id| !scene_ids.contains(id)).collect();
    if !missing.is_empty() || !unknown.is_empty() {
        let mut msg = format!("detections `{name}` do not match the scene set");
        if !missing.is_empty() {
            msg.push_str(&format!("; scenes without detections: {}", missing.join(", ")));
        }
        if !unknown.is_empty() {
            msg.push_str(&format!("; detections for unknown scenes: {}", unknown.join(", ")));
        }
        return Err(Error::data(msg));
    }
    Ok(scenes
        .iter()
        .map(|s| EvalScene { dets: by_id[s.scene_id.as_str()].detections.clone(), gts: s.gt.clone() })
        .collect())
}

fn set_name(path: &Path, index: usize) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .unwrap_or_else(|| format!("set-{index}"))
}

fn comparison_table(named: &[(String, EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "detections", "mAP", "NDS", "ATE", "ASE", "AOE", "AVE"
    ));
    let base = &named[0].1;
    for (i, (name, r)) in named.iter().enumerate() {
        out.push_str(&format!(
            "{name:<20} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n",
            r.map, r.nds, r.mate, r.mase, r.maoe, r.mave
        ));
        if i > 0 {
            out.push_str(&format!(
                "{:<20} {:>+7.4} {:>+7.4} {:>+7.4} {:>+7.4} {:>+7.4} {:>+7.4}\n",
                "  vs first",
                r.map - base.map,
                r.nds - base.nds,
                r.mate - base.mate,
                r.mase - base.mase,
                r.maoe - base.maoe,
                r.mave - base.mave
            ));
        }
    }
    out
}

/// Evaluate one or more detection sets against the scenes; writes metric
/// reports, per-class precision-recall plots, and, with several sets, a
/// side-by-side comparison table.
pub fn cmd_eval(cfg: &RunConfig, det_paths: &[PathBuf], scenes_dir: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    if det_paths.is_empty() {
        return Err(Error::config("eval needs at least one detections file"));
    }
    prepare_out(cfg, out)?;
    let scenes = load_scenes_dir(scenes_dir)?;
    let mut named: Vec<(String, EvalReport)> = Vec::new();
    let mut text = String::new();
    for (i, path) in det_paths.iter().enumerate() {
        let name = set_name(path, i);
        let sets = load_detections(path)?;
        let aligned = align(&name, &sets, &scenes)?;
        let report = evaluate(&aligned);
        let json = serde_json::to_vec_pretty(&report).expect("report serializes");
        write_file(&out.join(format!("report-{name}.json")), &json)?;
        for class in 0..NUM_CLASSES {
            if report.per_class.iter().any(|c| c.class == CLASS_NAMES[class] && c.n_gt > 0) {
                let svg = plot::pr_curves(&report, class);
                write_file(&out.join(format!("pr-{name}-{}.svg", CLASS_NAMES[class])), svg.as_bytes())?;
            }
        }
        text.push_str(&format!("== {name} ==\n{}\n", format_report(&report)));
        named.push((name, report));
    }
    if named.len() > 1 {
        text.push_str(&format!("== comparison ==\n{}", comparison_table(&named)));
    }
    write_file(&out.join("report.txt"), text.as_bytes())?;
    print!("{text}");
    println!("wrote reports to {}", out.display());
    Ok(())
}
