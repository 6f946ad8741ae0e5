//! Subcommand implementations.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use groundpose::p1p;
use groundpose::ransac::{GroundScene, RansacResult};
use groundpose::refine::{ShapeCoeffs, ShapeModel};
use groundpose::synthbench::{
    aggregate, angular_translation_error, generate, refine_estimate, rotation_error,
    run_experiment, run_ransac, translation_error, vertex_error, BenchOptions, BenchRecord,
    SolverKind, Summary, SynthConfig,
};
use groundpose::{Pose, PoseError};
use serde::Serialize;
use toml::Spanned;

use crate::scene::{
    read_text, rotation_rows, write_text, IntrinsicsSpec, ObjectSpec, SceneFile, SceneObject,
    ShapeModelFile, TruthFile, TruthObject,
};
use crate::{BenchArgs, CliError, EstimateArgs, SynthArgs};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub e_r_deg: Option<f64>,
    pub e_t_pct: Option<f64>,
    pub e_a_deg: Option<f64>,
    pub e_v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectResult {
    pub name: String,
    pub status: &'static str,
    pub error: Option<String>,
    /// Row-major.
    pub rotation: Option<[f64; 9]>,
    pub translation: Option<[f64; 3]>,
    pub inlier_ids: Vec<usize>,
    /// P1P case of the winning hypothesis.
    pub case: Option<u8>,
    pub lambda: Option<Vec<f64>>,
    pub ransac_iterations: Option<usize>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateOutput {
    pub scene: String,
    pub method: String,
    pub objects: Vec<ObjectResult>,
}

fn p1p_case(obj: &SceneObject, scene: &GroundScene, r: &RansacResult) -> Option<u8> {
    let id = *r.best_sample.first()?;
    let corr = obj.corrs.get(id)?;
    p1p::solve_all(
        corr,
        &scene.bbox,
        &obj.box3d,
        &scene.intrinsics,
        &scene.ground,
    )
    .ok()?
    .into_iter()
    .find(|s| s.pose == r.pose)
    .map(|s| s.case.number())
}

fn metrics(
    pose: &Pose,
    coeffs: &ShapeCoeffs,
    shape: Option<&ShapeModel>,
    truth: &TruthObject,
) -> Result<Metrics, PoseError> {
    let gt = truth.pose()?;
    let e_v = match shape {
        Some(m) if truth.lambda.len() == m.modes() => Some(vertex_error(
            m,
            coeffs,
            &truth.coeffs(),
            Some((&pose.translation, &gt.translation)),
        )?),
        _ => None,
    };
    Ok(Metrics {
        e_r_deg: Some(rotation_error(&pose.rotation, &gt.rotation)),
        e_t_pct: translation_error(&pose.translation, &gt.translation).ok(),
        e_a_deg: angular_translation_error(&pose.translation, &gt.translation).ok(),
        e_v,
    })
}

pub fn estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let ransac_cfg = args.ransac.config(args.seed)?;
    let robust = args.tau.config()?;
    let scene_file = SceneFile::read(&args.scene)?;
    let shape = match scene_file.shape_model_path(&args.scene) {
        Some(p) => Some(
            ShapeModelFile::read(&p)?
                .to_model()
                .map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let truth = args.truth.as_deref().map(TruthFile::read).transpose()?;
    let bad = |e: PoseError| CliError::Parse(format!("{}: {e}", args.scene.display()));
    let k = scene_file.intrinsics().map_err(bad)?;
    let ground = scene_file.ground().map_err(bad)?;
    let objects = scene_file.objects().map_err(bad)?;

    let mut results = Vec::with_capacity(objects.len());
    for obj in &objects {
        let gs = GroundScene {
            intrinsics: k,
            ground,
            bbox: obj.bbox,
        };
        let mut res = ObjectResult {
            name: obj.name.clone(),
            status: "failed",
            error: None,
            rotation: None,
            translation: None,
            inlier_ids: Vec::new(),
            case: None,
            lambda: None,
            ransac_iterations: None,
            metrics: Metrics::default(),
        };
        let outcome = run_ransac(args.method.solver, &obj.corrs, &gs, &obj.box3d, &ransac_cfg)
            .and_then(|r| {
                let refined = refine_estimate(
                    args.method.refiner,
                    &obj.corrs,
                    shape.as_ref(),
                    &k,
                    &r,
                    &robust,
                )?;
                Ok((r, refined))
            });
        match outcome {
            Err(e) => res.error = Some(e.to_string()),
            Ok((r, (pose, coeffs))) => {
                res.status = "ok";
                res.rotation = Some(rotation_rows(&pose.rotation));
                res.translation =
                    Some([pose.translation.x, pose.translation.y, pose.translation.z]);
                let t_in = ransac_cfg.inlier_threshold_px;
                res.inlier_ids = obj
                    .corrs
                    .iter()
                    .filter(|c| {
                        groundpose::refine::residual(&pose, &coeffs, shape.as_ref(), &k, c)
                            .is_ok_and(|e| e < t_in)
                    })
                    .map(|c| c.id)
                    .collect();
                res.inlier_ids.sort_unstable();
                if args.method.solver == SolverKind::P1p {
                    res.case = p1p_case(obj, &gs, &r);
                }
                res.ransac_iterations = Some(r.iterations_run);
                if shape.is_some() {
                    res.lambda = Some(coeffs.0.clone());
                }
                if let Some(t) = truth
                    .as_ref()
                    .and_then(|t| t.objects.iter().find(|o| o.name == obj.name))
                {
                    res.metrics = metrics(&pose, &coeffs, shape.as_ref(), t)
                        .map_err(|e| CliError::Parse(format!("truth for '{}': {e}", obj.name)))?;
                }
            }
        }
        results.push(res);
    }

    let failures = results.iter().filter(|r| r.status != "ok").count();
    let out = EstimateOutput {
        scene: args.scene.display().to_string(),
        method: args.method.to_string(),
        objects: results,
    };
    let json = serde_json::to_string_pretty(&out).expect("serialisable output") + "\n";
    match &args.out {
        Some(p) => write_text(p, &json)?,
        None => print!("{json}"),
    }
    if failures > 0 {
        return Err(CliError::Estimation(failures));
    }
    Ok(())
}

fn read_synth_config(path: Option<&Path>) -> Result<SynthConfig, CliError> {
    let Some(path) = path else {
        return Ok(SynthConfig::default());
    };
    let text = read_text(path)?;
    let cfg: SynthConfig = toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map(|s| format!(" at line {}", text[..s.start].matches('\n').count() + 1))
            .unwrap_or_default();
        CliError::Parse(format!(
            "{}{line}: {}",
            path.display(),
            e.message().trim_end()
        ))
    })?;
    cfg.validate()
        .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

pub const SHAPE_MODEL_FILE: &str = "shape_model.toml";

pub fn scene_file_name(trial: usize) -> String {
    format!("scene_{trial:04}.toml")
}

pub fn truth_file_name(trial: usize) -> String {
    format!("truth_{trial:04}.toml")
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut cfg = read_synth_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.clone(), e))?;
    let k = cfg.intrinsics();
    for trial in 0..args.trials {
        let s = generate(&cfg, trial).map_err(|e| CliError::Usage(e.to_string()))?;
        if trial == 0 {
            if let Some(m) = &s.shape {
                let f = ShapeModelFile::from_model("synthetic", m);
                let text = toml::to_string(&f).expect("serialisable shape model");
                write_text(&dir.join(SHAPE_MODEL_FILE), &text)?;
            }
        }
        let scene = SceneFile {
            pitch_deg: Spanned::new(0..0, s.scene.ground.pitch().to_degrees()),
            shape_model: s.shape.as_ref().map(|_| SHAPE_MODEL_FILE.to_string()),
            intrinsics: Spanned::new(
                0..0,
                IntrinsicsSpec {
                    fx: k.fx(),
                    fy: k.fy(),
                    cx: k.cx(),
                    cy: k.cy(),
                },
            ),
            objects: vec![Spanned::new(
                0..0,
                ObjectSpec::from_parts("object", &s.bbox, &s.box3d, &s.corrs),
            )],
        };
        write_text(&dir.join(scene_file_name(trial)), &scene.to_toml()?)?;
        let truth = TruthFile {
            objects: vec![TruthObject {
                name: "object".into(),
                rotation: rotation_rows(&s.gt_pose.rotation),
                translation: [
                    s.gt_pose.translation.x,
                    s.gt_pose.translation.y,
                    s.gt_pose.translation.z,
                ],
                lambda: s.gt_coeffs.0.clone(),
                inlier_ids: s
                    .inlier_mask
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| **m)
                    .map(|(i, _)| i)
                    .collect(),
            }],
        };
        let text = toml::to_string(&truth).expect("serialisable truth");
        write_text(&dir.join(truth_file_name(trial)), &text)?;
    }
    println!("wrote {} scene(s) to {}", args.trials, dir.display());
    Ok(())
}

pub const CSV_HEADER: [&str; 12] = [
    "experiment",
    "setting",
    "method",
    "trials",
    "failures",
    "mean_e_r_deg",
    "mean_e_t_pct",
    "mean_e_a_deg",
    "mean_e_v",
    "mean_inliers",
    "mean_iterations",
    "mean_time_ms",
];

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        "NA".into()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), num)
}

pub fn csv_rows(summaries: &[Summary]) -> Vec<[String; 12]> {
    summaries
        .iter()
        .map(|s| {
            [
                s.experiment.to_string(),
                num(s.setting),
                s.method.to_string(),
                s.trials.to_string(),
                s.failures.to_string(),
                num(s.mean_e_r_deg),
                num(s.mean_e_t_pct),
                num(s.mean_e_a_deg),
                opt(s.mean_e_v),
                num(s.mean_inliers),
                num(s.mean_iterations),
                opt(s.mean_time_ms),
            ]
        })
        .collect()
}

fn write_csv(path: &Path, summaries: &[Summary]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(path.to_path_buf(), std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(CSV_HEADER).map_err(io)?;
    for row in csv_rows(summaries) {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(path.to_path_buf(), e))
}

#[derive(Serialize)]
struct BenchJson<'a> {
    experiment: String,
    seed: u64,
    trials_per_setting: usize,
    methods: Vec<String>,
    config: &'a SynthConfig,
    summaries: &'a [Summary],
    records: &'a [BenchRecord],
}

/// Fixed-width table of the aggregates.
pub fn summary_table(summaries: &[Summary]) -> String {
    let mut s = format!(
        "{:<6} {:>8} {:<10} {:>6} {:>6} {:>10} {:>10} {:>10} {:>9} {:>9}\n",
        "exp",
        "setting",
        "method",
        "trials",
        "fail",
        "e_r(deg)",
        "e_t(%)",
        "e_a(deg)",
        "inliers",
        "iters"
    );
    for r in summaries {
        s += &format!(
            "{:<6} {:>8} {:<10} {:>6} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>9.1} {:>9.2}\n",
            r.experiment.to_string(),
            num(r.setting),
            r.method.to_string(),
            r.trials,
            r.failures,
            r.mean_e_r_deg,
            r.mean_e_t_pct,
            r.mean_e_a_deg,
            r.mean_inliers,
            r.mean_iterations
        );
    }
    s
}

pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let mut cfg = read_synth_config(args.config.as_deref())?;
    if let Some(t) = args.trials {
        cfg.n_trials = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let methods = args
        .methods
        .clone()
        .unwrap_or_else(|| args.experiment.default_methods());
    if methods.is_empty() {
        return Err(CliError::Usage(
            "--methods must name at least one method".into(),
        ));
    }
    let opts = BenchOptions {
        ransac: args.ransac.config(0)?,
        robust: args.tau.config()?,
        timing: args.timing,
    };
    let csv_path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", args.experiment)));
    let json_path = args
        .json
        .clone()
        .unwrap_or_else(|| csv_path.with_extension("json"));

    let records = run_experiment(args.experiment, &methods, &cfg, &opts)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let summaries = aggregate(&records);

    write_csv(&csv_path, &summaries)?;
    let json = BenchJson {
        experiment: args.experiment.to_string(),
        seed: cfg.seed,
        trials_per_setting: cfg.n_trials,
        methods: methods.iter().map(|m| m.to_string()).collect(),
        config: &cfg,
        summaries: &summaries,
        records: &records,
    };
    let text = serde_json::to_string_pretty(&json).expect("serialisable records") + "\n";
    write_text(&json_path, &text)?;

    let mut out = std::io::stdout().lock();
    let _ = out.write_all(summary_table(&summaries).as_bytes());
    let _ = writeln!(
        out,
        "wrote {} and {}",
        csv_path.display(),
        json_path.display()
    );
    Ok(())
}
