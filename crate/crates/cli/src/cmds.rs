//! One handler per subcommand. Each loads its inputs, runs the library,
//! writes primary outputs plus a manifest, and maps failures onto the
//! process exit-code contract.

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::{
    CalibrateArgs, CliError, DemoArgs, EvaluateArgs, RegisterArgs, SegmentArgs, SweepArgs,
};
use mvreg_core::calib::{blind_pnp, FiducialModel};
use mvreg_core::geometry::{euler_to_pose, RigidPose};
use mvreg_core::mesh::{segment_principal_axis, SplitPlane};
use mvreg_core::metrics::{evaluate_pose, MetricReport};
use mvreg_core::ply::{load_ply, save_ply};
use mvreg_core::registration::{register, register_with_restart, RegistrationReport};
use mvreg_core::sweep::{robustness_sweep, write_plot_tsv, write_sweep_csv, SweepResult};
use mvreg_core::synth::{
    build_phantom, generate_scene, BeadNoiseSpec, NoiseSpec, PhantomSpec, SceneSpec,
};
use mvreg_core::{LabeledMesh, Scene};
use nalgebra::{Vector2, Vector3};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn algorithm<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Algorithm(e.to_string())
}

fn parse_floats(text: &str, n: usize, what: &str) -> Result<Vec<f64>, CliError> {
    let parts: Result<Vec<f64>, _> = text.split(',').map(|p| p.trim().parse()).collect();
    match parts {
        Ok(v) if v.len() == n => Ok(v),
        _ => Err(CliError::Usage(format!(
            "{what} must be {n} comma-separated numbers, got '{text}'"
        ))),
    }
}

/// "tx,ty,tz,phi,theta,psi" in mm and degrees.
pub fn parse_init(text: &str) -> Result<RigidPose, CliError> {
    let v = parse_floats(text, 6, "--init")?;
    Ok(euler_to_pose(
        v[3],
        v[4],
        v[5],
        Vector3::new(v[0], v[1], v[2]),
    ))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(data)?;
    writeln!(f).map_err(data)
}

fn load_scene(path: &Path) -> Result<Scene, CliError> {
    Scene::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_mesh(path: &Path) -> Result<LabeledMesh, CliError> {
    load_ply(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_segment(args: &SegmentArgs, config: &RunConfig, cmdline: &str) -> Result<(), CliError> {
    let mesh = load_mesh(&args.mesh)?;
    let plane = match &args.split_plane {
        Some(text) => {
            let v = parse_floats(text, 6, "--split-plane")?;
            Some(SplitPlane {
                point_mm: Vector3::new(v[0], v[1], v[2]),
                normal: Vector3::new(v[3], v[4], v[5]),
            })
        }
        None => None,
    };
    let labeled = segment_principal_axis(&mesh, plane.as_ref(), args.keep_labels).map_err(data)?;
    save_ply(&labeled, &args.out).map_err(data)?;
    let counts = [1u8, 2, 3].map(|c| labeled.classes.iter().filter(|&&x| x == c).count());
    println!(
        "labeled {} vertices: shaft {}, condyles {} / {}",
        labeled.vertices.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    let mut manifest = RunManifest::begin(cmdline.to_string(), config);
    manifest.add_input(&args.mesh).map_err(data)?;
    manifest.finish_beside(&args.out).map_err(data)
}

pub fn cmd_calibrate(
    args: &CalibrateArgs,
    config: &RunConfig,
    cmdline: &str,
) -> Result<(), CliError> {
    let mut scene = load_scene(&args.scene)?;
    let text = std::fs::read_to_string(&args.fiducial)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.fiducial.display())))?;
    let model: FiducialModel = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.fiducial.display())))?;

    let todo: Vec<usize> = scene
        .views
        .iter()
        .enumerate()
        .filter(|(_, v)| v.bead_detections.is_some())
        .map(|(i, _)| i)
        .collect();
    if todo.is_empty() {
        return Err(CliError::Data(
            "no view in the scene carries bead detections".into(),
        ));
    }
    let results: Vec<_> = mvreg_core::batch::batch_map(todo.len(), |j| {
        let view = &scene.views[todo[j]];
        let detections: Vec<Vector2<f64>> = view
            .bead_detections
            .as_ref()
            .unwrap()
            .iter()
            .map(|p| Vector2::new(p[0], p[1]))
            .collect();
        let mut opts = config.calibration.clone();
        opts.rng_seed = opts.rng_seed.wrapping_add(todo[j] as u64);
        blind_pnp(&model, &detections, &view.intrinsics, &opts)
            .map_err(|e| format!("view '{}': {e}", view.view_id))
    });
    for (j, res) in results.into_iter().enumerate() {
        let res = res.map_err(algorithm)?;
        let view = &mut scene.views[todo[j]];
        println!(
            "{}: {} beads matched, mean inlier error {:.3} px",
            view.view_id,
            res.matches.len(),
            res.mean_inlier_error_px
        );
        view.extrinsic = Some(res.extrinsic);
    }
    scene.save(&args.out).map_err(data)?;
    let mut manifest = RunManifest::begin(cmdline.to_string(), config);
    manifest.add_input(&args.scene).map_err(data)?;
    manifest.add_input(&args.fiducial).map_err(data)?;
    manifest.finish_beside(&args.out).map_err(data)
}

pub fn cmd_register(
    args: &RegisterArgs,
    config: &RunConfig,
    cmdline: &str,
) -> Result<(), CliError> {
    let mut scene = load_scene(&args.scene)?;
    let mesh = load_mesh(&args.mesh)?;
    if !args.views.is_empty() {
        for id in &args.views {
            scene
                .view(id)
                .map_err(|_| CliError::Usage(format!("--views: scene has no view '{id}'")))?;
        }
        scene.registration_views = args.views.clone();
    }
    if scene.registration_views.len() == 1 {
        eprintln!(
            "warning: single-view registration; depth and symmetric poses \
             may be unconstrained"
        );
    }
    let init = match &args.init {
        Some(text) => parse_init(text)?,
        None => parse_init("30,-40,5,-17.18,0,17.18").unwrap(),
    };
    let (views, contours) = scene.registration_inputs().map_err(data)?;
    let reg = &config.registration;
    let report = if args.restart {
        register_with_restart(&mesh, &views, &contours, &init, reg)
    } else {
        register(&mesh, &views, &contours, &init, reg)
    }
    .map_err(algorithm)?;
    println!(
        "{} after {} correspondence updates, median residual {:.3} mm, restarts {}",
        if report.converged {
            "converged"
        } else {
            "did not converge"
        },
        report.correspondence_updates,
        report.median_residual_mm,
        report.restarts
    );
    write_json(&report, &args.out)?;
    let mut manifest = RunManifest::begin(cmdline.to_string(), config);
    manifest.add_input(&args.scene).map_err(data)?;
    manifest.add_input(&args.mesh).map_err(data)?;
    manifest.finish_beside(&args.out).map_err(data)
}

pub fn cmd_evaluate(
    args: &EvaluateArgs,
    config: &RunConfig,
    cmdline: &str,
) -> Result<(), CliError> {
    let mut scene = load_scene(&args.scene)?;
    let mesh = load_mesh(&args.mesh)?;
    if !args.control_views.is_empty() {
        for id in &args.control_views {
            scene.view(id).map_err(|_| {
                CliError::Usage(format!("--control-views: scene has no view '{id}'"))
            })?;
        }
        scene.control_views = args.control_views.clone();
    }
    let mut metrics: Vec<MetricReport> = Vec::new();
    for path in &args.reports {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let report: RegistrationReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let init = report
            .trace
            .first()
            .map(|t| t.pose.clone())
            .unwrap_or_else(|| report.pose.clone());
        let metric = evaluate_pose(
            &mesh,
            &scene,
            &report.pose,
            config.evaluation.sample_spacing_mm,
            config.seed,
            &init,
            config.registration.mode,
        )
        .map_err(data)?;
        println!(
            "{}: mRPD {:.4} mm, chamfer {:.4} mm, success {}",
            path.display(),
            metric.mrpd_mean_mm,
            metric.chamfer_mm,
            metric.success
        );
        metrics.push(metric);
    }
    write_json(&metrics, &args.out)?;
    let csv_path = args.out.with_extension("csv");
    let mut csv = String::from("report,mrpd_mean_mm,chamfer_mm,precision,recall,success\n");
    for (path, m) in args.reports.iter().zip(&metrics) {
        // File name, not full path, so equal runs into different output
        // directories produce byte-identical tables.
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let precision = m.precision.map(|p| p.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            name, m.mrpd_mean_mm, m.chamfer_mm, precision, m.recall, m.success
        ));
    }
    std::fs::write(&csv_path, csv).map_err(data)?;
    let mut manifest = RunManifest::begin(cmdline.to_string(), config);
    manifest.add_input(&args.scene).map_err(data)?;
    manifest.add_input(&args.mesh).map_err(data)?;
    for path in &args.reports {
        manifest.add_input(path).map_err(data)?;
    }
    manifest.finish_beside(&args.out).map_err(data)
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    n_runs: usize,
    n_successes: usize,
    success_rate: Option<f64>,
    max_mrpd_mm: Option<f64>,
    /// Index = restarts used, value = number of runs.
    restart_histogram: Vec<usize>,
}

fn summarize(result: &SweepResult) -> SweepSummary {
    let max_mrpd = result
        .runs
        .iter()
        .filter_map(|r| r.mrpd_mm())
        .fold(None, |acc: Option<f64>, m| {
            Some(acc.map_or(m, |a| a.max(m)))
        });
    let deepest = result.runs.iter().map(|r| r.restarts).max().unwrap_or(0);
    let mut hist = vec![0usize; deepest + 1];
    for run in &result.runs {
        hist[run.restarts] += 1;
    }
    SweepSummary {
        n_runs: result.runs.len(),
        n_successes: result.n_successes(),
        success_rate: result.success_rate,
        max_mrpd_mm: max_mrpd,
        restart_histogram: hist,
    }
}

pub fn cmd_sweep(args: &SweepArgs, config: &RunConfig, cmdline: &str) -> Result<(), CliError> {
    let scene = load_scene(&args.scene)?;
    let mesh = load_mesh(&args.mesh)?;
    let result =
        robustness_sweep(&mesh, &scene, &config.registration, &config.sweep).map_err(data)?;

    let mut csv = Vec::new();
    write_sweep_csv(&result, &mut csv).map_err(data)?;
    std::fs::write(&args.out, csv).map_err(data)?;

    let stem = args
        .out
        .file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    let summary_path = args.out.with_file_name(format!("{stem}.summary.json"));
    let plot_path = args.out.with_file_name(format!("{stem}.plot.tsv"));
    let summary = summarize(&result);
    write_json(&summary, &summary_path)?;
    let mut tsv = Vec::new();
    write_plot_tsv(&result, &mut tsv).map_err(data)?;
    std::fs::write(&plot_path, tsv).map_err(data)?;

    match summary.success_rate {
        Some(rate) => println!(
            "{} runs: {} successes ({:.0}%), max mRPD {}",
            summary.n_runs,
            summary.n_successes,
            100.0 * rate,
            summary
                .max_mrpd_mm
                .map(|m| format!("{m:.4} mm"))
                .unwrap_or_else(|| "n/a".into())
        ),
        None => println!("0 runs requested; wrote header-only outputs"),
    }
    let mut manifest = RunManifest::begin(cmdline.to_string(), config);
    manifest.add_input(&args.scene).map_err(data)?;
    manifest.add_input(&args.mesh).map_err(data)?;
    manifest.finish_beside(&args.out).map_err(data)
}

/// Generates the standard phantom and scene, then walks the whole
/// pipeline: segment, calibrate, register, evaluate, sweep. Everything
/// lands in one directory, manifests included, as a worked example.
pub fn cmd_demo(args: &DemoArgs, config: &RunConfig, cmdline: &str) -> Result<(), CliError> {
    let dir = &args.out;
    std::fs::create_dir_all(dir).map_err(data)?;
    let path = |name: &str| -> PathBuf { dir.join(name) };

    println!("[1/6] synthesizing phantom and scene");
    let labeled = build_phantom(&PhantomSpec::standard()).map_err(data)?;
    let raw = LabeledMesh::new(
        labeled.vertices.clone(),
        vec![0; labeled.vertices.len()],
        labeled.triangles.clone(),
    )
    .map_err(data)?;
    save_ply(&raw, path("raw_mesh.ply")).map_err(data)?;
    let spec = SceneSpec {
        noise: NoiseSpec::gaussian(0.5),
        seed: config.seed,
        beads: Some(BeadNoiseSpec {
            sigma_px: 0.3,
            n_missing: 2,
            n_spurious: 2,
        }),
        ..SceneSpec::default()
    };
    let mut scene = generate_scene(&labeled, &RigidPose::identity(), &spec).map_err(data)?;
    for view in &mut scene.views {
        view.extrinsic = None;
    }
    scene.save(path("scene_uncalibrated.json")).map_err(data)?;
    write_json(&FiducialModel::standard_cage(), &path("fiducial.json"))?;

    println!("[2/6] segmenting the unlabeled mesh");
    cmd_segment(
        &SegmentArgs {
            mesh: path("raw_mesh.ply"),
            out: path("mesh.ply"),
            keep_labels: false,
            split_plane: None,
        },
        config,
        cmdline,
    )?;

    println!("[3/6] calibrating views from bead detections");
    cmd_calibrate(
        &CalibrateArgs {
            scene: path("scene_uncalibrated.json"),
            fiducial: path("fiducial.json"),
            out: path("scene.json"),
        },
        config,
        cmdline,
    )?;

    println!("[4/6] registering the mesh to the contours");
    cmd_register(
        &RegisterArgs {
            scene: path("scene.json"),
            mesh: path("mesh.ply"),
            out: path("report.json"),
            mode: None,
            views: Vec::new(),
            init: None,
            restart: false,
        },
        config,
        cmdline,
    )?;

    println!("[5/6] scoring against held-out control views");
    cmd_evaluate(
        &EvaluateArgs {
            reports: vec![path("report.json")],
            scene: path("scene.json"),
            mesh: path("mesh.ply"),
            out: path("metrics.json"),
            control_views: Vec::new(),
        },
        config,
        cmdline,
    )?;
    let metrics: Vec<MetricReport> =
        serde_json::from_str(&std::fs::read_to_string(path("metrics.json")).map_err(data)?)
            .map_err(data)?;
    if !metrics.first().is_some_and(|m| m.success) {
        return Err(CliError::Algorithm(
            "demo registration missed the 1 mm success bar".into(),
        ));
    }

    println!("[6/6] running a small robustness sweep");
    let mut sweep_config = config.clone();
    sweep_config.sweep.n_runs = args.sweep_runs;
    cmd_sweep(
        &SweepArgs {
            scene: path("scene.json"),
            mesh: path("mesh.ply"),
            out: path("sweep.csv"),
            runs: None,
            mode: None,
            restart: false,
            translation_range: None,
            rotation_range: None,
        },
        &sweep_config,
        cmdline,
    )?;

    println!("demo complete; artifacts in {}", dir.display());
    Ok(())
}
