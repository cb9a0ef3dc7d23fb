//! `drivesim`: the scene-editing, rendering, training and evaluation pipeline
//! as composable subcommands that talk to each other only through files.

mod config;
mod record;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::RunConfig;
use drivesim::diffusion::{ddpm_sample, load_checkpoint, save_checkpoint, smoothed, train, Checkpoint, DenoiserModel, TensorRole, VideoTensor};
use drivesim::edit::{apply_edit_script, check_conflicts, parse_edit_script, PerturbationSpec};
use drivesim::fixtures::example_scene;
use drivesim::meshalign::{align_mesh, problem_from_scene, resolve_heading, CommandOracle, HeadingOracle};
use drivesim::metrics::{
    bas, fid, frame_features, fvd, run_benchmark, vims, CommandJudge, ConstantJudge, EmbeddingProvider, EvalBundle, HashJudge,
    JudgeProvider, MetricReport, Providers, SidecarEmbedder, ToyClipEmbedder, ToyEmbedder,
};
use drivesim::raster::render_sequence;
use drivesim::scene::{
    export_png, load_frames, load_scene, save_frames, save_scene, validate_frames, validate_scene, AssetClass, FrameSequence,
    InstanceMaskSequence, Scene,
};
use drivesim::splatfit::{build_cycle_pairs, build_mesh_pairs, load_pairs, save_pairs};
use record::RunRecord;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "drivesim", version, about = "Driving-scene editing, rendering, training-pair construction, toy diffusion and benchmark metrics")]
struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file overriding module defaults, or a run record to repeat.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the run record.
    #[arg(long, global = true)]
    record: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scene (and optionally rendered frames) for schema violations.
    Validate {
        /// Scene directory, or `example` for the bundled scene.
        scene: String,
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Apply an edit script and write the edited scene.
    Edit {
        scene: String,
        /// Script file, or a preset: lane_shift_3m, lane_shift_6m.
        #[arg(long)]
        script: Option<String>,
        /// Target of a preset; defaults to the first vehicle.
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every timeline instant of a scene.
    Render {
        scene: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write PNGs into this directory.
        #[arg(long)]
        png: Option<PathBuf>,
        /// How to draw assets that carry both splats and a mesh.
        #[arg(long, value_enum, default_value_t = Draw::Splats)]
        draw: Draw,
    },
    /// Build diffusion training pairs.
    Pairs {
        scene: String,
        #[arg(long, value_enum, default_value_t = PairKind::Cycle)]
        kind: PairKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an asset's mesh to its box and depth.
    Align {
        scene: String,
        #[arg(long)]
        instance: String,
        /// Heading oracle program; receives the query directory as last argument.
        #[arg(long)]
        oracle: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy denoiser on a pair directory.
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `training.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Write the per-step loss curve here as JSON.
        #[arg(long)]
        loss: Option<PathBuf>,
    },
    /// Sample a video from a checkpoint given a condition video.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        condition: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a generated video against ground truth, or a whole benchmark manifest.
    Eval(EvalArgs),
    /// Print a metric report as a table or convert its format.
    Report {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Benchmark manifest; when given, the pair options are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Ground-truth scene.
    #[arg(long)]
    scene: Option<String>,
    /// Scene the generated video shows; defaults to `--scene`.
    #[arg(long)]
    edited: Option<String>,
    /// Ground-truth frames; rendered from `--scene` if absent.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    generated: Option<PathBuf>,
    /// OSR judge: `hash`, `const:<reply>` or `cmd:<program>`.
    #[arg(long)]
    judge: Option<String>,
    /// Precomputed embedding sidecar; regions it lacks use the toy embedder.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Draw {
    Splats,
    Mesh,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PairKind {
    Cycle,
    Mesh,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Binary,
    Text,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate { .. } => "validate",
            Command::Edit { .. } => "edit",
            Command::Render { .. } => "render",
            Command::Pairs { .. } => "pairs",
            Command::Align { .. } => "align",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Eval(_) => "eval",
            Command::Report { .. } => "report",
        }
    }

    fn output(&self) -> Option<&Path> {
        match self {
            Command::Validate { .. } => None,
            Command::Edit { out, .. }
            | Command::Render { out, .. }
            | Command::Pairs { out, .. }
            | Command::Align { out, .. }
            | Command::Train { out, .. }
            | Command::Sample { out, .. } => Some(out),
            Command::Eval(a) => Some(&a.out),
            Command::Report { out, .. } => out.as_deref(),
        }
    }
}

/// Exit code 1 marks invalid input, 2 anything that went wrong at run time.
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl Failure {
    fn runtime(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
            code: 2,
        }
    }

    fn invalid(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
            code: 1,
        }
    }
}

type Res<T> = Result<T, Failure>;

struct Ctx {
    seed: u64,
    config: RunConfig,
}

fn warn(kind: &str, message: impl std::fmt::Display) {
    eprintln!("drivesim: warning[{kind}]: {message}");
}

fn scene_arg(arg: &str, rec: &mut RunRecord) -> Res<Scene> {
    if arg == "example" {
        rec.builtin("example-scene");
        return Ok(example_scene());
    }
    let path = Path::new(arg);
    rec.input(path);
    let scene = load_scene(path).map_err(|e| Failure::invalid("scene", e))?;
    let v = validate_scene(&scene);
    if let Some(first) = v.first() {
        return Err(Failure::invalid("validation", format!("{arg}: {} violations, first: {first}", v.len())));
    }
    Ok(scene)
}

fn frames_arg(path: &Path, rec: &mut RunRecord) -> Res<FrameSequence> {
    rec.input(path);
    load_frames(path).map_err(|e| Failure::invalid("frames", e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Res<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::runtime("io", format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::runtime("io", format!("{}: {e}", path.display())))
}

fn preset(name: &str, scene: &Scene, target: Option<&str>) -> Option<Res<String>> {
    let offset = match name {
        "lane_shift_3m" => 3.0,
        "lane_shift_6m" => 6.0,
        _ => return None,
    };
    let target = match target {
        Some(t) => t.to_string(),
        None => match scene.assets.iter().find(|a| a.klass == AssetClass::Vehicle && scene.trajectory(&a.id).is_some()) {
            Some(a) => a.id.clone(),
            None => return Some(Err(Failure::invalid("edit", "scene has no vehicle to shift"))),
        },
    };
    Some(Ok(format!("lane_shift target={target} offset={offset} ramp=1\n")))
}

fn cmd_validate(scene: &str, frames: Option<&Path>, rec: &mut RunRecord) -> Res<()> {
    let s = if scene == "example" {
        rec.builtin("example-scene");
        example_scene()
    } else {
        rec.input(Path::new(scene));
        load_scene(Path::new(scene)).map_err(|e| Failure::invalid("scene", e))?
    };
    let mut v = validate_scene(&s);
    if let Some(f) = frames {
        rec.input(f);
        let seq = load_frames(f).map_err(|e| Failure::invalid("frames", e))?;
        v.extend(validate_frames(&seq));
        if seq.width != s.camera.width || seq.height != s.camera.height || seq.len() != s.timeline.len() {
            warn("frames", "frame sequence does not match the scene camera or timeline");
        }
    }
    for x in &v {
        println!("{x}");
    }
    println!("{} violations", v.len());
    if v.is_empty() {
        Ok(())
    } else {
        Err(Failure::invalid("validation", format!("{} violations", v.len())))
    }
}

fn cmd_edit(scene: &str, script: Option<&str>, target: Option<&str>, out: &Path, rec: &mut RunRecord) -> Res<()> {
    let s = scene_arg(scene, rec)?;
    let text = match script {
        None => String::new(),
        Some(name) => match preset(name, &s, target) {
            Some(t) => t?,
            None => {
                let p = Path::new(name);
                rec.input(p);
                std::fs::read_to_string(p).map_err(|e| Failure::runtime("io", format!("{name}: {e}")))?
            }
        },
    };
    let parsed = parse_edit_script(&text, &s.timeline).map_err(|e| Failure::invalid("script", e))?;
    let edited = apply_edit_script(&s, &parsed).map_err(|e| Failure::invalid("edit", e))?;
    for c in check_conflicts(&edited) {
        warn("conflict", format!("{} and {} overlap at t = {}", c.id_a, c.id_b, c.time));
    }
    save_scene(&edited, out).map_err(|e| Failure::runtime("io", e))?;
    rec.output(out);
    println!("applied {} commands, wrote {}", parsed.commands.len(), out.display());
    Ok(())
}

fn cmd_render(scene: &str, out: &Path, png: Option<&Path>, draw: Draw, ctx: &Ctx, rec: &mut RunRecord) -> Res<()> {
    let mut s = scene_arg(scene, rec)?;
    if draw == Draw::Mesh {
        for a in s.assets.iter_mut().filter(|a| a.mesh.is_some()) {
            a.splats = None;
        }
    }
    let seq = render_sequence(&s, &ctx.config.render);
    save_frames(&seq, out).map_err(|e| Failure::runtime("io", e))?;
    rec.output(out);
    if let Some(p) = png {
        export_png(&seq, p).map_err(|e| Failure::runtime("io", e))?;
        rec.output(p);
    }
    println!("rendered {} frames of {}x{} to {}", seq.len(), seq.width, seq.height, out.display());
    Ok(())
}

fn cmd_pairs(scene: &str, kind: PairKind, out: &Path, ctx: &Ctx, rec: &mut RunRecord) -> Res<()> {
    let s = scene_arg(scene, rec)?;
    let c = &ctx.config;
    let pairs = match kind {
        PairKind::Cycle => {
            let spec = PerturbationSpec {
                lateral_range: c.perturbation.lateral_range,
                vertical_range: c.perturbation.vertical_range,
                heading_range: c.perturbation.heading_range,
                seed: ctx.seed,
            };
            build_cycle_pairs(&s, &spec, &c.fit)
        }
        PairKind::Mesh => build_mesh_pairs(&s, c.mesh_pairs.probability, c.mesh_pairs.lighting, ctx.seed),
    }
    .map_err(|e| Failure::runtime("pairs", e))?;
    save_pairs(&pairs, out).map_err(|e| Failure::runtime("io", e))?;
    rec.output(out);
    for (i, p) in pairs.iter().enumerate() {
        let d = p.condition.mean_abs_diff(&p.target).unwrap_or(f64::NAN);
        println!("pair {i}: condition/target mean abs diff {d:.6}");
    }
    Ok(())
}

#[derive(Serialize)]
struct AlignOutput {
    instance: String,
    frame: usize,
    degenerate_frame: bool,
    scale: f64,
    initial_scale: f64,
    heading: usize,
    heading_source: drivesim::meshalign::HeadingSource,
    oracle_error: Option<String>,
    score: f64,
    score_curve: [Vec<(f64, f64)>; 2],
}

fn cmd_align(scene: &str, instance: &str, oracle: Option<&str>, out: &Path, ctx: &Ctx, rec: &mut RunRecord) -> Res<()> {
    let s = scene_arg(scene, rec)?;
    let (problem, obs) = problem_from_scene(&s, instance, None, ctx.config.lambda).map_err(|e| Failure::runtime("align", e))?;
    let result = align_mesh(&problem).map_err(|e| Failure::runtime("align", e))?;
    let cmd = oracle.map(|p| CommandOracle {
        program: p.to_string(),
        args: Vec::new(),
        workdir: out.with_extension("oracle"),
    });
    let decision = resolve_heading(&problem, &result, cmd.as_ref().map(|c| c as &dyn HeadingOracle));
    if let Some(e) = &decision.oracle_error {
        warn("oracle", e);
    }
    let o = AlignOutput {
        instance: instance.to_string(),
        frame: obs.frame,
        degenerate_frame: obs.degenerate,
        scale: result.scale,
        initial_scale: result.initial_scale,
        heading: decision.candidate,
        heading_source: decision.source,
        oracle_error: decision.oracle_error.clone(),
        score: result.score,
        score_curve: result.score_curve.clone(),
    };
    write_json(out, &o)?;
    rec.output(out);
    println!("{instance}: scale {:.4} (initial {:.4}), heading {}", o.scale, o.initial_scale, o.heading);
    Ok(())
}

fn cmd_train(pairs: &Path, out: &Path, steps: Option<usize>, loss: Option<&Path>, ctx: &Ctx, rec: &mut RunRecord) -> Res<()> {
    rec.input(pairs);
    let data = load_pairs(pairs).map_err(|e| Failure::invalid("pairs", e))?;
    let sched = ctx.config.noise_schedule().map_err(|e| Failure::invalid("config", e))?;
    let mut tc = ctx.config.train_config(ctx.seed);
    if let Some(n) = steps {
        tc.steps = n;
    }
    let model = DenoiserModel::new(ctx.config.architecture.clone(), ctx.seed);
    let r = train(&model, &data, &sched, &tc).map_err(|e| Failure::runtime("diffusion", e))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::runtime("io", format!("{}: {e}", dir.display())))?;
    }
    save_checkpoint(
        &Checkpoint {
            model: r.model,
            schedule: sched,
        },
        out,
    )
    .map_err(|e| Failure::runtime("checkpoint", e))?;
    rec.output(out);
    if let Some(p) = loss {
        write_json(p, &r.loss_curve)?;
        rec.output(p);
    }
    let sm = smoothed(&r.loss_curve, 100);
    match (sm.first(), sm.last()) {
        (Some(a), Some(b)) => println!("trained {} steps on {} pairs, smoothed loss {a:.4} -> {b:.4}", tc.steps, data.len()),
        _ => println!("trained 0 steps on {} pairs", data.len()),
    }
    Ok(())
}

fn cmd_sample(checkpoint: &Path, condition: &Path, out: &Path, ctx: &Ctx, rec: &mut RunRecord) -> Res<()> {
    rec.input(checkpoint);
    let ck = load_checkpoint(checkpoint).map_err(|e| Failure::invalid("checkpoint", e))?;
    let cond_frames = frames_arg(condition, rec)?;
    let arch = &ck.model.arch;
    if arch.x_channels != 3 || arch.cond_channels != 3 {
        return Err(Failure::invalid("checkpoint", "sampling to frames needs a 3-channel model and condition"));
    }
    let cond = VideoTensor::from_frames(&cond_frames, TensorRole::Condition);
    let x = ddpm_sample(&ck.model, &cond, &ck.schedule, ctx.seed, cond.shape()).map_err(|e| Failure::runtime("diffusion", e))?;
    let seq = x.to_frames(&cond_frames.times);
    save_frames(&seq, out).map_err(|e| Failure::runtime("io", e))?;
    rec.output(out);
    println!("sampled {} frames with {} steps to {}", seq.len(), ck.schedule.steps(), out.display());
    Ok(())
}

fn judge_arg(spec: Option<&str>, workdir: PathBuf) -> Res<Option<Box<dyn JudgeProvider>>> {
    let Some(spec) = spec else { return Ok(None) };
    let j: Box<dyn JudgeProvider> = if spec == "hash" {
        Box::new(HashJudge)
    } else if let Some(r) = spec.strip_prefix("const:") {
        Box::new(ConstantJudge(r.to_string()))
    } else if let Some(p) = spec.strip_prefix("cmd:") {
        Box::new(CommandJudge {
            program: p.to_string(),
            args: Vec::new(),
            workdir,
        })
    } else {
        return Err(Failure::invalid("judge", format!("unknown judge {spec:?}; use hash, const:<reply> or cmd:<program>")));
    };
    Ok(Some(j))
}

fn encode_report(report: &MetricReport, format: Format) -> Vec<u8> {
    match format {
        Format::Text => {
            let mut t = report.to_json();
            t.push('\n');
            t.into_bytes()
        }
        Format::Binary => {
            let mut buf = Vec::new();
            ciborium::into_writer(report, &mut buf).expect("report encodes");
            buf
        }
    }
}

fn decode_report(bytes: &[u8]) -> Res<MetricReport> {
    if bytes.first() == Some(&b'{') {
        MetricReport::from_json(&String::from_utf8_lossy(bytes)).map_err(|e| Failure::invalid("report", e))
    } else {
        ciborium::from_reader(bytes).map_err(|e| Failure::invalid("report", e))
    }
}

#[derive(Serialize)]
struct PairMetrics {
    vims: Option<f64>,
    bas: Option<f64>,
    fid: Option<f64>,
    fvd: Option<f64>,
    fid_regularized: bool,
    fvd_regularized: bool,
    skipped_pairs: usize,
    warnings: Vec<String>,
}

fn bundle(scene: &Scene, video: FrameSequence, ctx: &Ctx) -> EvalBundle {
    if video.instance_labels.is_empty() {
        let masks = InstanceMaskSequence::from_frames(&render_sequence(scene, &ctx.config.render));
        EvalBundle::with_masks(scene, video, masks)
    } else {
        EvalBundle::from_scene(scene, video)
    }
}

fn cmd_eval(a: &EvalArgs, ctx: &Ctx, rec: &mut RunRecord) -> Res<()> {
    let toy = ToyEmbedder;
    let sidecar = match &a.embeddings {
        Some(p) => {
            rec.input(p);
            Some(SidecarEmbedder::load(p, Some(&toy)).map_err(|e| Failure::invalid("embeddings", e))?)
        }
        None => None,
    };
    let embedder: &dyn EmbeddingProvider = match &sidecar {
        Some(s) => s,
        None => &toy,
    };
    let clip = ToyClipEmbedder {
        frame: embedder,
        window: ctx.config.metrics.clip_window,
    };
    let m = &ctx.config.metrics;

    if let Some(manifest) = &a.manifest {
        rec.input(manifest);
        let judge = judge_arg(a.judge.as_deref(), a.out.with_extension("judge"))?;
        let mut p = Providers::new(embedder, &clip, judge.as_deref());
        p.render = ctx.config.render;
        p.vims = ctx.config.vims();
        p.osr_k = m.osr_k;
        let report = run_benchmark(manifest, &p).map_err(|e| Failure::invalid("manifest", e))?;
        for w in &report.warnings {
            warn("benchmark", w);
        }
        if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Failure::runtime("io", e))?;
        }
        std::fs::write(&a.out, encode_report(&report, a.format)).map_err(|e| Failure::runtime("io", format!("{}: {e}", a.out.display())))?;
        rec.output(&a.out);
        print!("{}", report.to_table());
        return Ok(());
    }

    let (Some(scene), Some(generated)) = (&a.scene, &a.generated) else {
        return Err(Failure::invalid("usage", "eval needs --manifest, or --scene and --generated"));
    };
    let gt_scene = scene_arg(scene, rec)?;
    let gen_scene = match &a.edited {
        Some(e) => scene_arg(e, rec)?,
        None => gt_scene.clone(),
    };
    let gen = frames_arg(generated, rec)?;
    let gt = match &a.gt {
        Some(p) => frames_arg(p, rec)?,
        None => render_sequence(&gt_scene, &ctx.config.render),
    };
    let gen_b = bundle(&gen_scene, gen, ctx);
    let gt_b = bundle(&gt_scene, gt, ctx);
    let mut out = PairMetrics {
        vims: None,
        bas: None,
        fid: None,
        fvd: None,
        fid_regularized: false,
        fvd_regularized: false,
        skipped_pairs: 0,
        warnings: Vec::new(),
    };
    match vims(&gen_b, &gt_b, embedder, &ctx.config.vims()) {
        Ok(v) => {
            out.vims = Some(v.score);
            out.skipped_pairs = v.skipped_pairs;
        }
        Err(e) => out.warnings.push(format!("vims: {e}")),
    }
    match bas(&gen_b, &gt_b, embedder, m.rotation_weight) {
        Ok(v) => out.bas = Some(v.score),
        Err(e) => out.warnings.push(format!("bas: {e}")),
    }
    let feats = frame_features(&gen_b.video, embedder).and_then(|g| Ok((g, frame_features(&gt_b.video, embedder)?)));
    match feats.and_then(|(g, t)| fid(&g, &t)) {
        Ok(v) => {
            out.fid = Some(v.value);
            out.fid_regularized = v.regularized;
        }
        Err(e) => out.warnings.push(format!("fid: {e}")),
    }
    match fvd(std::slice::from_ref(&gen_b.video), std::slice::from_ref(&gt_b.video), &clip) {
        Ok(v) => {
            out.fvd = Some(v.value);
            out.fvd_regularized = v.regularized;
        }
        Err(e) => out.warnings.push(format!("fvd: {e}")),
    }
    for w in &out.warnings {
        warn("metrics", w);
    }
    write_json(&a.out, &out)?;
    rec.output(&a.out);
    let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
    println!("VIMS {}", show(out.vims));
    println!("BAS {}", show(out.bas));
    println!("FID {}", show(out.fid));
    println!("FVD {}", show(out.fvd));
    Ok(())
}

fn cmd_report(input: &Path, out: Option<&Path>, format: Format, rec: &mut RunRecord) -> Res<()> {
    rec.input(input);
    let bytes = std::fs::read(input).map_err(|e| Failure::runtime("io", format!("{}: {e}", input.display())))?;
    let report = decode_report(&bytes)?;
    match out {
        Some(o) => {
            std::fs::write(o, encode_report(&report, format)).map_err(|e| Failure::runtime("io", format!("{}: {e}", o.display())))?;
            rec.output(o);
        }
        None => print!("{}", report.to_table()),
    }
    Ok(())
}

fn run(cli: &Cli, ctx: &Ctx, rec: &mut RunRecord) -> Res<()> {
    match &cli.command {
        Command::Validate { scene, frames } => cmd_validate(scene, frames.as_deref(), rec),
        Command::Edit { scene, script, target, out } => cmd_edit(scene, script.as_deref(), target.as_deref(), out, rec),
        Command::Render { scene, out, png, draw } => cmd_render(scene, out, png.as_deref(), *draw, ctx, rec),
        Command::Pairs { scene, kind, out } => cmd_pairs(scene, *kind, out, ctx, rec),
        Command::Align { scene, instance, oracle, out } => cmd_align(scene, instance, oracle.as_deref(), out, ctx, rec),
        Command::Train { pairs, out, steps, loss } => cmd_train(pairs, out, *steps, loss.as_deref(), ctx, rec),
        Command::Sample { checkpoint, condition, out } => cmd_sample(checkpoint, condition, out, ctx, rec),
        Command::Eval(a) => cmd_eval(a, ctx, rec),
        Command::Report { input, out, format } => cmd_report(input, out.as_deref(), *format, rec),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = cli.command.name();
    let record_path = cli.record.clone().unwrap_or_else(|| record::default_path(name, cli.command.output()));
    let config = match config::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("drivesim: error[config]: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("drivesim: error[threads]: {e}");
            return ExitCode::from(2);
        }
    }
    let mut rec = RunRecord::new(name, cli.seed, cli.threads, config.clone());
    if let Some(c) = &cli.config {
        rec.input(c);
    }
    let ctx = Ctx { seed: cli.seed, config };
    let code = match run(&cli, &ctx, &mut rec) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("drivesim: error[{}]: {}", f.kind, f.message);
            rec.error = Some(format!("{}: {}", f.kind, f.message));
            f.code
        }
    };
    rec.exit_code = code;
    if let Err(e) = rec.write(&record_path) {
        eprintln!("drivesim: error[record]: {}: {e}", record_path.display());
        return ExitCode::from(2);
    }
    ExitCode::from(code)
}
