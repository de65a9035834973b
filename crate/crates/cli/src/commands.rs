use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use deform_core::datagen::{load_dataset, make_dataset, LoadedDataset, SynthSpec};
use deform_core::fitting::{
    edit_point_handles, reconstruct_from_landmarks, EditConfig, HandleConstraint, LandmarkSpec, ReconstructConfig,
};
use deform_core::model::{read_checkpoint, write_checkpoint, DecoderVariant, HyperDecoder};
use deform_core::semantics::{apply_semantic, flatten_meshes, pca_complexity, train_direction, SemanticDirection, SvmConfig};
use deform_core::training::{
    fit_latent, rmse, train, train_variant, training_rmse, FitConfig, TrainConfig, TrainExample,
};
use deform_core::{AutoDecoder, Decoder, LatentCode, PointSet, TriMesh};
use deform_service::{AppState, ServiceConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::run::{read_config, read_json, Run};
use crate::{require_out, Cli, Command, LatentArgs};

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Datagen(a) => datagen(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Fit(a) => fit(cli, a),
        Command::Reconstruct(a) => reconstruct(cli, a),
        Command::EditHandles(a) => edit_handles(cli, a),
        Command::EditSemantic(a) => edit_semantic(cli, a),
        Command::Directions(a) => directions(cli, a),
        Command::Sample(a) => sample(cli, a),
        Command::SubdivideDecode(a) => subdivide_decode(cli, a),
        Command::AnalyzePca(a) => analyze_pca(cli, a),
        Command::BenchAblation(a) => bench_ablation(cli, a),
        Command::Serve(a) => serve(cli, a),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Datagen(_) => "datagen",
        Command::Train(_) => "train",
        Command::Fit(_) => "fit",
        Command::Reconstruct(_) => "reconstruct",
        Command::EditHandles(_) => "edit-handles",
        Command::EditSemantic(_) => "edit-semantic",
        Command::Directions(_) => "directions",
        Command::Sample(_) => "sample",
        Command::SubdivideDecode(_) => "subdivide-decode",
        Command::AnalyzePca(_) => "analyze-pca",
        Command::BenchAblation(_) => "bench-ablation",
        Command::Serve(_) => "serve",
    }
}

/// Claim the output directory, run `body`, then write the manifest whatever
/// the outcome.
fn with_run(cli: &Cli, seed: u64, inputs: &[&Path], body: impl FnOnce(&mut Run) -> CliResult<()>) -> CliResult<()> {
    let out = require_out(cli)?;
    let mut all_inputs: Vec<&Path> = inputs.to_vec();
    if let Some(c) = &cli.checkpoint {
        all_inputs.push(c);
    }
    if let Some(c) = &cli.config {
        all_inputs.push(c);
    }
    let mut run = Run::start(
        command_name(&cli.command),
        &out,
        cli.force,
        &all_inputs,
        cli.config.clone(),
        seed,
        cli.checkpoint.clone(),
        cli.deterministic,
    )?;
    let result = body(&mut run);
    run.finish(&result)?;
    result
}

struct Loaded {
    model: HyperDecoder,
    train_config: Option<TrainConfig>,
}

fn load_model(cli: &Cli) -> CliResult<Loaded> {
    let path = cli.checkpoint.as_ref().ok_or_else(|| CliError::Config("--checkpoint is required".into()))?;
    let file = std::fs::File::open(path).map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))?;
    let (model, extra) = read_checkpoint(std::io::BufReader::new(file))?;
    let train_config = extra
        .as_ref()
        .and_then(|v| v.get("train_config"))
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    Ok(Loaded { model, train_config })
}

fn load_data(dir: &Path) -> CliResult<LoadedDataset> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("dataset directory {} not found", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

fn resolve_latent<D: Decoder>(model: &AutoDecoder<D>, args: &LatentArgs) -> CliResult<LatentCode> {
    if let Some(p) = &args.latent_file {
        let z: LatentCode = read_json(p, "latent")?;
        if z.dim() != model.latent_dim() {
            return Err(CliError::Data(format!(
                "latent in {} has dimension {}, model expects {}",
                p.display(),
                z.dim(),
                model.latent_dim()
            )));
        }
        return Ok(z);
    }
    Ok(model.latent(args.latent_index.unwrap_or(0))?)
}

fn datagen(cli: &Cli, a: &crate::DatagenArgs) -> CliResult<()> {
    let mut spec: SynthSpec = read_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(n) = a.examples {
        spec.examples = n;
    }
    if let Some(k) = a.k {
        spec.k = k;
    }
    spec.validate()?;
    with_run(cli, spec.seed, &[], |run| {
        let data = make_dataset(&spec)?;
        let dir = run.path("data");
        data.save(&dir)?;
        run.note_output("data");
        eprintln!(
            "wrote {} examples ({} vertices) to {}",
            data.examples.len(),
            data.template.vertex_count(),
            dir.display()
        );
        Ok(())
    })
}

fn train_cmd(cli: &Cli, a: &crate::TrainArgs) -> CliResult<()> {
    let mut cfg: TrainConfig = read_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.n_samples {
        cfg.n_samples = v;
    }
    if let Some(v) = a.lambda_reg {
        cfg.lambda_reg = v;
    }
    cfg.validate()?;
    let data = load_data(&a.data)?;
    if a.val_count >= data.examples.len() {
        return Err(CliError::Config(format!(
            "--val-count {} leaves no training examples out of {}",
            a.val_count,
            data.examples.len()
        )));
    }
    let split = data.examples.len() - a.val_count;
    let (train_set, val_set) = data.examples.split_at(split);

    with_run(cli, cfg.seed, &[&a.data], |run| {
        let outcome = train(&data.template, train_set, val_set, &cfg, &mut |r| {
            if r.epoch % 100 == 0 || r.val_error.is_some() {
                match r.val_error {
                    Some(v) => eprintln!("epoch {:>5}  loss {:.6e}  val {:.6e}", r.epoch, r.train_loss, v),
                    None => eprintln!("epoch {:>5}  loss {:.6e}", r.epoch, r.train_loss),
                }
            }
        })?;
        let mut bytes = Vec::new();
        write_checkpoint(&outcome.model, Some(json!({ "train_config": cfg })), &mut bytes)?;
        run.write_bytes("model.ckpt", &bytes)?;
        run.write_text("curves.csv", &outcome.log.to_csv())?;
        let examples: Vec<TrainExample> = train_set
            .iter()
            .enumerate()
            .map(|(i, m)| TrainExample::vertices_only(i, m, &data.template))
            .collect::<Result<_, _>>()?;
        let train_rmse = training_rmse(&outcome.model, &examples)?;
        run.write_json(
            "summary.json",
            &json!({
                "stop": outcome.stop,
                "best_epoch": outcome.best_epoch,
                "final_loss": outcome.log.final_loss(),
                "returned_loss": outcome.returned_loss(),
                "train_rmse": train_rmse,
                "bbox_diagonal": data.template.bbox_diagonal(),
            }),
        )?;
        if outcome.aborted() {
            return Err(CliError::Numerical(format!(
                "training stopped: {:?}; wrote the last finite state",
                outcome.stop
            )));
        }
        Ok(())
    })
}

fn fit(cli: &Cli, a: &crate::FitArgs) -> CliResult<()> {
    let loaded = load_model(cli)?;
    let mut cfg: FitConfig = match &cli.config {
        Some(p) => read_config(Some(p))?,
        None => loaded.train_config.as_ref().map(|t| t.fit_config(t.fit_steps)).unwrap_or_default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let target = TriMesh::load_obj(&a.mesh).map_err(|e| CliError::Data(format!("mesh {}: {e}", a.mesh.display())))?;
    if !target.same_connectivity(&loaded.model.template) {
        return Err(CliError::Data(format!("{} does not share the template's connectivity", a.mesh.display())));
    }
    with_run(cli, cfg.seed, &[&a.mesh], |run| {
        let model = &loaded.model;
        let r = fit_latent(model, &target, &cfg)?;
        let mesh = model.decode_mesh(&r.z, 0)?;
        let points = PointSet::vertices(&model.template)?;
        let truth = TrainExample::vertices_only(0, &target, &model.template)?;
        let err = rmse(&model.decode_points(&r.z, &points)?, &truth.targets);
        run.write_obj("fitted.obj", &mesh)?;
        run.write_json(
            "fit.json",
            &json!({ "z": r.z, "loss": r.loss, "steps": r.steps, "converged": r.converged, "rmse": err }),
        )?;
        if !r.converged {
            eprintln!("warning: step budget ran out before the loss plateaued");
        }
        Ok(())
    })
}

fn reconstruct(cli: &Cli, a: &crate::ReconstructArgs) -> CliResult<()> {
    let loaded = load_model(cli)?;
    let cfg: ReconstructConfig = read_config(cli.config.as_deref())?;
    let spec: LandmarkSpec = read_json(&a.landmarks, "landmarks")?;
    spec.validate(loaded.model.template.vertex_count())?;
    with_run(cli, cli.seed.unwrap_or(0), &[&a.landmarks], |run| {
        let r = reconstruct_from_landmarks(&loaded.model, &spec, &cfg)?;
        if !r.z.is_finite() {
            return Err(CliError::Numerical("reconstruction produced a non-finite latent".into()));
        }
        run.write_obj("reconstruction.obj", &loaded.model.decode_mesh(&r.z, a.subdiv)?)?;
        run.write_json("pose.json", &json!({ "pose": r.pose, "rmse": r.rmse, "loss": r.loss, "stages": r.stages, "hit_step_cap": r.hit_step_cap }))?;
        run.write_json("latent.json", &r.z)?;
        if r.hit_step_cap {
            eprintln!("warning: a shape stage hit its step cap before converging");
        }
        eprintln!("reprojection RMSE {:.4e}", r.rmse);
        Ok(())
    })
}

fn edit_handles(cli: &Cli, a: &crate::EditHandlesArgs) -> CliResult<()> {
    let loaded = load_model(cli)?;
    let cfg: EditConfig = read_config(cli.config.as_deref())?;
    let handles: Vec<HandleConstraint> = read_json(&a.handles, "handles")?;
    let z0 = resolve_latent(&loaded.model, &a.latent)?;
    with_run(cli, cli.seed.unwrap_or(0), &[&a.handles], |run| {
        let r = edit_point_handles(&loaded.model, &z0, &handles, &cfg)?;
        if !r.z.is_finite() || !r.loss.is_finite() {
            return Err(CliError::Numerical("edit produced a non-finite latent".into()));
        }
        run.write_obj("edited.obj", &loaded.model.decode_mesh(&r.z, a.subdiv)?)?;
        run.write_json("edit.json", &r)?;
        Ok(())
    })
}

fn load_directions(path: &Path) -> CliResult<Vec<SemanticDirection>> {
    read_json(path, "directions")
}

fn edit_semantic(cli: &Cli, a: &crate::EditSemanticArgs) -> CliResult<()> {
    let loaded = load_model(cli)?;
    let dirs = load_directions(&a.directions)?;
    let dir = dirs
        .into_iter()
        .find(|d| d.label == a.label)
        .ok_or_else(|| CliError::Config(format!("no direction labeled {:?} in {}", a.label, a.directions.display())))?;
    let z0 = resolve_latent(&loaded.model, &a.latent)?;
    with_run(cli, cli.seed.unwrap_or(0), &[&a.directions], |run| {
        let z = apply_semantic(&z0, &dir, a.alpha)?;
        run.write_obj("edited.obj", &loaded.model.decode_mesh(&z, a.subdiv)?)?;
        run.write_json("latent.json", &z)?;
        Ok(())
    })
}

fn directions(cli: &Cli, a: &crate::DirectionsArgs) -> CliResult<()> {
    let loaded = load_model(cli)?;
    let cfg: SvmConfig = read_config(cli.config.as_deref())?;
    let labels: BTreeMap<String, Vec<i8>> = read_json(&a.labels, "labels")?;
    let latents: Vec<LatentCode> =
        (0..loaded.model.latent_count()).map(|i| loaded.model.latent(i)).collect::<Result<_, _>>()?;
    with_run(cli, cli.seed.unwrap_or(0), &[&a.labels], |run| {
        let mut out = Vec::new();
        for (label, ys) in &labels {
            let d = train_direction(label, &latents, ys, &cfg)?;
            if d.low_confidence {
                eprintln!("warning: direction {label:?} is low-confidence (train accuracy {:.3})", d.train_accuracy);
            }
            out.push(d);
        }
        run.write_json("directions.json", &out)
    })
}

fn sample(cli: &Cli, a: &crate::SampleArgs) -> CliResult<()> {
    let loaded = load_model(cli)?;
    let seed = cli.seed.unwrap_or(0);
    with_run(cli, seed, &[], |run| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut zs = Vec::with_capacity(a.n);
        for i in 0..a.n {
            let z = loaded.model.sample_latent(&mut rng)?;
            run.write_obj(&format!("sample_{i:03}.obj"), &loaded.model.decode_mesh(&z, a.subdiv)?)?;
            zs.push(z);
        }
        run.write_json("latents.json", &zs)
    })
}

fn subdivide_decode(cli: &Cli, a: &crate::SubdivideArgs) -> CliResult<()> {
    let loaded = load_model(cli)?;
    let z = resolve_latent(&loaded.model, &a.latent)?;
    with_run(cli, cli.seed.unwrap_or(0), &[], |run| {
        let mesh = loaded.model.decode_mesh(&z, a.levels)?;
        eprintln!("level {}: {} vertices, {} faces", a.levels, mesh.vertex_count(), mesh.face_count());
        run.write_obj(&format!("decoded_level{}.obj", a.levels), &mesh)
    })
}

fn analyze_pca(cli: &Cli, a: &crate::PcaArgs) -> CliResult<()> {
    if !(a.threshold > 0.0 && a.threshold <= 1.0) {
        return Err(CliError::Config(format!("--threshold must lie in (0, 1], got {}", a.threshold)));
    }
    let data = load_data(&a.data)?;
    with_run(cli, cli.seed.unwrap_or(0), &[&a.data], |run| {
        let count = pca_complexity(&flatten_meshes(&data.examples), a.threshold)?;
        println!("{count}");
        run.write_json(
            "pca.json",
            &json!({ "components": count, "threshold": a.threshold, "examples": data.examples.len() }),
        )
    })
}

/// Settings for `bench-ablation`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub train: TrainConfig,
    /// Hidden width of the vertex-array baselines.
    pub array_hidden: usize,
    /// Trailing examples held out for the test error.
    pub test_count: usize,
    pub fit: FitConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self { fit: train.fit_config(train.fit_steps), train, array_hidden: 400, test_count: 8 }
    }
}

#[derive(Debug, Clone, Serialize)]
struct BenchRow {
    model: &'static str,
    final_loss: f64,
    test_rmse: f64,
    /// First epoch whose loss is at or below siren_concat's final loss.
    epoch_to_concat_final: Option<usize>,
}

fn bench_ablation(cli: &Cli, a: &crate::BenchArgs) -> CliResult<()> {
    let mut cfg: BenchConfig = read_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.fit.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(t) = a.test_count {
        cfg.test_count = t;
    }
    cfg.train.validate()?;
    let data = load_data(&a.data)?;
    if cfg.test_count >= data.examples.len() {
        return Err(CliError::Config(format!(
            "test_count {} leaves no training examples out of {}",
            cfg.test_count,
            data.examples.len()
        )));
    }
    let (train_set, test_set) = data.examples.split_at(data.examples.len() - cfg.test_count);

    with_run(cli, cfg.train.seed, &[&a.data], |run| {
        let mut table = String::from("model,epoch,train_loss,test_error\n");
        let mut results = Vec::new();
        for variant in DecoderVariant::ALL {
            eprintln!("training {}", variant.name());
            let outcome =
                train_variant(variant, cfg.array_hidden, &data.template, train_set, &[], &cfg.train, &mut |_| {})?;
            if outcome.aborted() {
                return Err(CliError::Numerical(format!("{} stopped: {:?}", variant.name(), outcome.stop)));
            }
            let test = test_rmse(&outcome.model, test_set, &cfg.fit)?;
            let last = outcome.log.records.len().saturating_sub(1);
            for (i, r) in outcome.log.records.iter().enumerate() {
                let te = if i == last { test.to_string() } else { String::new() };
                table.push_str(&format!("{},{},{},{}\n", variant.name(), r.epoch, r.train_loss, te));
            }
            results.push((variant, outcome.log, test));
        }
        let concat_final = results
            .iter()
            .find(|(v, _, _)| *v == DecoderVariant::SirenConcat)
            .and_then(|(_, log, _)| log.final_loss())
            .unwrap_or(f64::NAN);
        let rows: Vec<BenchRow> = results
            .iter()
            .map(|(v, log, test)| BenchRow {
                model: v.name(),
                final_loss: log.final_loss().unwrap_or(f64::NAN),
                test_rmse: *test,
                epoch_to_concat_final: log.records.iter().find(|r| r.train_loss <= concat_final).map(|r| r.epoch),
            })
            .collect();
        for r in &rows {
            eprintln!(
                "{:<24} final loss {:.4e}  test rmse {:.4e}  reaches concat final at {:?}",
                r.model, r.final_loss, r.test_rmse, r.epoch_to_concat_final
            );
        }
        run.write_text("ablation.csv", &table)?;
        run.write_json("summary.json", &rows)
    })
}

fn test_rmse<D: Decoder>(model: &AutoDecoder<D>, tests: &[TriMesh], fit: &FitConfig) -> CliResult<f64> {
    let points = PointSet::vertices(&model.template)?;
    let mut sq = 0.0;
    let mut n = 0usize;
    for mesh in tests {
        let r = fit_latent(model, mesh, fit)?;
        let out = model.decode_points(&r.z, &points)?;
        let truth = TrainExample::vertices_only(0, mesh, &model.template)?;
        sq += rmse(&out, &truth.targets).powi(2) * out.nrows() as f64;
        n += out.nrows();
    }
    Ok((sq / n.max(1) as f64).sqrt())
}

fn serve(cli: &Cli, a: &crate::ServeArgs) -> CliResult<()> {
    let loaded = load_model(cli)?;
    let cfg: ServiceConfig = read_config(cli.config.as_deref())?;
    let dirs = match &a.directions {
        Some(p) => load_directions(p)?,
        None => vec![],
    };
    let state = AppState::new(loaded.model, dirs, cfg).map_err(CliError::Config)?;
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Config(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = deform_service::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        deform_service::serve(listener, Arc::new(state)).await
    })?;
    Ok(())
}
