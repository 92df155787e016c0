//! Command-line front end. Every subcommand drives the same engine as the
//! HTTP service.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use voxdetail::augment::{augment, AugmentParams};
use voxdetail::detailizer::DetailizerModel;
use voxdetail::formats::{load_grid, save_grid};
use voxdetail::guidance::PromptSpec;
use voxdetail::meshio::{export_obj, export_ply, extract_mesh, import_obj, import_ply, DEFAULT_ISO};
use voxdetail::metrics::{
    eval_protocol, write_batch_csv, EvalConfig, FeatureSet, MetricReport, PaletteEmbedder, RandomProjection,
};
use voxdetail::par;
use voxdetail::render::{orbit_camera, render_fields, RenderOptions};
use voxdetail::train::{build_oracle, load_dataset, resume, run_training, save_progress, TrainConfig, TrainEvent};
use voxdetail::voxelize::voxelize_mesh;

use crate::api::{router, AppState};
use crate::store::CheckpointStore;

pub const ADDR_ENV: &str = "VOXDETAIL_ADDR";
pub const CHECKPOINTS_ENV: &str = "VOXDETAIL_CHECKPOINTS";

#[derive(Debug, Parser)]
#[command(name = "voxdetail", version, about = "Coarse voxel grids to detailed, textured shapes")]
pub struct Cli {
    /// Worker threads for the numeric kernels (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Voxelize an OBJ or PLY mesh into a solid ARTV grid.
    Voxelize {
        mesh: PathBuf,
        #[arg(short, long, default_value_t = 16)]
        k: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write randomly scaled, rotated and merged variants of input grids.
    Augment {
        #[arg(required = true)]
        grids: Vec<PathBuf>,
        #[arg(short, long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra free rotation about z, in degrees.
        #[arg(long, default_value_t = 0.0)]
        free_angle: f32,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a detailizer from a flat key = value config.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Override config keys, e.g. `--set lr=1e-3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint written during an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Final model checkpoint.
        #[arg(short, long)]
        out: PathBuf,
        /// Loss history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Print a loss line every this many iterations.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Detailize one grid and export the mesh; prints elapsed milliseconds.
    Detailize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// `.ply` or `.obj`; omitted to only time the pass.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_ISO)]
        iso: f32,
    },
    /// Render a detailized grid to PNG.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        view: ViewArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Strict/Loose IoU, cosine score and Fréchet distance for grids.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        grids: Vec<PathBuf>,
        /// Training config; its prompt and render settings are used.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Reference image features, one row per line.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// JSON report per grid.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Batch CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = ADDR_ENV, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, env = CHECKPOINTS_ENV, default_value = "checkpoints")]
        checkpoints: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    #[arg(long, default_value_t = 30.0)]
    pub azimuth: f32,
    #[arg(long, default_value_t = 20.0)]
    pub elevation: f32,
    #[arg(long, default_value_t = 45.0)]
    pub fov: f32,
    #[arg(long, default_value_t = 2.0)]
    pub radius: f32,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(t) => par::with_threads(t, || dispatch(cli.command)),
        None => dispatch(cli.command),
    }
}

fn load_mesh(path: &Path) -> Result<voxdetail::TriangleMesh> {
    Ok(match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => import_ply(path)?,
        Some("obj") => import_obj(path)?,
        _ => bail!("{}: expected a .ply or .obj file", path.display()),
    })
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Voxelize { mesh, k, out } => {
            let mut m = load_mesh(&mesh)?;
            m.normalize();
            let v = voxelize_mesh(&m, k)?;
            if let Some(w) = &v.warning {
                eprintln!("warning: {w:?}");
            }
            save_grid(&out, &v.grid)?;
            println!("{} occupied cells of {}", v.grid.count(), v.grid.len());
        }
        Command::Augment {
            grids,
            count,
            seed,
            free_angle,
            out_dir,
        } => {
            let sources = grids.iter().map(load_grid).collect::<Result<Vec<_>, _>>()?;
            std::fs::create_dir_all(&out_dir)?;
            for i in 0..count {
                let params = AugmentParams {
                    seed: seed.wrapping_add(i as u64),
                    free_angle_max_deg: free_angle,
                    merge: (1, 2.min(sources.len())),
                    ..AugmentParams::default()
                };
                let g = augment(&sources, &params)?;
                save_grid(out_dir.join(format!("aug-{i:04}.artv")), &g)?;
            }
            println!("wrote {count} grids to {}", out_dir.display());
        }
        Command::Train {
            config,
            overrides,
            resume: from,
            out,
            history,
            log_every,
        } => {
            let mut text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            for o in &overrides {
                if !o.contains('=') {
                    bail!("--set expects KEY=VALUE, got {o:?}");
                }
                text.push('\n');
                text.push_str(o);
            }
            let cfg = TrainConfig::parse(&text)?;
            let dataset = load_dataset(&cfg)?;
            let oracle = build_oracle(&cfg)?;
            let state = from.map(|p| resume(&p, &cfg)).transpose()?;
            let every = log_every.max(1);
            let st = run_training(&cfg, &dataset, oracle.as_ref(), state, None, &mut |e| match e {
                TrainEvent::Iteration(r) if r.iter % every == 0 => println!(
                    "iter {:>6} stage {} lambda {:>9.3} sds {:.6} reg {:.6} total {:.6} ({:.0} ms)",
                    r.iter, r.stage, r.lambda, r.l_sds, r.l_reg, r.l_total, r.ms
                ),
                TrainEvent::Checkpoint { path, .. } => println!("checkpoint {}", path.display()),
                _ => {}
            })?;
            let mut ck = st.model.to_checkpoint();
            ck.set_meta("prompt", &cfg.prompt);
            ck.save(&out)?;
            if let Some(h) = history {
                st.history.write_csv(std::fs::File::create(h)?)?;
            }
            if let Some(dir) = &cfg.checkpoint_dir {
                save_progress(&st, &cfg, dir)?;
            }
            println!("saved {}", out.display());
        }
        Command::Detailize {
            checkpoint,
            grid,
            out,
            iso,
        } => {
            let model = DetailizerModel::load(&checkpoint)?;
            let g = load_grid(&grid)?;
            let start = Instant::now();
            let shape = model.forward(&g)?;
            let mesh = extract_mesh(&shape, iso)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if let Some(path) = out {
                match path.extension().and_then(|e| e.to_str()) {
                    Some("obj") => export_obj(&mesh, &path)?,
                    _ => export_ply(&mesh, &path)?,
                }
            }
            println!("vertices {} triangles {}", mesh.vertices.len(), mesh.triangles.len());
            println!("elapsed_ms {ms:.1}");
        }
        Command::Render {
            checkpoint,
            grid,
            view,
            out,
        } => {
            let model = DetailizerModel::load(&checkpoint)?;
            let shape = model.forward(&load_grid(&grid)?)?;
            let cam = orbit_camera(view.azimuth, view.elevation, view.radius, view.fov, view.size, view.size)?;
            let img = render_fields(&shape.density, &shape.albedo, &cam, &RenderOptions::for_resolution(model.config().fine))?;
            std::fs::write(&out, img.to_png()?)?;
        }
        Command::Eval {
            checkpoint,
            grids,
            config,
            reference,
            json,
            csv,
        } => {
            let cfg = config.map(TrainConfig::load).transpose()?.unwrap_or_default();
            let model = DetailizerModel::load(&checkpoint)?;
            let prompt = PromptSpec::new(cfg.prompt.clone())?;
            let reference = reference
                .map(|p| -> Result<FeatureSet> { Ok(FeatureSet::parse(&std::fs::read_to_string(p)?)?) })
                .transpose()?;
            let eval_cfg = EvalConfig {
                render: cfg.render.clone(),
                ..EvalConfig::default()
            };
            let embedder = PaletteEmbedder::new(eval_cfg.seed);
            let extractor = RandomProjection::new(eval_cfg.resolution, 16, eval_cfg.seed);
            let mut rows: Vec<(String, String, MetricReport)> = Vec::new();
            for path in &grids {
                let g = load_grid(path)?;
                let shape = model.forward(&g)?;
                let report = eval_protocol(&shape, &g, &prompt, reference.as_ref(), &embedder, &extractor, &eval_cfg)?;
                println!(
                    "{}: strict {:.4} loose {:.4} clip {:.2} fid {:.4}",
                    path.display(),
                    report.strict_iou,
                    report.loose_iou,
                    report.clip_score,
                    report.render_fid
                );
                rows.push((prompt.text().to_string(), path.display().to_string(), report));
            }
            if let Some(p) = json {
                let all: Vec<serde_json::Value> = rows
                    .iter()
                    .map(|(_, g, r)| serde_json::json!({ "grid": g, "report": r }))
                    .collect();
                std::fs::write(p, serde_json::to_string_pretty(&all)?)?;
            }
            if let Some(p) = csv {
                write_batch_csv(std::fs::File::create(p)?, &rows)?;
            }
        }
        Command::Serve { addr, checkpoints } => serve(&addr, checkpoints)?,
    }
    Ok(())
}

fn serve(addr: &str, checkpoints: PathBuf) -> Result<()> {
    let state = AppState::new(CheckpointStore::open(checkpoints)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
