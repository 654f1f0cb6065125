use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use kspace_core::bench::{fit_residuals, measure, standard_variant, CostProfile};
use kspace_core::data::{generate_phantom, generate_phantoms, PhantomSample};
use kspace_core::eval::{evaluate, reconstruct, Reconstruction};
use kspace_core::fourier::ifft2_centered;
use kspace_core::io::{
    load_grid, load_mask, load_sample, read_kind, read_loss_csv, save_grid, save_mask, save_sample,
    write_eval_csv, write_gray_png, write_loss_csv, write_rows, Checkpoint, GridKind, LossRow, RunConfig,
};
use kspace_core::metrics::magnitude_f64;
use kspace_core::model::{encoder_attention_maps, forward, hr_attention_maps, AttentionMap, ModelConfig};
use kspace_core::sampling::{apply_mask, Mask};
use kspace_core::train::Trainer;
use kspace_core::{Error, Real};
use serde::{Deserialize, Serialize};

use crate::{Cli, Command, Precision, Split, Switch};

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

pub fn run(cli: &Cli) -> Outcome {
    if cli.resume.is_some() && !matches!(cli.command, Command::Train { .. }) {
        return Err(Failure::Usage("--resume only applies to `train`".into()));
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.data_consistency {
        cfg.model.data_consistency = s == Switch::On;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    match &cli.command {
        Command::GenData { count, split } => gen_data(cli, &cfg, &out, *count, *split),
        Command::GenMask => gen_mask(cli, &cfg, &out),
        Command::Train { data } => match cli.precision {
            Precision::F32 => train::<f32>(cli, cfg, &out, data.as_deref()),
            Precision::F64 => train::<f64>(cli, cfg, &out, data.as_deref()),
        },
        Command::Eval {
            checkpoint,
            data,
            mask,
            no_images,
        } => match cli.precision {
            Precision::F32 => eval::<f32>(cli, &cfg, &out, checkpoint, data.as_deref(), mask.as_deref(), *no_images),
            Precision::F64 => eval::<f64>(cli, &cfg, &out, checkpoint, data.as_deref(), mask.as_deref(), *no_images),
        },
        Command::Reconstruct { checkpoint, input, mask } => match cli.precision {
            Precision::F32 => reconstruct_one::<f32>(cli, &out, checkpoint, input, mask.as_deref()),
            Precision::F64 => reconstruct_one::<f64>(cli, &out, checkpoint, input, mask.as_deref()),
        },
        Command::DumpAttn {
            checkpoint,
            input,
            points,
            layer,
            mask,
        } => match cli.precision {
            Precision::F32 => dump_attn::<f32>(cli, &out, checkpoint, input, points, *layer, mask.as_deref()),
            Precision::F64 => dump_attn::<f64>(cli, &out, checkpoint, input, points, *layer, mask.as_deref()),
        },
        Command::Bench { runs, quick } => bench(&cfg, &out, *runs, *quick, cli.seed.unwrap_or(0)),
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
    files: Vec<String>,
}

fn gen_data(cli: &Cli, cfg: &RunConfig, out: &Path, count: Option<usize>, split: Split) -> Outcome {
    let (default_count, default_seed) = match split {
        Split::Train => (cfg.data.train_count, cfg.data.train_seed),
        Split::Eval => (cfg.data.eval_count, cfg.data.eval_seed),
    };
    let count = count.unwrap_or(default_count);
    if count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    let seed = cli.seed.unwrap_or(default_seed);
    let [h, w] = cfg.model.hr_grid;
    ensure_dir(out)?;
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("sample_{i:05}.grid");
        save_sample(&out.join(&name), &generate_phantom(h, w, seed, i)?)?;
        files.push(name);
    }
    let manifest = Manifest {
        seed,
        count,
        height: h,
        width: w,
        files,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(anyhow::Error::from)?;
    kspace_core::io::atomic_write(&out.join("manifest.json"), &json)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> anyhow::Result<Vec<PhantomSample>> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("bad manifest {}", path.display()))?;
    if manifest.files.len() != manifest.count {
        bail!("manifest lists {} files but count = {}", manifest.files.len(), manifest.count);
    }
    manifest
        .files
        .iter()
        .map(|f| load_sample(&dir.join(f)).map_err(anyhow::Error::from))
        .collect()
}

fn gen_mask(cli: &Cli, cfg: &RunConfig, out: &Path) -> Outcome {
    let mut spec = cfg.train.mask.clone();
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let [h, w] = cfg.model.hr_grid;
    let mask = spec.build(h, w)?;
    ensure_dir(out)?;
    save_mask(&out.join("mask.grid"), &mask)?;
    write_gray_png(&out.join("mask.png"), w, h, &mask.to_real::<f64>(), Some(1.0))?;
    println!("acceleration: {}", mask.acceleration());
    Ok(())
}

fn train<T: Real>(cli: &Cli, mut cfg: RunConfig, out: &Path, data: Option<&Path>) -> Outcome {
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let dataset = match data {
        Some(dir) => load_dataset(dir)?,
        None => {
            let [h, w] = cfg.model.hr_grid;
            generate_phantoms(cfg.data.train_count, h, w, cfg.data.train_seed)?
        }
    };
    ensure_dir(out)?;
    kspace_core::io::atomic_write(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let loss_path = out.join("loss.csv");
    let (mut trainer, mut rows) = match &cli.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model != cfg.model || ck.train != cfg.train {
                return Err(Failure::Runtime(anyhow!(
                    "checkpoint {} was written for a different model or training configuration",
                    path.display()
                )));
            }
            let mut rows = if loss_path.exists() { read_loss_csv(&loss_path)? } else { Vec::new() };
            rows.retain(|r| r.step < ck.step);
            let trainer = Trainer::resume(cfg.model.clone(), cfg.train.clone(), &dataset, ck.to_state::<T>())?;
            (trainer, rows)
        }
        None => (Trainer::<T>::new(cfg.model.clone(), cfg.train.clone(), &dataset)?, Vec::new()),
    };
    let total = trainer.total_steps();
    let every = cfg.output.checkpoint_every;
    let save = |trainer: &Trainer<T>, path: PathBuf| -> kspace_core::Result<()> {
        Checkpoint::from_state(&cfg.model, &cfg.train, trainer.state()).save(&path)
    };
    while !trainer.is_done() {
        match trainer.step() {
            Ok(report) => {
                rows.push(LossRow::from(&report));
                let done = report.step + 1;
                if every > 0 && done % every == 0 && done < total {
                    save(&trainer, out.join(format!("checkpoint_{done:06}.ckpt")))?;
                    write_loss_csv(&loss_path, &rows)?;
                }
                if done % 50 == 0 || done == total {
                    println!("step {done}/{total} loss {:.6} lr {:.3e}", report.loss, report.lr);
                }
            }
            Err(Error::NonFiniteLoss { step, value }) => {
                write_loss_csv(&loss_path, &rows)?;
                let last = rows.last().map(|r| r.loss);
                let dump = serde_json::json!({
                    "step": step,
                    "loss": value.to_string(),
                    "epoch": step / trainer.steps_per_epoch(),
                    "last_finite_loss": last,
                    "hr_grad_stop_epochs": cfg.train.hr_grad_stop_epochs(),
                    "lr": cfg.train.lr,
                });
                let text = serde_json::to_vec_pretty(&dump).map_err(anyhow::Error::from)?;
                kspace_core::io::atomic_write(&out.join("divergence.json"), &text)?;
                return Err(Failure::Runtime(anyhow!(
                    "training diverged at step {step} (loss {value}); details in {}",
                    out.join("divergence.json").display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
    }
    save(&trainer, out.join("checkpoint.ckpt"))?;
    write_loss_csv(&loss_path, &rows)?;
    println!("wrote {}", out.join("checkpoint.ckpt").display());
    Ok(())
}

fn load_checkpoint(cli: &Cli, path: &Path) -> anyhow::Result<Checkpoint> {
    let mut ck = Checkpoint::load(path)?;
    if let Some(s) = cli.data_consistency {
        ck.model.data_consistency = s == Switch::On;
    }
    Ok(ck)
}

fn mask_for(model: &ModelConfig, ck: &Checkpoint, mask: Option<&Path>) -> anyhow::Result<Mask> {
    let [h, w] = model.hr_grid;
    let m = match mask {
        Some(p) => load_mask(p)?,
        None => ck.train.mask.build(h, w)?,
    };
    if m.dims() != (h, w) {
        bail!("mask is {:?} but the model expects {h}x{w}", m.dims());
    }
    Ok(m)
}

fn magnitude_png(path: &Path, g: &kspace_core::fourier::ComplexGrid<impl Real>, max: f64) -> anyhow::Result<()> {
    let (h, w) = g.dims();
    write_gray_png(path, w, h, &magnitude_f64(g), Some(max))?;
    Ok(())
}

fn write_reconstruction_pngs<T: Real>(out: &Path, stem: &str, r: &Reconstruction<T>) -> anyhow::Result<()> {
    let gt = magnitude_f64(&r.ground_truth);
    let top = gt.iter().copied().fold(0.0, f64::max);
    let recon = &r.outputs.final_image;
    magnitude_png(&out.join(format!("{stem}_gt.png")), &r.ground_truth, top)?;
    magnitude_png(&out.join(format!("{stem}_zero_filled.png")), &r.zero_filled, top)?;
    magnitude_png(&out.join(format!("{stem}_recon.png")), recon, top)?;
    let err: Vec<f64> = magnitude_f64(recon).iter().zip(&gt).map(|(a, b)| (a - b).abs()).collect();
    let (h, w) = recon.dims();
    write_gray_png(&out.join(format!("{stem}_error.png")), w, h, &err, Some(top))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval<T: Real>(
    cli: &Cli,
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    data: Option<&Path>,
    mask: Option<&Path>,
    no_images: bool,
) -> Outcome {
    let ck = load_checkpoint(cli, checkpoint)?;
    if cli.config.is_some() && cfg.model != ck.model {
        return Err(Failure::Runtime(anyhow!(
            "checkpoint {} does not match the model in the given config",
            checkpoint.display()
        )));
    }
    let model = ck.model.clone();
    let [h, w] = model.hr_grid;
    let dataset = match data {
        Some(dir) => load_dataset(dir)?,
        None => generate_phantoms(cfg.data.eval_count, h, w, cli.seed.unwrap_or(cfg.data.eval_seed))?,
    };
    let mask = mask_for(&model, &ck, mask)?;
    let params = ck.params.cast::<T>();
    let report = evaluate(&params, &model, &dataset, &mask)?;
    ensure_dir(out)?;
    write_eval_csv(&out.join("eval.csv"), &report)?;
    if !no_images {
        for s in &dataset {
            let r = reconstruct(&params, &model, s, &mask, false)?;
            write_reconstruction_pngs(out, &format!("sample_{:05}", s.index), &r)?;
        }
    }
    println!(
        "psnr {:.3} dB (zero-filled {:.3} dB), ssim {:.4} (zero-filled {:.4}), per-layer psnr {:?}",
        report.psnr.mean, report.zero_filled_psnr.mean, report.ssim.mean, report.zero_filled_ssim.mean, report.layer_psnr
    );
    Ok(())
}

/// A sample file, or a complex grid holding a full spectrogram.
fn load_input(path: &Path) -> anyhow::Result<PhantomSample> {
    match read_kind(path)? {
        GridKind::Sample => Ok(load_sample(path)?),
        GridKind::Complex => {
            let spectrum = load_grid(path)?;
            let image = ifft2_centered(&spectrum)?;
            Ok(PhantomSample {
                seed: 0,
                index: 0,
                ellipses: Vec::new(),
                phase: kspace_core::data::PhaseField {
                    offset: 0.0,
                    coefficients: [0.0; 3],
                },
                image,
                spectrum,
            })
        }
        GridKind::Mask => bail!("{} is a mask, not an input", path.display()),
    }
}

fn reconstruct_one<T: Real>(cli: &Cli, out: &Path, checkpoint: &Path, input: &Path, mask: Option<&Path>) -> Outcome {
    let ck = load_checkpoint(cli, checkpoint)?;
    let sample = load_input(input)?;
    let mask = mask_for(&ck.model, &ck, mask)?;
    let r = reconstruct(&ck.params.cast::<T>(), &ck.model, &sample, &mask, false)?;
    ensure_dir(out)?;
    let top = magnitude_f64(&r.outputs.final_image).iter().copied().fold(0.0, f64::max);
    magnitude_png(&out.join("reconstruction.png"), &r.outputs.final_image, top)?;
    save_grid(&out.join("reconstruction.grid"), &r.outputs.final_image.cast::<f64>())?;
    println!("wrote {}", out.join("reconstruction.png").display());
    Ok(())
}

fn map_png(path: &Path, m: &AttentionMap) -> anyhow::Result<()> {
    write_gray_png(path, m.width, m.height, &m.values, None)?;
    Ok(())
}

fn dump_attn<T: Real>(
    cli: &Cli,
    out: &Path,
    checkpoint: &Path,
    input: &Path,
    points: &[usize],
    layer: Option<usize>,
    mask: Option<&Path>,
) -> Outcome {
    let ck = load_checkpoint(cli, checkpoint)?;
    let model = &ck.model;
    let sample = load_input(input)?;
    let mask = mask_for(model, &ck, mask)?;
    let (pts, _) = apply_mask(&sample.spectrum.cast::<T>(), &mask)?;
    if let Some(&bad) = points.iter().find(|&&p| p >= pts.len()) {
        return Err(Failure::Runtime(anyhow!(
            "point index {bad} out of range: the mask samples {} points",
            pts.len()
        )));
    }
    let enc_layer = layer.unwrap_or(model.n_enc.saturating_sub(1));
    let hr_layer = layer.unwrap_or(model.n_hr - 1);
    let outputs = forward(&pts, &ck.params.cast::<T>(), model, true)?;
    ensure_dir(out)?;
    let w = model.hr_grid[1];
    let mut written = 0;
    for &p in points {
        for m in encoder_attention_maps(&outputs.attention, &pts, enc_layer, p)? {
            map_png(&out.join(format!("enc_layer{enc_layer}_head{}_point{p}.png", m.head)), &m)?;
            written += 1;
        }
        let (r, c) = pts.bins[p];
        for m in hr_attention_maps(&outputs.attention, model, hr_layer, r * w + c)? {
            map_png(&out.join(format!("hr_layer{hr_layer}_head{}_point{p}.png", m.head)), &m)?;
            written += 1;
        }
    }
    println!("wrote {written} attention maps to {}", out.display());
    Ok(())
}

fn bench(cfg: &RunConfig, out: &Path, runs: usize, quick: bool, seed: u64) -> Outcome {
    if runs == 0 {
        return Err(Failure::Usage("--runs must be at least 1".into()));
    }
    let base = ModelConfig {
        data_consistency: false,
        use_lr_decoder: true,
        hr_self_attention: false,
        ..cfg.model.clone()
    };
    let grids: &[[usize; 2]] = if quick {
        &[[16, 16], [16, 32], [32, 32], [32, 64]]
    } else {
        &[[32, 32], [32, 64], [64, 64], [64, 128]]
    };
    let mut rows: Vec<CostProfile> = Vec::new();
    let mut push = |mut p: CostProfile, sweep: &str| {
        p.sweep = sweep.to_string();
        rows.push(p);
    };

    // Scaling in m with l and n held fixed.
    let fixed_l = if quick { [4, 4] } else { [16, 16] };
    let fixed_n = if quick { 50 } else { 400 };
    for &g in grids {
        let c = ModelConfig { hr_grid: g, lr_grid: fixed_l, ..base.clone() };
        push(measure(&c, fixed_n, runs, seed)?, "m_scaling");
    }
    // Hierarchical against single-resolution at l = m/16, n = m/5.
    for &g in &grids[..grids.len() - 1] {
        if g[0] != g[1] {
            continue;
        }
        let c = ModelConfig {
            hr_grid: g,
            lr_grid: [g[0] / 4, g[1] / 4],
            ..base.clone()
        };
        let n = c.m() / 5;
        push(measure(&c, n, runs, seed)?, "hier_vs_standard");
        push(measure(&standard_variant(&c), n, runs, seed)?, "hier_vs_standard");
    }
    // Depth.
    for n_hr in [2, 4, 6] {
        let c = ModelConfig { n_hr, ..base.clone() };
        push(measure(&c, c.m() / 5, runs, seed)?, "hr_depth");
    }

    let scaling: Vec<&CostProfile> = rows.iter().filter(|r| r.sweep == "m_scaling").collect();
    let xs: Vec<f64> = scaling.iter().map(|r| r.m as f64).collect();
    let ys: Vec<f64> = scaling.iter().map(|r| r.median_seconds).collect();
    let (lin, quad) = fit_residuals(&xs, &ys)?;
    ensure_dir(out)?;
    write_rows(&out.join("bench.csv"), &rows)?;
    println!(
        "{} configurations; m-scaling residuals: linear {lin:.3e}, quadratic {quad:.3e}",
        rows.len()
    );
    Ok(())
}
