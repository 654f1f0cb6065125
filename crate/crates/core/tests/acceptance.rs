//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs sequentially so the timed sweeps and the training runs get the whole
//! machine. Set `KSPACE_ACCEPTANCE=1,3,4` to run a subset.

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use kspace_core::autodiff::{finite_diff_check, select_probes, Graph};
use kspace_core::bench::{analytic_cost_hier, analytic_cost_standard, fit_residuals, measure, standard_variant};
use kspace_core::data::{generate_phantom, generate_phantoms, PhantomSample};
use kspace_core::eval::{evaluate, EvalReport};
use kspace_core::fourier::{dft2_naive, fft2_centered, ifft2_centered, ComplexGrid};
use kspace_core::io::{write_loss_csv, Checkpoint, LossRow};
use kspace_core::model::{forward, init_params, param_group, ModelConfig, ParamGroup};
use kspace_core::sampling::{apply_mask, MaskSpec};
use kspace_core::train::{loss_and_grads, LossWeights, PreparedSample, TrainConfig, Trainer};
use kspace_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, v: &Verdict, elapsed: Duration) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(
        err,
        "acceptance {id} {name:<28} {} ({:.1} s) {}",
        if v.pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        v.detail
    );
}

fn rng_grid(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ComplexGrid<f64> {
    let re = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let im = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    ComplexGrid::new(h, w, re, im).unwrap()
}

fn oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let sizes = [2, 4, 8, 16];
    let mut fft_err = 0.0f64;
    for &h in &sizes {
        for &w in &sizes {
            let g = rng_grid(h, w, &mut rng);
            let fast = fft2_centered(&g).unwrap();
            fft_err = fft_err.max(fast.max_abs_diff(&dft2_naive(&g).unwrap()));
            fft_err = fft_err.max(ifft2_centered(&fast).unwrap().max_abs_diff(&g));
        }
    }

    let (a_rows, inner, b_cols) = (17, 23, 11);
    let a: Vec<f64> = (0..a_rows * inner).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..inner * b_cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::<f64>::new();
    let va = g.constant(Tensor::new([a_rows, inner], a.clone()).unwrap());
    let vb = g.constant(Tensor::new([inner, b_cols], b.clone()).unwrap());
    let vc = g.matmul(va, vb).unwrap();
    let mut mm_err = 0.0f64;
    for i in 0..a_rows {
        for j in 0..b_cols {
            let mut s = 0.0;
            for k in 0..inner {
                s += a[i * inner + k] * b[k * b_cols + j];
            }
            mm_err = mm_err.max((g.value(vc).data()[i * b_cols + j] - s).abs());
        }
    }

    let (ci, co, h, w) = (3, 4, 9, 7);
    let x: Vec<f64> = (0..ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..co * ci * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
    let vx = g.constant(Tensor::new([ci, h, w], x.clone()).unwrap());
    let vk = g.constant(Tensor::new([co, ci, 3, 3], k.clone()).unwrap());
    let vbias = g.constant(Tensor::new([co], bias.clone()).unwrap());
    let vy = g.conv2d(vx, vk, vbias).unwrap();
    let mut conv_err = 0.0f64;
    for o in 0..co {
        for r in 0..h {
            for c in 0..w {
                let mut s = bias[o];
                for i in 0..ci {
                    for dr in 0..3 {
                        for dc in 0..3 {
                            let (rr, cc) = (r as isize + dr as isize - 1, c as isize + dc as isize - 1);
                            if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                continue;
                            }
                            s += k[((o * ci + i) * 3 + dr) * 3 + dc] * x[(i * h + rr as usize) * w + cc as usize];
                        }
                    }
                }
                conv_err = conv_err.max((g.value(vy).data()[(o * h + r) * w + c] - s).abs());
            }
        }
    }
    let worst = fft_err.max(mm_err).max(conv_err);
    verdict(
        worst < 1e-10,
        format!("fft {fft_err:.1e}, matmul {mm_err:.1e}, conv2d {conv_err:.1e} (tol 1e-10)"),
    )
}

fn gradient_check() -> Verdict {
    let cfg = ModelConfig::tiny(16);
    let params = init_params::<f64>(&cfg, 7).unwrap();
    let sample = generate_phantom(16, 16, 3, 0).unwrap();
    let mask = MaskSpec::uniform(2.5).build(16, 16).unwrap();
    let prepared = PreparedSample::<f64>::new(&sample, &mask, &cfg).unwrap();
    let f = |ps: &kspace_core::params::ParamStore<f64>| {
        loss_and_grads(ps, &cfg, &prepared, LossWeights::default(), false, true)
    };
    let (_, grads) = f(&params).unwrap();
    let mut worst = 0.0f64;
    let mut probes_total = 0;
    let mut short = Vec::new();
    for group in ParamGroup::ALL {
        let probes = select_probes(&grads, 4, |n| param_group(n) == group);
        if probes.len() < 4 {
            short.push(format!("{group:?}"));
        }
        probes_total += probes.len();
        let r = finite_diff_check(&params, &probes, 1e-7, f).unwrap();
        worst = worst.max(r.max_relative_error);
    }
    verdict(
        worst < 1e-6 && short.is_empty(),
        format!(
            "{probes_total} probes over {} groups, d={}, 16x16, step 1e-7, max rel err {worst:.2e} (tol 1e-6){}",
            ParamGroup::ALL.len(),
            cfg.d,
            if short.is_empty() { String::new() } else { format!(", too few probes in {short:?}") }
        ),
    )
}

fn structural() -> Verdict {
    let cfg = ModelConfig::tiny(16);
    let params = init_params::<f64>(&cfg, 21).unwrap();
    let sample = generate_phantom(16, 16, 4, 0).unwrap();
    let mask = MaskSpec::gaussian(3.0, 5).build(16, 16).unwrap();
    let (pts, _) = apply_mask(&sample.spectrum, &mask).unwrap();

    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(6));
    let a = forward(&pts, &params, &cfg, true).unwrap();
    let b = forward(&pts.permuted(&order), &params, &cfg, false).unwrap();
    let perm = a
        .hr_images
        .iter()
        .zip(&b.hr_images)
        .chain(a.lr_spectrograms.iter().zip(&b.lr_spectrograms))
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max);

    let mut row_err = 0.0f64;
    let mut hr_shapes_ok = true;
    let mut hr_entries = 0;
    for e in &a.attention.entries {
        let probs = e.probs.as_ref().expect("recorded");
        for row in probs.chunks(e.keys) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        if e.label.starts_with("hr.") {
            hr_entries += 1;
            hr_shapes_ok &= (e.queries, e.keys) == (cfg.m(), cfg.l());
        }
    }

    let mut zeroed = params.clone();
    let names: Vec<String> = zeroed.names().filter(|n| n.contains(".refine.")).cloned().collect();
    for n in &names {
        zeroed.get_mut(n).unwrap().data_mut().fill(0.0);
    }
    let z = forward(&pts, &zeroed, &cfg, false).unwrap();
    let identity = (0..cfg.n_hr)
        .map(|i| {
            let plain = ifft2_centered(&z.hr_spectrograms[i]).unwrap();
            plain
                .max_abs_diff(&z.hr_images[i])
                .max(z.refined_spectrograms[i].max_abs_diff(&z.hr_spectrograms[i]))
        })
        .fold(0.0, f64::max);

    verdict(
        perm < 1e-9 && row_err < 1e-6 && hr_shapes_ok && hr_entries > 0 && identity < 1e-9,
        format!(
            "permutation {perm:.1e} (tol 1e-9), row sums {row_err:.1e} (tol 1e-6), \
             {hr_entries} HR records all {}x{}: {hr_shapes_ok}, zero refinement {identity:.1e} (tol 1e-9)",
            cfg.m(),
            cfg.l()
        ),
    )
}

fn complexity() -> Verdict {
    let base = ModelConfig::default();
    let mut notes = Vec::new();
    let mut counts_ok = true;
    let mut inequality_ok = true;
    for side in [32usize, 64] {
        let cfg = ModelConfig {
            hr_grid: [side, side],
            lr_grid: [side / 4, side / 4],
            ..base.clone()
        };
        let (m, l) = (cfg.m(), cfg.l());
        let n = m / 5;
        let hier = measure(&cfg, n, 1, 1).unwrap();
        let std = measure(&standard_variant(&cfg), n, 1, 1).unwrap();
        let want_h = analytic_cost_hier(m, n, l, cfg.d, cfg.n_lr, cfg.n_hr).unwrap().total();
        let want_s = analytic_cost_standard(m, n, cfg.d, cfg.n_hr).unwrap().total();
        counts_ok &= hier.measured_decoder == want_h
            && std.measured_decoder == want_s
            && hier.measured_encoder == hier.analytic_encoder
            && std.measured_encoder == std.analytic_encoder;
        inequality_ok &= hier.measured_decoder < std.measured_decoder;
        notes.push(format!("m={m}: hier {} < std {}", hier.measured_decoder, std.measured_decoder));
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for grid in [[32, 32], [32, 64], [64, 64], [64, 128]] {
        let cfg = ModelConfig {
            hr_grid: grid,
            lr_grid: [16, 16],
            ..base.clone()
        };
        let p = measure(&cfg, 400, 3, 2).unwrap();
        counts_ok &= p.measured_decoder == p.analytic_decoder;
        xs.push(p.m as f64);
        ys.push(p.median_seconds);
    }
    let (lin, quad) = fit_residuals(&xs, &ys).unwrap();
    notes.push(format!("time vs m rss linear {lin:.2e} < quadratic {quad:.2e}"));
    verdict(
        counts_ok && inequality_ok && lin < quad,
        format!("counts exact: {counts_ok}; {}", notes.join("; ")),
    )
}

struct Run {
    report: EvalReport,
    loss_csv: Vec<u8>,
    checkpoint: Vec<u8>,
    steps: usize,
}

fn training_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 1,
        lr: 5e-4,
        seed: 0,
        mask: MaskSpec::uniform(2.5),
        ..TrainConfig::default()
    }
}

fn desk_model() -> ModelConfig {
    ModelConfig {
        data_consistency: true,
        ..ModelConfig::default()
    }
}

fn run(model: &ModelConfig, train: &[PhantomSample], test: &[PhantomSample], dir: &Path, tag: &str) -> Run {
    let config = training_config();
    let mut trainer = Trainer::<f32>::new(model.clone(), config.clone(), train).unwrap();
    let mut rows = Vec::new();
    while !trainer.is_done() {
        rows.push(LossRow::from(&trainer.step().unwrap()));
    }
    let loss_path = dir.join(format!("{tag}_loss.csv"));
    let ck_path = dir.join(format!("{tag}.ckpt"));
    write_loss_csv(&loss_path, &rows).unwrap();
    Checkpoint::from_state(model, &config, trainer.state()).save(&ck_path).unwrap();
    let [h, w] = model.hr_grid;
    let mask = config.mask.build(h, w).unwrap();
    let report = evaluate(&trainer.state().params, model, test, &mask).unwrap();
    Run {
        report,
        loss_csv: std::fs::read(&loss_path).unwrap(),
        checkpoint: std::fs::read(&ck_path).unwrap(),
        steps: rows.len(),
    }
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("KSPACE_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|v| v.contains(&id));
    let mut failures = 0;
    let mut check = |id: usize, name: &str, budget: Duration, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let mut v = f();
        let elapsed = start.elapsed();
        if elapsed > budget {
            v.pass = false;
            v.detail.push_str(&format!(", over the {:.0} s budget", budget.as_secs_f64()));
        }
        report(id, name, &v, elapsed);
        failures += usize::from(!v.pass);
    };

    check(1, "oracle suites", Duration::from_secs(10), &mut oracles);
    check(2, "gradient checks", Duration::from_secs(120), &mut gradient_check);
    check(3, "structural invariants", Duration::from_secs(60), &mut structural);
    check(4, "complexity claim", Duration::from_secs(300), &mut complexity);

    if [5, 6, 7, 8].iter().any(|&id| wanted(id)) {
        let dir = tempfile::tempdir().unwrap();
        let train = generate_phantoms(200, 64, 64, 1).unwrap();
        let test = generate_phantoms(20, 64, 64, 2).unwrap();
        let model = desk_model();
        let mut full = None;
        check(5, "toy training", Duration::from_secs(45 * 60), &mut || {
            let r = run(&model, &train, &test, dir.path(), "full");
            let gain = r.report.psnr.mean - r.report.zero_filled_psnr.mean;
            let v = verdict(
                gain >= 2.0 && r.steps <= 3000,
                format!(
                    "{} steps, PSNR {:.3} dB vs zero-filled {:.3} dB, gain {gain:+.3} dB (floor +2.0); SSIM {:.4} vs {:.4}",
                    r.steps,
                    r.report.psnr.mean,
                    r.report.zero_filled_psnr.mean,
                    r.report.ssim.mean,
                    r.report.zero_filled_ssim.mean
                ),
            );
            full = Some(r);
            v
        });
        let full = full.unwrap_or_else(|| run(&model, &train, &test, dir.path(), "full"));

        check(6, "ablation direction", Duration::from_secs(90 * 60), &mut || {
            let no_refine = ModelConfig {
                use_refinement: false,
                ..model.clone()
            };
            let no_lr = ModelConfig {
                use_lr_decoder: false,
                ..no_refine.clone()
            };
            let a = full.report.psnr.mean;
            let b = run(&no_refine, &train, &test, dir.path(), "no_refine").report.psnr.mean;
            let c = run(&no_lr, &train, &test, dir.path(), "no_refine_no_lr").report.psnr.mean;
            verdict(
                a > b && b > c,
                format!("full {a:.3} dB > no refinement {b:.3} dB > no refinement, no LR decoder {c:.3} dB"),
            )
        });

        check(7, "per-layer monotonicity", Duration::from_secs(1), &mut || {
            let layers = &full.report.layer_psnr;
            let drops: Vec<f64> = layers.windows(2).map(|p| p[0] - p[1]).filter(|&d| d > 0.0).collect();
            verdict(
                drops.is_empty() || (drops.len() == 1 && drops[0] <= 0.1),
                format!("HR layer PSNR {:?}", layers.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()),
            )
        });

        check(8, "determinism", Duration::from_secs(45 * 60), &mut || {
            let again = run(&model, &train, &test, dir.path(), "repeat");
            let csv = again.loss_csv == full.loss_csv;
            let ck = again.checkpoint == full.checkpoint;
            verdict(
                csv && ck,
                format!(
                    "loss CSV identical: {csv} ({} bytes), checkpoint identical: {ck} ({} bytes)",
                    full.loss_csv.len(),
                    full.checkpoint.len()
                ),
            )
        });
    }

    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("acceptance: {failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
