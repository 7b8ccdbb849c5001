use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ddanet::data::{load_image, resize_bilinear, save_gray, save_mask, split, synthetic_blobs, Dataset, SplitSpec};
use ddanet::metrics::fps_benchmark;
use ddanet::train::{evaluate, load_checkpoint, save_checkpoint, AdamConfig, TrainConfig, Trainer};
use ddanet::{DDANet, ModelConfig, Tensor};
use log::{info, warn};
use rayon::prelude::*;

use crate::{BenchArgs, EvalArgs, InferArgs, Preset, SynthArgs, TrainArgs};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn load_model(path: &Path) -> Result<DDANet<f32>> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading model {}", path.display()))?;
    Ok(ckpt.to_model()?)
}

/// `m.ddan` → `m.ddan<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn train(a: TrainArgs) -> Result<()> {
    ensure!(
        a.train_fraction > 0.0 && a.train_fraction <= 1.0,
        "--train-fraction must lie in (0, 1], got {}",
        a.train_fraction
    );
    let dataset = match (&a.data, a.synthetic) {
        (Some(root), _) => Dataset::from_dir(root, Some((a.size, a.size)))?,
        (None, Some(n)) => synthetic_blobs(n, a.size, a.seed)?,
        (None, None) => unreachable!("clap requires a data source"),
    };
    let (train_set, val_set) = if a.train_fraction < 1.0 {
        let (t, v) = split(
            &dataset,
            &SplitSpec {
                train_fraction: a.train_fraction,
                seed: a.seed,
            },
        )?;
        (t, (!v.is_empty()).then_some(v))
    } else {
        (dataset, None)
    };
    ensure!(
        !train_set.is_empty(),
        "no training items left after the {} split",
        a.train_fraction
    );

    let base = match a.preset {
        Preset::Default => ModelConfig::default(),
        Preset::Tiny => ModelConfig::tiny(),
    };
    let mut model_config = base.with_input_size(a.size, a.size);
    if a.no_attention {
        model_config = model_config.without_attention();
    }
    let config = TrainConfig {
        adam: AdamConfig {
            learning_rate: a.lr,
            ..AdamConfig::default()
        },
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&model_config, config)?;
    info!(
        "training on {} images ({} validation), {} parameters, {} epochs",
        train_set.len(),
        val_set.as_ref().map_or(0, Dataset::len),
        trainer.model.count_params(),
        a.epochs
    );

    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    let log_file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);
    let best_path = sibling(&a.out, ".best");
    let mut best = None;
    trainer.fit(&train_set, val_set.as_ref(), |t, entry| {
        writeln!(log, "{}", entry.to_json_line())
            .and_then(|_| log.flush())
            .map_err(|e| ddanet::Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
        match entry.val_dsc {
            Some(dsc) => info!("epoch {}: loss {:.4}, val dsc {dsc:.4}", entry.epoch, entry.loss_total),
            None => info!("epoch {}: loss {:.4}", entry.epoch, entry.loss_total),
        }
        if let Some(dsc) = entry.val_dsc {
            if best.is_none_or(|b| dsc > b) {
                best = Some(dsc);
                save_checkpoint(&t.checkpoint(), &best_path)?;
            }
        }
        if a.checkpoint_every > 0 && entry.epoch % a.checkpoint_every == 0 {
            save_checkpoint(&t.checkpoint(), &sibling(&a.out, &format!(".epoch{}", entry.epoch)))?;
        }
        Ok(())
    })?;
    save_checkpoint(&trainer.checkpoint(), &a.out)?;
    info!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(input).with_context(|| format!("reading {}", input.display()))? {
        let path = entry?.path();
        if path.is_file() && has_image_extension(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Scales a map linearly onto [0, 1]; constant maps become 0.
fn min_max(t: &Tensor<f32>) -> Tensor<f32> {
    let lo = t.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = t.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    t.map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 })
}

fn infer_one(model: &DDANet<f32>, path: &Path, a: &InferArgs) -> Result<usize> {
    let image = load_image(path)?;
    let (h, w) = (image.shape()[2], image.shape()[3]);
    let (mh, mw) = model.config().input_size;
    let out = model.predict(&resize_bilinear(&image, mh, mw)?)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .context("input file has no name")?;
    let target = |suffix: &str| a.outdir.join(format!("{stem}_{suffix}.png"));
    save_mask(&resize_bilinear(&out.mask, h, w)?, &target("mask"))?;
    let mut written = 1;
    if a.gray {
        save_gray(&resize_bilinear(&out.gray, h, w)?, &target("gray"))?;
        written += 1;
    }
    if a.attn {
        for ((stage, _), map) in model.attention.iter().zip(&out.attention_maps) {
            save_gray(&min_max(&resize_bilinear(map, h, w)?), &target(&format!("attn{stage}")))?;
            written += 1;
        }
    }
    Ok(written)
}

pub fn infer(a: InferArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let inputs = list_inputs(&a.input)?;
    ensure!(!inputs.is_empty(), "no images found in {}", a.input.display());
    std::fs::create_dir_all(&a.outdir).with_context(|| format!("creating {}", a.outdir.display()))?;
    let results: Vec<Result<usize>> = inputs.par_iter().map(|p| infer_one(&model, p, &a)).collect();
    let mut ok = 0;
    let mut files = 0;
    for (path, r) in inputs.iter().zip(results) {
        match r {
            Ok(n) => {
                ok += 1;
                files += n;
            }
            Err(e) => warn!("skipping {}: {e:#}", path.display()),
        }
    }
    if ok == 0 {
        bail!("every input failed ({} tried)", inputs.len());
    }
    info!("{ok} of {} inputs processed, {files} files written to {}", inputs.len(), a.outdir.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let dataset = Dataset::from_dir(&a.data, None)?;
    let report = evaluate(&model, &dataset)?;
    println!("{}", report.summary());
    if let Some(path) = &a.report {
        std::fs::write(path, report.to_json() + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let size = a.size.map_or(model.config().input_size, |s| (s, s));
    let report = fps_benchmark(&model, size, a.warmup, a.n as usize)?;
    println!(
        "fps {:.2}  mean {:.3} ms  p50 {:.3} ms  p95 {:.3} ms  ({} runs at {}x{})",
        report.fps, report.mean_ms, report.p50_ms, report.p95_ms, report.n_timed, size.0, size.1
    );
    if let Some(path) = &a.report {
        std::fs::write(path, report.to_json() + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let dataset = synthetic_blobs(a.n as usize, a.size, a.seed)?;
    dataset.export(&a.out)?;
    info!("wrote {} image/mask pairs under {}", a.n, a.out.display());
    Ok(())
}
