use std::fs;
use std::path::{Path, PathBuf};

use bi_clstm::checkpoint::Checkpoint;
use bi_clstm::data::{
    encode_labels, extract_patch, load_cube, normalize, save_cube, stratified_split, synth_cube_with, HsiCube,
    PatchSequence, Split, SplitSpec, SynthSpec,
};
use bi_clstm::metrics::{evaluate, map_to_ppm, render_map, MetricsReport};
use bi_clstm::model::ModelConfig;
use bi_clstm::train::{gradcheck, train, GradcheckConfig, TrainReport};
use bi_clstm::{Error, Result};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::{Command, EvalArgs, Failure, GradcheckArgs, PixelSet, PredictArgs, SynthArgs, TrainArgs};

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(*a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        classes: a.classes,
        rows: a.size.0,
        cols: a.size.1,
        bands: a.bands,
        seed: a.seed,
        separation: a.separation,
        shared_bands: a.shared_bands,
        region_size: a.region_size,
        smooth_noise: a.smooth_noise,
    };
    let cube = synth_cube_with(&spec)?;
    save_cube(&cube, &a.out)?;
    let pop = cube.class_populations();
    println!(
        "wrote {} ({}x{}x{})",
        a.out.display(),
        cube.rows(),
        cube.cols(),
        cube.bands()
    );
    for (k, count) in pop.iter().enumerate().skip(1) {
        println!("class {k}: {count} pixels");
    }
    Ok(())
}

/// File values overridden by flags.
fn merge(a: &TrainArgs) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = &a.$flag { c.$field = v.clone().into(); })*
        };
    }
    set!(
        patch_size => patch_size,
        hidden_channels => hidden_channels,
        kernel_size => kernel_size,
        dropout => dropout,
        band_group => band_group,
        feature_mode => feature_mode,
        bidirectional => bidirectional,
        lr => learning_rate,
        batch_size => batch_size,
        epochs => epochs,
        optimizer => optimizer,
        momentum => momentum,
        clip_norm => clip_norm,
        augment => augment,
        seed => seed,
        forget_bias => forget_bias,
        train_fraction => train_fraction,
        repeats => repeats,
    );
    if let Some(v) = &a.data {
        c.data = Some(v.clone());
    }
    if let Some(v) = &a.checkpoint {
        c.checkpoint = Some(v.clone());
    }
    if let Some(v) = &a.report {
        c.report = Some(v.clone());
    }
    if let Some(v) = a.split_seed {
        c.split_seed = Some(v);
    }
    c.validate()?;
    Ok(c)
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| Error::Argument(format!("no {what} path given (flag or config file)")))
}

fn samples_at(cube: &HsiCube, pixels: &[(usize, usize)], config: &ModelConfig) -> Result<Vec<PatchSequence>> {
    pixels
        .iter()
        .map(|&(i, j)| extract_patch(cube, i, j, config.patch_size, config.band_group))
        .collect()
}

fn split_for(cube: &HsiCube, config: &RunConfig, run: usize) -> Result<Split> {
    stratified_split(
        cube,
        &SplitSpec::fraction(config.train_fraction, config.split_seed_for(run)),
    )
}

/// `model.bck` -> `model.run2.bck`.
fn run_path(path: &Path, run: usize, repeats: usize) -> PathBuf {
    if repeats == 1 {
        return path.to_path_buf();
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.run{run}.{}", ext.to_string_lossy()),
        None => format!("{stem}.run{run}"),
    };
    path.with_file_name(name)
}

#[derive(Serialize)]
struct RunRecord {
    run: usize,
    seed: u64,
    split_seed: u64,
    train: TrainReport,
    test: Option<MetricsReport>,
}

#[derive(Serialize)]
struct MeanStd {
    mean: f64,
    std: f64,
}

/// Sample standard deviation (zero for a single run).
fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MeanStd { mean, std: var.sqrt() }
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let config = merge(&a)?;
    let data = required(&config.data, "data")?.clone();
    let checkpoint = required(&config.checkpoint, "checkpoint")?.clone();
    let report_path = config
        .report
        .clone()
        .unwrap_or_else(|| checkpoint.with_extension("json"));
    let cube = load_cube(&data)?;
    let model_config = config.model_config(cube.bands(), cube.num_classes())?;
    let echo = serde_json::to_value(&config)?;

    let mut runs = Vec::with_capacity(config.repeats);
    for run in 0..config.repeats {
        let train_config = config.train_config(run)?;
        let split = split_for(&cube, &config, run)?;
        let (norm_cube, stats) = normalize(&cube, &split.train)?;
        let samples = samples_at(&norm_cube, &split.train, &model_config)?;
        info!(
            "run {run}: {} training / {} test pixels, seed {}",
            split.train.len(),
            split.test.len(),
            train_config.seed
        );
        let (model, optimizer, mut report) = train(model_config.clone(), &samples, &train_config)?;
        let test = if split.test.is_empty() {
            None
        } else {
            Some(evaluate(&norm_cube, &model, &split.test)?.report()?)
        };
        if let Some(t) = &test {
            info!("run {run}: test OA {:.4}  AA {:.4}  kappa {:.4}", t.oa, t.aa, t.kappa);
        }
        let path = run_path(&checkpoint, run, config.repeats);
        Checkpoint {
            model,
            norm: Some(stats),
            optimizer: Some(optimizer),
            meta: json!({ "config": echo, "run": run }),
        }
        .save(&path)?;
        report.checkpoint = Some(path.display().to_string());
        info!(
            "run {run}: wrote {} after {:.1}s",
            path.display(),
            report.wall_clock_secs
        );
        runs.push(RunRecord {
            run,
            seed: train_config.seed,
            split_seed: config.split_seed_for(run),
            train: report,
            test,
        });
    }

    let tests: Vec<&MetricsReport> = runs.iter().filter_map(|r| r.test.as_ref()).collect();
    let summary = (!tests.is_empty()).then(|| {
        let pick = |f: fn(&MetricsReport) -> f64| mean_std(&tests.iter().map(|t| f(t)).collect::<Vec<_>>());
        json!({ "oa": pick(|t| t.oa), "aa": pick(|t| t.aa), "kappa": pick(|t| t.kappa) })
    });
    if let Some(s) = &summary {
        info!(
            "test OA {:.4} +- {:.4} over {} run(s)",
            s["oa"]["mean"].as_f64().unwrap_or(f64::NAN),
            s["oa"]["std"].as_f64().unwrap_or(f64::NAN),
            runs.len()
        );
    }
    write_json(
        &report_path,
        &json!({ "config": echo, "runs": runs, "summary": summary }),
    )?;
    Ok(())
}

struct Loaded {
    checkpoint: Checkpoint,
    config: RunConfig,
    run: usize,
    raw: HsiCube,
    cube: HsiCube,
}

fn load_for_inference(checkpoint: &Path, data: Option<&PathBuf>) -> Result<Loaded> {
    let ck = Checkpoint::load(checkpoint)?;
    let config: RunConfig = match ck.meta.get("config") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => RunConfig::default(),
    };
    let run = ck.meta.get("run").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let data = match data {
        Some(d) => d.clone(),
        None => required(&config.data, "data")?.clone(),
    };
    let raw = load_cube(&data)?;
    let cube = match &ck.norm {
        Some(stats) => stats.apply(&raw)?,
        None => raw.clone(),
    };
    Ok(Loaded {
        checkpoint: ck,
        config,
        run,
        raw,
        cube,
    })
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let l = load_for_inference(&a.checkpoint, a.data.as_ref())?;
    let pixels = match a.pixels {
        PixelSet::Labeled => l.raw.labeled_pixels(),
        PixelSet::Test => split_for(&l.raw, &l.config, l.run)?.test,
        PixelSet::Train => split_for(&l.raw, &l.config, l.run)?.train,
    };
    if pixels.is_empty() {
        return Err(Error::Argument("no pixels to evaluate".into()).into());
    }
    let metrics = evaluate(&l.cube, &l.checkpoint.model, &pixels)?.report()?;
    info!("OA {:.4}  AA {:.4}  kappa {:.4}", metrics.oa, metrics.aa, metrics.kappa);
    let pixel_set = match a.pixels {
        PixelSet::Test => "test",
        PixelSet::Train => "train",
        PixelSet::Labeled => "labeled",
    };
    let doc = json!({
        "oa": metrics.oa,
        "aa": metrics.aa,
        "kappa": metrics.kappa,
        "per_class": metrics.per_class,
        "confusion": metrics.confusion,
        "pixels": pixel_set,
        "config": l.checkpoint.meta.get("config"),
    });
    match &a.out {
        Some(path) => write_json(path, &doc)?,
        None => println!("{}", serde_json::to_string_pretty(&doc)?),
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), Failure> {
    let l = load_for_inference(&a.checkpoint, a.data.as_ref())?;
    let raster = render_map(&l.cube, &l.checkpoint.model, a.all_pixels)?;
    let comment = match l.checkpoint.meta.get("config") {
        Some(c) => Some(serde_json::to_string(c)?),
        None => None,
    };
    fs::write(
        &a.out,
        map_to_ppm(&raster, l.cube.rows(), l.cube.cols(), comment.as_deref())?,
    )?;
    if let Some(path) = &a.raster {
        fs::write(path, encode_labels(&raster, l.cube.rows(), l.cube.cols())?)?;
    }
    info!("wrote {}", a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<(), Failure> {
    let cfg = GradcheckConfig {
        model: ModelConfig {
            patch_size: a.patch_size,
            band_group: a.band_group,
            hidden_channels: a.hidden_channels,
            feature_mode: a.feature_mode.into(),
            ..ModelConfig::new(a.bands, a.classes)
        },
        batch: a.batch,
        seed: a.seed,
        tolerance: a.tolerance,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&cfg)?;
    for b in &report.blocks {
        info!(
            "{:<18} max rel {:.3e}  max abs {:.3e}  {}",
            b.name,
            b.max_rel_err,
            b.max_abs_err,
            if b.passed { "ok" } else { "FAIL" }
        );
    }
    match &a.report {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .blocks
            .iter()
            .filter(|b| !b.passed)
            .map(|b| b.name.as_str())
            .collect();
        Err(Failure::Check(format!("gradient check failed for {failed:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_paths() {
        let p = Path::new("out/model.bck");
        assert_eq!(run_path(p, 0, 1), PathBuf::from("out/model.bck"));
        assert_eq!(run_path(p, 2, 3), PathBuf::from("out/model.run2.bck"));
        assert_eq!(run_path(Path::new("m"), 1, 2), PathBuf::from("m.run1"));
    }

    #[test]
    fn sample_std() {
        let s = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(mean_std(&[0.5]).std, 0.0);
    }
}
