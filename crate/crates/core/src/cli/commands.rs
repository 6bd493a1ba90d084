use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::verify::{self, Level};
use super::{raster, CliError};
use crate::diffcore::Tensor;
use crate::error::Error;
use crate::metrics::EvalReport;
use crate::model::CbsnParams;
use crate::noisegen::{add_noise, gen_clean};
use crate::trainkit::{denoise, split_holdout, LogRecord, NoisyDataset, Trainer, MODEL_FILE, STATE_FILE};
use crate::exec;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HOLDOUT_FILE: &str = "holdout.txt";
const MANIFEST_HEADER: &str = "name,clean,noisy,seed,stream";

type Result<T> = std::result::Result<T, CliError>;

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Core(Error::Io(e)))?;
            Ok(ExperimentConfig::parse(&text)?)
        }
    }
}

fn image_name(i: usize) -> String {
    format!("img_{i:04}.cbr")
}

/// Writes `count` clean/noisy raster pairs under `clean/` and `noisy/`, the
/// manifest and a copy of the config. Image `i` draws from the ChaCha8
/// stream `i` of `data.seed`.
pub fn make_noise(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let d = &cfg.data;
    let (clean_dir, noisy_dir) = (d.dir.join("clean"), d.dir.join("noisy"));
    fs::create_dir_all(&clean_dir).map_err(Error::from)?;
    fs::create_dir_all(&noisy_dir).map_err(Error::from)?;
    exec::try_map_indexed(d.count, |i| -> crate::Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
        rng.set_stream(i as u64);
        let y = gen_clean::<f32, _>(d.clean, d.height, d.width, d.channels, &mut rng)?;
        let x = add_noise(&y, &cfg.noise, &mut rng)?;
        raster::write(&clean_dir.join(image_name(i)), &y)?;
        raster::write(&noisy_dir.join(image_name(i)), &x)
    })?;

    let mut manifest = String::new();
    for line in cfg.to_text().lines().filter(|l| l.starts_with("noise.") || l.starts_with("data.")) {
        manifest.push_str(&format!("# {line}\n"));
    }
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    for i in 0..d.count {
        let name = image_name(i);
        manifest.push_str(&format!("{name},clean/{name},noisy/{name},{},{i}\n", d.seed));
    }
    fs::write(d.dir.join(MANIFEST_FILE), manifest).map_err(Error::from)?;
    fs::write(d.dir.join(CONFIG_FILE), cfg.to_text()).map_err(Error::from)?;
    writeln!(out, "wrote {} pairs to {}", d.count, d.dir.display()).map_err(Error::from)?;
    Ok(())
}

/// Image names listed in a manifest, in order.
pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(Error::from)?;
    let mut rows = text.lines().filter(|l| !l.starts_with('#'));
    if rows.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("{}: missing manifest header", dir.display())).into());
    }
    rows.map(|r| {
        r.split(',')
            .next()
            .filter(|n| !n.is_empty())
            .map(str::to_string)
            .ok_or_else(|| Error::Format(format!("bad manifest row {r:?}")).into())
    })
    .collect()
}

/// Trains on the noisy images of the manifest minus the holdout split.
///
/// The run directory receives the config echo, the holdout list, periodic
/// checkpoints and `metrics.csv`. With `resume`, training continues from the
/// last checkpoint and log rows written after it are dropped.
pub fn train(cfg: &ExperimentConfig, resume: bool, out: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let names = read_manifest(&cfg.data.dir)?;
    let (train_idx, hold_idx) = if cfg.data.holdout > 0.0 {
        split_holdout(names.len(), cfg.data.holdout, cfg.data.seed)?
    } else {
        ((0..names.len()).collect(), Vec::new())
    };
    let images = train_idx
        .iter()
        .map(|&i| raster::read(&cfg.data.dir.join("noisy").join(&names[i])))
        .collect::<crate::Result<Vec<_>>>()?;
    let dataset = NoisyDataset::new(images)?;

    let dir = &cfg.run_dir;
    fs::create_dir_all(dir).map_err(Error::from)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text()).map_err(Error::from)?;
    let holdout: String = hold_idx.iter().map(|&i| format!("{}\n", names[i])).collect();
    fs::write(dir.join(HOLDOUT_FILE), holdout).map_err(Error::from)?;

    let metrics_path = dir.join(METRICS_FILE);
    let mut trainer = if resume && dir.join(STATE_FILE).exists() {
        let t = Trainer::load(dir, dataset, cfg.train.clone(), cfg.loss.clone())?;
        let kept: String = fs::read_to_string(&metrics_path)
            .unwrap_or_default()
            .lines()
            .skip(1)
            .filter(|l| {
                l.split(',')
                    .next()
                    .and_then(|v| v.parse::<u64>().ok())
                    .is_some_and(|it| it < t.iter())
            })
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(&metrics_path, format!("{}\n{kept}", LogRecord::HEADER)).map_err(Error::from)?;
        t
    } else {
        let t = Trainer::new(dataset, &cfg.model, cfg.train.clone(), cfg.loss.clone())?;
        fs::write(&metrics_path, format!("{}\n", LogRecord::HEADER)).map_err(Error::from)?;
        t
    };

    let mut log = OpenOptions::new().append(true).open(&metrics_path).map_err(Error::from)?;
    let every = cfg.train.checkpoint_every;
    trainer.run(|t, rec| {
        if rec.iter % t.config().log_every == 0 || t.is_done() {
            writeln!(log, "{rec}")?;
            log.flush()?;
        }
        if t.is_done() || (every > 0 && t.iter() % every == 0) {
            t.save(dir)?;
        }
        Ok(())
    })?;
    writeln!(out, "trained {} iterations into {}", trainer.iter(), dir.display()).map_err(Error::from)?;
    Ok(())
}

/// Loads a model file, or `model.cbsn` inside a run directory.
pub fn load_model(path: &Path) -> Result<CbsnParams<f32>> {
    let file = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
    let f = File::open(&file).map_err(Error::from)?;
    Ok(CbsnParams::load(&mut BufReader::new(f))?)
}

/// Denoises one raster or 8-bit PNG into the same format. `pass_through`
/// skips the network, which makes the command a pure format round trip.
pub fn denoise_file(model: Option<&Path>, input: &Path, output: &Path, pass_through: bool) -> Result<()> {
    if raster::is_png(input) != raster::is_png(output) {
        return Err(CliError::Usage(format!(
            "output {} must use the same format as input {}",
            output.display(),
            input.display()
        )));
    }
    let x = raster::read_any(input)?;
    let y = if pass_through {
        x
    } else {
        let model = model.ok_or_else(|| CliError::Usage("--checkpoint is required unless --pass-through is set".into()))?;
        denoise(&load_model(model)?, &x)?
    };
    raster::write_any(output, &y)?;
    Ok(())
}

fn list_rasters(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(Error::from)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".cbr"))
        .collect();
    names.sort();
    Ok(names)
}

/// Both reports of `eval`: the noisy inputs and the denoised outputs, each
/// scored against the clean references.
pub fn evaluate(model: &Path, clean_dir: &Path, noisy_dir: &Path, period: usize) -> Result<(EvalReport, EvalReport)> {
    let names = list_rasters(clean_dir)?;
    if names.is_empty() {
        return Err(CliError::Usage(format!("no .cbr rasters in {}", clean_dir.display())));
    }
    let params = load_model(model)?;
    let mut noisy_items = Vec::new();
    let mut denoised_items = Vec::new();
    for name in names {
        let clean = raster::read(&clean_dir.join(&name))?;
        let noisy_path = noisy_dir.join(&name);
        if !noisy_path.exists() {
            return Err(CliError::Usage(format!("{} has no noisy counterpart", name)));
        }
        let noisy = raster::read(&noisy_path)?;
        let est: Tensor<f32> = denoise(&params, &noisy)?;
        noisy_items.push((name.clone(), noisy, clean.clone()));
        denoised_items.push((name, est, clean));
    }
    Ok((
        EvalReport::evaluate(&noisy_items, period)?,
        EvalReport::evaluate(&denoised_items, period)?,
    ))
}

pub fn print_eval(noisy: &EvalReport, denoised: &EvalReport, table: bool, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "set,psnr_db,ssim,checkerboard")?;
    for (set, r) in [("noisy", noisy), ("denoised", denoised)] {
        writeln!(out, "{set},{},{},{}", r.psnr_db, r.ssim, r.checkerboard_score)?;
    }
    if table {
        writeln!(out, "\nset,{}", EvalReport::HEADER)?;
        for (set, r) in [("noisy", noisy), ("denoised", denoised)] {
            for line in r.table().lines() {
                writeln!(out, "{set},{line}")?;
            }
        }
    }
    Ok(())
}

/// Prints one line per check and fails when any check failed.
pub fn verify(level: Level, opts: &verify::Options, out: &mut dyn Write) -> Result<()> {
    let checks = verify::run(level, opts);
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{tag} {}: {}", c.name, c.detail).map_err(Error::from)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failed checks: {}", failed.join(", "))))
    }
}
