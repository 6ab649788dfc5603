use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsgo::data::{
    empirical_entropy, image_dataset, square_side, synthetic_sparse_with, SupportWeights,
};
use tsgo::loss::full_gradient;
use tsgo::optim::AdamConfig;
use tsgo::train::{epoch_loss, run_length_scan, scan_to_csv, train_from};
use tsgo::{Mps, OptimizerKind, StepDirection, TrainConfig};

use crate::config::ConfigFile;
use crate::input::{load_dataset, read_source, DataSpec, Size, Source};
use crate::manifest::{fingerprint, Manifest};
use crate::{CheckArgs, Failure, SampleArgs, ScanArgs, SynthArgs, TrainArgs, TrainingOptions};

const RESIDUAL_LIMIT: f64 = 1e-10;
const ORTHOGONALITY_LIMIT: f64 = 1e-8;
const NORMALIZATION_LIMIT: f64 = 1e-8;
const GIBBS_SLACK: f64 = 1e-9;
/// Largest chain for which `check` enumerates all configurations.
const CHECK_EXHAUSTIVE_SITES: usize = 12;

fn usage(e: tsgo::Error) -> Failure {
    match e {
        tsgo::Error::InvalidArgument(m) => Failure::Usage(m),
        other => other.into(),
    }
}

struct Common {
    config: TrainConfig,
    data: Option<PathBuf>,
    subset: Option<usize>,
    binarize: Option<f64>,
    out: Option<PathBuf>,
    force: bool,
}

fn resolve(o: &TrainingOptions, file: &mut ConfigFile) -> Result<Common, Failure> {
    let d = TrainConfig::default();
    let adam = AdamConfig {
        learning_rate: file.pick(o.lr, "lr")?.unwrap_or(d.adam.learning_rate),
        ..d.adam
    };
    let config = TrainConfig {
        epochs: file.pick(o.epochs, "epochs")?.unwrap_or(d.epochs),
        theta0: file.pick(o.theta0, "theta0")?.unwrap_or(d.theta0),
        shrink_factor: file.pick(o.shrink, "shrink")?.unwrap_or(d.shrink_factor),
        min_theta: file.pick(o.min_theta, "min-theta")?.unwrap_or(d.min_theta),
        fixed_angle: file.pick(o.fixed_angle, "fixed-angle")?,
        direction: if file.switch(o.raw_gradient, "raw-gradient")? {
            StepDirection::Raw
        } else {
            StepDirection::Unit
        },
        rollback: file.switch(o.rollback, "rollback")?,
        adam,
        max_bond: file.pick(o.bond, "bond")?.unwrap_or(d.max_bond),
        batch_size: file.pick(o.batch_size, "batch-size")?,
        seed: file.pick(o.seed, "seed")?.unwrap_or(d.seed),
        record_timing: !file.switch(o.no_timing, "no-timing")?,
        ..d
    };
    Ok(Common {
        config,
        data: file.pick(o.data.clone(), "data")?,
        subset: file.pick(o.subset, "subset")?,
        binarize: file.pick(o.binarize, "binarize")?,
        out: file.pick(o.out.clone(), "out")?,
        force: file.switch(o.force, "force")?,
    })
}

/// Refuses to clobber existing outputs unless forced.
fn guard(paths: &[&Path], force: bool) -> Result<(), Failure> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Failure::Runtime(anyhow::anyhow!(
            "refusing to overwrite {} (pass --force)",
            p.display()
        ))),
        None => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(Failure::from)
}

fn record_config(m: &mut Manifest, c: &TrainConfig) {
    m.set("config.optimizer", c.optimizer.name());
    m.set("config.epochs", c.epochs);
    m.set("config.theta0", c.theta0);
    m.set("config.shrink", c.shrink_factor);
    m.set("config.min_theta", c.min_theta);
    m.set(
        "config.fixed_angle",
        c.fixed_angle.map_or("none".to_string(), |a| a.to_string()),
    );
    m.set(
        "config.direction",
        match c.direction {
            StepDirection::Unit => "unit",
            StepDirection::Raw => "raw",
        },
    );
    m.set("config.rollback", c.rollback);
    m.set("config.lr", c.adam.learning_rate);
    m.set("config.beta1", c.adam.beta1);
    m.set("config.beta2", c.adam.beta2);
    m.set("config.epsilon", c.adam.epsilon);
    m.set("config.bond", c.max_bond);
    m.set(
        "config.batch_size",
        c.batch_size.map_or("full".to_string(), |b| b.to_string()),
    );
    m.set("config.seed", c.seed);
    m.set("config.sweep", "roundtrip");
    m.set(
        "config.switch_epoch",
        c.switch_epoch.map_or("none".to_string(), |s| s.to_string()),
    );
    m.set("config.timing", c.record_timing);
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut file = ConfigFile::load(a.common.config.as_deref())?;
    let common = resolve(&a.common, &mut file)?;
    let optimizer = file
        .pick(a.optimizer, "optimizer")?
        .unwrap_or(OptimizerKind::Tsgo);
    let resize: Option<Size> = file.pick(a.resize, "resize")?;
    let switch_epoch = file.pick(a.switch_epoch, "switch-epoch")?;
    let label: Option<String> = file.pick(a.label.clone(), "label")?;
    file.finish()?;

    let config = TrainConfig {
        optimizer,
        switch_epoch,
        ..common.config
    };
    config.validate().map_err(usage)?;
    let data_path = common
        .data
        .ok_or_else(|| Failure::Usage("--data is required".into()))?;
    let label = label.unwrap_or_else(|| match (optimizer, switch_epoch) {
        (OptimizerKind::Adam, Some(_)) => "adam-tsgo".into(),
        (o, _) => o.name().into(),
    });
    if label.is_empty() || label.contains(['/', '\\']) {
        return Err(Failure::Usage(format!("bad label '{label}'")));
    }
    let out = common.out.unwrap_or_else(|| PathBuf::from("tsgo-out"));
    let model_path = out.join("model.mps");
    let trace_path = out.join(format!("{label}.csv"));
    let manifest_path = out.join("manifest.txt");
    guard(&[&model_path, &trace_path, &manifest_path], common.force)?;

    let spec = DataSpec {
        path: data_path.clone(),
        subset: common.subset,
        resize,
        binarize: common.binarize,
        seed: config.seed,
    };
    let dataset = load_dataset(&spec)?;
    let init = Mps::random(dataset.n_features(), 2, config.max_bond, config.seed)?;
    let (model, log) = train_from(&config, init, &dataset)?;

    create_dir(&out)?;
    model.save(&model_path)?;
    log.write_csv(&trace_path)?;
    let mut m = Manifest::new("train");
    m.set("data", data_path.display());
    m.set("dataset_sha256", fingerprint(&dataset));
    m.set("dataset_rows", dataset.len());
    m.set("dataset_features", dataset.n_features());
    m.set("dataset_binary", dataset.is_binary());
    m.set(
        "resize",
        resize.map_or("none".to_string(), |s| s.to_string()),
    );
    m.set(
        "subset",
        common.subset.map_or("all".to_string(), |s| s.to_string()),
    );
    m.set(
        "binarize",
        common
            .binarize
            .map_or("none".to_string(), |b| b.to_string()),
    );
    record_config(&mut m, &config);
    m.set(
        "protocol",
        match (optimizer, switch_epoch) {
            (OptimizerKind::Adam, Some(s)) => {
                format!("adam for {s} epochs, then canonicalize and tsgo")
            }
            (o, _) => o.name().to_string(),
        },
    );
    m.set("model", model_path.display());
    m.set("trace", trace_path.display());
    m.set("epochs_run", log.rows.len());
    m.set(
        "final_loss",
        log.final_loss()
            .map_or("none".to_string(), |l| l.to_string()),
    );
    m.set(
        "status",
        log.aborted
            .as_ref()
            .map_or("completed".to_string(), |r| format!("aborted: {r}")),
    );
    m.write(&manifest_path)?;

    if let Some(reason) = log.aborted {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "training stopped: {reason}; last good model written to {}",
            model_path.display()
        )));
    }
    if let Some(last) = log.rows.last() {
        println!(
            "{} epochs, final loss {} nats; wrote {}",
            last.epoch,
            last.loss,
            out.display()
        );
    }
    Ok(())
}

/// Parses, deduplicates and validates a length list.
fn parse_lengths(raw: &str) -> Result<Vec<usize>, Failure> {
    let mut lengths: Vec<usize> = Vec::new();
    for item in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let n: usize = item
            .parse()
            .map_err(|_| Failure::Usage(format!("bad length '{item}'")))?;
        square_side(n).map_err(usage)?;
        if lengths.contains(&n) {
            eprintln!("warning: length {n} listed more than once; scanning it once");
        } else {
            lengths.push(n);
        }
    }
    if lengths.is_empty() {
        return Err(Failure::Usage("--lengths needs at least one value".into()));
    }
    Ok(lengths)
}

pub fn scan_length(a: ScanArgs) -> Result<(), Failure> {
    let mut file = ConfigFile::load(a.common.config.as_deref())?;
    let common = resolve(&a.common, &mut file)?;
    let lengths: Option<String> = file.pick(a.lengths.clone(), "lengths")?;
    file.finish()?;
    let lengths =
        parse_lengths(&lengths.ok_or_else(|| Failure::Usage("--lengths is required".into()))?)?;
    common.config.validate().map_err(usage)?;
    let data_path = common
        .data
        .ok_or_else(|| Failure::Usage("--data is required".into()))?;

    let outputs = common
        .out
        .as_ref()
        .map(|d| (d.join("length-scan.csv"), d.join("manifest.txt")));
    if let Some((csv, manifest)) = &outputs {
        guard(&[csv, manifest], common.force)?;
    }
    let images = match read_source(&data_path)? {
        Source::Images(i) => i,
        Source::Cache(_) => {
            return Err(Failure::Usage(
                "scan-length resizes images; --data must be an IDX image file".into(),
            ))
        }
    };
    let subset = common.subset.unwrap_or(images.count);
    let seed = common.config.seed;
    let mut fingerprints = Vec::new();
    let rows = run_length_scan(&common.config, &lengths, |n| {
        let ds = image_dataset(&images, n, subset, seed, common.binarize)?;
        fingerprints.push(format!("{n}={}", fingerprint(&ds)));
        eprintln!("scanning N={n}");
        Ok(ds)
    })
    .map_err(usage)?;
    let csv = scan_to_csv(&rows);
    print!("{csv}");

    if let (Some(dir), Some((csv_path, manifest_path))) = (&common.out, &outputs) {
        create_dir(dir)?;
        std::fs::write(csv_path, &csv)
            .with_context(|| format!("cannot write {}", csv_path.display()))?;
        let mut m = Manifest::new("scan-length");
        m.set("data", data_path.display());
        m.set("dataset_sha256", fingerprints.join(" "));
        m.set("subset", subset);
        m.set(
            "lengths",
            lengths
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        record_config(&mut m, &common.config);
        m.set(
            "convergence",
            "relative change < 1e-4 over 3 epochs, or the epoch cap",
        );
        m.set("table", csv_path.display());
        m.write(manifest_path)?;
    }
    Ok(())
}

fn pgm(bits: &[u8], side: usize) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(bits.iter().map(|&b| if b == 0 { 0 } else { 255 }));
    out
}

fn text_rows(samples: &[Vec<u8>]) -> String {
    samples
        .iter()
        .map(|s| s.iter().map(|b| char::from(b'0' + b)).collect::<String>() + "\n")
        .collect()
}

pub fn sample(a: SampleArgs) -> Result<(), Failure> {
    let model = Mps::load(&a.model)?;
    let model = if model.center().is_some() {
        model
    } else {
        model.canonicalize(0)?
    };
    if a.count == 0 {
        return Ok(());
    }
    let sampler = model.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let samples: Vec<Vec<u8>> = (0..a.count).map(|_| sampler.draw(&mut rng)).collect();
    let side = square_side(model.len()).ok().filter(|_| !a.text);

    let Some(dir) = a.out else {
        std::io::stdout()
            .write_all(text_rows(&samples).as_bytes())
            .context("cannot write to stdout")?;
        return Ok(());
    };
    match side {
        Some(side) => {
            let paths: Vec<PathBuf> = (0..samples.len())
                .map(|i| dir.join(format!("sample-{i:04}.pgm")))
                .collect();
            guard(
                &paths.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
                a.force,
            )?;
            create_dir(&dir)?;
            for (p, s) in paths.iter().zip(&samples) {
                std::fs::write(p, pgm(s, side))
                    .with_context(|| format!("cannot write {}", p.display()))?;
            }
        }
        None => {
            let path = dir.join("samples.txt");
            guard(&[&path], a.force)?;
            create_dir(&dir)?;
            std::fs::write(&path, text_rows(&samples))
                .with_context(|| format!("cannot write {}", path.display()))?;
        }
    }
    Ok(())
}

pub fn check(a: CheckArgs) -> Result<(), Failure> {
    let model = Mps::load(&a.model)?;
    let dataset = load_dataset(&DataSpec {
        path: a.data.clone(),
        subset: a.subset,
        resize: a.resize,
        binarize: a.binarize,
        seed: a.seed,
    })?;
    if dataset.n_features() != model.len() {
        return Err(Failure::Usage(format!(
            "data has {} features but the model has {} sites",
            dataset.n_features(),
            model.len()
        )));
    }
    let data = dataset.embedded()?;
    let mut failures = Vec::new();
    let mut report = |name: &str, value: f64, ok: bool, limit: &str| {
        println!(
            "{name}: {value:.3e} ({limit}) {}",
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures.push(format!("{name} = {value:.3e}"));
        }
    };

    match model.max_canonical_residual() {
        Some(r) => report("canonical_residual", r, r < RESIDUAL_LIMIT, "limit 1e-10"),
        None => println!("canonical_residual: skipped, model has no orthogonality center"),
    }

    let mut overlap = 0.0f64;
    for site in 0..model.len() {
        let g = full_gradient(&model, &data, site)?.gradient.values;
        let t = model.tensor(site);
        let gn = g.norm();
        if gn > 0.0 {
            overlap = overlap.max(t.inner(&g)?.abs() / (t.norm() * gn));
        }
    }
    report(
        "gradient_orthogonality",
        overlap,
        overlap < ORTHOGONALITY_LIMIT,
        "limit 1e-8",
    );

    if model.len() <= CHECK_EXHAUSTIVE_SITES {
        let norm: f64 = model.squared_amplitude_table()?.iter().sum();
        report(
            "normalization_sum",
            norm,
            (norm - 1.0).abs() < NORMALIZATION_LIMIT,
            "expected 1 within 1e-8",
        );
        let prob: f64 = model.brute_force_distribution()?.iter().sum();
        report(
            "probability_sum",
            prob,
            (prob - 1.0).abs() < NORMALIZATION_LIMIT,
            "expected 1 within 1e-8",
        );
    } else {
        println!(
            "normalization_sum: skipped, {} sites exceeds the exhaustive limit of {CHECK_EXHAUSTIVE_SITES}",
            model.len()
        );
    }

    let loss = epoch_loss(&model, &data);
    println!("nll: {loss}");
    if dataset.is_binary() {
        let h = empirical_entropy(&dataset)?;
        let gap = loss - h;
        report(
            "gibbs_gap",
            gap,
            gap >= -GIBBS_SLACK,
            "nll minus empirical entropy, must be >= 0",
        );
    } else {
        println!("gibbs_gap: skipped, data is not binary");
    }

    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failures.join(", ")))
    }
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    guard(&[&a.out], a.force)?;
    let weights = if a.equal_weights {
        SupportWeights::Equal
    } else {
        SupportWeights::Random
    };
    let s = synthetic_sparse_with(a.sites, a.support, a.seed, a.samples, weights).map_err(usage)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    s.dataset.save_cache(&a.out)?;
    println!(
        "{} rows over {} sites; generating entropy {:.6}, empirical entropy {:.6} nats",
        s.dataset.len(),
        a.sites,
        s.generating_entropy(),
        empirical_entropy(&s.dataset)?
    );
    Ok(())
}
