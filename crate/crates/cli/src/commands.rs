use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use tendency_core::data::{generate_synthetic, load_dataset, save_dataset, split, Dataset, GeneratorConfig};
use tendency_core::harness::{
    attention_fidelity, dump_attention, efficiency_report, mean_attention, run_experiment, run_variant, sparse_sweep,
    ExperimentReport, Splits, VariantReport,
};
use tendency_core::metrics::{
    consistency_matrix, evaluate_consensus_model, evaluate_predictions, evaluate_with_mode, ConsistencyKind, ConsistencyMode,
    EvalReport,
};
use tendency_core::model::{load_checkpoint, save_checkpoint};
use tendency_core::model::Variant;
use tendency_core::seed::derive_seed;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::Manifest;
use crate::{ConfigArgs, Mode, SplitPart};

type Result<T> = std::result::Result<T, CliError>;

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(&args.config, &args.overrides)
}

fn check_dims(c: &RunConfig, d: &Dataset) -> Result<()> {
    let want = (c.num_annotators, c.num_classes, c.num_tokens, c.raw_dim);
    let got = (d.num_annotators, d.num_classes, d.num_tokens, d.raw_dim);
    if want != got {
        return Err(CliError::Validation(format!(
            "dataset has numAnnotators={} numClasses={} numTokens={} rawDim={}, config has numAnnotators={} numClasses={} numTokens={} rawDim={}",
            got.0, got.1, got.2, got.3, want.0, want.1, want.2, want.3
        )));
    }
    Ok(())
}

fn splits_of(c: &RunConfig, d: &Dataset) -> Result<Splits> {
    let (train, val, test) = split(d, (c.split[0], c.split[1], c.split[2]), derive_seed(c.seed, "split"))?;
    Ok(Splits { train, val, test })
}

pub fn generate(args: &ConfigArgs, out: &Path) -> Result<()> {
    let c = load_config(args)?;
    let gen = GeneratorConfig { seed: derive_seed(c.seed, "data"), ..c.generator() };
    let d = generate_synthetic(&gen)?;
    save_dataset(&d, out)?;
    let m = consistency_matrix(&d.label_columns(), d.num_classes, ConsistencyKind::GroundTruth)?;
    println!("wrote {} samples to {}", d.len(), out.display());
    println!("consistency matrix M:");
    print!("{}", m.to_csv());

    let mut manifest = Manifest::new("generate", Some(&c));
    manifest.arg("out", out.display()).input(&args.config)?;
    manifest.artifacts(parent(out), [&out.to_path_buf()])?;
    manifest.write(&sibling(out, ".manifest.toml"))
}

fn write_eval(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(vec![
        write(&dir.join("report.csv"), report.to_csv())?,
        write(&dir.join("report.json"), report.to_json())?,
        write(&dir.join("m.csv"), report.m.to_csv())?,
        write(&dir.join("m_prime.csv"), report.m_prime.to_csv())?,
        write(&dir.join("dic.txt"), format!("{}\n", report.dic))?,
    ])
}

pub fn train(args: &ConfigArgs, data: &Path, out: &Path, variant: Option<Variant>) -> Result<()> {
    let mut c = load_config(args)?;
    if let Some(v) = variant {
        c.variant = v;
    }
    let d = load_dataset(data)?;
    check_dims(&c, &d)?;
    let splits = splits_of(&c, &d)?;
    let spec = c.spec();
    let run = run_variant(c.variant, &splits, &spec.model_config(c.seed), &spec.train_config(c.seed, c.variant))?;

    save_checkpoint(&run.model, out)?;
    let mut files = vec![out.to_path_buf(), write(&sibling(out, ".history.csv"), run.history.to_csv())?];
    let report_csv = match &run.report {
        VariantReport::PerAnnotator(r) => r.to_csv(),
        VariantReport::Consensus(r) => r.to_csv(),
    };
    files.push(write(&sibling(out, ".report.csv"), report_csv)?);

    let best = run.history.best();
    println!(
        "variant {}: best epoch {} of {}, best val loss {:.6}, val avg acc {:.4}",
        c.variant,
        run.history.best_epoch,
        run.history.epochs.len(),
        best.val_loss,
        best.val_avg_acc
    );
    match &run.report {
        VariantReport::PerAnnotator(r) => print!("test split:\n{}", r.summary()),
        VariantReport::Consensus(r) => println!("test split: consensus accuracy {:.4}, F1 {:.4}", r.accuracy, r.f1),
    }

    let mut manifest = Manifest::new("train", Some(&c));
    manifest.arg("data", data.display()).arg("out", out.display()).input(&args.config)?.input(data)?;
    manifest.artifacts(parent(out), &files)?;
    manifest.write(&sibling(out, ".manifest.toml"))
}

pub struct EvalArgs {
    pub model: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub split: SplitPart,
    pub mode: Option<Mode>,
}

/// Reads integer labels, one row per sample; a non-numeric first row is a header.
fn read_predictions(path: &Path) -> Result<Vec<Vec<usize>>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let parsed: std::result::Result<Vec<usize>, _> = record.iter().map(|f| f.trim().parse::<usize>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(CliError::Validation(format!("{} row {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(rows)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let config = a.config.as_deref().map(|p| RunConfig::load(p, &a.overrides)).transpose()?;
    let data = load_dataset(&a.data)?;
    let subset = match a.split {
        SplitPart::All => data,
        part => {
            let c = config.as_ref().ok_or_else(|| CliError::Validation("--split other than all needs --config".into()))?;
            let s = splits_of(c, &data)?;
            match part {
                SplitPart::Train => s.train,
                SplitPart::Val => s.val,
                _ => s.test,
            }
        }
    };
    let mode = match a.mode {
        Some(Mode::Restricted) => ConsistencyMode::Restricted,
        Some(Mode::Full) => ConsistencyMode::Full,
        None => config.as_ref().map(|c| c.consistency_mode).unwrap_or_default(),
    };
    create_dir(&a.out)?;

    let mut manifest = Manifest::new("eval", config.as_ref());
    manifest.arg("data", a.data.display()).arg("split", format!("{:?}", a.split).to_lowercase()).arg("mode", format!("{mode:?}"));
    manifest.input(&a.data)?;
    if let Some(p) = &a.config {
        manifest.input(p)?;
    }

    let files = if let Some(model_path) = &a.model {
        manifest.input(model_path)?;
        let model = load_checkpoint(model_path)?;
        if model.variant().is_consensus() {
            let r = evaluate_consensus_model(&model, &subset)?;
            println!("consensus accuracy {:.4}, F1 {:.4} over {} samples", r.accuracy, r.f1, r.num_samples);
            vec![write(&a.out.join("consensus.csv"), r.to_csv())?]
        } else {
            let r = evaluate_with_mode(&model, &subset, mode)?;
            print!("{}", r.summary());
            println!("DIC {}", r.dic);
            write_eval(&r, &a.out)?
        }
    } else {
        let path = a.predictions.as_ref().expect("clap requires model or predictions");
        manifest.input(path)?;
        let preds = read_predictions(path)?;
        if preds.len() != subset.len() {
            return Err(CliError::Validation(format!("{} prediction rows for {} samples", preds.len(), subset.len())));
        }
        let r = evaluate_predictions(&preds, &subset, mode)?;
        print!("{}", r.summary());
        println!("DIC {}", r.dic);
        write_eval(&r, &a.out)?
    };
    manifest.artifacts(&a.out, &files)?;
    manifest.write(&a.out.join("manifest.toml"))
}

fn write_experiment(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let json = serde_json::to_string_pretty(report).map_err(|e| CliError::Validation(format!("report: {e}")))?;
    Ok(vec![
        write(&dir.join("report.csv"), report.to_csv())?,
        write(&dir.join("aggregates.csv"), report.aggregates_csv())?,
        write(&dir.join("report.json"), json)?,
        write(&dir.join("summary.txt"), report.summary())?,
    ])
}

pub fn ablate(args: &ConfigArgs, out: &Path) -> Result<()> {
    let c = load_config(args)?;
    let spec = tendency_core::harness::ExperimentSpec { sparsity_rates: vec![0.0], ..c.spec() };
    let report = run_experiment(&spec)?;
    create_dir(out)?;
    let mut files = write_experiment(&report, out)?;

    for r in &report.rows {
        println!("seed {:<4} {:<12} accuracy {:.4}", r.seed, r.variant.as_str(), r.accuracy());
    }
    if spec.variants.contains(&Variant::PooledPremv) && spec.variants.contains(&Variant::Full) {
        let mut csv = String::from("seed,r_pre,r_post\n");
        for &s in &spec.seeds {
            let pre = report.row(Variant::PooledPremv, s, 0.0).expect("row exists").accuracy();
            let post = match &report.row(Variant::Full, s, 0.0).expect("row exists").report {
                VariantReport::PerAnnotator(e) => e.copr_accuracy,
                VariantReport::Consensus(_) => unreachable!("full is per-annotator"),
            };
            println!("seed {s:<4} pre-mv {pre:.4} post-mv {post:.4}");
            csv.push_str(&format!("{s},{pre},{post}\n"));
        }
        files.push(write(&out.join("pre_post.csv"), csv)?);
    }
    print!("{}", report.summary());

    let mut manifest = Manifest::new("ablate", Some(&c));
    manifest.arg("out", out.display()).input(&args.config)?;
    manifest.artifacts(out, &files)?;
    manifest.write(&out.join("manifest.toml"))
}

pub fn sweep(args: &ConfigArgs, out: &Path, rates: Option<Vec<f64>>) -> Result<()> {
    let mut c = load_config(args)?;
    if let Some(r) = rates {
        c.sparsity_rates = r;
        c.validate()?;
    }
    let report = sparse_sweep(&c.spec(), &c.sparsity_rates)?;
    create_dir(out)?;
    let files = write_experiment(&report, out)?;
    for r in &report.rows {
        let drop = r.relative_drop.map(|d| format!("{:.2}%", 100.0 * d)).unwrap_or_default();
        println!("seed {:<4} {:<12} rate {:<4} accuracy {:.4} drop {drop}", r.seed, r.variant.as_str(), r.sparsity_rate, r.accuracy());
    }
    print!("{}", report.summary());

    let mut manifest = Manifest::new("sweep", Some(&c));
    manifest.arg("out", out.display()).input(&args.config)?;
    manifest.artifacts(out, &files)?;
    manifest.write(&out.join("manifest.toml"))
}

pub fn attn(model_path: &Path, data: &Path, out: &Path, limit: usize) -> Result<()> {
    let model = load_checkpoint(model_path)?;
    let d = load_dataset(data)?;
    let mut files = dump_attention(&model, &d, out, Some(limit))?;

    let mean = mean_attention(&model, &d)?;
    let rows: Vec<String> = mean.iter().map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")).collect();
    files.push(write(&out.join("mean_attention.csv"), rows.join("\n") + "\n")?);
    if d.profiles.is_some() {
        let rho = attention_fidelity(&model, &d)?;
        let mut csv = String::from("annotator,spearman\n");
        for (k, r) in rho.iter().enumerate() {
            csv.push_str(&format!("{},{r}\n", k + 1));
            println!("A_{} spearman {r:.4}", k + 1);
        }
        println!("mean spearman {:.4}", rho.iter().sum::<f64>() / rho.len() as f64);
        files.push(write(&out.join("fidelity.csv"), csv)?);
    }
    println!("wrote {} files to {}", files.len(), out.display());

    let mut manifest = Manifest::new("attn", None);
    manifest.arg("limit", limit).input(model_path)?.input(data)?;
    manifest.artifacts(out, &files)?;
    manifest.write(&out.join("manifest.toml"))
}

pub fn bench(model_path: &Path, data: &Path, repetitions: usize, out: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(model_path)?;
    let d = load_dataset(data)?;
    let r = efficiency_report(&model, &d, repetitions)?;
    println!("parameterCount {}", r.parameter_count);
    println!("meanInferenceSeconds {:e}", r.mean_inference_seconds);
    if let Some(dir) = out {
        create_dir(dir)?;
        let json = serde_json::to_string_pretty(&r).map_err(|e| CliError::Validation(format!("bench: {e}")))?;
        let files = vec![write(&dir.join("bench.json"), json)?];
        let mut manifest = Manifest::new("bench", None);
        manifest.arg("repetitions", repetitions).input(model_path)?.input(data)?;
        manifest.artifacts(dir, &files)?;
        manifest.write(&dir.join("manifest.toml"))?;
    }
    Ok(())
}
