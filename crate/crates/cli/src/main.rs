use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use partforge::dataset::{load_dataset, Dataset, Split};
use partforge::oracle::{run_suite, SUITES};
use partforge::pipeline::{
    encode_with_banks, group_images, learn_parts, load_banks, run_classification, run_retrieval, save_assignment,
    save_banks, save_encodings, visualize_parts, write_rankings, RunConfig,
};
use partforge::synth::{synth_generate, SynthParams};

#[derive(Parser)]
#[command(name = "partforge", version, about = "Unsupervised discriminative part learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted parts
    Synth(SynthArgs),
    /// Load and check a manifest and every file it references
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Balanced grouping of one split
    Group {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = SPLITS)]
        split: Option<String>,
    },
    /// Learn part banks and save them under <out-dir>/banks
    Learn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = SPLITS)]
        split: Option<String>,
        /// Also write every binary assignment matrix
        #[arg(long)]
        save_assignments: bool,
    },
    /// Encode images with previously learned banks
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        banks: PathBuf,
        /// Only encode this split (default: every image)
        #[arg(long, value_parser = SPLITS)]
        split: Option<String>,
    },
    /// Learn on train, evaluate a linear SVM on test
    Classify {
        #[command(flatten)]
        common: Common,
    },
    /// Learn on the database, rank it for every query
    Retrieve {
        #[command(flatten)]
        common: Common,
        /// Write one ranked id list per query under <out-dir>/rankings
        #[arg(long)]
        dump_rankings: bool,
        /// Leave junk-listed database images out of part learning
        #[arg(long)]
        exclude_junk: bool,
    },
    /// Top-scoring (part, region) pairs of one image
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        banks: PathBuf,
        #[arg(long)]
        image: String,
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Run a seeded cross-check suite: lda, ap, assignment or all
    Oracle {
        suite: String,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

const SPLITS: [&str; 4] = ["train", "test", "database", "query"];

/// Flags shared by the pipeline commands. Each one mirrors a config key
/// and overrides the value from `--config`.
#[derive(Args)]
struct Common {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Flat JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, value_parser = ["isa", "huna"])]
    solver: Option<String>,
    #[arg(long, value_parser = ["bop", "sbop", "pcop", "wpcop"])]
    encoding: Option<String>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    parts: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_parser = ["unsupervised", "supervised"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["greedy", "iterative"])]
    grouping: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "synth")]
    out_dir: PathBuf,
    /// JSON file with generator parameters; flags below override it
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, value_parser = ["classification", "retrieval"])]
    task: Option<String>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    images_per_group: Option<usize>,
    #[arg(long)]
    held_out_per_group: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    descriptor_dim: Option<usize>,
    #[arg(long)]
    planted: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    junk_per_group: Option<usize>,
    #[arg(long)]
    orthogonal: bool,
}

struct Failure {
    kind: String,
    message: String,
}

impl From<partforge::Error> for Failure {
    fn from(e: partforge::Error) -> Self {
        Failure {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        kind: "UsageError".into(),
        message: message.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_json_object(path: &Path) -> CliResult<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        kind: "IoFailure".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(usage(format!("{} is not a JSON object", path.display()))),
        Err(e) => Err(Failure {
            kind: "ParseError".into(),
            message: format!("{}: {e}", path.display()),
        }),
    }
}

fn insert<T: Into<Value>>(m: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        m.insert(key.to_string(), v.into());
    }
}

fn run_config(c: &Common) -> CliResult<RunConfig> {
    let mut m = match &c.config {
        Some(p) => read_json_object(p)?,
        None => Map::new(),
    };
    insert(&mut m, "seed", c.seed);
    insert(&mut m, "solver", c.solver.clone());
    insert(&mut m, "encoding", c.encoding.clone());
    insert(&mut m, "groups", c.groups);
    insert(&mut m, "parts", c.parts);
    insert(&mut m, "dim", c.dim);
    insert(&mut m, "mode", c.mode.clone());
    insert(&mut m, "grouping", c.grouping.clone());
    serde_json::from_value(Value::Object(m)).map_err(|e| Failure {
        kind: "ConfigInvalid".into(),
        message: e.to_string(),
    })
}

fn dataset(c: &Common) -> CliResult<Dataset> {
    let path = c.manifest.as_ref().ok_or_else(|| usage("--manifest is required"))?;
    Ok(load_dataset(path)?)
}

fn parse_split(s: &str) -> Split {
    match s {
        "train" => Split::Train,
        "test" => Split::Test,
        "database" => Split::Database,
        _ => Split::Query,
    }
}

/// Images to learn on: the requested split, else train, else database.
fn learning_split(ds: &Dataset, split: Option<&str>) -> CliResult<Vec<usize>> {
    let idx = match split {
        Some(s) => ds.manifest.indices_in(parse_split(s)),
        None => {
            let train = ds.manifest.indices_in(Split::Train);
            if train.is_empty() {
                ds.manifest.indices_in(Split::Database)
            } else {
                train
            }
        }
    };
    if idx.is_empty() {
        return Err(usage("no images in the learning split"));
    }
    Ok(idx)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        kind: "IoFailure".into(),
        message: format!("{}: {e}", dir.display()),
    })
}

fn write_json(path: &Path, v: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).expect("json value serializes");
    fs::write(path, text).map_err(|e| Failure {
        kind: "IoFailure".into(),
        message: format!("{}: {e}", path.display()),
    })
}

fn ids(ds: &Dataset) -> Vec<String> {
    ds.manifest.images.iter().map(|r| r.id.clone()).collect()
}

fn synth(a: &SynthArgs) -> CliResult<Value> {
    let mut m = match &a.params {
        Some(p) => read_json_object(p)?,
        None => Map::new(),
    };
    insert(&mut m, "task", a.task.clone());
    insert(&mut m, "groups", a.groups);
    insert(&mut m, "images_per_group", a.images_per_group);
    insert(&mut m, "held_out_per_group", a.held_out_per_group);
    insert(&mut m, "regions_per_image", a.regions);
    insert(&mut m, "dim", a.descriptor_dim);
    insert(&mut m, "planted_per_group", a.planted);
    insert(&mut m, "noise", a.noise);
    insert(&mut m, "distractors", a.distractors);
    insert(&mut m, "junk_per_group", a.junk_per_group);
    if a.orthogonal {
        m.insert("orthogonal".into(), Value::Bool(true));
    }
    let params: SynthParams = serde_json::from_value(Value::Object(m)).map_err(|e| Failure {
        kind: "ParamInvalid".into(),
        message: e.to_string(),
    })?;
    let (manifest, truth) = synth_generate(&params, a.seed, &a.out_dir)?;
    Ok(json!({
        "manifest": manifest,
        "truth": a.out_dir.join("truth.json"),
        "images": truth.images.len(),
        "seed": a.seed,
    }))
}

fn validate(manifest: &Path) -> CliResult<Value> {
    let ds = load_dataset(manifest)?;
    let mut splits = Map::new();
    for (name, split) in [
        ("train", Split::Train),
        ("test", Split::Test),
        ("database", Split::Database),
        ("query", Split::Query),
    ] {
        splits.insert(name.into(), ds.manifest.indices_in(split).len().into());
    }
    Ok(json!({
        "valid": true,
        "images": ds.len(),
        "descriptor_dim": ds.manifest.descriptor_dim,
        "global_dim": ds.manifest.global_dim,
        "regions_per_image": ds.manifest.regions_per_image,
        "splits": splits,
        "junk_queries": ds.manifest.junk.len(),
    }))
}

fn group(c: &Common, split: Option<&str>) -> CliResult<Value> {
    let cfg = run_config(c)?;
    let ds = dataset(c)?;
    let learning = learning_split(&ds, split)?;
    let partition = group_images(&ds, &cfg, &learning)?;
    let out = partition.to_json(&ids(&ds));
    ensure_dir(&c.out_dir)?;
    write_json(&c.out_dir.join("partition.json"), &out)?;
    Ok(json!({ "partition": c.out_dir.join("partition.json"), "sizes": partition.sizes() }))
}

fn learn(c: &Common, split: Option<&str>, save_a: bool) -> CliResult<Value> {
    let cfg = run_config(c)?;
    let ds = dataset(c)?;
    let ds = partforge::pipeline::prepare_dataset(&ds, &cfg);
    let learning = learning_split(&ds, split)?;
    let learned = learn_parts(&ds, &cfg, &learning)?;
    let banks_dir = c.out_dir.join("banks");
    save_banks(&learned, &cfg, &ds, &banks_dir)?;
    if save_a {
        let dir = c.out_dir.join("assignments");
        ensure_dir(&dir)?;
        for (k, a) in learned.assignments.iter().enumerate() {
            save_assignment(a, k, dir.join(format!("group_{k:03}.dmx")))?;
        }
    }
    Ok(json!({
        "banks": banks_dir,
        "K": learned.banks.len(),
        "P": cfg.parts,
        "objectives": learned.objectives,
    }))
}

fn encode(c: &Common, banks_dir: &Path, split: Option<&str>) -> CliResult<Value> {
    let cfg = run_config(c)?;
    let ds = dataset(c)?;
    let ds = partforge::pipeline::prepare_dataset(&ds, &cfg);
    let (banks, meta) = load_banks(banks_dir)?;
    let learning: Vec<usize> = meta
        .learning
        .iter()
        .map(|id| {
            ds.manifest
                .index_of(id)
                .ok_or_else(|| Failure::from(partforge::Error::UnknownImage(id.clone())))
        })
        .collect::<CliResult<_>>()?;
    let indices: Vec<usize> = match split {
        Some(s) => ds.manifest.indices_in(parse_split(s)),
        None => (0..ds.len()).collect(),
    };
    let set = encode_with_banks(&ds, &banks, &learning, &cfg, &indices)?;
    ensure_dir(&c.out_dir)?;
    let path = c.out_dir.join("encodings.dmx");
    save_encodings(&set, &path)?;
    Ok(json!({
        "encodings": path,
        "encoding": set.kind.as_str(),
        "d_prime": set.d_prime,
        "images": set.ids.len(),
        "dim": set.vectors.first().map(|v| v.dim()).unwrap_or(0),
    }))
}

fn classify_cmd(c: &Common) -> CliResult<Value> {
    let cfg = run_config(c)?;
    let ds = dataset(c)?;
    let out = run_classification(&ds, &cfg)?;
    ensure_dir(&c.out_dir)?;
    let report = serde_json::to_value(&out.report).expect("report serializes");
    write_json(&c.out_dir.join("report.json"), &report)?;
    let predictions: Map<String, Value> = out
        .test_ids
        .iter()
        .cloned()
        .zip(out.predicted.iter().map(|p| Value::String(p.clone())))
        .collect();
    write_json(&c.out_dir.join("predictions.json"), &Value::Object(predictions))?;
    let ds = partforge::pipeline::prepare_dataset(&ds, &cfg);
    save_banks(&out.learned, &cfg, &ds, c.out_dir.join("banks"))?;
    Ok(report)
}

fn retrieve_cmd(c: &Common, dump: bool, exclude_junk: bool) -> CliResult<Value> {
    let mut cfg = run_config(c)?;
    if exclude_junk {
        cfg.junk_in_learning = false;
    }
    let ds = dataset(c)?;
    let out = run_retrieval(&ds, &cfg)?;
    ensure_dir(&c.out_dir)?;
    let report = serde_json::to_value(&out.report).expect("report serializes");
    write_json(&c.out_dir.join("report.json"), &report)?;
    if dump {
        write_rankings(&out.rankings, c.out_dir.join("rankings"))?;
    }
    let ds = partforge::pipeline::prepare_dataset(&ds, &cfg);
    save_banks(&out.learned, &cfg, &ds, c.out_dir.join("banks"))?;
    Ok(report)
}

fn viz(c: &Common, banks_dir: &Path, image: &str, top_n: Option<usize>) -> CliResult<Value> {
    let cfg = run_config(c)?;
    let ds = dataset(c)?;
    let ds = partforge::pipeline::prepare_dataset(&ds, &cfg);
    let (banks, _) = load_banks(banks_dir)?;
    let ann = visualize_parts(&ds, &banks, image, top_n.unwrap_or(cfg.top_n))?;
    let v = serde_json::to_value(&ann).expect("annotation serializes");
    ensure_dir(&c.out_dir)?;
    write_json(&c.out_dir.join(format!("viz_{image}.json")), &v)?;
    Ok(v)
}

/// Returns the reports and whether every suite passed.
fn oracle(suite: &str, cases: usize, seed: u64, out_dir: Option<&Path>) -> CliResult<(Value, bool)> {
    let suites: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite] };
    let mut reports = Vec::new();
    let mut passed = true;
    for s in suites {
        let r = run_suite(s, cases, seed)?;
        passed &= r.passed;
        reports.push(serde_json::to_value(&r).expect("report serializes"));
    }
    let v = if reports.len() == 1 {
        reports.remove(0)
    } else {
        Value::Array(reports)
    };
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        write_json(&dir.join(format!("oracle_{suite}.json")), &v)?;
    }
    Ok((v, passed))
}

fn run(cli: Cli) -> CliResult<(Value, bool)> {
    let ok = |v: Value| Ok((v, true));
    match &cli.command {
        Command::Synth(a) => ok(synth(a)?),
        Command::Validate { manifest } => ok(validate(manifest)?),
        Command::Group { common, split } => ok(group(common, split.as_deref())?),
        Command::Learn {
            common,
            split,
            save_assignments,
        } => ok(learn(common, split.as_deref(), *save_assignments)?),
        Command::Encode { common, banks, split } => ok(encode(common, banks, split.as_deref())?),
        Command::Classify { common } => ok(classify_cmd(common)?),
        Command::Retrieve {
            common,
            dump_rankings,
            exclude_junk,
        } => ok(retrieve_cmd(common, *dump_rankings, *exclude_junk)?),
        Command::Viz {
            common,
            banks,
            image,
            top_n,
        } => ok(viz(common, banks, image, *top_n)?),
        Command::Oracle {
            suite,
            cases,
            seed,
            out_dir,
        } => oracle(suite, *cases, *seed, out_dir.as_deref()),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("UsageError", e.to_string().trim_end(), 2),
    };
    match run(cli) {
        Ok((v, passed)) => {
            // a closed pipe on stdout is not worth a panic
            let _ = writeln!(
                std::io::stdout(),
                "{}",
                serde_json::to_string_pretty(&v).expect("json value serializes")
            );
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
        Err(f) => fail(&f.kind, &f.message, 1),
    }
}
