use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chiral_det::data::{
    gen_axial, gen_axial_torsion, gen_rs, load_manifest, read_chimol, write_dataset, LabeledMolecule,
    SyntheticSpec, MANIFEST, SPLITS,
};
use chiral_det::geometry::{
    assign_configuration, mirror, transform, Configuration, Molecule, Stereocenter, DEFAULT_DEGENERACY_TOL,
};
use chiral_det::gradcheck::{run_gradcheck, Block};
use chiral_det::model::{
    apply_config_text, embed, evaluate_accuracy, ensure_config, forward_pass, load_checkpoint,
    save_checkpoint, train_classifier, Checkpoint, ModelConfig, ModelParams, TrainConfig, Trainer,
};
use chiral_det::numerics::random_rotation;
use chiral_det::{CheckpointError, Error};

const EXIT_CHECK: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_NO_CHECKPOINT: u8 = 4;
const EXIT_CONFIG_MISMATCH: u8 = 5;
const EXIT_EMPTY_MANIFEST: u8 = 6;

/// Chirality-aware molecular representations from determinant kernels.
#[derive(Debug, Parser)]
#[command(name = "chiral-det", version)]
struct Cli {
    /// Seed for every random choice; overrides the `seed` config key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (meaning depends on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config file of key=value lines, or a preset name (`desk`, `tiny`).
    #[arg(long, global = true)]
    config: Option<String>,
    /// Print diagnostics to standard error.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the chirality product and R/S label of every chiral unit.
    Chirality {
        file: PathBuf,
    },
    /// Audit rigid-motion invariance and reflection sign flips.
    Invariance {
        file: PathBuf,
        /// Number of rigid motions and of reflections.
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Compare every backward pass against central finite differences.
    Gradcheck {
        /// Corrupt one block's analytic gradient (negative control).
        #[arg(long)]
        sabotage: Option<String>,
    },
    /// Write a synthetic labeled dataset with a manifest and splits.
    Gen {
        #[arg(long, value_enum, default_value_t = Task::Rs)]
        task: Task,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        min_spectators: usize,
        #[arg(long, default_value_t = 3)]
        max_spectators: usize,
        /// Redraw samples whose |chirality product| is below this (Å³).
        #[arg(long, default_value_t = 0.5)]
        min_abs_product: f64,
    },
    /// Train a classifier on a generated dataset directory.
    Train {
        /// Dataset directory with train.tsv and val.tsv.
        data: PathBuf,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print classification accuracy on a manifest.
    Eval {
        /// Manifest file, or a dataset directory (uses test.tsv).
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write one pooled embedding per molecule as comma-separated rows.
    Embed {
        /// ChiMol files or manifests (`.tsv`).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Trained model; a freshly initialized one is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep the torsion of an axially chiral molecule and compare embeddings.
    RotateAxis {
        file: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        step: f64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write final-layer head-averaged attention weights.
    Attn {
        file: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Task {
    /// Tetrahedral centers labeled R (0) or S (1).
    Rs,
    /// Biaryl-like axes labeled by the sign of the chirality product.
    Axial,
}

/// A failed command: message plus exit status.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn check(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_CHECK, msg: msg.into() }
    }

    fn input(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_INPUT, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Numeric(_)
            | Error::Degenerate { .. }
            | Error::Oracle { .. }
            | Error::Divergence { .. }
            | Error::Generation { .. } => EXIT_NUMERIC,
            Error::Checkpoint(CheckpointError::ConfigMismatch(_)) => EXIT_CONFIG_MISMATCH,
            _ => EXIT_INPUT,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

struct Ctx {
    seed: Option<u64>,
    out: Option<PathBuf>,
    config: Option<String>,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Model and training config from `--config` on top of `preset`, with
    /// `--seed` applied last.
    fn configs(&self, preset: ModelConfig) -> Result<(ModelConfig, TrainConfig), Failure> {
        let mut model = preset;
        let mut train = TrainConfig::default();
        match self.config.as_deref() {
            None => {}
            Some("desk") => model = ModelConfig::desk(),
            Some("tiny") => model = ModelConfig::tiny(),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("{path}: {e}")))?;
                apply_config_text(&text, &mut model, &mut train)
                    .map_err(|e| Failure::input(format!("{path}: {e}")))?;
            }
        }
        if let Some(seed) = self.seed {
            model.seed = seed;
        }
        model.validate()?;
        train.validate()?;
        Ok((model, train))
    }

    /// Checkpointed parameters, or a fresh model when `checkpoint` is `None`.
    fn model(&self, checkpoint: Option<&Path>) -> Result<ModelParams, Failure> {
        match checkpoint {
            Some(path) => Ok(self.load(path)?.params),
            None => Ok(ModelParams::new(&self.configs(ModelConfig::desk())?.0)?),
        }
    }

    fn load(&self, path: &Path) -> Result<Checkpoint, Failure> {
        if !path.exists() {
            return Err(Failure {
                code: EXIT_NO_CHECKPOINT,
                msg: format!("checkpoint {} not found", path.display()),
            });
        }
        let ck = load_checkpoint(path)?;
        if self.config.is_some() {
            // the seed only affects initialization
            let expected = ModelConfig { seed: ck.params.config.seed, ..self.configs(ModelConfig::desk())?.0 };
            ensure_config(&ck, &expected)?;
        }
        Ok(ck)
    }

    /// Writes to `--out` or standard output.
    fn emit(&self, text: &str) -> CmdResult {
        match &self.out {
            Some(path) => fs::write(path, text)
                .map_err(|e| Failure::input(format!("{}: {e}", path.display()))),
            None => {
                let mut stdout = std::io::stdout().lock();
                match stdout.write_all(text.as_bytes()) {
                    Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::input(e.to_string())),
                    _ => Ok(()),
                }
            }
        }
    }
}

fn load_nonempty(path: &Path) -> Result<Vec<LabeledMolecule>, Failure> {
    let data = load_manifest(path)?;
    if data.is_empty() {
        return Err(Failure {
            code: EXIT_EMPTY_MANIFEST,
            msg: format!("manifest {} lists no molecules", path.display()),
        });
    }
    Ok(data)
}

fn unit_name(center: &Stereocenter) -> String {
    match center {
        Stereocenter::Center(i) => format!("center {i}"),
        Stereocenter::Axis(a, b) => format!("axis {a}-{b}"),
    }
}

fn cmd_chirality(ctx: &Ctx, file: &Path) -> CmdResult {
    let mol = read_chimol(file)?;
    let mut out = String::new();
    for (i, (unit, p)) in mol.chiral_units().iter().zip(mol.chirality_products()).enumerate() {
        let label = assign_configuration(p, DEFAULT_DEGENERACY_TOL);
        writeln!(out, "unit {i}: P={p:+.6} {label}").unwrap();
        ctx.log(format!("unit {i} is {}", unit_name(&unit.center)));
    }
    if mol.chiral_units().is_empty() {
        eprintln!("warning: {} has no chiral units", file.display());
    }
    ctx.emit(&out)
}

fn random_motion(rng: &mut ChaCha8Rng) -> (chiral_det::numerics::Matrix, [f64; 3]) {
    let r = random_rotation(rng);
    let t = [0; 3].map(|_| rng.gen_range(-10.0..10.0));
    (r, t)
}

fn cmd_invariance(ctx: &Ctx, file: &Path, trials: usize) -> CmdResult {
    if trials == 0 {
        return Err(Failure::input("--trials must be at least 1"));
    }
    let mol = read_chimol(file)?;
    let base = mol.chirality_products();
    let labels: Vec<Configuration> = base
        .iter()
        .map(|&p| assign_configuration(p, DEFAULT_DEGENERACY_TOL))
        .collect();
    for (i, l) in labels.iter().enumerate() {
        if *l == Configuration::Degenerate {
            eprintln!("warning: unit {i} is Degenerate (P={:+.3e}); sign check skipped", base[i]);
        }
    }
    if base.is_empty() {
        eprintln!("warning: no chiral units to audit");
    }
    let base_seed = ctx.seed();
    let mut drift = 0.0_f64;
    let mut flips = 0usize;
    let mut flip_trials = 0usize;
    let mut offenders: Vec<u64> = Vec::new();
    for t in 0..trials as u64 {
        let seed = base_seed.wrapping_add(t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, tr) = random_motion(&mut rng);
        let moved = transform(&mol, &r, tr)?;
        let (r2, tr2) = random_motion(&mut rng);
        let reflected = mirror(&transform(&mol, &r2, tr2)?);
        let mut ok = true;
        for (i, (p, q)) in base.iter().zip(moved.chirality_products()).enumerate() {
            if labels[i] == Configuration::Degenerate {
                continue;
            }
            let d = (q - p).abs() / p.abs();
            drift = drift.max(d);
            ok &= d < 1e-9;
        }
        for (i, q) in reflected.chirality_products().into_iter().enumerate() {
            if labels[i] == Configuration::Degenerate {
                continue;
            }
            flip_trials += 1;
            if assign_configuration(q, DEFAULT_DEGENERACY_TOL) == labels[i].opposite() {
                flips += 1;
            } else {
                ok = false;
            }
        }
        if !ok {
            offenders.push(seed);
        }
    }
    let rate = if flip_trials == 0 {
        "n/a".to_string()
    } else {
        format!("{:.2}%", 100.0 * flips as f64 / flip_trials as f64)
    };
    let passed = offenders.is_empty();
    ctx.emit(&format!(
        "trials={trials} max_rel_drift={drift:.3e} flip_rate={rate} {}\n",
        if passed { "PASS" } else { "FAIL" }
    ))?;
    if passed {
        Ok(())
    } else {
        let seeds: Vec<String> = offenders.iter().take(10).map(|s| s.to_string()).collect();
        Err(Failure::check(format!("violations at transform seeds {}", seeds.join(", "))))
    }
}

fn cmd_gradcheck(ctx: &Ctx, sabotage: Option<&str>) -> CmdResult {
    let sabotage = sabotage.map(str::parse::<Block>).transpose()?;
    let (config, _) = ctx.configs(ModelConfig::tiny())?;
    let seed = ctx.seed.unwrap_or(1);
    let reports = run_gradcheck(&config, seed, sabotage)?;
    let mut out = String::new();
    for r in &reports {
        writeln!(out, "{r}").unwrap();
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.block.name()).collect();
    writeln!(out, "{}", if failed.is_empty() { "PASS" } else { "FAIL" }).unwrap();
    ctx.emit(&out)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::check(format!("failing blocks: {}", failed.join(", "))))
    }
}

fn cmd_gen(ctx: &Ctx, task: Task, spec: SyntheticSpec) -> CmdResult {
    let out = ctx.out.clone().ok_or_else(|| Failure::input("gen needs --out <dir>"))?;
    let data = match task {
        Task::Rs => gen_rs(&spec)?,
        Task::Axial => gen_axial(&spec)?,
    };
    write_dataset(&out, &data)?;
    let positives = data.iter().filter(|s| s.label == 0).count();
    println!(
        "wrote {} molecules ({} class 0, {} class 1) to {}",
        data.len(),
        positives,
        data.len() - positives,
        out.display()
    );
    Ok(())
}

fn cmd_train(ctx: &Ctx, dir: &Path, epochs: Option<usize>) -> CmdResult {
    let out = ctx.out.clone().ok_or_else(|| Failure::input("train needs --out <dir>"))?;
    let (model, mut train_cfg) = ctx.configs(ModelConfig::desk())?;
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    train_cfg.validate()?;
    let train = load_nonempty(&dir.join(SPLITS[0]))?;
    let val_path = dir.join(SPLITS[1]);
    let val = if val_path.exists() { load_manifest(&val_path)? } else { Vec::new() };
    if let Some(bad) = train.iter().chain(&val).find(|s| s.label >= model.n_classes) {
        return Err(Failure::input(format!("label {} of `{}` exceeds n_classes", bad.label, bad.mol.id())));
    }
    fs::create_dir_all(&out).map_err(|e| Failure::input(format!("{}: {e}", out.display())))?;
    let metrics_path = out.join("metrics.log");
    let mut metrics = fs::File::create(&metrics_path)
        .map_err(|e| Failure::input(format!("{}: {e}", metrics_path.display())))?;
    ctx.log(format!("training on {} molecules, validating on {}", train.len(), val.len()));
    let mut trainer = Trainer::new(ModelParams::new(&model)?, train_cfg.clone())?;
    let mut write_err = None;
    train_classifier(&mut trainer, &train, &val, &mut |r| {
        println!("{r}");
        if let Err(e) = writeln!(metrics, "{r}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Failure::input(format!("{}: {e}", metrics_path.display())));
    }
    let ck_path = out.join("model.ckpt");
    let ck = Checkpoint { params: trainer.params, adam: trainer.adam, train: train_cfg };
    save_checkpoint(&ck_path, &ck)?;
    println!("checkpoint={}", ck_path.display());
    Ok(())
}

fn cmd_eval(ctx: &Ctx, data: &Path, checkpoint: &Path) -> CmdResult {
    let manifest = if data.is_dir() { data.join(SPLITS[2]) } else { data.to_path_buf() };
    let params = ctx.load(checkpoint)?.params;
    let samples = load_nonempty(&manifest)?;
    let acc = evaluate_accuracy(&params, &samples)?;
    ctx.emit(&format!("accuracy={acc:.4} n={}\n", samples.len()))
}

fn read_inputs(inputs: &[PathBuf]) -> Result<Vec<Molecule>, Failure> {
    let mut mols = Vec::new();
    for path in inputs {
        if path.extension().is_some_and(|e| e == "tsv") {
            mols.extend(load_nonempty(path)?.into_iter().map(|s| s.mol));
        } else if path.is_dir() {
            mols.extend(load_nonempty(&path.join(MANIFEST))?.into_iter().map(|s| s.mol));
        } else {
            mols.push(read_chimol(path)?);
        }
    }
    Ok(mols)
}

/// Quotes a field containing a comma, quote or newline.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_embed(ctx: &Ctx, inputs: &[PathBuf], checkpoint: Option<&Path>) -> CmdResult {
    let params = ctx.model(checkpoint)?;
    let mols = read_inputs(inputs)?;
    let h = params.config.h;
    let mut out = String::from("id");
    for k in 0..h {
        write!(out, ",e{k}").unwrap();
    }
    out.push('\n');
    let rows: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        mols.par_iter().map(|m| embed(&params, m)).collect::<Result<_, _>>()?
    };
    for (m, row) in mols.iter().zip(rows) {
        out.push_str(&csv_field(m.id()));
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    ctx.emit(&out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn cmd_rotate_axis(ctx: &Ctx, file: &Path, step: f64, checkpoint: Option<&Path>) -> CmdResult {
    let base = read_chimol(file)?;
    let conformers = gen_axial_torsion(&base, step)?;
    let params = ctx.model(checkpoint)?;
    let axis = base
        .chiral_units()
        .iter()
        .position(|u| u.center.is_axis())
        .expect("sweep checked for an axis unit");
    let embeddings = conformers
        .iter()
        .map(|c| embed(&params, c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = String::from("angle_deg,cosine_similarity,product_sign\n");
    for (k, (conf, e)) in conformers.iter().zip(&embeddings).enumerate() {
        let p = conf.chirality_products()[axis];
        let sign = match assign_configuration(p, DEFAULT_DEGENERACY_TOL) {
            Configuration::R => 1,
            Configuration::S => -1,
            Configuration::Degenerate => 0,
        };
        writeln!(out, "{},{:.9},{sign}", k as f64 * step, cosine(e, &embeddings[0])).unwrap();
    }
    ctx.emit(&out)
}

fn cmd_attn(ctx: &Ctx, file: &Path, checkpoint: Option<&Path>) -> CmdResult {
    let mol = read_chimol(file)?;
    let params = ctx.model(checkpoint)?;
    let pass = forward_pass(&params, &mol)?;
    let Some(weights) = pass.final_attention() else {
        return Err(Failure::input(format!("`{}` has no key atoms to attend to", mol.id())));
    };
    let mut out = String::from("query");
    for k in pass.encoded.key_atoms() {
        write!(out, ",atom{k}").unwrap();
    }
    out.push('\n');
    let queries = std::iter::once("token".to_string()).chain(pass.encoded.units.iter().map(|u| match u.center {
        Stereocenter::Center(i) => format!("center{i}"),
        Stereocenter::Axis(a, b) => format!("axis{a}-{b}"),
    }));
    for (i, q) in queries.enumerate() {
        out.push_str(&q);
        for v in weights.row(i) {
            write!(out, ",{v:.9}").unwrap();
        }
        out.push('\n');
    }
    ctx.emit(&out)
}

fn run(cli: Cli) -> CmdResult {
    let ctx = Ctx { seed: cli.seed, out: cli.out, config: cli.config, verbose: cli.verbose };
    match cli.command {
        Command::Chirality { file } => cmd_chirality(&ctx, &file),
        Command::Invariance { file, trials } => cmd_invariance(&ctx, &file, trials),
        Command::Gradcheck { sabotage } => cmd_gradcheck(&ctx, sabotage.as_deref()),
        Command::Gen { task, count, min_spectators, max_spectators, min_abs_product } => {
            if min_spectators > max_spectators {
                return Err(Failure::input("--min-spectators exceeds --max-spectators"));
            }
            let spec = SyntheticSpec {
                count,
                spectators: min_spectators..=max_spectators,
                min_abs_product,
                seed: ctx.seed(),
                ..SyntheticSpec::default()
            };
            cmd_gen(&ctx, task, spec)
        }
        Command::Train { data, epochs } => cmd_train(&ctx, &data, epochs),
        Command::Eval { data, checkpoint } => cmd_eval(&ctx, &data, &checkpoint),
        Command::Embed { inputs, checkpoint } => cmd_embed(&ctx, &inputs, checkpoint.as_deref()),
        Command::RotateAxis { file, step, checkpoint } => cmd_rotate_axis(&ctx, &file, step, checkpoint.as_deref()),
        Command::Attn { file, checkpoint } => cmd_attn(&ctx, &file, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
