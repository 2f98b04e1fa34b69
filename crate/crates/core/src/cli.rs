//! Command-line front end.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::kernel::{bench, packed_matmul};
use crate::matrix::Mat;
use crate::packfmt::{pack, packed_size_report, unpack, PackedModel, QuantizedLayer};
use crate::pipeline::{proxy_loss, quantize_layer, PipelineConfig};
use crate::quant_core::OneBitMode;
use crate::salience::{damp_and_invert, hessian_from_tokens, salience_map, salient_mask_3sigma};
use crate::sba::{output_kl, subsample_rows, KlConfig};
use crate::sqc::SqcConfig;
use crate::synth;
use crate::tensor_store::{read_tensor, write_tensor, CalibrationSet, DenseTensor};

#[derive(Debug, Parser)]
#[command(
    name = "slimq",
    version,
    about = "Mixed-precision post-training weight quantization"
)]
pub struct Cli {
    /// Worker threads for the parallel stages (defaults to all cores).
    #[arg(long, global = true, env = "SLIMQ_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize one weight matrix and write a packed SLMQ file.
    Quantize(QuantizeArgs),
    /// Recompute quality metrics of a packed file against the original weights.
    Eval(EvalArgs),
    /// Write per-channel and per-group salience tables as CSV.
    Inspect(InspectArgs),
    /// Multiply an SLMT input by a packed model's weights.
    Matmul(MatmulArgs),
    /// Time the packed and dense product paths.
    Bench(BenchArgs),
    /// Generate seeded synthetic weights and calibration data.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct KlArgs {
    #[arg(long, default_value_t = 1.0)]
    pub kl_temperature: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub kl_epsilon: f64,
    /// Cap on calibration tokens used for KL evaluation.
    #[arg(long, default_value_t = 4096)]
    pub kl_max_tokens: usize,
}

impl KlArgs {
    fn config(&self) -> KlConfig {
        KlConfig {
            temperature: self.kl_temperature,
            epsilon: self.kl_epsilon,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run report; defaults to the output path with a `.json` extension.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub bits: u8,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub percdamp: f64,
    #[arg(long)]
    pub no_sba: bool,
    #[arg(long)]
    pub no_sqc: bool,
    #[arg(long)]
    pub no_compensation: bool,
    /// Store 1-bit groups as signs times a per-row mean magnitude.
    #[arg(long)]
    pub binarize_1bit: bool,
    /// Quantize each group column by column with in-group compensation.
    #[arg(long)]
    pub inner_columnwise: bool,
    #[arg(long, default_value_t = 0.1)]
    pub gamma_lambda: f64,
    #[arg(long, default_value_t = 50)]
    pub gamma_steps: usize,
    /// Search one γ per row instead of one per group.
    #[arg(long)]
    pub per_row_gamma: bool,
    #[command(flatten)]
    pub kl: KlArgs,
    /// Include the full KL-versus-p search curve in the report.
    #[arg(long)]
    pub emit_curve: bool,
    /// Recorded in the report; quantization itself uses no randomness.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl QuantizeArgs {
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            group_size: self.group_size,
            bits: self.bits,
            percdamp: self.percdamp,
            sba: !self.no_sba,
            sqc: !self.no_sqc,
            compensation: !self.no_compensation,
            inner_columnwise: self.inner_columnwise,
            one_bit: if self.binarize_1bit {
                OneBitMode::Binarize
            } else {
                OneBitMode::Affine
            },
            kl: self.kl.config(),
            max_kl_tokens: self.kl.kl_max_tokens,
            sqc_cfg: SqcConfig {
                lambda: self.gamma_lambda,
                steps: self.gamma_steps,
                per_row_gamma: self.per_row_gamma,
                ..SqcConfig::default()
            },
            ..PipelineConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub packed: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub percdamp: f64,
    #[command(flatten)]
    pub kl: KlArgs,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub percdamp: f64,
    /// Directory receiving `channels.csv` and `groups.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatmulArgs {
    #[arg(long)]
    pub packed: PathBuf,
    /// SLMT input, `t × m` (a 1-D tensor is one token).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub packed: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fixture {
    /// Standard-normal activations.
    Gaussian,
    /// Three runs of 2–5 adjacent high-variance channels.
    Clustered,
    /// One channel with activations 100× the background.
    Outlier,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = Fixture::Clustered)]
    pub kind: Fixture,
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
    #[arg(long, default_value_t = 512)]
    pub cols: usize,
    #[arg(long, default_value_t = 1024)]
    pub tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_weights: PathBuf,
    #[arg(long)]
    pub out_calib: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        // a pool built earlier in the process (tests) is kept
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    match cli.command {
        Command::Quantize(a) => cmd_quantize(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::Matmul(a) => cmd_matmul(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

/// Deletes the listed files on drop unless disarmed.
struct Cleanup(Vec<PathBuf>);

impl Cleanup {
    fn disarm(mut self) {
        self.0.clear();
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        for p in &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn load_weights(path: &Path) -> Result<Mat<f64>> {
    let t = read_tensor(path)?;
    if t.dims().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "weights must be 2-D, got dims {:?}",
            t.dims()
        )));
    }
    t.to_matrix()
}

fn histogram_json(bits: &[u8]) -> Value {
    let mut h = serde_json::Map::new();
    for b in 1..=4u8 {
        h.insert(
            b.to_string(),
            json!(bits.iter().filter(|&&x| x == b).count()),
        );
    }
    Value::Object(h)
}

pub fn cmd_quantize(a: &QuantizeArgs) -> Result<()> {
    let t0 = Instant::now();
    let cfg = a.pipeline_config();
    cfg.validate()?;
    let w = load_weights(&a.weights)?;
    let calib = CalibrationSet::read(&a.calib)?;
    let t_load = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let res = quantize_layer(&w, &calib, &cfg)?;
    let t_quant = t1.elapsed().as_secs_f64();

    let (n, m) = w.shape();
    let layer = QuantizedLayer::from_result(&res, n, m, cfg.group_size, cfg.bits);
    let pm = pack(&layer)?;
    let size = packed_size_report(&pm);

    let mut gamma_hist = std::collections::BTreeMap::<String, usize>::new();
    for g in &res.gammas {
        *gamma_hist.entry(format!("{g:.4}")).or_default() += 1;
    }

    let mut plan = json!({
        "bits": res.plan.bits,
        "p_star": res.plan.p_star,
        "evaluations": res.plan.evaluations,
        "histogram": histogram_json(&res.plan.bits),
        "mean_bits": res.plan.mean_bits(),
    });
    if a.emit_curve {
        plan["kl_curve"] = json!(res.plan.kl_curve);
    }
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| a.out.with_extension("json"));
    let mut report = json!({
        "shape": [n, m],
        "config": {
            "group_size": cfg.group_size,
            "bits": cfg.bits,
            "percdamp": cfg.percdamp,
            "sba": cfg.sba,
            "sqc": cfg.sqc,
            "compensation": cfg.compensation,
            "inner_columnwise": cfg.inner_columnwise,
            "one_bit": cfg.one_bit,
            "gamma_lambda": cfg.sqc_cfg.lambda,
            "gamma_steps": cfg.sqc_cfg.steps,
            "per_row_gamma": cfg.sqc_cfg.per_row_gamma,
            "kl_temperature": cfg.kl.temperature,
            "kl_epsilon": cfg.kl.epsilon,
            "kl_max_tokens": cfg.max_kl_tokens,
            "seed": a.seed,
        },
        "calibration_tokens": calib.token_count(),
        "damp": res.damp,
        "plan": plan,
        "gammas": res.gammas,
        "gamma_histogram": gamma_hist,
        "mask_density": res.mask_density,
        "proxy_loss": res.proxy_loss,
        "recon_mse": res.recon_mse,
        "recon_kl": res.recon_kl,
        "size": size,
    });

    let guard = Cleanup(vec![a.out.clone(), report_path.clone()]);
    let t2 = Instant::now();
    pm.write(&a.out)?;
    let t_write = t2.elapsed().as_secs_f64();
    report["timing"] = json!({
        "load_s": t_load,
        "quantize_s": t_quant,
        "write_s": t_write,
        "total_s": t0.elapsed().as_secs_f64(),
    });
    write_json(&report_path, &report)?;
    guard.disarm();
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let pm = PackedModel::read(&a.packed)?;
    let w = load_weights(&a.weights)?;
    let calib = CalibrationSet::read(&a.calib)?;
    let layer = unpack(&pm)?;
    if (layer.n, layer.m) != w.shape() {
        return Err(Error::ShapeMismatch(format!(
            "packed model is {}x{}, weights are {:?}",
            layer.n,
            layer.m,
            w.shape()
        )));
    }
    if calib.channels() != layer.m {
        return Err(Error::ShapeMismatch(format!(
            "calibration has {} channels, model has {}",
            calib.channels(),
            layer.m
        )));
    }
    let kl = a.kl.config();
    kl.validate()?;
    let w_hat: Mat<f64> = layer.cast::<f64>().dequantized();
    let diff = w_hat.sub(&w)?;
    let elems = w.rows() * w.cols();
    let recon_mse = if elems == 0 {
        0.0
    } else {
        diff.frobenius_sq() / elems as f64
    };
    let x = calib.tokens::<f64>();
    let hs = damp_and_invert(&hessian_from_tokens(&x)?, a.percdamp)?;
    let proxy = proxy_loss(&w, &w_hat, &hs)?;
    let recon_kl = output_kl(&subsample_rows(&x, a.kl.kl_max_tokens), &w, &w_hat, &kl)?;
    let size = packed_size_report(&pm);
    let out = json!({
        "recon_mse": recon_mse,
        "proxy_loss": proxy,
        "recon_kl": recon_kl,
        "bits_per_weight": size.bits_per_weight,
        "bits_per_weight_padded": size.bits_per_weight_padded,
        "bit_histogram": histogram_json(&layer.bits),
        "size": size,
    });
    match &a.out {
        Some(p) => write_json(p, &out),
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &out)?;
            writeln!(stdout)?;
            Ok(())
        }
    }
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let w = load_weights(&a.weights)?;
    let calib = CalibrationSet::read(&a.calib)?;
    if calib.channels() != w.cols() {
        return Err(Error::ShapeMismatch(format!(
            "calibration has {} channels, weights have {}",
            calib.channels(),
            w.cols()
        )));
    }
    let x = calib.tokens::<f64>();
    let hs = damp_and_invert(&hessian_from_tokens(&x)?, a.percdamp)?;
    let sal = salience_map(&w, &hs, a.group_size, Default::default())?;

    let mut channels = String::from("channel,mean_salience\n");
    for (j, v) in sal.channel_mean.iter().enumerate() {
        channels.push_str(&format!("{j},{v:e}\n"));
    }
    let mut groups = String::from("group,mean_salience,mask_density\n");
    for (g, v) in sal.group_mean.iter().enumerate() {
        let mask = salient_mask_3sigma(&sal.group_block(g));
        let density = mask.iter().filter(|&&s| s).count() as f64 / mask.len().max(1) as f64;
        groups.push_str(&format!("{g},{v:e},{density}\n"));
    }
    fs::create_dir_all(&a.out_dir)?;
    let (cp, gp) = (a.out_dir.join("channels.csv"), a.out_dir.join("groups.csv"));
    let guard = Cleanup(vec![cp.clone(), gp.clone()]);
    fs::write(&cp, channels)?;
    fs::write(&gp, groups)?;
    guard.disarm();
    Ok(())
}

fn load_input(path: &Path) -> Result<Mat<f32>> {
    let t = read_tensor(path)?;
    match t.dims() {
        [m] => Mat::from_vec(1, *m, t.data().to_vec()),
        [_, _] => t.to_matrix(),
        d => Err(Error::ShapeMismatch(format!(
            "input must be 1-D or 2-D, got dims {d:?}"
        ))),
    }
}

pub fn cmd_matmul(a: &MatmulArgs) -> Result<()> {
    let pm = PackedModel::read(&a.packed)?;
    let x = load_input(&a.input)?;
    let y = packed_matmul(&pm, &x)?;
    let guard = Cleanup(vec![a.out.clone()]);
    write_tensor(&DenseTensor::from_matrix(&y)?, &a.out)?;
    guard.disarm();
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let pm = PackedModel::read(&a.packed)?;
    let x = load_input(&a.input)?;
    let report = bench(&pm, &x, a.repeats)?;
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &report)?;
    writeln!(stdout)?;
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.rows == 0 || a.cols == 0 || a.tokens == 0 {
        return Err(Error::InvalidConfig(
            "rows, cols and tokens must be positive".into(),
        ));
    }
    let mut rng = synth::rng(a.seed);
    let w = synth::gaussian(a.rows, a.cols, 1.0, &mut rng);
    let x = match a.kind {
        Fixture::Gaussian => synth::gaussian(a.tokens, a.cols, 1.0, &mut rng),
        Fixture::Clustered => {
            if a.cols < 32 {
                return Err(Error::InvalidConfig(
                    "clustered fixture needs at least 32 columns".into(),
                ));
            }
            synth::clustered_activations(a.tokens, a.cols, 3, synth::CLUSTER_SCALE, &mut rng).0
        }
        Fixture::Outlier => {
            use rand::Rng;
            let channel = rng.random_range(0..a.cols);
            synth::outlier_activations(a.tokens, a.cols, channel, 100.0, &mut rng)
        }
    };
    let guard = Cleanup(vec![a.out_weights.clone(), a.out_calib.clone()]);
    write_tensor(&DenseTensor::from_matrix(&w)?, &a.out_weights)?;
    write_tensor(&DenseTensor::from_matrix(&x)?, &a.out_calib)?;
    guard.disarm();
    Ok(())
}
