//! `sigmanet` command line. Each subcommand reads its inputs, calls the
//! library and writes files; nothing here computes anything the library
//! does not expose.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use super::{decode_checkpoint, decode_images, decode_params, encode_checkpoint, encode_images, encode_params, read_krd, write_krd};
use crate::datasim::{estimate_sensitivities, estimate_sensitivities_volume, make_mask, make_phantom_volume, PhantomSpec};
use crate::domain::{parse_key_values, seeded_rng, substream, ForegroundMask, KSpaceVolume, RealImage, RunConfig, SamplingMask, SensitivitySet, Variant};
use crate::error::{Error, Result};
use crate::evalens::{ensemble, metrics_csv, volume_metrics, volume_window, write_png, EnsembleInputs};
use crate::learn::{examples_from_volume, finetune, prepare_finetune, stl_apply, stl_train, train, train_log_csv, Example};
use crate::operators::ForwardOperator;
use crate::unrolled::{reconstruct_image, UnrolledModel};

#[derive(Debug, Parser)]
#[command(name = "sigmanet", version, about = "Unrolled parallel-MRI reconstruction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random draw; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` file (phantom spec for `simulate`, run config elsewhere).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for slice-parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Simulate a phantom volume: `kspace.krd` (with true maps) and `truth.rim`.
    Simulate {
        #[arg(long, default_value_t = 1)]
        slices: usize,
    },
    /// Draw a line mask and write it as `key = value` text.
    Mask {
        #[arg(long)]
        pe: usize,
        #[arg(long = "R", alias = "r")]
        r: f64,
        #[arg(long)]
        acl: usize,
    },
    /// Estimate sensitivities from the calibration lines; writes the KRD with maps attached.
    Sens {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        n_maps: Option<usize>,
    },
    /// Reconstruct every slice: `recon.rim`, PNGs, and `metrics.csv` given a reference.
    Recon {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Undersample the input with this mask first.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Supervised training on a fully sampled volume; writes `model.snc` and `train_log.csv`.
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Mask file; drawn from `acceleration`/`acl` when absent.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Write the initial model with all denoiser weights zero, without training.
        #[arg(long)]
        zero_init: bool,
    },
    /// Semi-supervised finetuning on an undersampled volume; writes `model.snc` and `finetune_log.csv`.
    Finetune {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the style-transfer layer; writes `stl.dnp`, `stl_log.csv` and `styled.rim`.
    Stl {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Apply an existing layer instead of training one.
        #[arg(long)]
        apply: Option<PathBuf>,
    },
    /// Combine SN-mean, PCN and finetuned SN stacks under a foreground mask stack.
    Ensemble {
        #[arg(long)]
        sn: PathBuf,
        #[arg(long)]
        pcn: PathBuf,
        #[arg(long)]
        ft: PathBuf,
        /// Image stack, nonzero pixels are foreground.
        #[arg(long)]
        mask: PathBuf,
    },
    /// NMSE / PSNR / SSIM of an image stack against a reference stack.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value = "recon")]
        name: String,
        /// Also write windowed PNGs into this directory.
        #[arg(long)]
        png: Option<PathBuf>,
    },
}

/// Parse `argv` (including the program name), run, and return the exit code:
/// 0 success, 1 usage error, 2 data error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

fn usage<T>(msg: impl Into<String>) -> std::result::Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn out_path(c: &Common) -> std::result::Result<&Path, Failure> {
    match &c.out {
        Some(p) => Ok(p),
        None => usage("--out is required for this subcommand"),
    }
}

fn out_dir(c: &Common) -> std::result::Result<&Path, Failure> {
    let p = out_path(c)?;
    fs::create_dir_all(p).map_err(Error::from)?;
    Ok(p)
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn read_images(p: &Path) -> Result<Vec<RealImage>> {
    decode_images(&fs::read(p)?)
}

fn write_images(p: &Path, images: &[RealImage]) -> Result<()> {
    fs::write(p, encode_images(images)?)?;
    Ok(())
}

fn read_model(p: &Path) -> Result<UnrolledModel> {
    decode_checkpoint(&fs::read(p)?)
}

pub fn mask_text(mask: &SamplingMask) -> String {
    let lines: String = mask.flags().iter().map(|&f| if f { '1' } else { '0' }).collect();
    format!(
        "# {} of {} lines sampled\npe = {}\nacl = {}\nr = {}\nlines = {lines}\n",
        mask.flagged_count(),
        mask.pe_lines(),
        mask.pe_lines(),
        mask.acl_count(),
        mask.nominal_r()
    )
}

pub fn parse_mask(text: &str) -> Result<SamplingMask> {
    let (mut acl, mut r, mut lines) = (None, None, None);
    for e in parse_key_values(text)? {
        let bad = || Error::Config {
            line: e.line,
            msg: format!("bad value {:?} for `{}`", e.value, e.key),
        };
        match e.key.as_str() {
            "pe" => {}
            "acl" => acl = Some(e.value.parse::<usize>().map_err(|_| bad())?),
            "r" => r = Some(e.value.parse::<f64>().map_err(|_| bad())?),
            "lines" => {
                lines = Some(
                    e.value
                        .chars()
                        .map(|c| match c {
                            '0' => Ok(false),
                            '1' => Ok(true),
                            _ => Err(bad()),
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            other => {
                return Err(Error::Config {
                    line: e.line,
                    msg: format!("unknown mask key `{other}`"),
                })
            }
        }
    }
    let missing = |k: &str| Error::Config { line: 0, msg: format!("mask file lacks `{k}`") };
    SamplingMask::new(lines.ok_or_else(|| missing("lines"))?, acl.ok_or_else(|| missing("acl"))?, r.ok_or_else(|| missing("r"))?)
}

fn read_mask(p: &Path) -> Result<SamplingMask> {
    parse_mask(&fs::read_to_string(p)?)
}

/// Per-slice SN operators: the file's maps if present, otherwise maps
/// estimated from each slice's own calibration lines.
fn operators(model: &UnrolledModel, volume: &KSpaceVolume, sens: Option<&SensitivitySet>) -> Result<Vec<ForwardOperator>> {
    volume
        .slices()
        .iter()
        .map(|y| {
            let est;
            let s = match (model.variant, sens) {
                (Variant::Pcn, _) => None,
                (Variant::Sn, Some(s)) => Some(s),
                (Variant::Sn, None) => {
                    est = estimate_sensitivities(y, volume.mask().acl_range(), model.channels())?;
                    Some(&est)
                }
            };
            model.operator(volume.coil_count(), volume.shape(), s, volume.mask())
        })
        .collect()
}

fn execute(cli: Cli) -> std::result::Result<(), Failure> {
    let c = &cli.common;
    if c.threads == 0 {
        return usage("--threads must be >= 1");
    }
    // the global pool can only be set once per process; later calls keep the first
    let _ = rayon::ThreadPoolBuilder::new().num_threads(c.threads).build_global();
    match &cli.cmd {
        Cmd::Simulate { slices } => {
            let spec = match &c.config {
                Some(p) => PhantomSpec::parse(&fs::read_to_string(p).map_err(Error::from)?)?,
                None => PhantomSpec::shepp_logan(64, 64, 4),
            };
            let dir = out_dir(c)?;
            let ph = make_phantom_volume(&spec, *slices, c.seed.unwrap_or(0))?;
            write_krd(&dir.join("kspace.krd"), &ph.kspace, Some(&ph.sens))?;
            write_images(&dir.join("truth.rim"), &ph.references())?;
            info!("simulated {slices} slices into {}", dir.display());
        }
        Cmd::Mask { pe, r, acl } => {
            let mask = make_mask(*pe, *r, *acl, &mut seeded_rng(c.seed.unwrap_or(0)))?;
            let text = mask_text(&mask);
            match &c.out {
                Some(p) => fs::write(p, &text).map_err(Error::from)?,
                None => print!("{text}"),
            }
            println!("{} of {} lines sampled", mask.flagged_count(), mask.pe_lines());
        }
        Cmd::Sens { input, n_maps } => {
            let cfg = run_config(c)?;
            let (volume, _) = read_krd(input)?;
            let sens = estimate_sensitivities_volume(&volume, n_maps.unwrap_or(cfg.n_maps))?;
            write_krd(out_path(c)?, &volume, Some(&sens))?;
        }
        Cmd::Recon {
            input,
            checkpoint,
            mask,
            reference,
        } => {
            let (mut volume, sens) = read_krd(input)?;
            if let Some(m) = mask {
                volume = volume.undersample(&read_mask(m)?)?;
            }
            let model = read_model(checkpoint)?;
            let ops = operators(&model, &volume, sens.as_ref())?;
            let images = volume
                .slices()
                .par_iter()
                .zip(&ops)
                .map(|(y, op)| reconstruct_image(&model, y, op))
                .collect::<Result<Vec<_>>>()?;
            let dir = out_dir(c)?;
            write_images(&dir.join("recon.rim"), &images)?;
            let window = volume_window(&images);
            for (i, img) in images.iter().enumerate() {
                write_png(&dir.join(format!("slice_{i:03}.png")), img, window)?;
            }
            if let Some(r) = reference {
                let m = volume_metrics(&images, &read_images(r)?)?;
                fs::write(dir.join("metrics.csv"), metrics_csv(&[("recon".into(), m)])).map_err(Error::from)?;
            }
        }
        Cmd::Train { input, mask, zero_init } => {
            let cfg = run_config(c)?;
            let (full, sens) = read_krd(input)?;
            if !full.mask().is_full() {
                return usage("train needs a fully sampled volume");
            }
            let channels = match (cfg.variant, &sens) {
                (Variant::Sn, Some(s)) => s.n_maps(),
                (Variant::Sn, None) => cfg.n_maps,
                (Variant::Pcn, _) => full.coil_count(),
            };
            let init = UnrolledModel::init(&cfg, channels, &mut seeded_rng(cfg.seed))?;
            let dir = out_dir(c)?;
            let model = if *zero_init {
                init.zeroed()
            } else {
                let mask = match mask {
                    Some(m) => read_mask(m)?,
                    None => make_mask(full.height(), cfg.acceleration, cfg.acl, &mut substream(cfg.seed, 0x3a5c))?,
                };
                let examples = training_examples(&full, &mask, sens.as_ref(), &cfg)?;
                let (m, log) = train(&init, &examples, &cfg)?;
                fs::write(dir.join("train_log.csv"), train_log_csv(&log)).map_err(Error::from)?;
                m
            };
            fs::write(dir.join("model.snc"), encode_checkpoint(&model)?).map_err(Error::from)?;
        }
        Cmd::Finetune { input, checkpoint } => {
            let cfg = run_config(c)?;
            let (volume, sens) = read_krd(input)?;
            let model = read_model(checkpoint)?;
            let ops = operators(&model, &volume, sens.as_ref())?;
            let slices = prepare_finetune(&model, volume.slices(), &ops)?;
            let (ft, log) = finetune(&model, &slices, &cfg)?;
            let dir = out_dir(c)?;
            let mut csv = String::from("epoch,loss,misfit,ssim\n");
            for row in &log {
                let _ = writeln!(csv, "{},{:e},{:e},{:e}", row.epoch, row.loss, row.misfit, row.ssim);
            }
            fs::write(dir.join("finetune_log.csv"), csv).map_err(Error::from)?;
            fs::write(dir.join("model.snc"), encode_checkpoint(&ft)?).map_err(Error::from)?;
        }
        Cmd::Stl { input, target, apply } => {
            let cfg = run_config(c)?;
            let inputs = read_images(input)?;
            let dir = out_dir(c)?;
            let params = match apply {
                Some(p) => decode_params(&fs::read(p).map_err(Error::from)?)?,
                None => {
                    let pairs: Vec<_> = inputs.iter().cloned().zip(read_images(target)?).collect();
                    let (p, log) = stl_train(&pairs, &cfg, &mut seeded_rng(cfg.seed))?;
                    fs::write(dir.join("stl_log.csv"), train_log_csv(&log)).map_err(Error::from)?;
                    fs::write(dir.join("stl.dnp"), encode_params(&p)?).map_err(Error::from)?;
                    p
                }
            };
            let styled = inputs.iter().map(|i| stl_apply(&params, i)).collect::<Result<Vec<_>>>()?;
            write_images(&dir.join("styled.rim"), &styled)?;
        }
        Cmd::Ensemble { sn, pcn, ft, mask } => {
            let (sn, pcn, ft, masks) = (read_images(sn)?, read_images(pcn)?, read_images(ft)?, read_images(mask)?);
            let n = sn.len();
            if pcn.len() != n || ft.len() != n || masks.len() != n {
                return Err(Error::ShapeMismatch("ensemble stacks differ in slice count".into()).into());
            }
            let out = (0..n)
                .map(|i| {
                    let m = ForegroundMask::new(masks[i].height(), masks[i].width(), masks[i].data().iter().map(|&v| v != 0.0).collect())?;
                    ensemble(&EnsembleInputs {
                        x_sn: sn[i].clone(),
                        x_pcn: pcn[i].clone(),
                        x_sn_ft: ft[i].clone(),
                        m,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_images(out_path(c)?, &out)?;
        }
        Cmd::Eval {
            input,
            reference,
            name,
            png,
        } => {
            let images = read_images(input)?;
            let m = volume_metrics(&images, &read_images(reference)?)?;
            let csv = metrics_csv(&[(name.clone(), m)]);
            match &c.out {
                Some(p) => fs::write(p, &csv).map_err(Error::from)?,
                None => print!("{csv}"),
            }
            if let Some(dir) = png {
                fs::create_dir_all(dir).map_err(Error::from)?;
                let window = volume_window(&images);
                for (i, img) in images.iter().enumerate() {
                    write_png(&dir.join(format!("{name}_{i:03}.png")), img, window)?;
                }
            }
        }
    }
    Ok(())
}

/// The same examples the library builders produce: the file's maps when
/// present, per-slice estimates otherwise.
fn training_examples(full: &KSpaceVolume, mask: &SamplingMask, sens: Option<&SensitivitySet>, cfg: &RunConfig) -> Result<Vec<Example>> {
    match (cfg.variant, sens) {
        (Variant::Sn, Some(s)) => examples_from_volume(full, mask, Some(s), cfg.fg_threshold),
        _ => crate::learn::build_examples(full, mask, cfg.variant, cfg.n_maps, cfg.fg_threshold),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_text_round_trips() {
        let m = make_mask(40, 4.0, 6, &mut seeded_rng(1)).unwrap();
        assert_eq!(parse_mask(&mask_text(&m)).unwrap(), m);
        assert!(parse_mask("lines = 0102\nacl = 1\nr = 2").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["sigmanet", "--help"]), 0);
        assert_eq!(run(["sigmanet", "frobnicate"]), 1);
        assert_eq!(run(["sigmanet", "mask", "--pe", "10"]), 1);
        assert_eq!(run(["sigmanet", "eval", "--input", "/nonexistent.rim", "--reference", "/nonexistent.rim"]), 2);
    }

}
