use std::path::{Path, PathBuf};
use std::str::FromStr;

use ssmamc::bench::{self, BenchProtocol, BenchResult, MemoryProbe, Phase};
use ssmamc::dataio::{split, Dataset};
use ssmamc::siggen::{parse_snr_range, DatasetSpec, ModulationScheme, Pulse};
use ssmamc::sssm::ScanMode;
use ssmamc::train::{self as trainer, evaluate, TrainConfig};
use ssmamc::{MamcaConfig, MamcaModel};

use crate::settings::Settings;
use crate::{AblateArgs, BenchArgs, CliError, EvalArgs, GenArgs, ModelArgs, TrainArgs};

const MODEL_KEYS: [&str; 10] = [
    "num_blocks",
    "d_model",
    "n_state",
    "kernel",
    "expand",
    "use_denoise",
    "use_ssm",
    "use_gate",
    "use_norm",
    "scan_mode",
];

fn keys(own: &[&'static str], model: bool) -> Vec<&'static str> {
    let mut k = own.to_vec();
    if model {
        k.extend(MODEL_KEYS);
    }
    k
}

fn path_flag(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.to_string_lossy().into_owned())
}

fn list<T: FromStr>(key: &str, text: &str) -> Result<Vec<T>, CliError> {
    let items: Vec<T> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| CliError::Usage(format!("`{key}`: cannot parse `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("`{key}` is empty")));
    }
    Ok(items)
}

/// Flag, file, then `SSMAMC_SEED`, then 0.
fn seed(s: &mut Settings, flag: Option<u64>) -> Result<u64, CliError> {
    let env = match std::env::var("SSMAMC_SEED") {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Usage(format!("SSMAMC_SEED `{v}` is not an integer")))?,
        ),
        Err(_) => None,
    };
    s.get("seed", flag, env.unwrap_or(0))
}

fn out_dir(s: &mut Settings, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let out = PathBuf::from(s.get("out", path_flag(flag), ".".to_string())?);
    std::fs::create_dir_all(&out).map_err(|e| {
        CliError::Lib(ssmamc::Error::File {
            path: out.clone(),
            source: e,
        })
    })?;
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| {
        CliError::Lib(ssmamc::Error::File {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn model_config(
    s: &mut Settings,
    a: &ModelArgs,
    num_classes: usize,
    seed: u64,
) -> Result<MamcaConfig, CliError> {
    let d = MamcaConfig::default();
    let scan = s.get("scan_mode", a.scan_mode.clone(), "sequential".to_string())?;
    let cfg = MamcaConfig {
        num_blocks: s.get("num_blocks", a.num_blocks, d.num_blocks)?,
        d_model: s.get("d_model", a.d_model, d.d_model)?,
        n_state: s.get("n_state", a.n_state, d.n_state)?,
        kernel: s.get("kernel", a.kernel, d.kernel)?,
        expand: s.get("expand", a.expand, d.expand)?,
        use_denoise: s.get("use_denoise", a.use_denoise, d.use_denoise)?,
        use_ssm: s.get("use_ssm", a.use_ssm, d.use_ssm)?,
        use_gate: s.get("use_gate", a.use_gate, d.use_gate)?,
        use_norm: s.get("use_norm", a.use_norm, d.use_norm)?,
        scan_mode: ScanMode::from_str(&scan)?,
        num_classes,
        in_channels: 2,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(
    s: &mut Settings,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: u64,
) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let tc = TrainConfig {
        epochs: s.get("epochs", epochs, d.epochs)?,
        batch_size: s.get("batch", batch, d.batch_size)?,
        lr: s.get("lr", lr, d.lr)?,
        seed,
        checkpoint: None,
    };
    tc.validate()?;
    Ok(tc)
}

/// Train/test partition; a ratio of 1 trains on everything.
fn partition(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset), CliError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CliError::Usage(format!("split {ratio} not in (0, 1]")));
    }
    if ratio == 1.0 {
        return Ok((data.clone(), Dataset::new(data.class_names.clone(), data.length)));
    }
    Ok(split(data, ratio, seed)?)
}

pub fn gen(a: GenArgs) -> Result<(), CliError> {
    let allowed = [
        "preset",
        "schemes",
        "lengths",
        "snrs",
        "per_cell",
        "seed",
        "pulse",
        "rolloff",
        "span",
        "sps",
        "phase_offset",
        "out",
    ];
    let mut s = Settings::load(a.config.as_deref(), &allowed)?;
    let preset = s.get("preset", a.preset, "torchsig-qam".to_string())?;
    if preset != "torchsig-qam" {
        return Err(CliError::Usage(format!("unknown preset `{preset}`")));
    }
    let base = DatasetSpec::torchsig_qam();
    let join = |v: Vec<String>| v.join(",");
    let schemes = s.get(
        "schemes",
        a.schemes,
        join(base.class_names()),
    )?;
    let lengths = s.get(
        "lengths",
        a.lengths,
        join(base.lengths.iter().map(|l| l.to_string()).collect()),
    )?;
    let snrs = s.get("snrs", a.snrs, "-15:5:20".to_string())?;
    let per_cell = s.get("per_cell", a.per_cell, base.per_cell)?;
    let seed = seed(&mut s, a.seed)?;
    let pulse_name = s.get("pulse", a.pulse, "rrc".to_string())?;
    let pulse = match pulse_name.as_str() {
        "ideal" => Pulse::Ideal,
        "rrc" => {
            let Pulse::RootRaisedCosine { rolloff, span } = Pulse::default() else {
                unreachable!("default pulse is root-raised-cosine")
            };
            Pulse::RootRaisedCosine {
                rolloff: s.get("rolloff", a.rolloff, rolloff)?,
                span: s.get("span", a.span, span)?,
            }
        }
        other => return Err(CliError::Usage(format!("unknown pulse `{other}`"))),
    };
    let spec = DatasetSpec {
        schemes: list::<ModulationScheme>("schemes", &schemes)?,
        lengths: list("lengths", &lengths)?,
        snrs: if snrs.contains(':') {
            parse_snr_range(&snrs)?
        } else {
            list("snrs", &snrs)?
        },
        per_cell,
        seed,
        pulse,
        sps: s.get("sps", a.sps, base.sps)?,
        phase_offset: s.get("phase_offset", a.phase_offset, base.phase_offset)?,
    };
    let out = out_dir(&mut s, a.out)?;
    spec.validate()?;
    write(&out.join("gen.conf"), &s.render("gen"))?;
    for &len in &spec.lengths {
        let data = spec.generate_length(len)?;
        let path = out.join(format!("data_L{len}.amcd"));
        data.write(&path)?;
        println!("{}: {} samples, {} classes", path.display(), data.len(), data.num_classes());
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let own = ["data", "epochs", "batch", "lr", "split", "seed", "out"];
    let mut s = Settings::load(a.config.as_deref(), &keys(&own, true))?;
    let data_path = s.require::<String>("data", path_flag(a.data))?;
    let seed = seed(&mut s, a.seed)?;
    let tc = train_config(&mut s, a.epochs, a.batch, a.lr, seed)?;
    let ratio = s.get("split", a.split, 0.8)?;
    let out = out_dir(&mut s, a.out)?;
    let data = Dataset::read(&data_path)?;
    let cfg = model_config(&mut s, &a.model, data.num_classes(), seed)?;
    write(&out.join("train.conf"), &s.render("train"))?;

    let (train_set, test_set) = partition(&data, ratio, seed)?;
    let mut model = MamcaModel::<f32>::build(cfg)?;
    let tc = TrainConfig {
        checkpoint: Some(out.join("checkpoint.mmck")),
        ..tc
    };
    let history = trainer::train(&mut model, &train_set, &tc)?;
    write(&out.join("loss.csv"), &history.to_csv())?;
    println!(
        "trained {} parameters for {} epochs, final loss {:.4}",
        model.param_count(),
        tc.epochs,
        history.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    if !test_set.is_empty() {
        let report = evaluate(&model, &test_set)?;
        write(&out.join("eval.csv"), &report.to_csv())?;
        write(&out.join("eval.json"), &report.to_json())?;
        println!("held-out accuracy {:.4}", report.overall_accuracy);
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut s = Settings::load(a.config.as_deref(), &["data", "ckpt", "out"])?;
    let data_path = s.require::<String>("data", path_flag(a.data))?;
    let ckpt = s.require::<String>("ckpt", path_flag(a.ckpt))?;
    let out = out_dir(&mut s, a.out)?;
    write(&out.join("eval.conf"), &s.render("eval"))?;
    let data = Dataset::read(&data_path)?;
    let model = MamcaModel::<f32>::load(&ckpt)?;
    let report = evaluate(&model, &data)?;
    write(&out.join("eval.csv"), &report.to_csv())?;
    write(&out.join("eval.json"), &report.to_json())?;
    println!(
        "accuracy {:.4} over {} samples",
        report.overall_accuracy, report.num_samples
    );
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<(), CliError> {
    let own = ["data", "epochs", "batch", "lr", "split", "seeds", "out"];
    let mut s = Settings::load(a.config.as_deref(), &keys(&own, true))?;
    let data_path = s.require::<String>("data", path_flag(a.data))?;
    let seeds: Vec<u64> = list("seeds", &s.get("seeds", a.seeds, "0,1,2".to_string())?)?;
    let tc = train_config(&mut s, a.epochs, a.batch, a.lr, seeds[0])?;
    let ratio = s.get("split", a.split, 0.8)?;
    let out = out_dir(&mut s, a.out)?;
    let data = Dataset::read(&data_path)?;
    let base = model_config(&mut s, &a.model, data.num_classes(), seeds[0])?;
    write(&out.join("ablate.conf"), &s.render("ablate"))?;
    if ratio >= 1.0 {
        return Err(CliError::Usage("ablation needs a held-out part; split < 1".into()));
    }
    let (train_set, test_set) = partition(&data, ratio, seeds[0])?;
    let table = trainer::ablate::<f32>(&base, &tc, &train_set, &test_set, &seeds)?;
    let mut runs = String::from("variant,seed,params,accuracy\n");
    for r in &table.runs {
        runs.push_str(&format!("{},{},{},{}\n", r.variant.name(), r.seed, r.params, r.accuracy));
    }
    write(&out.join("ablation_runs.csv"), &runs)?;
    let summary = table.to_csv();
    write(&out.join("ablation.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn detail_csv(results: &[BenchResult]) -> String {
    let mut s = String::from(
        "L,B,phase,median_s,p10_s,p90_s,throughput,peak_resident_bytes,param_count,flop_estimate,status\n",
    );
    for r in results {
        let peak = r
            .peak_resident_bytes
            .map_or_else(|| "unavailable".to_string(), |b| b.to_string());
        let status = r
            .failure
            .as_deref()
            .map_or_else(|| "ok".to_string(), |w| format!("failed: {}", w.replace(',', ";")));
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.length,
            r.batch,
            r.phase.name(),
            r.median_s,
            r.p10_s,
            r.p90_s,
            r.throughput,
            peak,
            r.param_count,
            r.flop_estimate,
            status
        ));
    }
    s
}

pub fn bench(a: BenchArgs, probe: &dyn MemoryProbe) -> Result<(), CliError> {
    let own = [
        "mode",
        "lengths",
        "length",
        "batch",
        "max_batch",
        "warmup",
        "repeats",
        "memory_budget",
        "num_classes",
        "seed",
        "out",
    ];
    let mut s = Settings::load(a.config.as_deref(), &keys(&own, true))?;
    let mode = s.require::<String>("mode", a.mode)?;
    let seed = seed(&mut s, a.seed)?;
    let d = BenchProtocol::default();
    let mut protocol = BenchProtocol {
        warmup: s.get("warmup", a.warmup, d.warmup)?,
        repeats: s.get("repeats", a.repeats, d.repeats)?,
        batch: d.batch,
        memory_budget_bytes: s.maybe("memory_budget", a.memory_budget, || None)?,
        seed,
    };
    let num_classes = s.get("num_classes", a.num_classes, 6)?;
    let results = match mode.as_str() {
        "length" => {
            let default_lengths = bench::DEFAULT_LENGTHS.map(|l| l.to_string()).join(",");
            let lengths: Vec<usize> = list("lengths", &s.get("lengths", a.lengths, default_lengths)?)?;
            protocol.batch = s.get("batch", a.batch, d.batch)?;
            let out = out_dir(&mut s, a.out)?;
            let cfg = model_config(&mut s, &a.model, num_classes, seed)?;
            write(&out.join("bench.conf"), &s.render("bench"))?;
            let rs = bench::sweep_length::<f32>(
                &cfg,
                &lengths,
                &[Phase::Train, Phase::Inference],
                &protocol,
                probe,
            )?;
            write(&out.join("bench_length.csv"), &bench::length_csv(&rs))?;
            write(&out.join("bench_length.gp"), bench::length_plot_script())?;
            let ok: Vec<&BenchResult> = rs
                .iter()
                .filter(|r| r.phase == Phase::Inference && r.is_ok())
                .collect();
            if ok.len() >= 2 {
                let xs: Vec<f64> = ok.iter().map(|r| r.length as f64).collect();
                let ys: Vec<f64> = ok.iter().map(|r| r.median_s).collect();
                println!("inference log-log slope {:.3}", bench::loglog_slope(&xs, &ys)?);
            }
            (out, rs, "length")
        }
        "batch" => {
            let length = s.get("length", a.length, 4096)?;
            let max_batch = s.get("max_batch", a.max_batch, 64)?;
            let out = out_dir(&mut s, a.out)?;
            let cfg = model_config(&mut s, &a.model, num_classes, seed)?;
            write(&out.join("bench.conf"), &s.render("bench"))?;
            let rs = bench::sweep_batch::<f32>(&cfg, length, max_batch, &protocol, probe)?;
            write(&out.join("bench_batch.csv"), &bench::batch_csv(&rs))?;
            (out, rs, "batch")
        }
        other => return Err(CliError::Usage(format!("unknown bench mode `{other}`"))),
    };
    let (out, rs, mode) = results;
    write(&out.join(format!("bench_{mode}_detail.csv")), &detail_csv(&rs))?;
    write(&out.join("bench_env.txt"), &bench::environment_record::<f32>())?;
    for r in &rs {
        match &r.failure {
            None => println!(
                "L={} B={} {}: median {:.3e} s, {:.1} samples/s",
                r.length,
                r.batch,
                r.phase.name(),
                r.median_s,
                r.throughput
            ),
            Some(why) => println!("L={} B={} {}: failed ({why})", r.length, r.batch, r.phase.name()),
        }
    }
    Ok(())
}
