//! Wall-time, throughput and memory accounting against sequence length and
//! batch size.
//!
//! Every measurement follows one protocol: a few discarded warmup runs,
//! then at least five timed runs on a single worker, reporting the median
//! with p10/p90. Memory is whatever the supplied [`MemoryProbe`] can see;
//! without one it is reported as unavailable.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{MamcaConfig, MamcaModel, GATE_CONV_WIDTH};
use crate::ndiff::{AdamConfig, AdamState, Tensor};
use crate::scalar::Scalar;
use crate::train::train_step;

/// Lengths swept by default.
pub const DEFAULT_LENGTHS: [usize; 6] = [128, 256, 512, 1024, 2048, 4096];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// One optimizer step over a batch.
    Train,
    /// One forward pass without gradient tracking.
    Inference,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Inference => "inference",
        }
    }
}

/// Source of heap high-water marks. The CLI installs a counting allocator;
/// library users without one pass [`NoMemoryProbe`].
pub trait MemoryProbe: Sync {
    /// Restart peak tracking from the current live size.
    fn reset_peak(&self);
    /// Peak live bytes since the last reset, if measurable.
    fn peak_bytes(&self) -> Option<u64>;
}

pub struct NoMemoryProbe;

impl MemoryProbe for NoMemoryProbe {
    fn reset_peak(&self) {}
    fn peak_bytes(&self) -> Option<u64> {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchProtocol {
    pub warmup: usize,
    pub repeats: usize,
    pub batch: usize,
    /// Runs whose estimated working set exceeds this are recorded as
    /// failures instead of being attempted.
    pub memory_budget_bytes: Option<u64>,
    /// Seeds the random inputs.
    pub seed: u64,
}

impl Default for BenchProtocol {
    fn default() -> Self {
        Self {
            warmup: 3,
            repeats: 5,
            batch: 8,
            memory_budget_bytes: None,
            seed: 0,
        }
    }
}

impl BenchProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 3 {
            return Err(Error::Config(format!(
                "at least 3 warmup runs required, got {}",
                self.warmup
            )));
        }
        if self.repeats < 5 {
            return Err(Error::Config(format!(
                "at least 5 timed runs required, got {}",
                self.repeats
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub length: usize,
    pub batch: usize,
    pub phase: Phase,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    /// Samples per second at the median time.
    pub throughput: f64,
    pub peak_resident_bytes: Option<u64>,
    pub param_count: usize,
    pub flop_estimate: u64,
    /// Why the run was not completed; timings are NaN when set.
    pub failure: Option<String>,
}

impl BenchResult {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    fn failed(
        length: usize,
        batch: usize,
        phase: Phase,
        config: &MamcaConfig,
        reason: String,
    ) -> Self {
        Self {
            length,
            batch,
            phase,
            median_s: f64::NAN,
            p10_s: f64::NAN,
            p90_s: f64::NAN,
            throughput: f64::NAN,
            peak_resident_bytes: None,
            param_count: config.param_count(),
            flop_estimate: flop_estimate(config, length) * batch as u64,
            failure: Some(reason),
        }
    }
}

/// Multiply-accumulate count of one forward pass on a single input, split
/// into the part proportional to the length and the part that is not.
///
/// Per position and block (input width `C`, model width `D`, kernel `K`,
/// SSM width `E·D`, state size `N`):
///
/// ```text
/// denoise   C·D·K conv + D |f| mean + C·D residual projection (C ≠ D)
/// lift      C·D·K (only when denoising is off and C ≠ D)
/// gated SSM 2·D·ED input maps + 4·ED causal conv + SSM(ED) + ED·D output
/// SSM(W)    2·W·N for B, C + W for Δ + W·N state update + W·N readout + W skip
/// pooling   D
/// ```
///
/// Fixed per input: `D·D` threshold attention per denoising block and
/// `D·classes` for the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopEstimate {
    pub per_position: u64,
    pub fixed: u64,
}

impl FlopEstimate {
    pub fn of(config: &MamcaConfig) -> Self {
        let (d, n, k) = (config.d_model as u64, config.n_state as u64, config.kernel as u64);
        let ssm = |w: u64| 2 * w * n + w + 2 * w * n + w;
        let mut per_position = 0;
        let mut fixed = d * config.num_classes as u64;
        for block in 0..config.num_blocks {
            let c = if block == 0 {
                config.in_channels as u64
            } else {
                d
            };
            if config.use_denoise {
                per_position += c * d * k + d;
                if c != d {
                    per_position += c * d;
                }
                fixed += d * d;
            } else if c != d {
                per_position += c * d * k;
            }
            if config.use_ssm {
                per_position += if config.use_gate {
                    let e = config.expand as u64 * d;
                    2 * d * e + GATE_CONV_WIDTH as u64 * e + ssm(e) + e * d
                } else {
                    ssm(d)
                };
            }
        }
        per_position += d;
        Self {
            per_position,
            fixed,
        }
    }

    pub fn total(&self, length: usize) -> u64 {
        self.per_position * length as u64 + self.fixed
    }
}

/// Forward-pass multiply-accumulates for one input of length `length`.
pub fn flop_estimate(config: &MamcaConfig, length: usize) -> u64 {
    FlopEstimate::of(config).total(length)
}

/// Parameter count of a built model, from its registry.
pub fn param_count<T: Scalar>(model: &MamcaModel<T>) -> usize {
    model.param_count()
}

/// Rough upper bound on the working set of one run, in bytes: every
/// per-position activation the tape keeps, doubled for gradients when
/// training, plus the stored scan states.
pub fn working_set_estimate<T: Scalar>(
    config: &MamcaConfig,
    batch: usize,
    length: usize,
    phase: Phase,
) -> u64 {
    let (d, n) = (config.d_model as u64, config.n_state as u64);
    let mut values = config.in_channels as u64;
    for _ in 0..config.num_blocks {
        values += if config.use_denoise { 8 * d } else { 2 * d };
        if config.use_ssm {
            let w = if config.use_gate {
                config.expand as u64 * d
            } else {
                d
            };
            values += 12 * w + 4 * n + 4 * d;
            if phase == Phase::Train {
                values += 2 * w * n;
            }
        }
    }
    if phase == Phase::Train {
        values *= 2;
    }
    values * (batch * length) as u64 * std::mem::size_of::<T>() as u64
}

/// Linear-interpolated quantile of sorted data, `q ∈ [0, 1]`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn random_input<T: Scalar>(batch: usize, channels: usize, length: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * channels * length)
        .map(|_| T::of(StandardNormal.sample(&mut rng)))
        .collect();
    Tensor::new(vec![batch, channels, length], data).expect("shape matches data")
}

fn single_worker<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn measure<T: Scalar>(
    model: &MamcaModel<T>,
    batch: usize,
    length: usize,
    phase: Phase,
    protocol: &BenchProtocol,
    probe: &dyn MemoryProbe,
) -> Result<BenchResult> {
    let cfg = model.config();
    if let Some(budget) = protocol.memory_budget_bytes {
        let need = working_set_estimate::<T>(cfg, batch, length, phase);
        if need > budget {
            return Ok(BenchResult::failed(
                length,
                batch,
                phase,
                cfg,
                format!("estimated {need} bytes exceeds memory budget of {budget}"),
            ));
        }
    }
    let x = random_input::<T>(batch, cfg.in_channels, length, protocol.seed);
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
    let mut trained = model.clone();
    let mut adam = AdamState::new(AdamConfig::default(), trained.store());
    let mut run = || -> Result<()> {
        match phase {
            Phase::Inference => model.logits(&x).map(|_| ()),
            Phase::Train => train_step(&mut trained, &mut adam, x.clone(), &labels).map(|_| ()),
        }
    };
    for _ in 0..protocol.warmup {
        if let Err(e) = run() {
            return Ok(BenchResult::failed(length, batch, phase, cfg, e.to_string()));
        }
    }
    probe.reset_peak();
    let mut times = Vec::with_capacity(protocol.repeats);
    for _ in 0..protocol.repeats {
        let start = Instant::now();
        if let Err(e) = run() {
            return Ok(BenchResult::failed(length, batch, phase, cfg, e.to_string()));
        }
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = quantile(&times, 0.5);
    Ok(BenchResult {
        length,
        batch,
        phase,
        median_s: median,
        p10_s: quantile(&times, 0.1),
        p90_s: quantile(&times, 0.9),
        throughput: batch as f64 / median,
        peak_resident_bytes: probe.peak_bytes(),
        param_count: model.param_count(),
        flop_estimate: flop_estimate(cfg, length) * batch as u64,
        failure: None,
    })
}

/// Times each phase at each length with a fixed batch. Lengths below the
/// model's minimum are recorded as failures.
pub fn sweep_length<T: Scalar>(
    config: &MamcaConfig,
    lengths: &[usize],
    phases: &[Phase],
    protocol: &BenchProtocol,
    probe: &dyn MemoryProbe,
) -> Result<Vec<BenchResult>> {
    protocol.validate()?;
    let model = MamcaModel::<T>::build(config.clone())?;
    single_worker(|| {
        let mut out = Vec::new();
        for &len in lengths {
            for &phase in phases {
                out.push(measure(&model, protocol.batch, len, phase, protocol, probe)?);
            }
        }
        Ok(out)
    })?
}

/// Inference throughput at one length for batches 1, 2, 4, … up to
/// `max_batch`. The first failure is recorded and ends the sweep.
pub fn sweep_batch<T: Scalar>(
    config: &MamcaConfig,
    length: usize,
    max_batch: usize,
    protocol: &BenchProtocol,
    probe: &dyn MemoryProbe,
) -> Result<Vec<BenchResult>> {
    protocol.validate()?;
    let model = MamcaModel::<T>::build(config.clone())?;
    single_worker(|| {
        let mut out = Vec::new();
        let mut batch = 1;
        while batch <= max_batch {
            let r = measure(&model, batch, length, Phase::Inference, protocol, probe)?;
            let stop = !r.is_ok();
            out.push(r);
            if stop {
                break;
            }
            batch *= 2;
        }
        Ok(out)
    })?
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("slope fit needs two or more paired points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("slope fit needs positive finite values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

fn field(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6e}")
    } else {
        String::new()
    }
}

/// `L,phase,median_s,p10_s,p90_s,throughput`; failed runs leave the
/// timing fields empty.
pub fn length_csv(results: &[BenchResult]) -> String {
    let mut s = String::from("L,phase,median_s,p10_s,p90_s,throughput\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.length,
            r.phase.name(),
            field(r.median_s),
            field(r.p10_s),
            field(r.p90_s),
            field(r.throughput)
        );
    }
    s
}

/// `B,throughput,status`, where status is `ok` or `failed: reason`.
pub fn batch_csv(results: &[BenchResult]) -> String {
    let mut s = String::from("B,throughput,status\n");
    for r in results {
        let status = match &r.failure {
            None => "ok".to_string(),
            Some(why) => format!("failed: {}", why.replace([',', '\n'], ";")),
        };
        let _ = writeln!(s, "{},{},{}", r.batch, field(r.throughput), status);
    }
    s
}

/// Gnuplot script plotting `bench_length.csv` on log-log axes.
pub fn length_plot_script() -> &'static str {
    "set datafile separator ','\n\
     set logscale xy\n\
     set xlabel 'length'\n\
     set ylabel 'median seconds'\n\
     plot 'bench_length.csv' using (stringcolumn(2) eq 'inference' ? $1 : 1/0):3 \
     with linespoints title 'inference', \
     '' using (stringcolumn(2) eq 'train' ? $1 : 1/0):3 with linespoints title 'train'\n"
}

/// CPU model, precision and worker count, for labelling results.
pub fn environment_record<T: Scalar>() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|info| {
            info.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into());
    format!(
        "cpu: {cpu}\nprecision: {}\nworkers: 1\nos: {}\narch: {}\n",
        T::NAME,
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MamcaConfig {
        MamcaConfig {
            d_model: 4,
            n_state: 2,
            expand: 1,
            num_blocks: 1,
            ..Default::default()
        }
    }

    fn quick() -> BenchProtocol {
        BenchProtocol {
            batch: 2,
            ..Default::default()
        }
    }

    #[test]
    fn flops_are_affine_in_length() {
        for cfg in [
            MamcaConfig::default(),
            MamcaConfig {
                use_gate: false,
                ..Default::default()
            },
            MamcaConfig {
                use_denoise: false,
                use_ssm: false,
                ..Default::default()
            },
        ] {
            let f = FlopEstimate::of(&cfg);
            assert!(f.per_position > 0);
            assert_eq!(
                flop_estimate(&cfg, 2048) - f.fixed,
                2 * (flop_estimate(&cfg, 1024) - f.fixed)
            );
        }
    }

    #[test]
    fn ablations_cost_less() {
        let full = FlopEstimate::of(&MamcaConfig::default()).per_position;
        for cfg in [
            MamcaConfig {
                use_denoise: false,
                ..Default::default()
            },
            MamcaConfig {
                use_ssm: false,
                ..Default::default()
            },
        ] {
            assert!(FlopEstimate::of(&cfg).per_position < full);
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert!((quantile(&v, 0.1) - 1.4).abs() < 1e-12);
        assert!((quantile(&v, 0.9) - 4.6).abs() < 1e-12);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.1)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() - 1.1).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_err());
        assert!(loglog_slope(&[1.0, 2.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn protocol_minimums_enforced() {
        let mut p = BenchProtocol::default();
        p.warmup = 2;
        assert!(p.validate().is_err());
        p.warmup = 3;
        p.repeats = 4;
        assert!(p.validate().is_err());
    }

    #[test]
    fn length_sweep_rows_and_csv() {
        let rs = sweep_length::<f32>(
            &tiny(),
            &[16, 32],
            &[Phase::Train, Phase::Inference],
            &quick(),
            &NoMemoryProbe,
        )
        .unwrap();
        assert_eq!(rs.len(), 4);
        for r in &rs {
            assert!(r.is_ok());
            assert!(r.p10_s <= r.median_s && r.median_s <= r.p90_s);
            assert!((r.throughput - 2.0 / r.median_s).abs() < 1e-9 * r.throughput);
            assert_eq!(r.peak_resident_bytes, None);
        }
        let csv = length_csv(&rs);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("L,phase,median_s,p10_s,p90_s,throughput\n16,train,"));
    }

    #[test]
    fn budget_turns_into_failure_row() {
        let protocol = BenchProtocol {
            memory_budget_bytes: Some(working_set_estimate::<f32>(
                &tiny(),
                4,
                64,
                Phase::Inference,
            )),
            ..quick()
        };
        let rs = sweep_batch::<f32>(&tiny(), 64, 64, &protocol, &NoMemoryProbe).unwrap();
        let batches: Vec<usize> = rs.iter().map(|r| r.batch).collect();
        assert_eq!(batches, vec![1, 2, 4, 8]);
        assert!(rs[..3].iter().all(BenchResult::is_ok));
        let last = rs.last().unwrap();
        assert!(last.failure.as_deref().unwrap().contains("memory budget"));
        let csv = batch_csv(&rs);
        assert!(csv.lines().last().unwrap().starts_with("8,,failed: estimated"));
    }

    #[test]
    fn too_short_input_is_a_failure_row() {
        let rs =
            sweep_length::<f32>(&tiny(), &[2], &[Phase::Inference], &quick(), &NoMemoryProbe)
                .unwrap();
        assert!(!rs[0].is_ok());
    }
}
