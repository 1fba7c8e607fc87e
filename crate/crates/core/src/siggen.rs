//! Synthetic labeled I/Q data: `r = M(s) * p + n`, sampled into `2 × L`.
//!
//! Symbols are drawn uniformly, mapped onto a unit-power constellation,
//! upsampled and shaped by a pulse, optionally rotated by a random carrier
//! phase, and corrupted by circular white Gaussian noise at the requested
//! SNR. Every sample has its own generator stream keyed by
//! `(seed, scheme, snr, index)`, so generation order does not matter.

use std::f64::consts::PI;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataio::{Dataset, SignalSample};
use crate::error::{Error, Result};

/// Digital modulation schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModulationScheme {
    Bpsk,
    Qpsk,
    Psk8,
    Pam4,
    Qam16,
    Qam64,
    Qam256,
    Qam1024,
    Qam32X,
    Qam128X,
    Qam512X,
}

impl ModulationScheme {
    pub const ALL: [ModulationScheme; 11] = [
        Self::Bpsk,
        Self::Qpsk,
        Self::Psk8,
        Self::Pam4,
        Self::Qam16,
        Self::Qam64,
        Self::Qam256,
        Self::Qam1024,
        Self::Qam32X,
        Self::Qam128X,
        Self::Qam512X,
    ];

    /// The six QAM schemes of the ideal QAM-family benchmark.
    pub const QAM_FAMILY: [ModulationScheme; 6] = [
        Self::Qam64,
        Self::Qam256,
        Self::Qam1024,
        Self::Qam32X,
        Self::Qam128X,
        Self::Qam512X,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bpsk => "bpsk",
            Self::Qpsk => "qpsk",
            Self::Psk8 => "psk8",
            Self::Pam4 => "pam4",
            Self::Qam16 => "qam16",
            Self::Qam64 => "qam64",
            Self::Qam256 => "qam256",
            Self::Qam1024 => "qam1024",
            Self::Qam32X => "qam32x",
            Self::Qam128X => "qam128x",
            Self::Qam512X => "qam512x",
        }
    }

    pub fn bits_per_symbol(self) -> u32 {
        match self {
            Self::Bpsk => 1,
            Self::Qpsk => 2,
            Self::Psk8 => 3,
            Self::Pam4 => 2,
            Self::Qam16 => 4,
            Self::Qam64 => 6,
            Self::Qam256 => 8,
            Self::Qam1024 => 10,
            Self::Qam32X => 5,
            Self::Qam128X => 7,
            Self::Qam512X => 9,
        }
    }

    pub fn size(self) -> usize {
        1 << self.bits_per_symbol()
    }
}

impl FromStr for ModulationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| Error::Config(format!("unknown modulation scheme `{s}`")))
    }
}

impl std::fmt::Display for ModulationScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn gray_decode(mut g: usize) -> usize {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

fn normalize(points: Vec<Complex64>) -> Vec<Complex64> {
    let power = points.iter().map(|p| p.norm_sqr()).sum::<f64>() / points.len() as f64;
    let s = power.sqrt();
    points.into_iter().map(|p| p / s).collect()
}

/// Gray-coded square grid with `side` levels per axis.
fn square_qam(side: usize) -> Vec<Complex64> {
    let bits = side.trailing_zeros();
    let level = |pos: usize| (2 * pos) as f64 - (side - 1) as f64;
    (0..side * side)
        .map(|idx| {
            let (hi, lo) = (idx >> bits, idx & (side - 1));
            Complex64::new(level(gray_decode(hi)), level(gray_decode(lo)))
        })
        .collect()
}

/// `side × side` grid minus a `corner × corner` block at each corner, in
/// row-scan order.
fn cross_qam(side: usize, corner: usize) -> Vec<Complex64> {
    let level = |pos: usize| (2 * pos) as f64 - (side - 1) as f64;
    let in_corner = |p: usize| p < corner || p >= side - corner;
    let mut pts = Vec::new();
    for row in 0..side {
        for col in 0..side {
            if in_corner(row) && in_corner(col) {
                continue;
            }
            pts.push(Complex64::new(level(col), level(side - 1 - row)));
        }
    }
    pts
}

/// Unit-average-power constellation; symbol index `i` maps to entry `i`.
pub fn constellation(scheme: ModulationScheme) -> Vec<Complex64> {
    use ModulationScheme::*;
    let pts = match scheme {
        Bpsk => vec![Complex64::new(-1.0, 0.0), Complex64::new(1.0, 0.0)],
        Qpsk => square_qam(2),
        Psk8 => (0..8)
            .map(|i| Complex64::from_polar(1.0, 2.0 * PI * gray_decode(i) as f64 / 8.0))
            .collect(),
        Pam4 => (0..4)
            .map(|i| Complex64::new((2 * gray_decode(i)) as f64 - 3.0, 0.0))
            .collect(),
        Qam16 => square_qam(4),
        Qam64 => square_qam(8),
        Qam256 => square_qam(16),
        Qam1024 => square_qam(32),
        Qam32X => {
            // 6 × 6 minus the four single corner points
            let level = |p: usize| (2 * p) as f64 - 5.0;
            let mut v = Vec::new();
            for row in 0..6 {
                for col in 0..6 {
                    let corner = (row == 0 || row == 5) && (col == 0 || col == 5);
                    if !corner {
                        v.push(Complex64::new(level(col), level(5 - row)));
                    }
                }
            }
            v
        }
        Qam128X => cross_qam(12, 2),
        Qam512X => cross_qam(24, 4),
    };
    normalize(pts)
}

/// Pulse shape applied after upsampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pulse {
    /// Each symbol held for `sps` samples; with `sps = 1` the output is the
    /// symbol sequence itself.
    Ideal,
    RootRaisedCosine { rolloff: f64, span: usize },
}

impl Default for Pulse {
    fn default() -> Self {
        Pulse::RootRaisedCosine {
            rolloff: 0.35,
            span: 8,
        }
    }
}

/// Pulse, oversampling and noise level of the simulated channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelSpec {
    pub snr_db: f64,
    pub pulse: Pulse,
    pub sps: usize,
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sps == 0 {
            return Err(Error::Config("samples per symbol must be >= 1".into()));
        }
        if let Pulse::RootRaisedCosine { rolloff, span } = self.pulse {
            if !(rolloff > 0.0 && rolloff <= 1.0) {
                return Err(Error::Config(format!("rolloff {rolloff} not in (0, 1]")));
            }
            if span < 2 {
                return Err(Error::Config(format!("RRC span {span} < 2")));
            }
        }
        if self.snr_db.is_nan() {
            return Err(Error::Config("SNR is NaN".into()));
        }
        Ok(())
    }

    /// Symbols needed for `length` output samples.
    pub fn symbols_needed(&self, length: usize) -> usize {
        let base = length.div_ceil(self.sps);
        match self.pulse {
            Pulse::Ideal => base,
            Pulse::RootRaisedCosine { span, .. } => base + span,
        }
    }
}

/// Root-raised-cosine taps over `span` symbols at `sps` samples per
/// symbol (`span · sps + 1` taps), scaled to unit energy.
pub fn rrc_taps(rolloff: f64, span: usize, sps: usize) -> Vec<f64> {
    let n = span * sps;
    let b = rolloff;
    let taps: Vec<f64> = (0..=n)
        .map(|i| {
            let t = (i as f64 - n as f64 / 2.0) / sps as f64;
            if t.abs() < 1e-12 {
                1.0 - b + 4.0 * b / PI
            } else if (t.abs() - 1.0 / (4.0 * b)).abs() < 1e-9 {
                let a = PI / (4.0 * b);
                b / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos())
            } else {
                let num = (PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos();
                num / (PI * t * (1.0 - (4.0 * b * t).powi(2)))
            }
        })
        .collect();
    let e = taps.iter().map(|v| v * v).sum::<f64>().sqrt();
    taps.into_iter().map(|v| v / e).collect()
}

/// Shapes a symbol sequence into exactly `length` baseband samples.
///
/// The RRC path filters the zero-stuffed sequence with taps scaled by
/// `sqrt(sps)` (unit average output power), drops the filter transients and
/// keeps the centered `length` samples.
pub fn modulate(
    symbols: &[usize],
    scheme: ModulationScheme,
    channel: &ChannelSpec,
    length: usize,
) -> Result<Vec<Complex64>> {
    channel.validate()?;
    if length == 0 {
        return Err(Error::invalid("signal length must be positive"));
    }
    let need = channel.symbols_needed(length);
    if symbols.len() < need {
        return Err(Error::invalid(format!(
            "{} symbols given, {need} needed for length {length}",
            symbols.len()
        )));
    }
    let points = constellation(scheme);
    let pt = |s: usize| -> Result<Complex64> {
        points.get(s).copied().ok_or_else(|| {
            Error::invalid(format!("symbol {s} outside {}-point constellation", points.len()))
        })
    };
    let sps = channel.sps;
    match channel.pulse {
        Pulse::Ideal => (0..length).map(|n| pt(symbols[n / sps])).collect(),
        Pulse::RootRaisedCosine { rolloff, span } => {
            let gain = (sps as f64).sqrt();
            let taps: Vec<f64> = rrc_taps(rolloff, span, sps).into_iter().map(|t| t * gain).collect();
            let syms = symbols[..need].iter().map(|&s| pt(s)).collect::<Result<Vec<_>>>()?;
            let up_len = need * sps;
            let delay = span * sps;
            let valid = up_len - delay;
            let start = delay + (valid - length) / 2;
            Ok((start..start + length)
                .map(|n| {
                    // y[n] = Σ_k taps[k] · u[n - k], u nonzero on multiples of sps
                    let mut acc = Complex64::new(0.0, 0.0);
                    let first = n.saturating_sub(delay);
                    let mut m = first.div_ceil(sps) * sps;
                    while m <= n {
                        acc += syms[m / sps] * taps[n - m];
                        m += sps;
                    }
                    acc
                })
                .collect())
        }
    }
}

/// Mean `|s|²`.
pub fn power(signal: &[Complex64]) -> f64 {
    signal.iter().map(|s| s.norm_sqr()).sum::<f64>() / signal.len().max(1) as f64
}

/// Adds circular Gaussian noise of total variance `P / 10^(snr/10)`, half
/// on each component, where `P` is the measured signal power.
pub fn add_awgn<R: Rng>(signal: &[Complex64], snr_db: f64, rng: &mut R) -> Result<Vec<Complex64>> {
    let p = power(signal);
    if !(p > 0.0) {
        return Err(Error::invalid("cannot set an SNR on a zero-power signal"));
    }
    let sigma = (p / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
    Ok(signal
        .iter()
        .map(|&s| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            s + Complex64::new(re, im) * sigma
        })
        .collect())
}

/// Grids and channel of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub schemes: Vec<ModulationScheme>,
    pub lengths: Vec<usize>,
    pub snrs: Vec<f64>,
    /// Samples per `(scheme, snr)` cell.
    pub per_cell: usize,
    pub seed: u64,
    pub pulse: Pulse,
    pub sps: usize,
    pub phase_offset: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::torchsig_qam()
    }
}

impl DatasetSpec {
    /// The ideal QAM-family benchmark grid: six QAM schemes, every length
    /// from 128 to 4096, SNR −15..20 dB in 5 dB steps, 3072 samples per
    /// scheme spread evenly over the SNR grid.
    pub fn torchsig_qam() -> Self {
        Self {
            schemes: ModulationScheme::QAM_FAMILY.to_vec(),
            lengths: vec![128, 256, 512, 1024, 2048, 4096],
            snrs: snr_range(-15.0, 5.0, 20.0).expect("valid range"),
            per_cell: 3072 / 8,
            seed: 0,
            pulse: Pulse::default(),
            sps: 8,
            phase_offset: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() || self.lengths.is_empty() || self.snrs.is_empty() {
            return Err(Error::Config("scheme, length and SNR grids must be non-empty".into()));
        }
        if self.per_cell == 0 {
            return Err(Error::Config("per_cell must be positive".into()));
        }
        if self.lengths.contains(&0) {
            return Err(Error::Config("lengths must be positive".into()));
        }
        if self.schemes.len() > u16::MAX as usize + 1 {
            return Err(Error::Config("too many classes".into()));
        }
        for &snr in &self.snrs {
            self.channel(snr).validate()?;
        }
        Ok(())
    }

    pub fn channel(&self, snr_db: f64) -> ChannelSpec {
        ChannelSpec {
            snr_db,
            pulse: self.pulse,
            sps: self.sps,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.schemes.iter().map(|s| s.name().to_string()).collect()
    }

    /// One sample, fully determined by the spec seed and its cell
    /// coordinates.
    pub fn sample(
        &self,
        class: usize,
        snr_index: usize,
        index: usize,
        length: usize,
    ) -> Result<SignalSample> {
        let scheme = self.schemes[class];
        let channel = self.channel(self.snrs[snr_index]);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(sample_key(class, snr_index, index, length));
        let size = scheme.size();
        let symbols: Vec<usize> = (0..channel.symbols_needed(length))
            .map(|_| rng.random_range(0..size))
            .collect();
        let mut sig = modulate(&symbols, scheme, &channel, length)?;
        if self.phase_offset {
            let rot = Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI));
            sig.iter_mut().for_each(|s| *s *= rot);
        }
        let noisy = add_awgn(&sig, channel.snr_db, &mut rng)?;
        let mut iq = Vec::with_capacity(2 * length);
        iq.extend(noisy.iter().map(|s| s.re as f32));
        iq.extend(noisy.iter().map(|s| s.im as f32));
        Ok(SignalSample {
            iq,
            label: class,
            snr_db: channel.snr_db as f32,
        })
    }

    /// All samples at one length, ordered by scheme, then SNR, then index.
    pub fn generate_length(&self, length: usize) -> Result<Dataset> {
        self.validate()?;
        let (n_snr, per) = (self.snrs.len(), self.per_cell);
        let total = self.schemes.len() * n_snr * per;
        let samples = (0..total)
            .into_par_iter()
            .map(|k| self.sample(k / (n_snr * per), (k / per) % n_snr, k % per, length))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            class_names: self.class_names(),
            length,
            samples,
        })
    }

    /// One dataset per requested length.
    pub fn generate(&self) -> Result<Vec<Dataset>> {
        self.lengths.iter().map(|&l| self.generate_length(l)).collect()
    }
}

fn sample_key(class: usize, snr_index: usize, index: usize, length: usize) -> u64 {
    // 12 bits class, 8 bits SNR, 13 bits length, 31 bits index
    ((class as u64 & 0xfff) << 52)
        | ((snr_index as u64 & 0xff) << 44)
        | ((length as u64 & 0x1fff) << 31)
        | (index as u64 & 0x7fff_ffff)
}

/// Parses `start:step:stop`, inclusive of `stop` when it lies on the grid.
pub fn parse_snr_range(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("SNR range `{text}` is not start:step:stop")));
    }
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad number `{s}` in SNR range `{text}`")))
    };
    snr_range(num(parts[0])?, num(parts[1])?, num(parts[2])?)
}

pub fn snr_range(start: f64, step: f64, stop: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !start.is_finite() || !stop.is_finite() || stop < start {
        return Err(Error::Config(format!(
            "SNR range {start}:{step}:{stop} needs step > 0 and stop >= start"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_unit_power() {
        for s in ModulationScheme::ALL {
            let c = constellation(s);
            assert_eq!(c.len(), s.size(), "{s}");
            let mean: Complex64 = c.iter().sum::<Complex64>() / c.len() as f64;
            assert!(mean.norm() < 1e-9, "{s}");
            assert!((power(&c) - 1.0).abs() < 1e-9, "{s}");
            let mut uniq = c.clone();
            uniq.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
            uniq.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
            assert_eq!(uniq.len(), c.len(), "{s}");
        }
    }

    #[test]
    fn qpsk_and_qam16_points() {
        let r = 1.0 / 2f64.sqrt();
        for p in constellation(ModulationScheme::Qpsk) {
            assert!((p.re.abs() - r).abs() < 1e-12 && (p.im.abs() - r).abs() < 1e-12);
        }
        let c = constellation(ModulationScheme::Qam16);
        let corner = 3.0 / 10f64.sqrt();
        assert!((corner - 0.94868).abs() < 1e-5);
        assert!(c
            .iter()
            .any(|p| (p.re - corner).abs() < 1e-12 && (p.im - corner).abs() < 1e-12));
    }

    #[test]
    fn gray_neighbors_differ_by_one_bit() {
        let c = constellation(ModulationScheme::Qam64);
        let step = 2.0 / (42f64).sqrt();
        for i in 0..64 {
            for j in 0..64 {
                if ((c[i] - c[j]).norm() - step).abs() < 1e-9 {
                    assert_eq!((i ^ j).count_ones(), 1);
                }
            }
        }
    }

    #[test]
    fn rrc_unit_energy_and_symmetry() {
        for (b, span, sps) in [(0.35, 8, 8), (0.25, 6, 4), (1.0, 4, 2), (0.5, 2, 2)] {
            let t = rrc_taps(b, span, sps);
            assert_eq!(t.len(), span * sps + 1);
            assert!((t.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..t.len() {
                assert!((t[i] - t[t.len() - 1 - i]).abs() < 1e-12);
            }
            assert!(t.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rrc_matches_numerical_spectrum_integral() {
        // The RRC impulse response is the inverse transform of the square
        // root of the raised-cosine spectrum; integrate it numerically.
        let (b, sps) = (0.35, 8);
        let taps = rrc_taps(b, 8, sps);
        let spec = |f: f64| -> f64 {
            let f = f.abs();
            if f <= (1.0 - b) / 2.0 {
                1.0
            } else if f <= (1.0 + b) / 2.0 {
                (0.5 * (1.0 + (PI / b * (f - (1.0 - b) / 2.0)).cos())).sqrt()
            } else {
                0.0
            }
        };
        let h = |t: f64| -> f64 {
            let n = 20000;
            let fmax = (1.0 + b) / 2.0;
            let df = 2.0 * fmax / n as f64;
            (0..n)
                .map(|k| {
                    let f = -fmax + (k as f64 + 0.5) * df;
                    spec(f) * (2.0 * PI * f * t).cos() * df
                })
                .sum()
        };
        let centre = taps.len() / 2;
        let scale = taps[centre] / h(0.0);
        for off in [1, 3, 4, 8, 13] {
            let t = off as f64 / sps as f64;
            assert!((taps[centre + off] - scale * h(t)).abs() < 1e-4, "offset {off}");
        }
    }

    #[test]
    fn ideal_pulse_is_verbatim() {
        let ch = ChannelSpec {
            snr_db: 0.0,
            pulse: Pulse::Ideal,
            sps: 1,
        };
        let syms = [0, 3, 1, 2, 2];
        let out = modulate(&syms, ModulationScheme::Qpsk, &ch, 5).unwrap();
        let c = constellation(ModulationScheme::Qpsk);
        for (o, &s) in out.iter().zip(&syms) {
            assert_eq!(*o, c[s]);
        }
    }

    #[test]
    fn constant_stream_settles() {
        let ch = ChannelSpec {
            snr_db: 0.0,
            pulse: Pulse::default(),
            sps: 1,
        };
        let out = modulate(&[3; 64], ModulationScheme::Qam16, &ch, 32).unwrap();
        for o in &out {
            assert!((o - out[0]).norm() < 1e-12);
        }
    }

    #[test]
    fn shaped_power_near_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in [ModulationScheme::Bpsk, ModulationScheme::Qam64, ModulationScheme::Qam512X] {
            let ch = ChannelSpec {
                snr_db: 0.0,
                pulse: Pulse::default(),
                sps: 8,
            };
            let syms: Vec<usize> = (0..ch.symbols_needed(1024))
                .map(|_| rng.random_range(0..s.size()))
                .collect();
            let p = power(&modulate(&syms, s, &ch, 1024).unwrap());
            assert!((0.5..=2.0).contains(&p), "{s}: {p}");
        }
    }

    #[test]
    fn awgn_variance_and_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sig = vec![Complex64::new(1.0, 0.0); 1_000_000];
        let noisy = add_awgn(&sig, 0.0, &mut rng).unwrap();
        let (mut vr, mut vi) = (0.0, 0.0);
        for (n, s) in noisy.iter().zip(&sig) {
            let d = n - s;
            vr += d.re * d.re;
            vi += d.im * d.im;
        }
        let n = sig.len() as f64;
        assert!((vr / n - 0.5).abs() < 0.005 && (vi / n - 0.5).abs() < 0.005);
        let quiet = add_awgn(&sig[..100], 300.0, &mut rng).unwrap();
        assert!(quiet.iter().zip(&sig).all(|(a, b)| (a - b).norm() < 1e-12));
        assert!(add_awgn(&[Complex64::new(0.0, 0.0); 4], 0.0, &mut rng).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = DatasetSpec {
            schemes: vec![ModulationScheme::Qpsk, ModulationScheme::Qam16, ModulationScheme::Qam32X],
            lengths: vec![64],
            snrs: vec![0.0, 10.0],
            per_cell: 5,
            seed: 9,
            ..DatasetSpec::torchsig_qam()
        };
        let a = spec.generate_length(64).unwrap();
        let b = spec.generate_length(64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![10, 10, 10]);
        assert_eq!(a.samples[7], spec.sample(0, 1, 2, 64).unwrap());
        let other = DatasetSpec { seed: 10, ..spec.clone() }.generate_length(64).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn snr_ranges() {
        assert_eq!(
            parse_snr_range("-15:5:20").unwrap(),
            vec![-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0]
        );
        assert_eq!(parse_snr_range("0:3:10").unwrap(), vec![0.0, 3.0, 6.0, 9.0]);
        assert!(parse_snr_range("0:0:10").is_err());
        assert!(parse_snr_range("0:5").is_err());
        assert!(parse_snr_range("10:5:0").is_err());
    }

    #[test]
    fn unknown_scheme_rejected() {
        assert_eq!("QAM64".parse::<ModulationScheme>().unwrap(), ModulationScheme::Qam64);
        assert!("qam63".parse::<ModulationScheme>().is_err());
    }
}
