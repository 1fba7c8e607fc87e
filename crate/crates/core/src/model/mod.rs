//! The full classifier: a stack of blocks, each a denoising unit followed by
//! a selective SSM unit, then mean pooling over length and a linear head.
//!
//! Convolutions work on the channel-major layout `[B, C, L]`; the SSM unit
//! transposes to `[B, L, D]` and back. With the gate enabled the SSM unit is
//!
//! ```text
//! u = silu(causal_dwconv(x·W_in))    z = x·W_gate
//! h + (S6(u) ⊙ silu(z))·W_out
//! ```
//!
//! and without it the bare S6 layer.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{Graph, Padding, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::shrink::DenoiseUnit;
use crate::sssm::{uniform_tensor, ScanMode, SsmLayer};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Width of the causal depthwise convolution inside the gated SSM unit.
pub const GATE_CONV_WIDTH: usize = 4;

/// Architecture and initialization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MamcaConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub n_state: usize,
    /// Width of the denoising convolution; odd.
    pub kernel: usize,
    /// Inner width multiplier of the gated SSM unit.
    pub expand: usize,
    pub num_classes: usize,
    /// 2 for I/Q input.
    pub in_channels: usize,
    pub use_denoise: bool,
    pub use_ssm: bool,
    pub use_gate: bool,
    pub use_norm: bool,
    pub scan_mode: ScanMode,
    pub seed: u64,
}

impl Default for MamcaConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            d_model: 64,
            n_state: 16,
            kernel: 5,
            expand: 2,
            num_classes: 6,
            in_channels: 2,
            use_denoise: true,
            use_ssm: true,
            use_gate: true,
            use_norm: false,
            scan_mode: ScanMode::Sequential,
            seed: 0,
        }
    }
}

impl MamcaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("d_model", self.d_model),
            ("n_state", self.n_state),
            ("kernel", self.kernel),
            ("expand", self.expand),
            ("in_channels", self.in_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Shortest input length the convolutions accept.
    pub fn min_length(&self) -> usize {
        let gate = if self.use_ssm && self.use_gate {
            GATE_CONV_WIDTH
        } else {
            1
        };
        self.kernel.max(gate)
    }

    fn block_input(&self, block: usize) -> usize {
        if block == 0 {
            self.in_channels
        } else {
            self.d_model
        }
    }

    /// Closed-form parameter count, derived from the layer shapes alone.
    pub fn param_count(&self) -> usize {
        let (d, n, k) = (self.d_model, self.n_state, self.kernel);
        let inner = self.expand * d;
        let mut total = d * self.num_classes + self.num_classes;
        for block in 0..self.num_blocks {
            let c = self.block_input(block);
            total += if self.use_denoise {
                DenoiseUnit::param_count(c, d, k)
            } else if c != d {
                d * c * k + d
            } else {
                0
            };
            if self.use_ssm {
                total += if self.use_gate {
                    2 * d * inner
                        + inner * GATE_CONV_WIDTH
                        + inner
                        + SsmLayer::param_count(inner, n)
                        + inner * d
                } else {
                    SsmLayer::param_count(d, n)
                };
            }
        }
        total
    }
}

/// Channel lift without shrinkage, used when denoising is ablated.
#[derive(Clone, Debug)]
struct PlainLift {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
enum FrontEnd {
    Denoise(DenoiseUnit),
    Lift(PlainLift),
    Identity,
}

#[derive(Clone, Debug)]
enum SsmUnit {
    Gated {
        in_x: ParamId,
        in_z: ParamId,
        conv_w: ParamId,
        conv_b: ParamId,
        ssm: SsmLayer,
        out: ParamId,
    },
    Bare(SsmLayer),
    Identity,
}

#[derive(Clone, Debug)]
struct Block {
    front: FrontEnd,
    ssm: SsmUnit,
}

/// Prediction for one input row.
#[derive(Clone, Debug, PartialEq)]
pub struct Classification<T> {
    pub label: usize,
    pub probs: Vec<T>,
}

/// A built classifier: configuration, parameters and layer wiring.
#[derive(Clone, Debug)]
pub struct MamcaModel<T> {
    config: MamcaConfig,
    store: ParamStore<T>,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<T: Scalar> MamcaModel<T> {
    /// Builds and initializes a model; the initial parameters depend only
    /// on the config (including its seed).
    pub fn build(config: MamcaConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (d, k) = (config.d_model, config.kernel);
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let c = config.block_input(i);
            let prefix = format!("block{i}");
            let front = if config.use_denoise {
                FrontEnd::Denoise(DenoiseUnit::new(
                    &mut store,
                    &format!("{prefix}.denoise"),
                    c,
                    d,
                    k,
                    config.use_norm,
                    &mut rng,
                )?)
            } else if c != d {
                let w = store.add(
                    format!("{prefix}.lift_w"),
                    uniform_tensor(&mut rng, vec![d, c, k], 1.0 / ((c * k) as f64).sqrt()),
                )?;
                let b = store.add(format!("{prefix}.lift_b"), Tensor::zeros(vec![d]))?;
                FrontEnd::Lift(PlainLift { w, b })
            } else {
                FrontEnd::Identity
            };
            let ssm = if !config.use_ssm {
                SsmUnit::Identity
            } else if config.use_gate {
                let inner = config.expand * d;
                let fan_d = 1.0 / (d as f64).sqrt();
                let p = format!("{prefix}.ssm");
                let in_x = store.add(
                    format!("{p}.in_x"),
                    uniform_tensor(&mut rng, vec![d, inner], fan_d),
                )?;
                let in_z = store.add(
                    format!("{p}.in_z"),
                    uniform_tensor(&mut rng, vec![d, inner], fan_d),
                )?;
                let conv_w = store.add(
                    format!("{p}.conv_w"),
                    uniform_tensor(
                        &mut rng,
                        vec![inner, GATE_CONV_WIDTH],
                        1.0 / (GATE_CONV_WIDTH as f64).sqrt(),
                    ),
                )?;
                let conv_b = store.add(format!("{p}.conv_b"), Tensor::zeros(vec![inner]))?;
                let ssm = SsmLayer::new(&mut store, &format!("{p}.s6"), inner, config.n_state, &mut rng)?;
                let out = store.add(
                    format!("{p}.out"),
                    uniform_tensor(&mut rng, vec![inner, d], 1.0 / (inner as f64).sqrt()),
                )?;
                SsmUnit::Gated {
                    in_x,
                    in_z,
                    conv_w,
                    conv_b,
                    ssm,
                    out,
                }
            } else {
                SsmUnit::Bare(SsmLayer::new(
                    &mut store,
                    &format!("{prefix}.ssm.s6"),
                    d,
                    config.n_state,
                    &mut rng,
                )?)
            };
            blocks.push(Block { front, ssm });
        }
        let head_w = store.add(
            "head.w",
            uniform_tensor(&mut rng, vec![d, config.num_classes], 1.0 / (d as f64).sqrt()),
        )?;
        let head_b = store.add("head.b", Tensor::zeros(vec![config.num_classes]))?;
        Ok(Self {
            config,
            store,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &MamcaConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Parameter count from the registry.
    pub fn param_count(&self) -> usize {
        self.store.value_count()
    }

    pub fn set_scan_mode(&mut self, mode: ScanMode) {
        self.config.scan_mode = mode;
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "model input [B, C, L]",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), self.config.in_channels, 0],
            });
        }
        if shape[2] < self.config.min_length() {
            return Err(Error::invalid(format!(
                "input length {} shorter than the minimum {}",
                shape[2],
                self.config.min_length()
            )));
        }
        Ok(())
    }

    fn ssm_unit(&self, g: &mut Graph<T>, unit: &SsmUnit, h: Var) -> Result<Var> {
        let store = &self.store;
        let mode = self.config.scan_mode;
        match unit {
            SsmUnit::Identity => Ok(h),
            SsmUnit::Bare(layer) => {
                let t = g.transpose_last(h)?;
                let y = layer.forward(g, store, t, mode)?;
                g.transpose_last(y)
            }
            SsmUnit::Gated {
                in_x,
                in_z,
                conv_w,
                conv_b,
                ssm,
                out,
            } => {
                let t = g.transpose_last(h)?;
                let wx = g.param(store, *in_x);
                let wz = g.param(store, *in_z);
                let u = g.matmul(t, wx)?;
                let z = g.matmul(t, wz)?;
                let u = g.transpose_last(u)?;
                let cw = g.param(store, *conv_w);
                let cb = g.param(store, *conv_b);
                let u = g.depthwise_conv1d(u, cw, Some(cb), Padding::Causal)?;
                let u = g.transpose_last(u)?;
                let u = g.silu(u)?;
                let y = ssm.forward(g, store, u, mode)?;
                let gate = g.silu(z)?;
                let y = g.mul(y, gate)?;
                let wo = g.param(store, *out);
                let y = g.matmul(y, wo)?;
                let y = g.transpose_last(y)?;
                g.add(h, y)
            }
        }
    }

    /// Records the forward pass of `x: [B, C_in, L]` and returns the logits
    /// node `[B, K]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let store = &self.store;
        let mut h = x;
        for block in &self.blocks {
            h = match &block.front {
                FrontEnd::Denoise(unit) => unit.forward(g, store, h)?,
                FrontEnd::Lift(lift) => {
                    let w = g.param(store, lift.w);
                    let b = g.param(store, lift.b);
                    g.conv1d(h, w, Some(b), Padding::Same)?
                }
                FrontEnd::Identity => h,
            };
            h = self.ssm_unit(g, &block.ssm, h)?;
        }
        let pooled = g.mean(h, &[2])?;
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        let logits = g.matmul(pooled, w)?;
        let logits = g.add(logits, b)?;
        if !g.value(logits).all_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(logits)
    }

    /// Logits for a batch, outside any caller-visible graph.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.input(x.detached());
        let out = self.forward(&mut g, xv)?;
        Ok(g.value(out).detached())
    }

    /// Arg-max label and softmax probabilities for every row of `x`.
    pub fn classify(&self, x: &Tensor<T>) -> Result<Vec<Classification<T>>> {
        let logits = self.logits(x)?;
        Ok(logits
            .data()
            .chunks_exact(self.config.num_classes)
            .map(|row| Classification {
                label: argmax(row),
                probs: softmax(row),
            })
            .collect())
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax of one row.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(seed: u64) -> MamcaConfig {
        MamcaConfig {
            d_model: 8,
            n_state: 4,
            num_classes: 3,
            seed,
            ..Default::default()
        }
    }

    fn random_input(b: usize, l: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * 2 * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![b, 2, l], data).unwrap()
    }

    #[test]
    fn analytic_count_matches_registry() {
        let full = MamcaConfig {
            num_classes: 6,
            ..Default::default()
        };
        let variants = [
            full.clone(),
            MamcaConfig { use_gate: false, ..full.clone() },
            MamcaConfig { use_ssm: false, ..full.clone() },
            MamcaConfig { use_denoise: false, ..full.clone() },
            MamcaConfig { use_denoise: false, use_ssm: false, ..full.clone() },
            MamcaConfig { num_blocks: 3, expand: 3, ..full.clone() },
        ];
        for cfg in variants {
            let m = MamcaModel::<f32>::build(cfg.clone()).unwrap();
            assert_eq!(m.param_count(), cfg.param_count(), "{cfg:?}");
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MamcaModel::<f32>::build(small(5)).unwrap();
        let b = MamcaModel::<f32>::build(small(5)).unwrap();
        let c = MamcaModel::<f32>::build(small(6)).unwrap();
        let vals = |m: &MamcaModel<f32>| {
            m.store()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            MamcaConfig { kernel: 4, ..small(0) },
            MamcaConfig { num_blocks: 0, ..small(0) },
            MamcaConfig { num_classes: 1, ..small(0) },
            MamcaConfig { expand: 0, ..small(0) },
        ] {
            assert!(matches!(MamcaModel::<f64>::build(cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn logits_shape_and_batch_independence() {
        let m = MamcaModel::<f64>::build(small(1)).unwrap();
        let x = random_input(1, 16, 2);
        let mut twice = x.data().to_vec();
        twice.extend_from_slice(x.data());
        let x2 = Tensor::new(vec![2, 2, 16], twice).unwrap();
        let l1 = m.logits(&x).unwrap();
        let l2 = m.logits(&x2).unwrap();
        assert_eq!(l2.shape(), &[2, 3]);
        assert_eq!(&l2.data()[..3], l1.data());
        assert_eq!(&l2.data()[3..], l1.data());
        assert!(l2.all_finite());
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let m = MamcaModel::<f64>::build(small(1)).unwrap();
        let x = Tensor::<f64>::zeros(vec![1, 3, 16]);
        assert!(matches!(m.logits(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn any_length_accepted() {
        let m = MamcaModel::<f64>::build(small(1)).unwrap();
        for l in [5, 16, 37] {
            assert_eq!(m.logits(&random_input(2, l, 3)).unwrap().shape(), &[2, 3]);
        }
    }

    #[test]
    fn ablation_variants_run() {
        for cfg in [
            MamcaConfig { use_ssm: false, ..small(0) },
            MamcaConfig { use_denoise: false, ..small(0) },
            MamcaConfig { use_gate: false, ..small(0) },
            MamcaConfig { use_norm: true, ..small(0) },
        ] {
            let m = MamcaModel::<f64>::build(cfg).unwrap();
            assert!(m.logits(&random_input(2, 12, 4)).unwrap().all_finite());
        }
    }

    #[test]
    fn classify_examples() {
        assert_eq!(argmax(&[3.0, 1.0, 1.0, 1.0]), 0);
        let p = softmax(&[3.0, 1.0, 1.0, 1.0]);
        let q = softmax(&[103.0, 101.0, 101.0, 101.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        let m = MamcaModel::<f64>::build(small(2)).unwrap();
        for c in m.classify(&random_input(4, 16, 9)).unwrap() {
            assert!((c.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(c.label, argmax(&c.probs));
        }
    }

    #[test]
    fn parallel_scan_mode_matches() {
        let mut m = MamcaModel::<f64>::build(small(3)).unwrap();
        let x = random_input(2, 33, 5);
        let a = m.logits(&x).unwrap();
        m.set_scan_mode(ScanMode::Parallel);
        let b = m.logits(&x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
