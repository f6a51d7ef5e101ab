//! AdamW with decoupled weight decay, linear warmup/decay, and global-norm
//! gradient clipping.
//!
//! Moment arithmetic runs in 64-bit regardless of the parameter precision,
//! so update math is identical between the 32-bit training path and 64-bit
//! gradient-check configurations. Embedding tables and the relative-position
//! table are excluded from weight decay — decaying the embedding delta would
//! drag the discriminator's embeddings back toward the shared table — as are
//! all vectors (layer-norm gains/biases and feed-forward biases).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::Parameters;
use crate::tensor::{Array, Scalar};

// ── Training configuration ───────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup: u64,
    pub total_steps: u64,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            peak_lr: 1e-4,
            warmup: 100,
            total_steps: 1000,
            batch: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup >= self.total_steps {
            return Err(CoreError::Config(format!(
                "warmup {} must be below total steps {}",
                self.warmup, self.total_steps
            )));
        }
        if self.batch == 0 {
            return Err(CoreError::Config("batch size must be positive".into()));
        }
        for (name, v, lo, hi) in [
            ("beta1", self.beta1, 0.0, 1.0),
            ("beta2", self.beta2, 0.0, 1.0),
        ] {
            if !(lo..hi).contains(&v) {
                return Err(CoreError::Config(format!("{name} {v} outside [{lo}, {hi})")));
            }
        }
        if self.eps <= 0.0 || self.peak_lr < 0.0 || self.weight_decay < 0.0 || self.clip_norm <= 0.0
        {
            return Err(CoreError::Config(
                "eps and clip must be positive; lr and decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at a 1-based step: a linear ramp from zero to the peak
/// over the warmup, then linear decay to zero at the final step.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step <= cfg.warmup && cfg.warmup > 0 {
        cfg.peak_lr * step as f64 / cfg.warmup as f64
    } else {
        let span = (cfg.total_steps - cfg.warmup) as f64;
        cfg.peak_lr * (cfg.total_steps - step) as f64 / span
    }
}

// ── Optimizer state ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<S: Scalar> {
    pub m: Array<S>,
    pub v: Array<S>,
}

/// First/second moment estimates keyed by parameter name, plus the shared
/// step count used for bias correction.
#[derive(Debug, Clone, Default)]
pub struct AdamState<S: Scalar> {
    pub step: u64,
    pub slots: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> AdamState<S> {
        AdamState {
            step: 0,
            slots: BTreeMap::new(),
        }
    }
}

/// Whether a parameter receives weight decay: matrices only, and never the
/// embedding or relative-position tables.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && !name.starts_with("embed.") && !name.starts_with("rel.")
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [(String, Array<S>)], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, g) in grads.iter() {
        for &v in g.data() {
            let v = v.to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v = S::from_f64(v.to_f64() * scale);
            }
        }
    }
    norm
}

/// One AdamW update: `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)` with
/// bias-corrected moments. `grads` must align with `Parameters::visit`
/// order (as produced by `grads_by_name`). A non-finite gradient aborts
/// with the offending tensor's name before any parameter moves.
pub fn adamw_step<S: Scalar>(
    params: &mut Parameters<S>,
    grads: &[(String, Array<S>)],
    state: &mut AdamState<S>,
    cfg: &TrainConfig,
    lr_t: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(CoreError::NonFiniteGradient {
                tensor: name.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let mut idx = 0;
    let mut result = Ok(());
    params.visit_mut(&mut |name, theta| {
        if result.is_err() {
            return;
        }
        let (gname, g) = &grads[idx];
        idx += 1;
        if *gname != name || g.shape() != theta.shape() {
            result = Err(CoreError::Config(format!(
                "gradient list out of sync at '{name}' (got '{gname}')"
            )));
            return;
        }
        let slot = state.slots.entry(name.clone()).or_insert_with(|| Moments {
            m: Array::zeros(g.shape()),
            v: Array::zeros(g.shape()),
        });
        let wd = if decays(&name, theta.shape()) {
            cfg.weight_decay
        } else {
            0.0
        };
        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        let th = theta.data_mut();
        for i in 0..th.len() {
            let gi = g.data()[i].to_f64();
            let mi = cfg.beta1 * m[i].to_f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i].to_f64() + (1.0 - cfg.beta2) * gi * gi;
            m[i] = S::from_f64(mi);
            v[i] = S::from_f64(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let ti = th[i].to_f64();
            th[i] = S::from_f64(ti - lr_t * (m_hat / (v_hat.sqrt() + cfg.eps) + wd * ti));
        }
    });
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn grads_like(params: &Parameters<f64>, fill: f64) -> Vec<(String, Array<f64>)> {
        let mut out = Vec::new();
        params.visit(&mut |name, a| {
            out.push((name, Array::new(a.shape().to_vec(), vec![fill; a.numel()])));
        });
        out
    }

    fn wd_free_config() -> TrainConfig {
        TrainConfig {
            weight_decay: 0.0,
            eps: 1e-6,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_ramps_and_decays_linearly() {
        let cfg = TrainConfig {
            peak_lr: 1.0,
            warmup: 100,
            total_steps: 1000,
            ..TrainConfig::default()
        };
        assert!((lr_at_step(50, &cfg) - 0.5).abs() < 1e-12);
        assert!((lr_at_step(100, &cfg) - 1.0).abs() < 1e-12);
        assert_eq!(lr_at_step(1000, &cfg), 0.0);
        // Midpoint of the decay leg: (1000 − 550) / 900.
        assert!((lr_at_step(550, &cfg) - 0.5).abs() < 1e-12);
        // Past the horizon the rate stays at zero.
        assert_eq!(lr_at_step(5000, &cfg), 0.0);
    }

    #[test]
    fn schedule_is_continuous_piecewise_linear_with_max_at_warmup() {
        let cfg = TrainConfig {
            peak_lr: 3e-4,
            warmup: 7,
            total_steps: 50,
            ..TrainConfig::default()
        };
        let peak = lr_at_step(7, &cfg);
        for s in 0..=50 {
            assert!(lr_at_step(s, &cfg) <= peak + 1e-15);
        }
        // Second differences vanish within each linear segment.
        for s in 1..6 {
            let (a, b, c) = (lr_at_step(s, &cfg), lr_at_step(s + 1, &cfg), lr_at_step(s + 2, &cfg));
            assert!((a + c - 2.0 * b).abs() < 1e-15);
        }
        for s in 8..48 {
            let (a, b, c) = (lr_at_step(s, &cfg), lr_at_step(s + 1, &cfg), lr_at_step(s + 2, &cfg));
            assert!((a + c - 2.0 * b).abs() < 1e-15);
        }
        // Continuity across the knee.
        assert!((lr_at_step(7, &cfg) - lr_at_step(8, &cfg)).abs() < cfg.peak_lr / 40.0);
    }

    #[test]
    fn first_step_update_matches_hand_evaluation() {
        // t=1, θ=1, g=1, lr=0.1, wd=0: m̂ = 1, v̂ = 1,
        // θ' = 1 − 0.1·(1/(1 + eps)) ≈ 0.9.
        let config = ModelConfig::tiny(20);
        let mut params = Parameters::<f64>::init(&config, 1);
        params.visit_mut(&mut |_, a| {
            for v in a.data_mut() {
                *v = 1.0;
            }
        });
        let grads = grads_like(&params, 1.0);
        let mut state = AdamState::new();
        adamw_step(&mut params, &grads, &mut state, &wd_free_config(), 0.1).unwrap();
        assert_eq!(state.step, 1);
        params.visit(&mut |name, a| {
            for &v in a.data() {
                assert!((v - 0.9).abs() < 1e-6, "{name}: {v}");
            }
        });
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters_alone() {
        let config = ModelConfig::tiny(20);
        let mut params = Parameters::<f64>::init(&config, 2);
        let before = params.clone();
        let grads = grads_like(&params, 0.0);
        let mut state = AdamState::new();
        for _ in 0..5 {
            adamw_step(&mut params, &grads, &mut state, &wd_free_config(), 0.1).unwrap();
        }
        let mut same = true;
        params.visit(&mut |name, a| {
            let mut expect = None;
            before.visit(&mut |n2, b| {
                if n2 == name {
                    expect = Some(b.clone());
                }
            });
            if a != &expect.unwrap() {
                same = false;
            }
        });
        assert!(same, "zero gradients and zero decay must be a no-op");
    }

    #[test]
    fn pure_decay_step_scales_decayable_weights() {
        // wd=0.01, g=0, lr=0.1, θ=1 → θ' = 1 − 0.1·0.01·1 = 0.999 on
        // matrices; embeddings, the position table, and vectors stay put.
        let config = ModelConfig::tiny(20);
        let mut params = Parameters::<f64>::init(&config, 3);
        params.visit_mut(&mut |_, a| {
            for v in a.data_mut() {
                *v = 1.0;
            }
        });
        let grads = grads_like(&params, 0.0);
        let mut state = AdamState::new();
        let cfg = TrainConfig::default(); // wd = 0.01
        adamw_step(&mut params, &grads, &mut state, &cfg, 0.1).unwrap();
        params.visit(&mut |name, a| {
            let expected = if decays(&name, a.shape()) { 0.999 } else { 1.0 };
            for &v in a.data() {
                assert!((v - expected).abs() < 1e-12, "{name}: {v} vs {expected}");
            }
        });
    }

    #[test]
    fn decay_predicate_spares_embeddings_and_vectors() {
        assert!(!decays("embed.e_g", &[100, 16]));
        assert!(!decays("embed.e_delta", &[100, 16]));
        assert!(!decays("rel.table", &[16, 16]));
        assert!(!decays("encoder.0.ln1_gain", &[16]));
        assert!(!decays("encoder.0.ff_b1", &[32]));
        assert!(!decays("rtd.b", &[1]));
        assert!(decays("encoder.0.w_qc", &[16, 16]));
        assert!(decays("decoder.1.ff_w2", &[32, 16]));
        assert!(decays("rtd.w", &[16, 1]));
    }

    #[test]
    fn non_finite_gradient_aborts_with_the_tensor_name() {
        let config = ModelConfig::tiny(20);
        let mut params = Parameters::<f64>::init(&config, 4);
        let before = params.clone();
        let mut grads = grads_like(&params, 0.0);
        let victim = grads.iter().position(|(n, _)| n == "rel.table").unwrap();
        grads[victim].1.data_mut()[3] = f64::NAN;
        let mut state = AdamState::new();
        let err = adamw_step(&mut params, &grads, &mut state, &wd_free_config(), 0.1).unwrap_err();
        match err {
            CoreError::NonFiniteGradient { tensor } => assert_eq!(tensor, "rel.table"),
            other => panic!("wrong error: {other}"),
        }
        // Abort happens before any parameter moves.
        assert_eq!(state.step, 0);
        let mut i = 0;
        let mut names = Vec::new();
        before.visit(&mut |_, a| names.push(a.clone()));
        params.visit(&mut |_, a| {
            assert_eq!(a, &names[i]);
            i += 1;
        });
    }

    #[test]
    fn clipping_rescales_only_above_the_threshold() {
        // Two gradients [3] and [4]: global norm 5, max 1 → scale 0.2.
        let mut grads = vec![
            ("a".to_string(), Array::new(vec![1], vec![3.0f64])),
            ("b".to_string(), Array::new(vec![1], vec![4.0f64])),
        ];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads[0].1.data()[0] - 0.6).abs() < 1e-12);
        assert!((grads[1].1.data()[0] - 0.8).abs() < 1e-12);

        // Norm 2 with max 1 scales by 0.5.
        let mut grads = vec![("a".to_string(), Array::new(vec![1], vec![2.0f64]))];
        clip_global_norm(&mut grads, 1.0);
        assert_eq!(grads[0].1.data()[0], 1.0);

        // Under the threshold nothing changes.
        let mut grads = vec![("a".to_string(), Array::new(vec![1], vec![0.5f64]))];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_eq!(norm, 0.5);
        assert_eq!(grads[0].1.data()[0], 0.5);
    }

    #[test]
    fn post_clip_norm_never_exceeds_the_bound() {
        use crate::rng::example_rng;
        use rand::Rng;
        for trial in 0..50 {
            let mut rng = example_rng(100, trial);
            let mut grads: Vec<(String, Array<f64>)> = (0..4)
                .map(|i| {
                    let n = rng.gen_range(1..20);
                    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    (format!("g{i}"), Array::new(vec![n], data))
                })
                .collect();
            clip_global_norm(&mut grads, 1.0);
            let mut sq = 0.0;
            for (_, g) in &grads {
                for &v in g.data() {
                    sq += v * v;
                }
            }
            assert!(sq.sqrt() <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.warmup = cfg.total_steps;
        assert!(cfg.validate().is_err(), "warmup must precede the horizon");
        cfg = TrainConfig::default();
        cfg.beta2 = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.batch = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn moment_accumulation_across_steps() {
        // Two steps with constant gradient g=1, β1=0.9, β2=0.999:
        //   m_2 = 0.9·0.1 + 0.1 = 0.19, bias corr 1−0.81 = 0.19 → m̂ = 1.
        //   v_2 = 0.999·0.001 + 0.001 = 0.001999, corr 1−β2² = 0.001999 → v̂ = 1.
        // So each step moves θ by ≈ lr while the gradient stays constant.
        let config = ModelConfig::tiny(20);
        let mut params = Parameters::<f64>::init(&config, 5);
        params.visit_mut(&mut |_, a| {
            for v in a.data_mut() {
                *v = 1.0;
            }
        });
        let grads = grads_like(&params, 1.0);
        let mut state = AdamState::new();
        let cfg = wd_free_config();
        adamw_step(&mut params, &grads, &mut state, &cfg, 0.1).unwrap();
        adamw_step(&mut params, &grads, &mut state, &cfg, 0.1).unwrap();
        params.visit(&mut |name, a| {
            for &v in a.data() {
                assert!((v - 0.8).abs() < 1e-5, "{name}: {v}");
            }
        });
    }
}
