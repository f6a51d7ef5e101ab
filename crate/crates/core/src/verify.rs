//! End-to-end gradient verification for the full model.
//!
//! Each of the three pre-training losses is treated as a scalar function of
//! the parameters; central finite differences on a coordinate subsample are
//! compared against the tape's analytic gradients. The shared embedding
//! table is skipped for the discriminator-path losses: that path reads it
//! through a stop-gradient, so the analytic gradient there is zero by
//! design while a finite difference would still see the perturbation. Its
//! exact-zero contract is asserted separately.

use crate::data::MASK;
use crate::error::Result;
use crate::model::{
    decode_teacher_forced, discriminator_forward, encode, generator_forward, ModelConfig,
    ModelTensors, Parameters,
};
use crate::objectives::{
    apply_mlm_mask, build_csp_plan, build_mlm_plan, csp_decoder_input, csp_loss, mlm_loss,
    rtd_labels, rtd_loss, sample_discriminator_input, CspMode, MlmPlan,
};
use crate::tensor::{backward, Array, Tape, Tensor};

/// Result of checking one loss against finite differences.
#[derive(Debug, Clone)]
pub struct LossCheck {
    pub loss: &'static str,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

struct Fixture {
    config: ModelConfig,
    masked: Vec<u32>,
    plan: MlmPlan,
    corrupted: Vec<u32>,
    labels: Vec<bool>,
    span_input: Vec<u32>,
    span_target: Vec<u32>,
}

impl Fixture {
    fn new(config: &ModelConfig, seed: u64) -> Result<Fixture> {
        let n = 12;
        let tokens: Vec<u32> = (0..n)
            .map(|i| 106 + ((seed as usize + i * 7) % (config.vocab - 106)) as u32)
            .collect();
        let mut rng = crate::rng::example_rng(seed, 0);
        let plan = build_mlm_plan(&tokens, 0.25, &mut rng)?;
        let masked = apply_mlm_mask(&tokens, &plan, MASK);
        // Freeze a discriminator input sampled from an arbitrary flat
        // generator, so the RTD loss is a pure function of the parameters.
        let flat = Array::<f64>::zeros(&[tokens.len(), config.vocab]);
        let corrupted = sample_discriminator_input(&tokens, &plan, &flat, &mut rng);
        let labels = rtd_labels(&tokens, &corrupted);
        let span = build_csp_plan(&tokens, 0.25, 3.0, CspMode::Span, &[], &mut rng)?;
        Ok(Fixture {
            config: config.clone(),
            masked,
            plan,
            corrupted,
            labels,
            span_input: span.corrupted,
            span_target: span.target,
        })
    }

    fn loss(
        &self,
        which: &str,
        params: &Parameters<f64>,
    ) -> Result<(ModelTensors<f64>, Tensor<f64>)> {
        let tape: Tape<f64> = Tape::new();
        let mt = params.leaf(&tape);
        let loss = match which {
            "mlm" => {
                let mask = vec![true; self.masked.len()];
                let logits = generator_forward(&mt, &self.config, &self.masked, &mask)?;
                mlm_loss(&logits, &self.plan)?
            }
            "rtd" => {
                let mask = vec![true; self.corrupted.len()];
                let scores =
                    discriminator_forward(&mt, &self.config, &self.corrupted, &mask, None)?;
                rtd_loss(&scores, &self.labels)
            }
            "csp" => {
                let mask = vec![true; self.span_input.len()];
                let memory = encode(&mt, &self.config, &self.span_input, &mask, None)?;
                let dec_input = csp_decoder_input(&self.span_target);
                let logits =
                    decode_teacher_forced(&mt, &self.config, &memory, &mask, &dec_input)?;
                csp_loss(&logits, &self.span_target)?
            }
            other => panic!("unknown loss {other}"),
        };
        Ok((mt, loss))
    }
}

fn set_coord(params: &mut Parameters<f64>, tensor_index: usize, elem: usize, value: f64) {
    let mut i = 0;
    params.visit_mut(&mut |_, a| {
        if i == tensor_index {
            a.data_mut()[elem] = value;
        }
        i += 1;
    });
}

/// Runs 64-bit central finite differences for each pre-training loss on a
/// deterministic fixture, checking up to `coords_per_tensor` coordinates of
/// every parameter tensor. Relative error uses `|a − f| / max(1, |f|)`.
pub fn check_losses(
    config: &ModelConfig,
    seed: u64,
    coords_per_tensor: usize,
    h: f64,
) -> Result<Vec<LossCheck>> {
    let fixture = Fixture::new(config, seed)?;
    let base = Parameters::<f64>::init(config, seed);
    let mut names = Vec::new();
    base.visit(&mut |name, a| names.push((name, a.numel())));

    let mut out = Vec::new();
    for which in ["mlm", "rtd", "csp"] {
        let mut params = base.clone();

        // Analytic gradients, aligned with visit order.
        let named = {
            let (mt, loss) = fixture.loss(which, &params)?;
            let grads = backward(&loss)?;
            params.grads_by_name(&mt, &grads)
        };

        let mut max_rel = 0.0f64;
        let mut checked = 0;
        for (ti, (name, numel)) in names.iter().enumerate() {
            // The discriminator path reads the shared table through a
            // stop-gradient; finite differences would measure the frozen
            // branch, so skip it (its zero-gradient contract is tested
            // elsewhere).
            if which != "mlm" && name == "embed.e_g" {
                continue;
            }
            let stride = (numel / coords_per_tensor.max(1)).max(1);
            let mut elem = 0;
            while elem < *numel {
                let orig = {
                    let mut v = 0.0;
                    let mut i = 0;
                    params.visit(&mut |_, a| {
                        if i == ti {
                            v = a.data()[elem];
                        }
                        i += 1;
                    });
                    v
                };
                set_coord(&mut params, ti, elem, orig + h);
                let (_mt, lp) = fixture.loss(which, &params)?;
                let plus = lp.item();
                set_coord(&mut params, ti, elem, orig - h);
                let (_mt, lm) = fixture.loss(which, &params)?;
                let minus = lm.item();
                set_coord(&mut params, ti, elem, orig);

                let fd = (plus - minus) / (2.0 * h);
                let analytic = named[ti].1.data()[elem];
                let rel = (analytic - fd).abs() / fd.abs().max(1.0);
                if rel > max_rel {
                    max_rel = rel;
                }
                checked += 1;
                elem += stride;
            }
        }
        out.push(LossCheck {
            loss: which,
            max_rel_err: max_rel,
            coords_checked: checked,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let config = ModelConfig::tiny(130);
        let checks = check_losses(&config, 17, 2, 1e-5).unwrap();
        assert_eq!(checks.len(), 3);
        for c in &checks {
            assert!(
                c.max_rel_err <= 1e-4,
                "{} gradient check failed: rel err {} over {} coords",
                c.loss,
                c.max_rel_err,
                c.coords_checked
            );
            assert!(c.coords_checked > 50);
        }
    }
}
