//! Central-difference verification of the analytic gradients. Perturbs a
//! random sample of coordinates in every trainable tensor and compares
//! (loss(x+h) - loss(x-h)) / 2h against the backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::peft::{trainable_mask, LoraAdapters, PeftMode};

use super::forward::{loss_and_grad, loss_only, LossMask};
use super::Parameters;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
    /// Tensor and flat coordinate where the worst error lives.
    pub worst: (String, usize),
}

/// Relative error with a small absolute floor so near-zero gradients compare
/// on difference magnitude rather than blowing up the ratio.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn poke(p: &mut Parameters, ad: &mut Option<LoraAdapters>, name: &str, idx: usize, value: f64) {
    let t = if name.contains(".lora.") {
        ad.as_mut().expect("adapter tensor requires adapters").tensor_mut(name).unwrap()
    } else {
        p.tensor_mut(name).unwrap()
    };
    t.data_mut()[idx] = value;
}

fn peek(p: &Parameters, ad: &Option<LoraAdapters>, name: &str, idx: usize) -> f64 {
    let t = if name.contains(".lora.") {
        ad.as_ref().expect("adapter tensor requires adapters").tensor(name).unwrap()
    } else {
        p.tensor(name).unwrap()
    };
    t.data()[idx]
}

#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check(
    params: &Parameters,
    adapters: Option<&LoraAdapters>,
    mode: &PeftMode,
    tokens: &[usize],
    targets: &[usize],
    mask: &LossMask,
    coords_per_tensor: usize,
    step: f64,
    seed: u64,
) -> Result<FdReport> {
    let trainable = trainable_mask(mode, &params.config)?;
    let (_, grads) = loss_and_grad(params, tokens, targets, mask, adapters, Some(&trainable))?;

    let mut p = params.clone();
    let mut ad = adapters.cloned();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport { max_rel_err: 0.0, n_checked: 0, worst: (String::new(), 0) };

    for name in trainable.iter() {
        let numel = grads.get(name).expect("trainable tensor has a gradient").numel();
        let n_coords = coords_per_tensor.min(numel);
        let coords = rand::seq::index::sample(&mut rng, numel, n_coords);
        for idx in coords.iter() {
            let analytic = grads.get(name).unwrap().data()[idx];
            // Perturb in place and restore exactly; f64 assignment is lossless.
            let old = peek(&p, &ad, name, idx);
            poke(&mut p, &mut ad, name, idx, old + step);
            let plus = loss_only(&p, tokens, targets, mask, ad.as_ref())?;
            poke(&mut p, &mut ad, name, idx, old - step);
            let minus = loss_only(&p, tokens, targets, mask, ad.as_ref())?;
            poke(&mut p, &mut ad, name, idx, old);

            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_err(numeric, analytic);
            report.n_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (name.to_string(), idx);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::peft::{attach_lora, LoraTarget};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            context_len: 12,
            vocab_size: 50,
        }
    }

    fn inputs() -> (Vec<usize>, Vec<usize>, LossMask) {
        let tokens = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let targets = vec![1, 4, 1, 5, 9, 2, 6, 5];
        let mask = LossMask::suffix_from(8, 3);
        (tokens, targets, mask)
    }

    #[test]
    fn full_mode_gradients_match_finite_differences() {
        let p = Parameters::init(&cfg(), 17).unwrap();
        let (tokens, targets, mask) = inputs();
        let r = finite_diff_check(&p, None, &PeftMode::Full, &tokens, &targets, &mask, 4, 1e-5, 0)
            .unwrap();
        assert!(r.max_rel_err < 1e-4, "max rel err {} at {:?}", r.max_rel_err, r.worst);
        assert!(r.n_checked > 0);
    }

    #[test]
    fn lora_mode_gradients_match_finite_differences() {
        let p = Parameters::init(&cfg(), 17).unwrap();
        // give B nonzero values so its gradient path is exercised from a
        // non-degenerate point
        let mut ad = attach_lora(&p, 4, &[LoraTarget::Wq, LoraTarget::Wv], 5).unwrap();
        for f in ad.entries.values_mut() {
            for (i, x) in f.b.data_mut().iter_mut().enumerate() {
                *x = 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let (tokens, targets, mask) = inputs();
        let r = finite_diff_check(
            &p,
            Some(&ad),
            &PeftMode::lora(4),
            &tokens,
            &targets,
            &mask,
            4,
            1e-5,
            1,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "max rel err {} at {:?}", r.max_rel_err, r.worst);
    }
}
