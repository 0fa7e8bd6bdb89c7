//! Adversarial objectives, the conditioning KL term and the cycle term.

use candle_core::{DType, Tensor, D};

use super::LossWeights;
use crate::assoc::{cosine_rows, ImageEncoder};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking
/// logarithms.
pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_probability(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

/// Mean of `-log p` over the batch.
fn nll(p: &Tensor) -> Result<Tensor> {
    Ok(clamp_probability(p)?.log()?.neg()?.mean_all()?)
}

/// Mean of `-log(1 - p)` over the batch.
fn nll_complement(p: &Tensor) -> Result<Tensor> {
    Ok(clamp_probability(p)?.affine(-1.0, 1.0)?.log()?.neg()?.mean_all()?)
}

/// Mean of `+log p` over the batch.
fn log_mean(p: &Tensor) -> Result<Tensor> {
    Ok(clamp_probability(p)?.log()?.mean_all()?)
}

/// Discriminator outputs at one scale, each a (B) tensor of probabilities.
pub struct DiscriminatorProbs {
    pub real_cond: Tensor,
    pub mismatched_cond: Tensor,
    pub fake_cond: Tensor,
    pub real_uncond: Tensor,
    pub mismatched_uncond: Tensor,
    pub fake_uncond: Tensor,
}

/// Conditional part `-log D(v+, c) - log(1 - D(v-, c)) - log(1 - D(v~, c))`
/// plus `uncond` times `-log D(v+) - log D(v-) - log(1 - D(v~))`; the
/// mismatched image is real for the unconditional head.
///
/// `literal` replaces every `-log(1 - D)` term with `+log D`.
pub fn discriminator_objective(p: &DiscriminatorProbs, weights: &LossWeights, literal: bool) -> Result<Tensor> {
    let fake_term = |q: &Tensor| if literal { log_mean(q) } else { nll_complement(q) };
    let cond = ((nll(&p.real_cond)? + fake_term(&p.mismatched_cond)?)? + fake_term(&p.fake_cond)?)?;
    let uncond = ((nll(&p.real_uncond)? + nll(&p.mismatched_uncond)?)? + fake_term(&p.fake_uncond)?)?;
    Ok((cond + uncond.affine(weights.uncond, 0.0)?)?)
}

/// Sum over scales of `-log D_i(v~_i, c) + uncond * -log D_i(v~_i) - cycle *
/// mean cos_i`, plus `ca * kl`. Each slice entry is one scale.
pub fn generator_objective(
    fake_cond: &[Tensor],
    fake_uncond: &[Tensor],
    cycle_cos: &[Tensor],
    kl: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    if fake_cond.len() != fake_uncond.len() || (!cycle_cos.is_empty() && cycle_cos.len() != fake_cond.len()) {
        return Err(Error::Shape("generator objective needs one entry per scale".into()));
    }
    let mut total = kl.affine(weights.ca, 0.0)?;
    for i in 0..fake_cond.len() {
        total = (total + nll(&fake_cond[i])?)?;
        total = (total + nll(&fake_uncond[i])?.affine(weights.uncond, 0.0)?)?;
        if let Some(cos) = cycle_cos.get(i) {
            total = (total - cos.mean_all()?.affine(weights.cycle, 0.0)?)?;
        }
    }
    Ok(total)
}

/// Batch mean of `0.5 * sum_j (mu_j^2 + sigma_j^2 - 2 log sigma_j - 1)` from
/// `log_sigma`.
pub fn kl_divergence(mu: &Tensor, log_sigma: &Tensor) -> Result<Tensor> {
    let var = log_sigma.affine(2.0, 0.0)?.exp()?;
    let per = ((mu.sqr()? + var)? - log_sigma.affine(2.0, 1.0)?)?;
    Ok(per.sum(D::Minus1)?.affine(0.5, 0.0)?.mean_all()?)
}

/// KL divergence of `N(mu, diag sigma^2)` from `N(0, I)` for (B, d) inputs,
/// averaged over the batch.
pub fn kl_loss(mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let min = sigma.flatten_all()?.to_dtype(DType::F64)?.min(0)?.to_scalar::<f64>()?;
    if !(min > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, found {min}")));
    }
    kl_divergence(mu, &sigma.log()?)
}

/// Cosine between real-image embeddings (B, d_f) and the embeddings of
/// generated images (B, 3, S, S) under the image encoder, one per row.
pub fn cycle_similarity(real_q: &Tensor, fake: &Tensor, encoder: &ImageEncoder) -> Result<Tensor> {
    let fake_q = encoder.encode_generated(fake)?;
    for t in [real_q, &fake_q] {
        let norms: Vec<f64> = t.sqr()?.sum(D::Minus1)?.to_dtype(DType::F64)?.to_vec1()?;
        if norms.iter().any(|&n| n == 0.0) {
            return Err(Error::DegenerateEmbedding);
        }
    }
    cosine_rows(real_q, &fake_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, scalar};
    use approx::assert_relative_eq;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn full(v: f64, n: usize) -> Tensor {
        Tensor::full(v, n, &Device::Cpu).unwrap()
    }

    fn probs(real: f64, mismatched_cond: f64, fake: f64, mismatched_uncond: f64) -> DiscriminatorProbs {
        DiscriminatorProbs {
            real_cond: full(real, 3),
            mismatched_cond: full(mismatched_cond, 3),
            fake_cond: full(fake, 3),
            real_uncond: full(real, 3),
            mismatched_uncond: full(mismatched_uncond, 3),
            fake_uncond: full(fake, 3),
        }
    }

    #[test]
    fn half_everywhere_discriminator() {
        let w = LossWeights::default();
        let l = scalar(&discriminator_objective(&probs(0.5, 0.5, 0.5, 0.5), &w, false).unwrap()).unwrap();
        assert_relative_eq!(l, 4.5 * 2f64.ln(), max_relative = 1e-6);
        assert!((l - 3.119).abs() < 1e-3);
        let cond_only = LossWeights { uncond: 0.0, ..w };
        let l = scalar(&discriminator_objective(&probs(0.5, 0.5, 0.5, 0.5), &cond_only, false).unwrap()).unwrap();
        assert_relative_eq!(l, 3.0 * 2f64.ln(), max_relative = 1e-6);
    }

    #[test]
    fn perfect_discriminator_is_near_zero() {
        let l = scalar(&discriminator_objective(&probs(1.0, 0.0, 0.0, 1.0), &LossWeights::default(), false).unwrap()).unwrap();
        assert!(l >= 0.0 && l <= 3.0 * 1.5 * 1.1e-7, "loss {l}");
    }

    #[test]
    fn discriminator_loss_moves_with_targets() {
        let w = LossWeights::default();
        let at = |r, m, f, mu| scalar(&discriminator_objective(&probs(r, m, f, mu), &w, false).unwrap()).unwrap();
        assert!(at(0.8, 0.5, 0.5, 0.5) < at(0.6, 0.5, 0.5, 0.5));
        assert!(at(0.5, 0.2, 0.5, 0.5) < at(0.5, 0.4, 0.5, 0.5));
        assert!(at(0.5, 0.5, 0.1, 0.5) < at(0.5, 0.5, 0.3, 0.5));
        assert!(at(0.5, 0.5, 0.5, 0.9) < at(0.5, 0.5, 0.5, 0.6));
    }

    #[test]
    fn literal_form_rewards_low_fake_probability_without_bound() {
        let w = LossWeights::default();
        let l = |f| scalar(&discriminator_objective(&probs(0.5, f, f, 0.5), &w, true).unwrap()).unwrap();
        assert!(l(1e-3) < l(0.5));
        assert!(l(1e-6) < l(1e-3));
    }

    #[test]
    fn half_everywhere_generator_with_full_cycle_reward() {
        let h: Vec<Tensor> = (0..3).map(|_| full(0.5, 4)).collect();
        let cos: Vec<Tensor> = (0..3).map(|_| full(1.0, 4)).collect();
        let kl = Tensor::new(0f64, &Device::Cpu).unwrap();
        let w = LossWeights::default();
        let l = scalar(&generator_objective(&h, &h, &cos, &kl, &w).unwrap()).unwrap();
        assert_relative_eq!(l, 4.5 * 2f64.ln() - 3.0, max_relative = 1e-6);
        assert!((l - 0.119).abs() < 1e-3);
        let no_cycle = LossWeights { cycle: 0.0, ..w };
        let l0 = scalar(&generator_objective(&h, &h, &cos, &kl, &no_cycle).unwrap()).unwrap();
        let plain = scalar(&generator_objective(&h, &h, &[], &kl, &no_cycle).unwrap()).unwrap();
        assert_eq!(l0, plain);
    }

    #[test]
    fn kl_closed_form_cases() {
        let t = |v: &[f64]| Tensor::from_slice(v, (1, v.len()), &Device::Cpu).unwrap();
        assert_eq!(scalar(&kl_loss(&t(&[0.0, 0.0]), &t(&[1.0, 1.0])).unwrap()).unwrap(), 0.0);
        assert_relative_eq!(scalar(&kl_loss(&t(&[1.0, 0.0]), &t(&[1.0, 1.0])).unwrap()).unwrap(), 0.5, max_relative = 1e-12);
        assert!(matches!(kl_loss(&t(&[0.0]), &t(&[0.0])), Err(Error::InvalidParameter(_))));
        assert!(matches!(kl_loss(&t(&[0.0]), &t(&[-1.0])), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mu = [0.4, -0.9, 0.2, 1.1];
        let sigma = [0.7, 1.3, 0.5, 1.0];
        let closed = scalar(&kl_loss(&Tensor::new(&[mu], &Device::Cpu).unwrap(), &Tensor::new(&[sigma], &Device::Cpu).unwrap()).unwrap()).unwrap();
        // E_q[log q(x) - log p(x)] with x ~ q.
        let n = 1_000_000;
        let mut acc = 0.0;
        let dists: Vec<Normal<f64>> = mu.iter().zip(&sigma).map(|(&m, &s)| Normal::new(m, s).unwrap()).collect();
        for _ in 0..n {
            for (j, d) in dists.iter().enumerate() {
                let x = d.sample(&mut rng);
                let lq = -0.5 * ((x - mu[j]) / sigma[j]).powi(2) - sigma[j].ln();
                let lp = -0.5 * x * x;
                acc += lq - lp;
            }
        }
        let mc = acc / n as f64;
        assert!((mc - closed).abs() < 0.01 * closed, "mc {mc} closed {closed}");
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mu = randn(&mut rng, &[2, 5], DType::F64).unwrap();
            let ls = randn(&mut rng, &[2, 5], DType::F64).unwrap();
            assert!(scalar(&kl_divergence(&mu, &ls).unwrap()).unwrap() >= 0.0);
        }
    }
}
