//! Conditional variational information bottleneck.
//!
//! A stochastic encoder maps a sequence embedding (concatenated with one-hot
//! architecture/optimization labels during training, all-zero vectors at
//! inference) to diagonal-Gaussian posterior parameters; a reparameterized
//! sample feeds an unconditioned reconstruction decoder; a learned
//! conditional prior anchors the KL term. Conditions exist only on the
//! encoder/prior side — the inference path passes absent (zero) labels, so
//! encodings never depend on metadata at test time.

use ndarray::{concatenate, Array1, Axis};

use crate::error::{Error, Result};
use crate::nn::Dense;
use crate::rng::substream;

/// One-hot architecture/optimization indicators; all-zero means absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionLabels {
    pub l_a: Array1<f64>,
    pub l_o: Array1<f64>,
}

impl ConditionLabels {
    pub fn absent(n_arch: usize, n_opt: usize) -> Self {
        ConditionLabels {
            l_a: Array1::zeros(n_arch),
            l_o: Array1::zeros(n_opt),
        }
    }

    pub fn one_hot(arch: Option<usize>, n_arch: usize, opt: Option<usize>, n_opt: usize) -> Self {
        let mut labels = Self::absent(n_arch, n_opt);
        if let Some(i) = arch {
            labels.l_a[i] = 1.0;
        }
        if let Some(i) = opt {
            labels.l_o[i] = 1.0;
        }
        labels
    }

    /// Look the tags up in the corpus vocabularies.
    pub fn from_tags(
        arch: &str,
        opt: &str,
        arch_vocab: &[String],
        opt_vocab: &[String],
    ) -> Result<Self> {
        let a = arch_vocab
            .iter()
            .position(|t| t == arch)
            .ok_or_else(|| Error::Vocabulary(format!("architecture `{arch}` not in vocabulary")))?;
        let o = opt_vocab
            .iter()
            .position(|t| t == opt)
            .ok_or_else(|| Error::Vocabulary(format!("optimization `{opt}` not in vocabulary")))?;
        Ok(Self::one_hot(Some(a), arch_vocab.len(), Some(o), opt_vocab.len()))
    }

    pub fn concat(&self) -> Array1<f64> {
        concatenate![Axis(0), self.l_a, self.l_o]
    }
}

/// Diagonal Gaussian parameters (mean and log standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Array1<f64>,
    pub log_sigma: Array1<f64>,
}

impl GaussianParams {
    pub fn standard(d_z: usize) -> Self {
        GaussianParams {
            mu: Array1::zeros(d_z),
            log_sigma: Array1::zeros(d_z),
        }
    }
}

/// A bottleneck sample with the posterior and noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub z: Array1<f64>,
    pub posterior: GaussianParams,
    pub eps_used: Array1<f64>,
}

/// Encoder, decoder, and conditional-prior parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CvibModel {
    /// (d_in + n_arch + n_opt) -> 2 d_z; first half mu, second half log sigma.
    pub enc: Dense,
    /// d_z -> d_in, unconditioned.
    pub dec: Dense,
    /// (n_arch + n_opt) -> 2 d_z, zero-initialized so every prior starts at
    /// the standard normal.
    pub prior_map: Dense,
    pub d_in: usize,
    pub d_z: usize,
    pub n_arch: usize,
    pub n_opt: usize,
}

impl CvibModel {
    pub fn seeded(d_in: usize, d_z: usize, n_arch: usize, n_opt: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "cvib-init");
        let enc_in = d_in + n_arch + n_opt;
        let mut enc = Dense::seeded(2 * d_z, enc_in, 1.0 / (enc_in as f64).sqrt(), &mut rng);
        // Start the posterior noise small so early samples track the mean.
        for i in d_z..2 * d_z {
            enc.b[i] = -2.0;
        }
        let dec = Dense::seeded(d_in, d_z, 1.0 / (d_z as f64).sqrt(), &mut rng);
        let prior_map = Dense::zeros(2 * d_z, n_arch + n_opt);
        CvibModel {
            enc,
            dec,
            prior_map,
            d_in,
            d_z,
            n_arch,
            n_opt,
        }
    }

    fn split_heads(&self, out: Array1<f64>) -> GaussianParams {
        let mu = out.slice(ndarray::s![..self.d_z]).to_owned();
        let log_sigma = out.slice(ndarray::s![self.d_z..]).to_owned();
        GaussianParams { mu, log_sigma }
    }
}

/// Posterior parameters for embedding `e` under condition labels `cond`.
/// With absent (all-zero) labels the output depends on `e` alone.
pub fn encode(e: &Array1<f64>, cond: &ConditionLabels, model: &CvibModel) -> Result<GaussianParams> {
    if e.len() != model.d_in || cond.l_a.len() != model.n_arch || cond.l_o.len() != model.n_opt {
        return Err(Error::Config(format!(
            "encoder expects dims ({}, {}, {}), got ({}, {}, {})",
            model.d_in,
            model.n_arch,
            model.n_opt,
            e.len(),
            cond.l_a.len(),
            cond.l_o.len()
        )));
    }
    let input = concatenate![Axis(0), *e, cond.l_a, cond.l_o];
    Ok(model.split_heads(model.enc.forward(&input)))
}

/// Reparameterized sample `z = mu + exp(log_sigma) * eps`.
pub fn reparameterize(params: &GaussianParams, eps: &Array1<f64>) -> Encoding {
    let sigma = params.log_sigma.mapv(f64::exp);
    let z = &params.mu + &(sigma * eps);
    Encoding {
        z,
        posterior: params.clone(),
        eps_used: eps.clone(),
    }
}

/// Reconstruction of the input embedding from a bottleneck sample. The
/// decoder never sees condition labels.
pub fn decode(z: &Array1<f64>, model: &CvibModel) -> Array1<f64> {
    model.dec.forward(z)
}

/// Conditional prior parameters; absent labels yield the learned
/// unconditional component (standard normal at initialization).
pub fn prior(cond: &ConditionLabels, model: &CvibModel) -> GaussianParams {
    model.split_heads(model.prior_map.forward(&cond.concat()))
}

/// Closed-form KL divergence between diagonal Gaussians, summed over
/// dimensions: `KL(N(mu_p, sigma_p^2) || N(mu_r, sigma_r^2))`.
pub fn kl_gaussian(post: &GaussianParams, prior: &GaussianParams) -> f64 {
    let mut total = 0.0;
    for i in 0..post.mu.len() {
        let log_sp = post.log_sigma[i];
        let log_sr = prior.log_sigma[i];
        let var_p = (2.0 * log_sp).exp();
        let var_r = (2.0 * log_sr).exp();
        let diff = post.mu[i] - prior.mu[i];
        total += log_sr - log_sp + (var_p + diff * diff) / (2.0 * var_r) - 0.5;
    }
    total
}

/// Gradients of [`kl_gaussian`] with respect to both parameter sets, scaled
/// by the upstream factor `dkl`.
pub fn kl_gaussian_backward(
    post: &GaussianParams,
    prior: &GaussianParams,
    dkl: f64,
    d_post: &mut GaussianParams,
    d_prior: &mut GaussianParams,
) {
    for i in 0..post.mu.len() {
        let var_p = (2.0 * post.log_sigma[i]).exp();
        let var_r = (2.0 * prior.log_sigma[i]).exp();
        let diff = post.mu[i] - prior.mu[i];
        d_post.mu[i] += dkl * diff / var_r;
        d_prior.mu[i] += dkl * (-diff / var_r);
        d_post.log_sigma[i] += dkl * (var_p / var_r - 1.0);
        d_prior.log_sigma[i] += dkl * (1.0 - (var_p + diff * diff) / var_r);
    }
}

/// The three parts of the bottleneck loss for one pair of embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvibLossParts {
    pub total: f64,
    pub kl_part: f64,
    pub recon_part: f64,
}

/// Pair-averaged bottleneck loss: squared-error reconstruction plus
/// beta2-weighted KL toward the conditional priors.
#[allow(clippy::too_many_arguments)]
pub fn cvib_loss(
    e_a: &Array1<f64>,
    e_b: &Array1<f64>,
    enc_a: &Encoding,
    enc_b: &Encoding,
    e_hat_a: &Array1<f64>,
    e_hat_b: &Array1<f64>,
    prior_a: &GaussianParams,
    prior_b: &GaussianParams,
    beta2: f64,
) -> CvibLossParts {
    let recon = |e: &Array1<f64>, e_hat: &Array1<f64>| -> f64 {
        e.iter()
            .zip(e_hat.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let recon_part = 0.5 * (recon(e_a, e_hat_a) + recon(e_b, e_hat_b));
    let kl_part = 0.5
        * (kl_gaussian(&enc_a.posterior, prior_a) + kl_gaussian(&enc_b.posterior, prior_b));
    CvibLossParts {
        total: recon_part + beta2 * kl_part,
        kl_part,
        recon_part,
    }
}
