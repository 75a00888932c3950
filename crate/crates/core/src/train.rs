//! Composite-loss training: cosine similarity on bottleneck encodings, the
//! one-step policy-gradient term, and the conditional-bottleneck term, tied
//! together with deterministic replay and directory checkpoints.
//!
//! Gradients are hand-derived per layer and validated against central
//! finite differences by [`grad_check`]. The policy reward is a detached
//! constant in every backward pass, and the bottleneck noise stream is
//! seeded so identical runs produce bitwise-identical checkpoints.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array1, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusStore;
use crate::cvib::{self, ConditionLabels, CvibModel, Encoding, GaussianParams};
use crate::encoder::{BackendKind, EmbedCache, EncoderGrads, TextEncoder, TokenizedSequence};
use crate::error::{Error, Result};
use crate::nn::{ConvScorer, Dense};
use crate::removal::{self, RemovalAgent, ScoreCache, SelectionResult};
use crate::rng::substream;
use crate::splits::SplitManifest;

pub const CHECKPOINT_SCHEMA: &str = "pluvio-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which text-encoder backend to train on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    Compact,
    PretrainedText,
}

impl std::fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendChoice::Compact => write!(f, "compact"),
            BackendChoice::PretrainedText => write!(f, "pretrained-text"),
        }
    }
}

/// Every knob of a training run. Defaults follow the compact backend; the
/// RL weight `beta1` defaults to 0.05.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps_guard: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub backend: BackendChoice,
    pub ls_max: usize,
    /// Tokens kept by the removal stage; equals the embedder input limit.
    pub k: usize,
    pub d: usize,
    pub d_z: usize,
    pub vocab_size: usize,
    /// Classification threshold echoed into every report.
    pub tau: f64,
    pub freeze_embedder: bool,
    pub enable_removal: bool,
    pub enable_cvib: bool,
    /// Weights directory for the pretrained-text backend.
    pub weights_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn compact_defaults(seed: u64) -> Self {
        TrainConfig {
            beta1: 0.05,
            beta2: 1e-3,
            eps_guard: 1e-8,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            seed,
            backend: BackendChoice::Compact,
            ls_max: 256,
            k: 64,
            d: 64,
            d_z: 32,
            vocab_size: 4096,
            tau: 0.5,
            freeze_embedder: false,
            enable_removal: true,
            enable_cvib: true,
            weights_dir: None,
        }
    }

    pub fn pretrained_defaults(seed: u64, weights_dir: PathBuf) -> Self {
        TrainConfig {
            backend: BackendChoice::PretrainedText,
            ls_max: 2048,
            k: 512,
            d: 768,
            d_z: 256,
            freeze_embedder: true,
            weights_dir: Some(weights_dir),
            ..Self::compact_defaults(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta1 < 0.0 || self.beta2 < 0.0 || self.eps_guard < 0.0 {
            return Err(Error::Config(
                "beta1, beta2, and eps_guard must be non-negative".into(),
            ));
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.k == 0 || self.k > self.ls_max {
            return Err(Error::Config(format!(
                "k = {} must satisfy 1 <= k <= ls_max = {}",
                self.k, self.ls_max
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.backend == BackendChoice::PretrainedText && self.weights_dir.is_none() {
            return Err(Error::Config(
                "pretrained-text backend requires a weights directory".into(),
            ));
        }
        Ok(())
    }
}

/// The loss terms of one batch (or an epoch mean of batches).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cos: f64,
    pub l_rl: f64,
    pub l_cvib_total: f64,
    pub l_cvib_kl: f64,
    pub l_cvib_recon: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn zero() -> Self {
        LossBreakdown {
            l_cos: 0.0,
            l_rl: 0.0,
            l_cvib_total: 0.0,
            l_cvib_kl: 0.0,
            l_cvib_recon: 0.0,
            total: 0.0,
        }
    }
}

/// All trainable state: encoder, removal agent, bottleneck, and the
/// condition vocabularies the bottleneck was shaped for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: TextEncoder,
    pub agent: RemovalAgent,
    pub cvib: CvibModel,
    pub arch_vocab: Vec<String>,
    pub opt_vocab: Vec<String>,
}

/// Gradient buffers mirroring [`Model`].
#[derive(Debug)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub agent: ConvScorer,
    pub cvib_enc: Dense,
    pub cvib_dec: Dense,
    pub cvib_prior: Dense,
}

impl Model {
    /// Initialize a model for `cfg`, returning the effective config (dims
    /// are taken from the weights directory for the pretrained backend).
    pub fn init(
        cfg: &TrainConfig,
        arch_vocab: &[String],
        opt_vocab: &[String],
    ) -> Result<(Model, TrainConfig)> {
        cfg.validate()?;
        let mut effective = cfg.clone();
        let encoder = match cfg.backend {
            BackendChoice::Compact => {
                TextEncoder::compact(cfg.d, cfg.ls_max, cfg.k, cfg.vocab_size, cfg.seed)?
            }
            BackendChoice::PretrainedText => {
                let dir = cfg.weights_dir.as_ref().expect("validated above");
                let enc = TextEncoder::load_weights_dir(dir)?;
                effective.d = enc.d;
                effective.ls_max = enc.ls_max;
                effective.vocab_size = enc.vocab_size;
                effective.k = cfg.k.min(enc.k_limit);
                enc
            }
        };
        let agent = RemovalAgent::seeded(encoder.d, cfg.seed);
        let cvib =
            CvibModel::seeded(encoder.d, cfg.d_z, arch_vocab.len(), opt_vocab.len(), cfg.seed);
        Ok((
            Model {
                encoder,
                agent,
                cvib,
                arch_vocab: arch_vocab.to_vec(),
                opt_vocab: opt_vocab.to_vec(),
            },
            effective,
        ))
    }

    pub fn grads(&self, train_table: bool) -> ModelGrads {
        ModelGrads {
            encoder: EncoderGrads::new(&self.encoder, train_table),
            agent: ConvScorer::zeros(self.agent.d()),
            cvib_enc: Dense::zeros(self.cvib.enc.out_dim(), self.cvib.enc.in_dim()),
            cvib_dec: Dense::zeros(self.cvib.dec.out_dim(), self.cvib.dec.in_dim()),
            cvib_prior: Dense::zeros(self.cvib.prior_map.out_dim(), self.cvib.prior_map.in_dim()),
        }
    }

    /// Named shapes of every parameter block, in flattening order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = vec![(
            "encoder.table".to_string(),
            vec![self.encoder.vocab_size, self.encoder.d],
        )];
        for (i, l) in self.encoder.dense.iter().enumerate() {
            layout.push((format!("encoder.dense.{i}.w"), vec![l.out_dim(), l.in_dim()]));
            layout.push((format!("encoder.dense.{i}.b"), vec![l.out_dim()]));
        }
        layout.push(("agent.conv.w".into(), vec![ConvScorer::KERNEL, self.agent.d()]));
        layout.push(("agent.conv.b".into(), vec![1]));
        for (name, l) in [
            ("cvib.enc", &self.cvib.enc),
            ("cvib.dec", &self.cvib.dec),
            ("cvib.prior", &self.cvib.prior_map),
        ] {
            layout.push((format!("{name}.w"), vec![l.out_dim(), l.in_dim()]));
            layout.push((format!("{name}.b"), vec![l.out_dim()]));
        }
        layout
    }

    pub fn flat_len(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        out.extend(self.encoder.table.iter());
        for l in &self.encoder.dense {
            l.write_flat(&mut out);
        }
        self.agent.conv.write_flat(&mut out);
        self.cvib.enc.write_flat(&mut out);
        self.cvib.dec.write_flat(&mut out);
        self.cvib.prior_map.write_flat(&mut out);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::Manifest(format!(
                "parameter blob holds {} values, model needs {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut pos = 0usize;
        for v in self.encoder.table.iter_mut() {
            *v = flat[pos];
            pos += 1;
        }
        for l in &mut self.encoder.dense {
            l.read_flat(flat, &mut pos);
        }
        self.agent.conv.read_flat(flat, &mut pos);
        self.cvib.enc.read_flat(flat, &mut pos);
        self.cvib.dec.read_flat(flat, &mut pos);
        self.cvib.prior_map.read_flat(flat, &mut pos);
        Ok(())
    }

    fn sgd_step(&mut self, grads: &ModelGrads, lr: f64, freeze_embedder: bool) {
        if !freeze_embedder {
            if let Some(tg) = &grads.encoder.table {
                self.encoder.table.scaled_add(-lr, tg);
            }
            for (l, g) in self.encoder.dense.iter_mut().zip(&grads.encoder.dense) {
                l.sgd_step(g, lr);
            }
        }
        self.agent.conv.sgd_step(&grads.agent, lr);
        self.cvib.enc.sgd_step(&grads.cvib_enc, lr);
        self.cvib.dec.sgd_step(&grads.cvib_dec, lr);
        self.cvib.prior_map.sgd_step(&grads.cvib_prior, lr);
    }
}

impl ModelGrads {
    pub fn zero(&mut self) {
        self.encoder.zero();
        self.agent.zero();
        self.cvib_enc.zero();
        self.cvib_dec.zero();
        self.cvib_prior.zero();
    }

    /// Flatten in the same order as [`Model::flatten`]; a frozen table
    /// contributes zeros.
    pub fn flatten(&self, model: &Model) -> Vec<f64> {
        let mut out = Vec::with_capacity(model.flat_len());
        match &self.encoder.table {
            Some(t) => out.extend(t.iter()),
            None => out.extend(std::iter::repeat(0.0).take(model.encoder.table.len())),
        }
        for l in &self.encoder.dense {
            l.write_flat(&mut out);
        }
        self.agent.write_flat(&mut out);
        self.cvib_enc.write_flat(&mut out);
        self.cvib_dec.write_flat(&mut out);
        self.cvib_prior.write_flat(&mut out);
        out
    }
}

/// Cosine similarity of two non-zero vectors.
pub fn cosine_similarity(u: &Array1<f64>, v: &Array1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Config(format!(
            "cosine inputs have dimensions {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.dot(u).sqrt();
    let nv = v.dot(v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok(u.dot(v) / (nu * nv))
}

/// Squared error between the clone label and the cosine similarity.
pub fn cosine_loss(z_a: &Array1<f64>, z_b: &Array1<f64>, y: f64) -> Result<f64> {
    let c = cosine_similarity(z_a, z_b)?;
    Ok((y - c) * (y - c))
}

/// Gradients of the cosine similarity scaled by `dcos`.
fn cosine_backward(
    u: &Array1<f64>,
    v: &Array1<f64>,
    cos: f64,
    dcos: f64,
) -> (Array1<f64>, Array1<f64>) {
    let nu = u.dot(u).sqrt();
    let nv = v.dot(v).sqrt();
    let du = v.mapv(|x| x / (nu * nv)) - u.mapv(|x| cos * x / (nu * nu));
    let dv = u.mapv(|x| x / (nu * nv)) - v.mapv(|x| cos * x / (nv * nv));
    (du * dcos, dv * dcos)
}

/// Bottleneck-side caches of one sequence forward.
#[derive(Debug, Clone)]
pub struct BottleneckForward {
    pub cond: ConditionLabels,
    pub encoding: Encoding,
    pub e_hat: Array1<f64>,
    pub prior: GaussianParams,
    pub recon: f64,
    pub kl: f64,
}

/// Full forward caches of one sequence.
#[derive(Debug, Clone)]
pub struct SeqForward {
    pub tokens: TokenizedSequence,
    pub score: Option<ScoreCache>,
    pub selection: SelectionResult,
    pub embed_cache: EmbedCache,
    pub e: Array1<f64>,
    pub bottleneck: Option<BottleneckForward>,
    pub z: Array1<f64>,
}

/// Forward caches of one labeled pair.
#[derive(Debug, Clone)]
pub struct PairForward {
    pub left: SeqForward,
    pub right: SeqForward,
    pub label: f64,
    pub cos: f64,
    pub l_cos: f64,
}

/// Run one sequence through removal, embedding, and (optionally) the
/// bottleneck. `eps` of `None` means deterministic encoding (`z = mu`).
pub fn forward_sequence(
    model: &Model,
    cfg: &TrainConfig,
    tokens: &TokenizedSequence,
    cond: &ConditionLabels,
    eps: Option<&Array1<f64>>,
) -> Result<SeqForward> {
    let (score, selection) = if cfg.enable_removal {
        let cache = removal::score_tokens_cached(tokens, &model.encoder, &model.agent)?;
        let sel =
            removal::select_topk(cache.probs.as_slice().expect("contiguous"), tokens, cfg.k);
        (Some(cache), sel)
    } else {
        (None, removal::identity_selection(tokens, cfg.k))
    };
    let (e, embed_cache) = model
        .encoder
        .embed_cached(&selection.kept_ids, &selection.kept_mask)?;
    let (bottleneck, z) = if cfg.enable_cvib {
        let post = cvib::encode(&e, cond, &model.cvib)?;
        let zero;
        let eps = match eps {
            Some(v) => v,
            None => {
                zero = Array1::zeros(model.cvib.d_z);
                &zero
            }
        };
        let encoding = cvib::reparameterize(&post, eps);
        let e_hat = cvib::decode(&encoding.z, &model.cvib);
        let pri = cvib::prior(cond, &model.cvib);
        let recon = e
            .iter()
            .zip(e_hat.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let kl = cvib::kl_gaussian(&encoding.posterior, &pri);
        let z = encoding.z.clone();
        (
            Some(BottleneckForward {
                cond: cond.clone(),
                encoding,
                e_hat,
                prior: pri,
                recon,
                kl,
            }),
            z,
        )
    } else {
        (None, e.clone())
    };
    Ok(SeqForward {
        tokens: tokens.clone(),
        score,
        selection,
        embed_cache,
        e,
        bottleneck,
        z,
    })
}

/// Forward a labeled pair and compute its cosine loss.
#[allow(clippy::too_many_arguments)]
pub fn forward_pair(
    model: &Model,
    cfg: &TrainConfig,
    left_tokens: &TokenizedSequence,
    right_tokens: &TokenizedSequence,
    left_cond: &ConditionLabels,
    right_cond: &ConditionLabels,
    label: f64,
    eps_left: Option<&Array1<f64>>,
    eps_right: Option<&Array1<f64>>,
) -> Result<PairForward> {
    let left = forward_sequence(model, cfg, left_tokens, left_cond, eps_left)?;
    let right = forward_sequence(model, cfg, right_tokens, right_cond, eps_right)?;
    let cos = cosine_similarity(&left.z, &right.z)?;
    let l_cos = (label - cos) * (label - cos);
    Ok(PairForward {
        left,
        right,
        label,
        cos,
        l_cos,
    })
}

/// Assemble the composite loss from a batch of pair forwards. When
/// `fixed_reward` is `None` the reward is computed from this batch's mean
/// cosine loss; either way it is a detached constant.
pub fn composite_loss_with(
    items: &[PairForward],
    cfg: &TrainConfig,
    fixed_reward: Option<f64>,
) -> Result<LossBreakdown> {
    if items.is_empty() {
        return Err(Error::Domain("composite loss of an empty batch".into()));
    }
    let n = items.len() as f64;
    let l_cos = items.iter().map(|i| i.l_cos).sum::<f64>() / n;
    let l_rl = if cfg.enable_removal {
        let r = fixed_reward.unwrap_or_else(|| removal::reward(l_cos, cfg.eps_guard));
        let mut acc = 0.0;
        for item in items {
            acc += removal::rl_loss(item.left.selection.p, item.right.selection.p, r)?;
        }
        acc / n
    } else {
        0.0
    };
    let (recon, kl) = if cfg.enable_cvib {
        let mut recon = 0.0;
        let mut kl = 0.0;
        for item in items {
            for side in [&item.left, &item.right] {
                let b = side.bottleneck.as_ref().ok_or_else(|| {
                    Error::Config("bottleneck term requested but forward ran without it".into())
                })?;
                recon += 0.5 * b.recon;
                kl += 0.5 * b.kl;
            }
        }
        (recon / n, kl / n)
    } else {
        (0.0, 0.0)
    };
    let l_cvib_total = recon + cfg.beta2 * kl;
    let total = l_cos + cfg.beta1 * l_rl + l_cvib_total;
    Ok(LossBreakdown {
        l_cos,
        l_rl,
        l_cvib_total,
        l_cvib_kl: kl,
        l_cvib_recon: recon,
        total,
    })
}

/// Composite loss with the reward taken from this batch.
pub fn composite_loss(items: &[PairForward], cfg: &TrainConfig) -> Result<LossBreakdown> {
    composite_loss_with(items, cfg, None)
}

/// Accumulate gradients of the composite loss over a batch. `reward` must
/// be the same detached constant used in the loss.
pub fn backward_batch(
    model: &Model,
    cfg: &TrainConfig,
    items: &[PairForward],
    reward: f64,
    grads: &mut ModelGrads,
) {
    let n = items.len() as f64;
    for item in items {
        let dcos = -2.0 * (item.label - item.cos) / n;
        let (dz_left, dz_right) = cosine_backward(&item.left.z, &item.right.z, item.cos, dcos);
        let (dp_left, dp_right) = if cfg.enable_removal {
            let (gl, gr) =
                removal::rl_loss_grad(item.left.selection.p, item.right.selection.p, reward);
            (gl * cfg.beta1 / n, gr * cfg.beta1 / n)
        } else {
            (0.0, 0.0)
        };
        backward_sequence(model, cfg, &item.left, dz_left, dp_left, n, grads);
        backward_sequence(model, cfg, &item.right, dz_right, dp_right, n, grads);
    }
}

fn backward_sequence(
    model: &Model,
    cfg: &TrainConfig,
    side: &SeqForward,
    dz: Array1<f64>,
    dp: f64,
    n: f64,
    grads: &mut ModelGrads,
) {
    let mut d_e: Array1<f64>;
    if let Some(b) = &side.bottleneck {
        // Reconstruction: (1/n) * 0.5 * ||e - e_hat||^2 per member.
        let scale = 1.0 / n;
        let d_ehat = (&b.e_hat - &side.e).mapv(|x| x * scale);
        d_e = (&side.e - &b.e_hat).mapv(|x| x * scale);
        let dz_dec = model
            .cvib
            .dec
            .backward(&b.encoding.z, &d_ehat, &mut grads.cvib_dec);
        let dz_total = dz + dz_dec;

        // KL toward the conditional prior, weighted beta2 * 0.5 / n.
        let d_z_dim = model.cvib.d_z;
        let mut d_post = GaussianParams {
            mu: Array1::zeros(d_z_dim),
            log_sigma: Array1::zeros(d_z_dim),
        };
        let mut d_prior = GaussianParams {
            mu: Array1::zeros(d_z_dim),
            log_sigma: Array1::zeros(d_z_dim),
        };
        cvib::kl_gaussian_backward(
            &b.encoding.posterior,
            &b.prior,
            cfg.beta2 * 0.5 / n,
            &mut d_post,
            &mut d_prior,
        );

        // Reparameterization: z = mu + exp(log_sigma) * eps.
        d_post.mu += &dz_total;
        for i in 0..d_z_dim {
            d_post.log_sigma[i] +=
                dz_total[i] * b.encoding.eps_used[i] * b.encoding.posterior.log_sigma[i].exp();
        }

        let d_out = concatenate![Axis(0), d_post.mu, d_post.log_sigma];
        let enc_input = concatenate![Axis(0), side.e, b.cond.l_a, b.cond.l_o];
        let d_in = model.cvib.enc.backward(&enc_input, &d_out, &mut grads.cvib_enc);
        d_e += &d_in.slice(ndarray::s![..model.cvib.d_in]);

        let d_prior_vec = concatenate![Axis(0), d_prior.mu, d_prior.log_sigma];
        model
            .cvib
            .prior_map
            .backward(&b.cond.concat(), &d_prior_vec, &mut grads.cvib_prior);
    } else {
        d_e = dz;
    }

    // Policy path: through the summed probability of the kept tokens.
    if let (Some(score), true) = (&side.score, dp != 0.0) {
        let mut dprobs = Array1::zeros(score.probs.len());
        for &idx in &side.selection.kept_indices {
            dprobs[idx] = dp;
        }
        let dlogits = crate::nn::masked_softmax_backward(&score.probs, &dprobs, score.live);
        let dx = model.agent.conv.backward(&score.rows, &dlogits, &mut grads.agent);
        if let Some(table_grad) = &mut grads.encoder.table {
            for (i, &id) in side.tokens.token_ids.iter().enumerate() {
                let row = dx.row(i);
                if row.iter().any(|&v| v != 0.0) {
                    table_grad.row_mut(id as usize).scaled_add(1.0, &row);
                }
            }
        }
    }

    model.encoder.embed_backward(
        &side.selection.kept_ids,
        &side.embed_cache,
        &d_e,
        &mut grads.encoder,
    );
}

/// One telemetry record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub n_pairs: usize,
    /// Times top-k had to clamp k to the live length.
    pub clamp_events: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: BackendKind,
    pub name: String,
    pub d: usize,
    pub ls_max: usize,
    pub k_limit: usize,
    pub pad_id: u32,
    pub unk_id: u32,
    pub vocab_size: usize,
    pub n_dense: usize,
    /// Explicit vocabulary (pretrained backend), index = token id.
    pub vocab_tokens: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema: String,
    pub version: u32,
    pub config: TrainConfig,
    pub encoder: EncoderSpec,
    pub arch_vocab: Vec<String>,
    pub opt_vocab: Vec<String>,
    pub lib_vocab: Vec<String>,
    pub steps: u64,
    pub param_layout: Vec<ParamSpec>,
}

/// A trained (or freshly initialized) model plus everything needed to
/// rebuild it: directory layout `{manifest.json, params.bin}`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, config: TrainConfig, lib_vocab: Vec<String>, steps: u64) -> Self {
        let encoder_spec = EncoderSpec {
            kind: model.encoder.kind,
            name: model.encoder.name.clone(),
            d: model.encoder.d,
            ls_max: model.encoder.ls_max,
            k_limit: model.encoder.k_limit,
            pad_id: model.encoder.pad_id,
            unk_id: model.encoder.unk_id,
            vocab_size: model.encoder.vocab_size,
            n_dense: model.encoder.dense.len(),
            vocab_tokens: model.encoder.vocab_token_list(),
        };
        let manifest = CheckpointManifest {
            schema: CHECKPOINT_SCHEMA.into(),
            version: CHECKPOINT_VERSION,
            param_layout: model
                .param_layout()
                .into_iter()
                .map(|(name, shape)| ParamSpec { name, shape })
                .collect(),
            encoder: encoder_spec,
            arch_vocab: model.arch_vocab.clone(),
            opt_vocab: model.opt_vocab.clone(),
            lib_vocab,
            steps,
            config,
        };
        Checkpoint { manifest, model }
    }

    pub fn params_bytes(&self) -> Vec<u8> {
        let flat = self.model.flatten();
        let mut bytes = Vec::with_capacity(flat.len() * 8);
        for v in flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    /// Hex SHA-256 of the parameter blob; identifies the checkpoint in
    /// search indices.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.params_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        serde_json::to_writer_pretty(File::create(dir.join("manifest.json"))?, &self.manifest)?;
        std::fs::write(dir.join("params.bin"), self.params_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let manifest_path = dir.join("manifest.json");
        let manifest: CheckpointManifest = serde_json::from_reader(File::open(&manifest_path)?)
            .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
        if manifest.schema != CHECKPOINT_SCHEMA || manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible {
                what: "checkpoint".into(),
                expected: format!("{CHECKPOINT_SCHEMA} v{CHECKPOINT_VERSION}"),
                found: format!("{} v{}", manifest.schema, manifest.version),
            });
        }
        let spec = &manifest.encoder;
        let encoder = match spec.kind {
            BackendKind::Compact => TextEncoder::compact(
                spec.d,
                spec.ls_max,
                spec.k_limit,
                spec.vocab_size,
                manifest.config.seed,
            )?,
            BackendKind::PretrainedText => {
                let tokens = spec.vocab_tokens.clone().ok_or_else(|| {
                    Error::Manifest("pretrained checkpoint is missing its vocabulary".into())
                })?;
                let dense = (0..spec.n_dense)
                    .map(|_| Dense::zeros(spec.d, spec.d))
                    .collect();
                TextEncoder::from_parts(
                    &spec.name,
                    tokens,
                    ndarray::Array2::zeros((spec.vocab_size, spec.d)),
                    dense,
                    spec.ls_max,
                    spec.k_limit,
                    spec.pad_id,
                    spec.unk_id,
                )?
            }
        };
        let agent = RemovalAgent::seeded(spec.d, manifest.config.seed);
        let cvib = CvibModel::seeded(
            spec.d,
            manifest.config.d_z,
            manifest.arch_vocab.len(),
            manifest.opt_vocab.len(),
            manifest.config.seed,
        );
        let mut model = Model {
            encoder,
            agent,
            cvib,
            arch_vocab: manifest.arch_vocab.clone(),
            opt_vocab: manifest.opt_vocab.clone(),
        };
        let bytes = std::fs::read(dir.join("params.bin"))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Manifest("params.bin is not a multiple of 8 bytes".into()));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        model.load_flat(&flat)?;
        Ok(Checkpoint { manifest, model })
    }

    /// The inference path: tokenize, prune, embed, encode with absent
    /// conditions and zero noise. Never reads record metadata.
    pub fn infer_encoding(&self, text: &str) -> Result<Array1<f64>> {
        let cfg = &self.manifest.config;
        let tokens = self.model.encoder.tokenize(text)?;
        let cond =
            ConditionLabels::absent(self.model.arch_vocab.len(), self.model.opt_vocab.len());
        let fwd = forward_sequence(&self.model, cfg, &tokens, &cond, None)?;
        Ok(fwd.z)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Output of a training run.
#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub telemetry: Vec<EpochTelemetry>,
}

/// Train on a split. Deterministic under a fixed seed: pair shuffling and
/// the bottleneck noise stream both derive from `cfg.seed`.
pub fn train(cfg: &TrainConfig, split: &SplitManifest, store: &CorpusStore) -> Result<TrainOutput> {
    if split.pairs.is_empty() {
        return Err(Error::Domain(format!("split {} has no pairs", split.name)));
    }
    let (mut model, cfg) = Model::init(cfg, &store.arch_vocab, &store.opt_vocab)?;

    // Tokenize each referenced record once.
    let mut token_cache: HashMap<&str, TokenizedSequence> = HashMap::new();
    let mut conds: HashMap<&str, ConditionLabels> = HashMap::new();
    for pair in &split.pairs {
        for id in [pair.left_id.as_str(), pair.right_id.as_str()] {
            if !token_cache.contains_key(id) {
                let record = store.get(id).ok_or_else(|| {
                    Error::Manifest(format!("split references unknown record `{id}`"))
                })?;
                token_cache.insert(id, model.encoder.tokenize(&record.instruction_sequence)?);
                conds.insert(
                    id,
                    ConditionLabels::from_tags(
                        &record.architecture,
                        &record.optimization,
                        &model.arch_vocab,
                        &model.opt_vocab,
                    )?,
                );
            }
        }
    }

    let mut noise = substream(cfg.seed, "cvib-noise");
    let mut grads = model.grads(!cfg.freeze_embedder);
    let mut telemetry = Vec::with_capacity(cfg.epochs);
    let mut steps = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..split.pairs.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut shuffle_rng = substream(cfg.seed, &format!("shuffle-{epoch}"));
            order.shuffle(&mut shuffle_rng);
        }
        let mut epoch_loss = LossBreakdown::zero();
        let mut n_batches = 0usize;
        let mut clamp_events = 0u64;

        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut items = Vec::with_capacity(chunk.len());
            for &pi in chunk {
                let pair = &split.pairs[pi];
                let (eps_l, eps_r) = if cfg.enable_cvib {
                    let mut draw =
                        || Array1::from_shape_fn(cfg.d_z, |_| StandardNormal.sample(&mut noise));
                    let l = draw();
                    let r = draw();
                    (Some(l), Some(r))
                } else {
                    (None, None)
                };
                let item = forward_pair(
                    &model,
                    &cfg,
                    &token_cache[pair.left_id.as_str()],
                    &token_cache[pair.right_id.as_str()],
                    &conds[pair.left_id.as_str()],
                    &conds[pair.right_id.as_str()],
                    pair.label as f64,
                    eps_l.as_ref(),
                    eps_r.as_ref(),
                )?;
                clamp_events += (item.left.selection.k_clamped as u64)
                    + (item.right.selection.k_clamped as u64);
                items.push(item);
            }
            let loss = composite_loss(&items, &cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite loss in epoch {epoch}, batch {batch_no}"
                )));
            }
            let reward = if cfg.enable_removal {
                removal::reward(loss.l_cos, cfg.eps_guard)
            } else {
                0.0
            };
            grads.zero();
            backward_batch(&model, &cfg, &items, reward, &mut grads);
            model.sgd_step(&grads, cfg.learning_rate, cfg.freeze_embedder);
            steps += 1;

            epoch_loss.l_cos += loss.l_cos;
            epoch_loss.l_rl += loss.l_rl;
            epoch_loss.l_cvib_total += loss.l_cvib_total;
            epoch_loss.l_cvib_kl += loss.l_cvib_kl;
            epoch_loss.l_cvib_recon += loss.l_cvib_recon;
            epoch_loss.total += loss.total;
            n_batches += 1;
        }

        let nb = n_batches.max(1) as f64;
        epoch_loss.l_cos /= nb;
        epoch_loss.l_rl /= nb;
        epoch_loss.l_cvib_total /= nb;
        epoch_loss.l_cvib_kl /= nb;
        epoch_loss.l_cvib_recon /= nb;
        epoch_loss.total /= nb;
        telemetry.push(EpochTelemetry {
            epoch,
            loss: epoch_loss,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            n_pairs: split.pairs.len(),
            clamp_events,
        });
    }

    let checkpoint = Checkpoint::new(model, cfg, store.lib_vocab.clone(), steps);
    Ok(TrainOutput {
        checkpoint,
        telemetry,
    })
}

/// Report of one analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub n_params: usize,
    pub pass: bool,
}

/// Compare analytic gradients against central finite differences on a tiny
/// seeded instance. The reward and noise draws are frozen so the comparison
/// exercises exactly the backward contract (reward detached).
pub fn grad_check(cfg: &TrainConfig) -> Result<GradCheckReport> {
    let mut tiny = cfg.clone();
    tiny.backend = BackendChoice::Compact;
    tiny.d = 8;
    tiny.d_z = 3;
    tiny.ls_max = 12;
    tiny.k = 6;
    tiny.vocab_size = 32;
    tiny.freeze_embedder = false;
    tiny.weights_dir = None;
    let arch_vocab = vec!["archA".to_string(), "archB".to_string()];
    let opt_vocab = vec!["O0".to_string(), "O2".to_string()];
    let (mut model, tiny) = Model::init(&tiny, &arch_vocab, &opt_vocab)?;

    let texts = [
        "ld r1 #4 add r1 r2 st r1 #8 cmp r2 r3",
        "ld r4 #4 mul r4 r5 st r4 #8 jmp back",
    ];
    let tokens: Vec<TokenizedSequence> = texts
        .iter()
        .map(|t| model.encoder.tokenize(t))
        .collect::<Result<_>>()?;
    let cond_l = ConditionLabels::one_hot(Some(0), 2, Some(1), 2);
    let cond_r = ConditionLabels::one_hot(Some(1), 2, Some(0), 2);
    let mut noise = substream(tiny.seed, "grad-check-noise");
    let eps: Vec<Array1<f64>> = (0..2)
        .map(|_| Array1::from_shape_fn(tiny.d_z, |_| StandardNormal.sample(&mut noise)))
        .collect();

    let run = |model: &Model| -> Result<PairForward> {
        forward_pair(
            model,
            &tiny,
            &tokens[0],
            &tokens[1],
            &cond_l,
            &cond_r,
            1.0,
            tiny.enable_cvib.then_some(&eps[0]),
            tiny.enable_cvib.then_some(&eps[1]),
        )
    };

    // Freeze the reward at its base value.
    let items = vec![run(&model)?];
    let base_loss = composite_loss(&items, &tiny)?;
    let reward = if tiny.enable_removal {
        removal::reward(base_loss.l_cos, tiny.eps_guard)
    } else {
        0.0
    };

    let mut grads = model.grads(true);
    backward_batch(&model, &tiny, &items, reward, &mut grads);
    let analytic = grads.flatten(&model);

    let layout = model.param_layout();
    let flat = model.flatten();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();

    let mut param_names = Vec::with_capacity(flat.len());
    for (name, shape) in &layout {
        let count: usize = shape.iter().product();
        for i in 0..count {
            param_names.push(format!("{name}[{i}]"));
        }
    }

    for idx in 0..flat.len() {
        let h = 1e-5 * flat[idx].abs().max(1.0);
        let mut perturbed = flat.clone();
        perturbed[idx] = flat[idx] + h;
        model.load_flat(&perturbed)?;
        let up = composite_loss_with(&[run(&model)?], &tiny, Some(reward))?.total;
        perturbed[idx] = flat[idx] - h;
        model.load_flat(&perturbed)?;
        let down = composite_loss_with(&[run(&model)?], &tiny, Some(reward))?.total;
        let numeric = (up - down) / (2.0 * h);
        let rel =
            (analytic[idx] - numeric).abs() / analytic[idx].abs().max(numeric.abs()).max(1e-3);
        if rel > max_rel {
            max_rel = rel;
            worst = param_names[idx].clone();
        }
    }
    model.load_flat(&flat)?;

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_param: worst,
        n_params: flat.len(),
        pass: max_rel <= 1e-3,
    })
}
