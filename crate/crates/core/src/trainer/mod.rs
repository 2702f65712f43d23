//! Deterministic training loop: encoders, losses, schedules and AdamW, with
//! per-epoch held-out evaluation.

mod eval;
mod optimizer;

pub use eval::{eval_alignment, eval_retrieval};
pub use optimizer::{adamw_step, OptimizerState};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoders::{
    encode, encoder_backward, init_encoder, EncoderParams, ForwardCache, Mlp, ProjectionHead,
};
use crate::error::{Error, Result};
use crate::losses::{
    composite_loss, info_nce, mv_simcon_masks, positive_masks, simcon, IntraModal, LossOutput,
    NcsSpec, Temperature,
};
use crate::numerics::{cosine_similarity_matrix, l2_normalize_rows, EmbeddingBatch, Matrix};
use crate::schedules::{lambda_at_epoch, lr_at_step, LambdaSchedule, LrSchedule};
use crate::synthdata::{
    augment_views, generate_dataset, generate_eval_split, sample_batches, Dataset, DatasetSpec,
    ViewConfig,
};

/// Which objective a run optimizes. The five ablation rows are `InfoNce`,
/// `SimCon`, and `MultiView` with `(ncs, joint_positives)` set to
/// `(false, false)`, `(true, false)` and `(true, true)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    InfoNce,
    SimCon,
    MultiView { ncs: bool, joint_positives: bool },
}

impl Objective {
    pub const FULL: Objective = Objective::MultiView {
        ncs: true,
        joint_positives: true,
    };

    /// Ablation rows in order: InfoNCE, SimCon, +views, +NCS, +joint positives.
    pub const ABLATION: [Objective; 5] = [
        Objective::InfoNce,
        Objective::SimCon,
        Objective::MultiView {
            ncs: false,
            joint_positives: false,
        },
        Objective::MultiView {
            ncs: true,
            joint_positives: false,
        },
        Objective::FULL,
    ];

    pub fn uses_views(&self) -> bool {
        matches!(self, Objective::MultiView { .. })
    }

    pub fn uses_head(&self) -> bool {
        matches!(self, Objective::MultiView { ncs: true, .. })
    }

    pub fn uses_masks(&self) -> bool {
        !matches!(self, Objective::InfoNce)
    }

    /// Short stable name used in file names and CSV rows.
    pub fn label(&self) -> &'static str {
        match self {
            Objective::InfoNce => "infonce",
            Objective::SimCon => "simcon",
            Objective::MultiView {
                ncs: false,
                joint_positives: false,
            } => "simcon+views",
            Objective::MultiView {
                ncs: true,
                joint_positives: false,
            } => "simcon+views+ncs",
            Objective::MultiView {
                ncs: false,
                joint_positives: true,
            } => "simcon+views+joint",
            Objective::MultiView {
                ncs: true,
                joint_positives: true,
            } => "mv_simcon",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub dataset: DatasetSpec,
    pub eval_samples: usize,
    pub views: ViewConfig,
    pub image_hidden: Vec<usize>,
    pub text_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lambda: LambdaSchedule,
    pub lr: LrSchedule,
    pub tau_init: f64,
    pub learn_tau: bool,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let embed_dim = 32;
        Self {
            objective: Objective::FULL,
            dataset: DatasetSpec::default(),
            eval_samples: 1000,
            views: ViewConfig::default(),
            image_hidden: vec![64],
            text_hidden: vec![64],
            embed_dim,
            head_hidden: 2 * embed_dim,
            batch_size: 128,
            epochs: 30,
            seed: 0,
            lambda: LambdaSchedule::default(),
            lr: LrSchedule::default(),
            tau_init: crate::losses::TAU_INIT,
            learn_tau: true,
            weight_decay: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.views
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.lambda.validate()?;
        self.lr.validate()?;
        if self.batch_size == 0 || self.batch_size > self.dataset.samples {
            return Err(Error::Config(format!(
                "batch_size {} must lie in [1, samples = {}]",
                self.batch_size, self.dataset.samples
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.lr.total_epochs != self.epochs {
            return Err(Error::Config(format!(
                "learning-rate schedule spans {} epochs but the run has {}",
                self.lr.total_epochs, self.epochs
            )));
        }
        if self.embed_dim == 0 || self.head_hidden == 0 || self.eval_samples == 0 {
            return Err(Error::Config(
                "embed_dim, head_hidden and eval_samples must be positive".into(),
            ));
        }
        if !(self.tau_init > 0.0) {
            return Err(Error::Config(format!(
                "tau_init {} must be positive",
                self.tau_init
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lambda: f64,
    pub tau: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub loss_img_to_txt: f64,
    pub loss_txt_to_img: f64,
    pub loss_ncs: f64,
    pub mean_positives_image: f64,
    pub mean_positives_text: f64,
    pub diagonal_numerator_share: f64,
    pub recall_i2t: f64,
    pub recall_t2i: f64,
    pub alignment_accuracy: f64,
    pub seconds: f64,
}

/// Everything that is optimized: both towers, the optional projection head
/// and the temperature's scale parameter (`tau = exp(-scale)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub image: EncoderParams,
    pub text: EncoderParams,
    pub head: Option<ProjectionHead>,
    pub tau_scale: f64,
    pub learn_tau: bool,
}

impl Model {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let image = init_encoder(
            mix(cfg.seed, 1),
            cfg.dataset.image_dim,
            &cfg.image_hidden,
            cfg.embed_dim,
        )?;
        let text = init_encoder(
            mix(cfg.seed, 2),
            cfg.dataset.text_dim,
            &cfg.text_hidden,
            cfg.embed_dim,
        )?;
        let head = if cfg.objective.uses_head() {
            Some(ProjectionHead::new(
                mix(cfg.seed, 3),
                cfg.embed_dim,
                cfg.head_hidden,
            )?)
        } else {
            None
        };
        Ok(Self {
            image,
            text,
            head,
            tau_scale: Temperature::learnable(cfg.tau_init)?.scale(),
            learn_tau: cfg.learn_tau,
        })
    }

    pub fn temperature(&self) -> Temperature {
        let mut t = Temperature::learnable(1.0).expect("valid temperature");
        t.set_scale(self.tau_scale);
        t
    }

    fn mlps(&self) -> impl Iterator<Item = &Mlp> {
        [&self.image, &self.text]
            .into_iter()
            .chain(self.head.as_ref().map(|h| h.mlp()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.mlps().flat_map(|m| m.flatten()).collect();
        out.push(self.tau_scale);
        out
    }

    /// Weight matrices decay; biases and the temperature do not.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for m in self.mlps() {
            m.for_each_tensor(|t, is_weight| out.extend(std::iter::repeat_n(is_weight, t.len())));
        }
        out.push(false);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        let mut take = |m: &mut Mlp| {
            let n = m.param_count();
            m.load_flat(&flat[at..at + n]);
            at += n;
        };
        take(&mut self.image);
        take(&mut self.text);
        if let Some(h) = self.head.as_mut() {
            take(h.mlp_mut());
        }
        if self.learn_tau {
            // keep the stored scale inside the clamped temperature range
            let s = flat[at];
            self.tau_scale = s.clamp(-crate::losses::TAU_MAX.ln(), -crate::losses::TAU_MIN.ln());
        }
    }
}

/// Gradients laid out like [`Model::flatten`].
fn flat_grads(
    model: &Model,
    image: &Mlp,
    text: &Mlp,
    head: Option<&Mlp>,
    grad_tau: f64,
) -> Vec<f64> {
    let mut out = image.flatten();
    out.extend(text.flatten());
    if model.head.is_some() {
        match head {
            Some(h) => out.extend(h.flatten()),
            None => out.extend(std::iter::repeat_n(
                0.0,
                model.head.as_ref().unwrap().mlp().param_count(),
            )),
        }
    }
    out.push(if model.learn_tau {
        model.temperature().scale_gradient(grad_tau)
    } else {
        0.0
    });
    out
}

fn add_mlp(a: &mut Mlp, b: &Mlp) {
    for (la, lb) in a.layers_mut().iter_mut().zip(b.layers()) {
        la.weight.add_assign(&lb.weight).expect("same layout");
        for (x, y) in la.bias.iter_mut().zip(&lb.bias) {
            *x += y;
        }
    }
}

/// SplitMix64-style combination of a seed with a tag.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Result of one training step.
struct StepOutput {
    loss: LossOutput,
    grads: Vec<f64>,
}

fn step_grads(
    model: &Model,
    cfg: &TrainConfig,
    data: &Dataset,
    idx: &[usize],
    lambda: f64,
    aug_seed: u64,
) -> Result<StepOutput> {
    let temp = model.temperature();
    let (z_t, cache_t) = encode(&model.text, &data.text_matrix(idx))?;
    match cfg.objective {
        Objective::InfoNce | Objective::SimCon => {
            let (z_i, cache_i) = encode(&model.image, &data.image_matrix(idx))?;
            let loss = if cfg.objective == Objective::InfoNce {
                info_nce(&z_i, &z_t, &temp)?
            } else {
                let s_ii = cosine_similarity_matrix(&z_i, &z_i)?;
                let s_tt = cosine_similarity_matrix(&z_t, &z_t)?;
                let (p_i, p_t) = positive_masks(&s_ii, &s_tt, lambda)?;
                simcon(&z_i, &z_t, &p_i, &p_t, &temp, IntraModal::Include)?
            };
            let gi = encoder_backward(&model.image, &cache_i, &loss.grads[0])?;
            let gt = encoder_backward(&model.text, &cache_t, &loss.grads[1])?;
            let grads = flat_grads(model, &gi, &gt, None, loss.grad_tau);
            Ok(StepOutput { loss, grads })
        }
        Objective::MultiView {
            ncs,
            joint_positives,
        } => {
            let mut v1 = Vec::with_capacity(idx.len());
            let mut v2 = Vec::with_capacity(idx.len());
            for &i in idx {
                let (a, b) = augment_views(&data.pairs[i], &cfg.views, mix(aug_seed, i as u64));
                v1.push(a);
                v2.push(b);
            }
            let (z1, c1) = encode(&model.image, &Matrix::from_rows(&v1)?)?;
            let (z2, c2) = encode(&model.image, &Matrix::from_rows(&v2)?)?;
            let masks = mv_simcon_masks(&z1, &z2, &z_t, lambda, joint_positives)?;
            let spec = model.head.as_ref().filter(|_| ncs).map(NcsSpec::new);
            let loss = composite_loss(&z1, &z2, &z_t, &masks, &temp, spec.as_ref())?;
            let mut gi = encoder_backward(&model.image, &c1, &loss.grads[0])?;
            add_mlp(
                &mut gi,
                &encoder_backward(&model.image, &c2, &loss.grads[1])?,
            );
            let gt = encoder_backward(&model.text, &cache_t, &loss.grads[2])?;
            let grads = flat_grads(model, &gi, &gt, loss.head_grads.as_ref(), loss.grad_tau);
            Ok(StepOutput { loss, grads })
        }
    }
}

/// Normalized embeddings of an evaluation split plus encoded text
/// prototypes.
pub struct EvalEmbeddings {
    pub images: EmbeddingBatch,
    pub texts: EmbeddingBatch,
    pub prototypes: EmbeddingBatch,
}

pub fn embed_eval(model: &Model, eval: &Dataset) -> Result<EvalEmbeddings> {
    let all: Vec<usize> = (0..eval.len()).collect();
    let (images, _) = encode(&model.image, &eval.image_matrix(&all))?;
    let (texts, _) = encode(&model.text, &eval.text_matrix(&all))?;
    let (protos, _): (EmbeddingBatch, ForwardCache) =
        encode(&model.text, &eval.world.text_prototypes)?;
    Ok(EvalEmbeddings {
        images,
        texts,
        prototypes: l2_normalize_rows(protos.matrix())?,
    })
}

pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub model: Model,
}

/// Runs a full training job. Identical configs give bit-identical histories
/// (apart from `seconds`).
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.dataset)?;
    let eval = generate_eval_split(&cfg.dataset, cfg.eval_samples)?;
    let mut model = Model::init(cfg)?;
    let mut opt = OptimizerState::new(model.flatten().len());
    let decays = model.decay_mask();
    let steps_per_epoch = data.len() / cfg.batch_size;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lambda = lambda_at_epoch(&cfg.lambda, epoch);
        let mut sums = [0.0f64; 7];
        let mut lr = 0.0;
        let epoch_seed = mix(cfg.seed, 1000 + epoch as u64);
        for (b, idx) in sample_batches(data.len(), cfg.batch_size, epoch_seed).enumerate() {
            lr = lr_at_step(&cfg.lr, global_step, steps_per_epoch);
            let aug_seed = mix(epoch_seed, b as u64);
            let out = step_grads(&model, cfg, &data, &idx, lambda, aug_seed)?;
            if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: global_step,
                    detail: format!(
                        "epoch {epoch}, loss {}, tau {}, terms {:?}",
                        out.loss.value,
                        model.temperature().tau(),
                        out.loss.diagnostics.terms
                    ),
                });
            }
            let d = &out.loss.diagnostics;
            let sum_terms = |names: &[&str]| names.iter().filter_map(|n| d.term(n)).sum::<f64>();
            sums[0] += out.loss.value;
            sums[1] += sum_terms(&["i2t", "i1_t", "i2_t"]);
            sums[2] += sum_terms(&["t2i", "t_i1", "t_i2"]);
            sums[3] += d.term("ncs").unwrap_or(0.0);
            sums[4] += d.mean_positives_image.unwrap_or(1.0);
            sums[5] += d.mean_positives_text.unwrap_or(1.0);
            sums[6] += d.diagonal_numerator_share.unwrap_or(0.0);

            let mut flat = model.flatten();
            adamw_step(
                &mut opt,
                &mut flat,
                &out.grads,
                &decays,
                lr,
                cfg.weight_decay,
            )?;
            model.load_flat(&flat);
            global_step += 1;
        }

        let emb = embed_eval(&model, &eval)?;
        let (recall_i2t, recall_t2i) = eval_retrieval(&emb.images, &emb.texts)?;
        let alignment_accuracy = eval_alignment(&emb.images, &eval.class_ids(), &emb.prototypes)?;
        let steps = steps_per_epoch as f64;
        history.push(EpochMetrics {
            epoch,
            lambda: if cfg.objective.uses_masks() {
                lambda
            } else {
                f64::NAN
            },
            tau: model.temperature().tau(),
            lr,
            loss: sums[0] / steps,
            loss_img_to_txt: sums[1] / steps,
            loss_txt_to_img: sums[2] / steps,
            loss_ncs: sums[3] / steps,
            mean_positives_image: sums[4] / steps,
            mean_positives_text: sums[5] / steps,
            diagonal_numerator_share: sums[6] / steps,
            recall_i2t,
            recall_t2i,
            alignment_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { history, model })
}
