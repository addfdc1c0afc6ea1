//! Autoregressive mixture-density sequence model over prosody embeddings.
//!
//! A context sequence (one hidden vector per phoneme) runs through two 1-D
//! convolution layers (each ReLU + layer norm + dropout), the result is
//! concatenated step-by-step with the previous embedding and fed to a gated
//! recurrent cell, and an affine projection emits one unconstrained mixture
//! head per step. Training minimizes the summed per-step negative
//! log-likelihood under teacher forcing; sampling feeds each drawn embedding
//! back into the recurrence.

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::gmm::{self, GmmParams, RawMdnHead};
use crate::nn::{self, Affine, Conv1d, GruCell, LayerNorm};
use crate::opt::Adam;
use crate::rng::{derive_stream, Rng};

/// Shape of the predictor network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorConfig {
    /// Width of each context vector (H).
    pub context_width: usize,
    /// Width of each prosody embedding (D).
    pub embedding_dim: usize,
    /// Mixture components per step (M).
    pub n_components: usize,
    /// Channels of both convolution layers.
    pub conv_channels: usize,
    /// Convolution kernel length; must be odd so 'same' padding preserves K.
    pub conv_kernel: usize,
    /// Hidden width of the recurrent cell.
    pub recurrent_width: usize,
    /// Dropout rate applied after each layer norm in train mode.
    pub dropout_rate: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            context_width: 16,
            embedding_dim: 4,
            n_components: 20,
            conv_channels: 16,
            conv_kernel: 3,
            recurrent_width: 16,
            dropout_rate: 0.1,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("context_width", self.context_width),
            ("embedding_dim", self.embedding_dim),
            ("n_components", self.n_components),
            ("conv_channels", self.conv_channels),
            ("conv_kernel", self.conv_kernel),
            ("recurrent_width", self.recurrent_width),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::invalid("conv_kernel must be odd"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Projection width: M logits + M*D means + M*D log-variances.
    pub fn head_width(&self) -> usize {
        self.n_components * (1 + 2 * self.embedding_dim)
    }
}

/// Whether dropout is active; train mode carries the stream it draws from.
pub enum Mode<'a> {
    Eval,
    Train { dropout: &'a mut Rng },
}

/// All trainable parameters of the predictor. Also used as the gradient
/// container: a gradient has exactly the shape of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub config: PredictorConfig,
    pub conv1: Conv1d,
    pub norm1: LayerNorm,
    pub conv2: Conv1d,
    pub norm2: LayerNorm,
    pub gru: GruCell,
    pub proj: Affine,
}

impl PredictorModel {
    /// Seeded init: weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)],
    /// biases zero, norm gains one.
    pub fn init(config: PredictorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.conv_channels;
        let gru_input = c + config.embedding_dim;
        Ok(PredictorModel {
            config,
            conv1: Conv1d::init(c, config.context_width, config.conv_kernel, rng),
            norm1: LayerNorm::identity(c),
            conv2: Conv1d::init(c, c, config.conv_kernel, rng),
            norm2: LayerNorm::identity(c),
            gru: GruCell::init(config.recurrent_width, gru_input, rng),
            proj: Affine::init(config.head_width(), config.recurrent_width, rng),
        })
    }

    /// All-zero parameters (gradient accumulator / degenerate model).
    pub fn zeros(config: PredictorConfig) -> Self {
        let c = config.conv_channels;
        let gru_input = c + config.embedding_dim;
        PredictorModel {
            config,
            conv1: Conv1d::zeros(c, config.context_width, config.conv_kernel),
            norm1: LayerNorm::zeros(c),
            conv2: Conv1d::zeros(c, c, config.conv_kernel),
            norm2: LayerNorm::zeros(c),
            gru: GruCell::zeros(config.recurrent_width, gru_input),
            proj: Affine::zeros(config.head_width(), config.recurrent_width),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_views().iter().map(|v| v.len()).sum()
    }

    /// Flatten every parameter tensor in the fixed checkpoint order:
    /// conv1.weight, conv1.bias, norm1.gain, norm1.shift, conv2.weight,
    /// conv2.bias, norm2.gain, norm2.shift, gru (w/u/b for update, reset,
    /// candidate), proj.weight, proj.bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for a in self.param_views() {
            out.extend_from_slice(a);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for a in self.param_views_mut() {
            a.copy_from_slice(&flat[offset..offset + a.len()]);
            offset += a.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn param_views(&self) -> Vec<&[f64]> {
        vec![
            self.conv1.weight.as_slice().unwrap(),
            self.conv1.bias.as_slice().unwrap(),
            self.norm1.gain.as_slice().unwrap(),
            self.norm1.shift.as_slice().unwrap(),
            self.conv2.weight.as_slice().unwrap(),
            self.conv2.bias.as_slice().unwrap(),
            self.norm2.gain.as_slice().unwrap(),
            self.norm2.shift.as_slice().unwrap(),
            self.gru.w_update.as_slice().unwrap(),
            self.gru.u_update.as_slice().unwrap(),
            self.gru.b_update.as_slice().unwrap(),
            self.gru.w_reset.as_slice().unwrap(),
            self.gru.u_reset.as_slice().unwrap(),
            self.gru.b_reset.as_slice().unwrap(),
            self.gru.w_cand.as_slice().unwrap(),
            self.gru.u_cand.as_slice().unwrap(),
            self.gru.b_cand.as_slice().unwrap(),
            self.proj.weight.as_slice().unwrap(),
            self.proj.bias.as_slice().unwrap(),
        ]
    }

    fn param_views_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.conv1.weight.as_slice_mut().unwrap(),
            self.conv1.bias.as_slice_mut().unwrap(),
            self.norm1.gain.as_slice_mut().unwrap(),
            self.norm1.shift.as_slice_mut().unwrap(),
            self.conv2.weight.as_slice_mut().unwrap(),
            self.conv2.bias.as_slice_mut().unwrap(),
            self.norm2.gain.as_slice_mut().unwrap(),
            self.norm2.shift.as_slice_mut().unwrap(),
            self.gru.w_update.as_slice_mut().unwrap(),
            self.gru.u_update.as_slice_mut().unwrap(),
            self.gru.b_update.as_slice_mut().unwrap(),
            self.gru.w_reset.as_slice_mut().unwrap(),
            self.gru.u_reset.as_slice_mut().unwrap(),
            self.gru.b_reset.as_slice_mut().unwrap(),
            self.gru.w_cand.as_slice_mut().unwrap(),
            self.gru.u_cand.as_slice_mut().unwrap(),
            self.gru.b_cand.as_slice_mut().unwrap(),
            self.proj.weight.as_slice_mut().unwrap(),
            self.proj.bias.as_slice_mut().unwrap(),
        ]
    }

    /// Names and flat sizes of the parameter groups, in checkpoint order.
    pub fn param_groups(&self) -> Vec<(&'static str, usize)> {
        let names = [
            "conv1.weight",
            "conv1.bias",
            "norm1.gain",
            "norm1.shift",
            "conv2.weight",
            "conv2.bias",
            "norm2.gain",
            "norm2.shift",
            "gru.w_update",
            "gru.u_update",
            "gru.b_update",
            "gru.w_reset",
            "gru.u_reset",
            "gru.b_reset",
            "gru.w_cand",
            "gru.u_cand",
            "gru.b_cand",
            "proj.weight",
            "proj.bias",
        ];
        names
            .iter()
            .zip(self.param_views())
            .map(|(n, v)| (*n, v.len()))
            .collect()
    }

    fn check_context(&self, ctx: &Array2<f64>) -> Result<()> {
        if ctx.nrows() == 0 {
            return Err(Error::invalid("context sequence is empty"));
        }
        if ctx.ncols() != self.config.context_width {
            return Err(Error::invalid(format!(
                "context width {} does not match config ({})",
                ctx.ncols(),
                self.config.context_width
            )));
        }
        if !ctx.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite value in context sequence"));
        }
        Ok(())
    }

    fn check_targets(&self, ctx: &Array2<f64>, target: &Array2<f64>) -> Result<()> {
        if target.nrows() != ctx.nrows() {
            return Err(Error::invalid(format!(
                "target length {} does not match context length {}",
                target.nrows(),
                ctx.nrows()
            )));
        }
        if target.ncols() != self.config.embedding_dim {
            return Err(Error::invalid(format!(
                "embedding dimension {} does not match config ({})",
                target.ncols(),
                self.config.embedding_dim
            )));
        }
        if !target.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite value in target sequence"));
        }
        Ok(())
    }

    /// Conv -> ReLU -> layer norm -> dropout, twice. Returns the per-step
    /// features the recurrence consumes.
    fn conv_stack(&self, ctx: &Array2<f64>, mode: &mut Mode<'_>) -> (Array2<f64>, ConvCache) {
        let pre1 = self.conv1.forward(ctx);
        let act1 = nn::relu(&pre1);
        let (normed1, norm1_cache) = self.norm1.forward(&act1);
        let (fed1, mask1) = apply_dropout(normed1, self.config.dropout_rate, mode);

        let pre2 = self.conv2.forward(&fed1);
        let act2 = nn::relu(&pre2);
        let (normed2, norm2_cache) = self.norm2.forward(&act2);
        let (features, mask2) = apply_dropout(normed2, self.config.dropout_rate, mode);

        (
            features,
            ConvCache {
                pre1,
                norm1_cache,
                mask1,
                fed1,
                pre2,
                norm2_cache,
                mask2,
            },
        )
    }

    fn conv_stack_backward(
        &self,
        ctx: &Array2<f64>,
        cache: &ConvCache,
        mut d_features: Array2<f64>,
        grad: &mut PredictorModel,
    ) {
        if let Some(mask) = &cache.mask2 {
            d_features *= mask;
        }
        let d_act2 = self
            .norm2
            .backward(&cache.norm2_cache, &d_features, &mut grad.norm2);
        let d_pre2 = nn::relu_backward(&cache.pre2, &d_act2);
        let mut d_fed1 = self.conv2.backward(&cache.fed1, &d_pre2, &mut grad.conv2);

        if let Some(mask) = &cache.mask1 {
            d_fed1 *= mask;
        }
        let d_act1 = self
            .norm1
            .backward(&cache.norm1_cache, &d_fed1, &mut grad.norm1);
        let d_pre1 = nn::relu_backward(&cache.pre1, &d_act1);
        self.conv1.backward(ctx, &d_pre1, &mut grad.conv1);
    }

    /// One recurrent step: consume conv features and the previous embedding,
    /// emit the next hidden state.
    pub fn recurrent_step(
        &self,
        features: ndarray::ArrayView1<'_, f64>,
        prev_embedding: ndarray::ArrayView1<'_, f64>,
        hidden: &Array1<f64>,
    ) -> (Array1<f64>, nn::GruStepCache) {
        let mut x = Array1::zeros(features.len() + prev_embedding.len());
        x.slice_mut(s![..features.len()]).assign(&features);
        x.slice_mut(s![features.len()..]).assign(&prev_embedding);
        self.gru.step(x.view(), hidden.view())
    }

    /// Split one projection output into an unconstrained mixture head.
    pub fn head_from_projection(&self, output: &Array1<f64>) -> RawMdnHead {
        let m = self.config.n_components;
        let d = self.config.embedding_dim;
        let logits = output.slice(s![..m]).to_owned();
        let means =
            Array2::from_shape_vec((m, d), output.slice(s![m..m + m * d]).to_vec()).unwrap();
        let log_variances =
            Array2::from_shape_vec((m, d), output.slice(s![m + m * d..]).to_vec()).unwrap();
        RawMdnHead {
            logits,
            means,
            log_variances,
        }
    }

    /// Teacher-forced forward pass: K context rows in, K mixture heads out.
    ///
    /// `prev` supplies the embedding consumed at each step: step k sees
    /// `prev[k-1]`, and step 0 sees the zero vector. `None` feeds zeros at
    /// every step.
    pub fn forward(
        &self,
        ctx: &Array2<f64>,
        prev: Option<&Array2<f64>>,
        mode: &mut Mode<'_>,
    ) -> Result<Vec<RawMdnHead>> {
        Ok(self.forward_cached(ctx, prev, mode)?.0)
    }

    fn forward_cached(
        &self,
        ctx: &Array2<f64>,
        prev: Option<&Array2<f64>>,
        mode: &mut Mode<'_>,
    ) -> Result<(Vec<RawMdnHead>, ForwardCache)> {
        self.check_context(ctx)?;
        if let Some(p) = prev {
            self.check_targets(ctx, p)?;
        }
        let k_len = ctx.nrows();
        let d = self.config.embedding_dim;
        let (features, conv_cache) = self.conv_stack(ctx, mode);

        let mut hidden = Array1::zeros(self.config.recurrent_width);
        let mut heads = Vec::with_capacity(k_len);
        let mut steps = Vec::with_capacity(k_len);
        let mut hiddens = Vec::with_capacity(k_len);
        let zero_prev = Array1::zeros(d);
        for k in 0..k_len {
            let prev_embedding = match (k, prev) {
                (0, _) | (_, None) => zero_prev.view(),
                (_, Some(p)) => p.row(k - 1),
            };
            let (h, cache) = self.recurrent_step(features.row(k), prev_embedding, &hidden);
            let output = self.proj.forward(h.view());
            heads.push(self.head_from_projection(&output));
            steps.push(cache);
            hiddens.push(h.clone());
            hidden = h;
        }
        Ok((
            heads,
            ForwardCache {
                conv_cache,
                steps,
                hiddens,
            },
        ))
    }

    /// Summed per-step NLL of `target` under teacher forcing.
    pub fn sequence_nll(
        &self,
        ctx: &Array2<f64>,
        target: &Array2<f64>,
        mode: &mut Mode<'_>,
    ) -> Result<f64> {
        self.check_targets(ctx, target)?;
        let heads = self.forward(ctx, Some(target), mode)?;
        let mut total = 0.0;
        for (k, head) in heads.iter().enumerate() {
            let params = gmm::activate(head)?;
            total += gmm::nll(&params, target.row(k))?;
        }
        Ok(total)
    }

    /// Sequence NLL and its exact gradient with respect to every parameter.
    pub fn sequence_grad(
        &self,
        ctx: &Array2<f64>,
        target: &Array2<f64>,
        mode: &mut Mode<'_>,
    ) -> Result<(f64, PredictorModel)> {
        self.check_targets(ctx, target)?;
        let k_len = ctx.nrows();
        let (heads, cache) = self.forward_cached(ctx, Some(target), mode)?;

        let mut grad = PredictorModel::zeros(self.config);
        let mut total = 0.0;
        // Per-step projection gradients first, then backprop through time.
        let mut d_hidden_from_proj: Vec<Array1<f64>> = Vec::with_capacity(k_len);
        for (k, head) in heads.iter().enumerate() {
            let (step_nll, head_grad) = gmm::nll_grad(head, target.row(k))?;
            total += step_nll;
            let m = self.config.n_components;
            let d = self.config.embedding_dim;
            let mut d_output = Array1::zeros(self.config.head_width());
            d_output.slice_mut(s![..m]).assign(&head_grad.d_logits);
            d_output
                .slice_mut(s![m..m + m * d])
                .assign(&Array1::from_vec(head_grad.d_means.into_raw_vec()));
            d_output
                .slice_mut(s![m + m * d..])
                .assign(&Array1::from_vec(head_grad.d_log_variances.into_raw_vec()));
            let d_h = self
                .proj
                .backward(cache.hiddens[k].view(), d_output.view(), &mut grad.proj);
            d_hidden_from_proj.push(d_h);
        }

        let c = self.config.conv_channels;
        let mut d_features = Array2::zeros((k_len, c));
        let mut d_carry = Array1::zeros(self.config.recurrent_width);
        for k in (0..k_len).rev() {
            let d_h = &d_hidden_from_proj[k] + &d_carry;
            let (d_x, d_h_prev) =
                self.gru
                    .step_backward(&cache.steps[k], d_h.view(), &mut grad.gru);
            d_features.row_mut(k).assign(&d_x.slice(s![..c]));
            // Gradient w.r.t. the previous embedding is dropped: embeddings
            // enter as data (teacher forcing / stop gradient).
            d_carry = d_h_prev;
        }

        self.conv_stack_backward(ctx, &cache.conv_cache, d_features, &mut grad);
        Ok((total, grad))
    }

    /// Autoregressive sampling: run one step conditioned on the previously
    /// drawn embedding, activate, draw at `temperature`, feed the draw back.
    pub fn sample_sequence(
        &self,
        ctx: &Array2<f64>,
        rng: &mut Rng,
        temperature: f64,
    ) -> Result<Array2<f64>> {
        self.check_context(ctx)?;
        let k_len = ctx.nrows();
        let d = self.config.embedding_dim;
        let (features, _) = self.conv_stack(ctx, &mut Mode::Eval);

        let mut hidden = Array1::zeros(self.config.recurrent_width);
        let mut prev = Array1::zeros(d);
        let mut out = Array2::zeros((k_len, d));
        for k in 0..k_len {
            let (h, _) = self.recurrent_step(features.row(k), prev.view(), &hidden);
            let output = self.proj.forward(h.view());
            let head = self.head_from_projection(&output);
            let params = gmm::activate(&head)?;
            let draw = gmm::sample(&params, rng, temperature)?;
            out.row_mut(k).assign(&draw);
            prev = draw;
            hidden = h;
        }
        Ok(out)
    }

    /// Per-step mixture parameters under teacher forcing, eval mode.
    pub fn step_distributions(
        &self,
        ctx: &Array2<f64>,
        target: &Array2<f64>,
    ) -> Result<Vec<GmmParams>> {
        self.check_targets(ctx, target)?;
        let heads = self.forward(ctx, Some(target), &mut Mode::Eval)?;
        heads.iter().map(gmm::activate).collect()
    }
}

struct ConvCache {
    pre1: Array2<f64>,
    norm1_cache: nn::LayerNormCache,
    mask1: Option<Array2<f64>>,
    fed1: Array2<f64>,
    pre2: Array2<f64>,
    norm2_cache: nn::LayerNormCache,
    mask2: Option<Array2<f64>>,
}

struct ForwardCache {
    conv_cache: ConvCache,
    steps: Vec<nn::GruStepCache>,
    hiddens: Vec<Array1<f64>>,
}

fn apply_dropout(
    x: Array2<f64>,
    rate: f64,
    mode: &mut Mode<'_>,
) -> (Array2<f64>, Option<Array2<f64>>) {
    match mode {
        Mode::Train { dropout } if rate > 0.0 => {
            let mask = nn::dropout_mask(x.dim(), rate, dropout);
            (&x * &mask, Some(mask))
        }
        _ => (x, None),
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One training pair: a context sequence and its target embeddings.
#[derive(Debug, Clone)]
pub struct TrainItem {
    /// K x H.
    pub context: Array2<f64>,
    /// K x D.
    pub target: Array2<f64>,
}

/// Optimization schedule for [`train`].
#[derive(Debug, Clone, Copy)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Per-epoch record of the training objective.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean per-sequence NLL seen during each epoch.
    pub epoch_mean_nll: Vec<f64>,
}

/// Adam on the mean per-sequence NLL over shuffled mini-batches.
///
/// Deterministic given the schedule seed: stream 0 shuffles, stream 1 drives
/// dropout.
pub fn train(
    model: &mut PredictorModel,
    items: &[TrainItem],
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    if items.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if schedule.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut shuffle_rng = derive_stream(schedule.seed, 0);
    let mut dropout_rng = derive_stream(schedule.seed, 1);
    let mut adam = Adam::new(schedule.learning_rate, model.param_count());

    let mut report = TrainReport {
        epoch_mean_nll: Vec::with_capacity(schedule.epochs),
    };
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0usize;
    for _ in 0..schedule.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let mut grad_flat = vec![0.0; model.param_count()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let item = &items[i];
                let (loss, grad) = model.sequence_grad(
                    &item.context,
                    &item.target,
                    &mut Mode::Train {
                        dropout: &mut dropout_rng,
                    },
                )?;
                batch_loss += loss;
                for (acc, g) in grad_flat.iter_mut().zip(grad.to_flat()) {
                    *acc += g;
                }
            }
            step += 1;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: batch_loss,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grad_flat.iter_mut() {
                *g *= scale;
            }
            let mut params = model.to_flat();
            adam.step(&mut params, &grad_flat);
            model.load_flat(&params);
            epoch_loss += batch_loss;
        }
        report.epoch_mean_nll.push(epoch_loss / items.len() as f64);
    }
    Ok(report)
}

/// Mean log-likelihood per phoneme of `items` under the model, eval mode.
pub fn mean_loglik_per_phoneme(model: &PredictorModel, items: &[TrainItem]) -> Result<f64> {
    let mut total = 0.0;
    let mut phonemes = 0usize;
    for item in items {
        total -= model.sequence_nll(&item.context, &item.target, &mut Mode::Eval)?;
        phonemes += item.target.nrows();
    }
    Ok(total / phonemes as f64)
}
