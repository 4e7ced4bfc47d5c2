//! Client-side optimizers: the personalization methods.
//!
//! All five share the same outer shape — clone the broadcast model, run
//! `local_iters` optimizer steps over the shard, send back the delta — and
//! differ in what each step minimizes:
//!
//! - [`LaSsfl`]: plain siamese stop-gradient steps on the broadcast model.
//!   Personalization happens only at evaluation time, by running a few more
//!   local steps (see [`adapt_locally`]).
//! - [`GlobalSimClr`]: same loop with the contrastive (NT-Xent) objective;
//!   the predictor slot acts as the projection head.
//! - [`MamlSsfl`]: first-order meta-learning. Each step adapts a clone for a
//!   few inner steps on fresh batches, then takes the outer gradient *at the
//!   adapted point* and applies it to the client's model, optimizing for
//!   "good after adaptation" rather than "good now".
//! - [`BiLevelSsfl`]: keeps a persistent personal model trained alongside
//!   the global branch, with a proximal pull `2λ(θ_k − Θ)` toward the
//!   round's broadcast weights added to the personal gradient.
//! - [`PerSsfl`]: keeps a persistent personal model whose predictions are
//!   additionally aligned — in representation space rather than weight
//!   space — with the global branch's predictions on the same views, via the
//!   cross-prediction penalty scaled by λ.
//!
//! Both branches of the two-branch methods consume the *same* batches and
//! views per step, and every method draws from identical batch/view streams,
//! so setting λ = 0 (or zero inner steps) collapses each method onto the
//! plain variant exactly — a property the tests pin down.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::UnlabeledView;
use crate::error::{Error, Result};
use crate::fed::{ClientCtx, ClientSslOpt, ClientUpdate, LocalOutcome, PersonalState};
use crate::model::{is_trainable, Batch, Encoder, Predictor, SgdMomentum};
use crate::params::ParameterSet;
use crate::rng::Stream;
use crate::ssl::{
    cross_prediction_penalty, make_views, siamese_backward, siamese_forward,
    simclr_loss_on_views, simsiam_loss_on_views, symmetric_prediction_loss, AugmentationPolicy,
};
use crate::{cast, Scalar};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Cycles through reshuffled positions of a shard so consecutive draws sweep
/// the data without repeats until a pass completes, and every draw is
/// full-size even on shards smaller than the batch.
struct PositionSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl PositionSampler {
    fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Empty("client shard".into()));
        }
        Ok(Self {
            order: (0..len).collect(),
            cursor: len, // force a shuffle on the first draw
        })
    }

    fn draw(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Per-round client loop state: samplers and streams, all derived from
/// `(seed, round, client)` so local work is reproducible regardless of
/// scheduling.
struct LocalRun<'a, F: Scalar> {
    ctx: &'a ClientCtx<'a>,
    sampler: PositionSampler,
    batch_rng: ChaCha8Rng,
    view_rng: ChaCha8Rng,
    steps: usize,
    loss_sum: f64,
    micro_count: usize,
    _marker: std::marker::PhantomData<F>,
}

impl<'a, F: Scalar> LocalRun<'a, F> {
    fn new(ctx: &'a ClientCtx<'a>) -> Result<Self> {
        let steps = ctx
            .cfg
            .local_iters
            .steps(ctx.data.len(), ctx.cfg.effective_batch());
        Ok(Self {
            ctx,
            sampler: PositionSampler::new(ctx.data.len())?,
            batch_rng: ctx.batch_rng(ctx.cfg.seed),
            view_rng: ctx.view_rng(ctx.cfg.seed),
            steps,
            loss_sum: 0.0,
            micro_count: 0,
            _marker: std::marker::PhantomData,
        })
    }

    /// Draw the next micro-batch and expand it into two views.
    fn next_views(&mut self) -> Result<(Batch<F>, Batch<F>)> {
        let pos = self.sampler.draw(self.ctx.cfg.micro_batch, &mut self.batch_rng);
        let batch = self.ctx.data.batch::<F>(&pos)?;
        make_views(&batch, self.ctx.policy, &mut self.view_rng)
    }

    /// Record the loss of the branch whose update goes to the server.
    fn record(&mut self, loss: F) {
        self.loss_sum += loss.to_f64().unwrap_or(f64::NAN);
        self.micro_count += 1;
    }

    fn mean_loss(&self) -> f64 {
        self.loss_sum / self.micro_count.max(1) as f64
    }

    fn outcome(
        &self,
        updated: &ParameterSet<F>,
        broadcast: &ParameterSet<F>,
        personal: Option<PersonalState<F>>,
    ) -> Result<LocalOutcome<F>> {
        Ok(LocalOutcome {
            update: ClientUpdate {
                client_id: self.ctx.client_id,
                delta: updated.sub(broadcast)?,
                num_samples: self.ctx.data.len(),
            },
            mean_loss: self.mean_loss(),
            personal,
        })
    }
}

/// Average accumulated micro-gradients into one step's gradient.
fn finish_accumulation<F: Scalar>(grads: &mut ParameterSet<F>, accumulation_steps: usize) {
    if accumulation_steps > 1 {
        grads.scale(cast::<F>(1.0 / accumulation_steps as f64));
    }
}

/// Add the proximal pull `2λ(θ − anchor)` to the trainable gradients.
fn add_proximal<F: Scalar>(
    grads: &mut ParameterSet<F>,
    params: &ParameterSet<F>,
    anchor: &ParameterSet<F>,
    lambda: f64,
) -> Result<()> {
    let two_lambda = cast::<F>(2.0 * lambda);
    for (name, p) in params.iter() {
        if !is_trainable(name) {
            continue;
        }
        let pull = (p - anchor.get(name)?).mapv_into(|v| v * two_lambda);
        grads.accumulate(name, pull)?;
    }
    Ok(())
}

/// Overwrite `dst`'s running statistics with `src`'s. Used when gradients
/// were measured on a temporary clone whose forward passes observed the most
/// recent batch statistics.
fn adopt_buffers<F: Scalar>(dst: &mut ParameterSet<F>, src: &ParameterSet<F>) -> Result<()> {
    let names: Vec<String> = dst
        .names()
        .filter(|n| !is_trainable(n))
        .map(str::to_string)
        .collect();
    for name in names {
        dst.set(&name, src.get(&name)?.clone())?;
    }
    Ok(())
}

/// Initial per-client state: a copy of the broadcast model and a fresh
/// optimizer.
fn fresh_personal<F: Scalar>(global: &ParameterSet<F>, momentum: f64) -> PersonalState<F> {
    PersonalState {
        params: global.clone(),
        optimizer: SgdMomentum::new(momentum),
    }
}

// ---------------------------------------------------------------------------
// Plain local training (LA / SimCLR)
// ---------------------------------------------------------------------------

/// Local siamese stop-gradient training on the broadcast model. The update
/// is the whole personalization story at train time; at evaluation time each
/// client adapts its copy with [`adapt_locally`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LaSsfl;

impl<F: Scalar> ClientSslOpt<F> for LaSsfl {
    fn name(&self) -> &'static str {
        "la"
    }

    fn local_update(
        &self,
        ctx: &ClientCtx<'_>,
        global: &ParameterSet<F>,
        _personal: Option<PersonalState<F>>,
    ) -> Result<LocalOutcome<F>> {
        let mut run = LocalRun::<F>::new(ctx)?;
        let mut params = global.clone();
        let mut opt = SgdMomentum::new(ctx.cfg.momentum);
        for _ in 0..run.steps {
            let mut grads = ParameterSet::new();
            for _ in 0..ctx.cfg.accumulation_steps {
                let (v1, v2) = run.next_views()?;
                let loss = simsiam_loss_on_views(
                    ctx.encoder,
                    ctx.predictor,
                    &mut params,
                    &v1,
                    &v2,
                    Some(&mut grads),
                )?;
                run.record(loss);
            }
            finish_accumulation(&mut grads, ctx.cfg.accumulation_steps);
            opt.step(&mut params, &grads, cast(ctx.lr))?;
        }
        run.outcome(&params, global, None)
    }
}

/// Local contrastive training: NT-Xent over both views' projections.
#[derive(Debug, Clone, Copy)]
pub struct GlobalSimClr {
    pub temperature: f64,
}

impl<F: Scalar> ClientSslOpt<F> for GlobalSimClr {
    fn name(&self) -> &'static str {
        "simclr"
    }

    fn local_update(
        &self,
        ctx: &ClientCtx<'_>,
        global: &ParameterSet<F>,
        _personal: Option<PersonalState<F>>,
    ) -> Result<LocalOutcome<F>> {
        let mut run = LocalRun::<F>::new(ctx)?;
        let mut params = global.clone();
        let mut opt = SgdMomentum::new(ctx.cfg.momentum);
        let temperature = cast::<F>(self.temperature);
        for _ in 0..run.steps {
            let mut grads = ParameterSet::new();
            for _ in 0..ctx.cfg.accumulation_steps {
                let (v1, v2) = run.next_views()?;
                let loss = simclr_loss_on_views(
                    ctx.encoder,
                    ctx.predictor,
                    &mut params,
                    &v1,
                    &v2,
                    temperature,
                    Some(&mut grads),
                )?;
                run.record(loss);
            }
            finish_accumulation(&mut grads, ctx.cfg.accumulation_steps);
            opt.step(&mut params, &grads, cast(ctx.lr))?;
        }
        run.outcome(&params, global, None)
    }
}

// ---------------------------------------------------------------------------
// MAML-style meta-updates
// ---------------------------------------------------------------------------

/// First-order meta-learning on the siamese objective. Each outer step:
///
/// 1. draw the outer micro-batches (first, so the batch stream lines up with
///    the plain methods),
/// 2. clone the model and run `inner_steps` plain SGD steps on fresh
///    batches — the simulated "personalization" a client would do,
/// 3. take the gradient of the siamese loss at the adapted clone on the
///    outer batches and apply it to the un-adapted model.
///
/// With `inner_steps = 0` the adapted clone *is* the model and the method
/// reduces to [`LaSsfl`] exactly. The last adapted clone is returned as the
/// client's personal model for evaluation.
#[derive(Debug, Clone, Copy)]
pub struct MamlSsfl {
    pub inner_steps: usize,
}

impl<F: Scalar> ClientSslOpt<F> for MamlSsfl {
    fn name(&self) -> &'static str {
        "maml"
    }

    fn personalized_eval(&self) -> bool {
        true
    }

    fn local_update(
        &self,
        ctx: &ClientCtx<'_>,
        global: &ParameterSet<F>,
        _personal: Option<PersonalState<F>>,
    ) -> Result<LocalOutcome<F>> {
        let mut run = LocalRun::<F>::new(ctx)?;
        let mut params = global.clone();
        let mut opt = SgdMomentum::new(ctx.cfg.momentum);
        let mut last_adapted: Option<ParameterSet<F>> = None;
        for _ in 0..run.steps {
            let mut outer_views = Vec::with_capacity(ctx.cfg.accumulation_steps);
            for _ in 0..ctx.cfg.accumulation_steps {
                outer_views.push(run.next_views()?);
            }

            let mut adapted = params.clone();
            let mut inner_opt = SgdMomentum::new(0.0);
            for _ in 0..self.inner_steps {
                let (s1, s2) = run.next_views()?;
                let mut g = ParameterSet::new();
                simsiam_loss_on_views(
                    ctx.encoder,
                    ctx.predictor,
                    &mut adapted,
                    &s1,
                    &s2,
                    Some(&mut g),
                )?;
                inner_opt.step(&mut adapted, &g, cast(ctx.lr))?;
            }

            let mut grads = ParameterSet::new();
            for (v1, v2) in &outer_views {
                let loss = simsiam_loss_on_views(
                    ctx.encoder,
                    ctx.predictor,
                    &mut adapted,
                    v1,
                    v2,
                    Some(&mut grads),
                )?;
                run.record(loss);
            }
            finish_accumulation(&mut grads, ctx.cfg.accumulation_steps);
            opt.step(&mut params, &grads, cast(ctx.lr))?;
            // Running statistics were measured on the adapted clone's
            // forward passes; carry them over so the model's buffers track
            // the data it just saw.
            adopt_buffers(&mut params, &adapted)?;
            last_adapted = Some(adapted);
        }
        let personal = last_adapted.map(|p| PersonalState {
            params: p,
            optimizer: SgdMomentum::new(ctx.cfg.momentum),
        });
        run.outcome(&params, global, personal)
    }
}

// ---------------------------------------------------------------------------
// Bi-level proximal personalization
// ---------------------------------------------------------------------------

/// Two models per client: the global branch trains exactly like [`LaSsfl`]
/// and produces the server update; a persistent personal model follows the
/// same batches with an extra proximal pull `2λ(θ_k − Θ)` toward the round's
/// broadcast weights. λ trades personal fit against global consensus in
/// *weight* space.
#[derive(Debug, Clone, Copy)]
pub struct BiLevelSsfl {
    pub lambda: f64,
}

impl<F: Scalar> ClientSslOpt<F> for BiLevelSsfl {
    fn name(&self) -> &'static str {
        "bilevel"
    }

    fn personalized_eval(&self) -> bool {
        true
    }

    fn local_update(
        &self,
        ctx: &ClientCtx<'_>,
        global: &ParameterSet<F>,
        personal: Option<PersonalState<F>>,
    ) -> Result<LocalOutcome<F>> {
        let mut run = LocalRun::<F>::new(ctx)?;
        let mut theta_g = global.clone();
        let mut opt_g = SgdMomentum::new(ctx.cfg.momentum);
        let mut state = personal.unwrap_or_else(|| fresh_personal(global, ctx.cfg.momentum));
        for _ in 0..run.steps {
            let mut grads_g = ParameterSet::new();
            let mut grads_k = ParameterSet::new();
            for _ in 0..ctx.cfg.accumulation_steps {
                let (v1, v2) = run.next_views()?;
                let loss_g = simsiam_loss_on_views(
                    ctx.encoder,
                    ctx.predictor,
                    &mut theta_g,
                    &v1,
                    &v2,
                    Some(&mut grads_g),
                )?;
                run.record(loss_g);
                simsiam_loss_on_views(
                    ctx.encoder,
                    ctx.predictor,
                    &mut state.params,
                    &v1,
                    &v2,
                    Some(&mut grads_k),
                )?;
            }
            finish_accumulation(&mut grads_g, ctx.cfg.accumulation_steps);
            finish_accumulation(&mut grads_k, ctx.cfg.accumulation_steps);
            if self.lambda != 0.0 {
                add_proximal(&mut grads_k, &state.params, global, self.lambda)?;
            }
            opt_g.step(&mut theta_g, &grads_g, cast(ctx.lr))?;
            state
                .optimizer
                .step(&mut state.params, &grads_k, cast(ctx.lr))?;
        }
        run.outcome(&theta_g, global, Some(state))
    }
}

// ---------------------------------------------------------------------------
// Cross-prediction personalization
// ---------------------------------------------------------------------------

/// Two models per client, coupled in *representation* space: the personal
/// branch's predictions are pulled toward the global branch's predictions on
/// the same views through the four-way cross-prediction penalty, weighted by
/// λ. The global branch trains exactly like [`LaSsfl`] and produces the
/// server update; its predictions enter the personal loss as constants.
#[derive(Debug, Clone, Copy)]
pub struct PerSsfl {
    pub lambda: f64,
}

impl<F: Scalar> ClientSslOpt<F> for PerSsfl {
    fn name(&self) -> &'static str {
        "per"
    }

    fn personalized_eval(&self) -> bool {
        true
    }

    fn local_update(
        &self,
        ctx: &ClientCtx<'_>,
        global: &ParameterSet<F>,
        personal: Option<PersonalState<F>>,
    ) -> Result<LocalOutcome<F>> {
        let mut run = LocalRun::<F>::new(ctx)?;
        let mut theta_g = global.clone();
        let mut opt_g = SgdMomentum::new(ctx.cfg.momentum);
        let mut state = personal.unwrap_or_else(|| fresh_personal(global, ctx.cfg.momentum));
        let lambda = cast::<F>(self.lambda);
        for _ in 0..run.steps {
            let mut grads_g = ParameterSet::new();
            let mut grads_k = ParameterSet::new();
            for _ in 0..ctx.cfg.accumulation_steps {
                let (v1, v2) = run.next_views()?;

                let fwd_g = siamese_forward(ctx.encoder, ctx.predictor, &mut theta_g, &v1, &v2)?;
                let (loss_g, dgp1, dgp2) = symmetric_prediction_loss(&fwd_g)?;
                siamese_backward(
                    ctx.encoder,
                    ctx.predictor,
                    &theta_g,
                    &fwd_g,
                    &dgp1,
                    &dgp2,
                    &mut grads_g,
                )?;
                run.record(loss_g);

                let fwd_k =
                    siamese_forward(ctx.encoder, ctx.predictor, &mut state.params, &v1, &v2)?;
                let (_, mut dp1, mut dp2) = symmetric_prediction_loss(&fwd_k)?;
                if self.lambda != 0.0 {
                    let (_, rp1, rp2) =
                        cross_prediction_penalty(&fwd_k.p1, &fwd_k.p2, &fwd_g.p1, &fwd_g.p2)?;
                    dp1.scaled_add(lambda, &rp1);
                    dp2.scaled_add(lambda, &rp2);
                }
                siamese_backward(
                    ctx.encoder,
                    ctx.predictor,
                    &state.params,
                    &fwd_k,
                    &dp1,
                    &dp2,
                    &mut grads_k,
                )?;
            }
            finish_accumulation(&mut grads_g, ctx.cfg.accumulation_steps);
            finish_accumulation(&mut grads_k, ctx.cfg.accumulation_steps);
            opt_g.step(&mut theta_g, &grads_g, cast(ctx.lr))?;
            state
                .optimizer
                .step(&mut state.params, &grads_k, cast(ctx.lr))?;
        }
        run.outcome(&theta_g, global, Some(state))
    }
}

// ---------------------------------------------------------------------------
// Evaluation-time adaptation
// ---------------------------------------------------------------------------

/// Adapt a copy of `global` with a few local siamese steps on an unlabeled
/// shard — the evaluation-time personalization step of the plain and
/// meta-learned methods. Batches come from a dedicated stream (round
/// `u32::MAX`) so adaptation never replays training batches.
#[allow(clippy::too_many_arguments)]
pub fn adapt_locally<F: Scalar>(
    encoder: &Encoder,
    predictor: &Predictor,
    global: &ParameterSet<F>,
    data: &UnlabeledView<'_>,
    policy: &AugmentationPolicy,
    steps: usize,
    micro_batch: usize,
    lr: f64,
    momentum: f64,
    seed: u64,
    client: u64,
) -> Result<ParameterSet<F>> {
    let mut params = global.clone();
    let mut opt = SgdMomentum::new(momentum);
    let mut sampler = PositionSampler::new(data.len())?;
    let mut batch_rng = Stream::Batches {
        round: u32::MAX,
        client,
    }
    .rng(seed);
    let mut view_rng = Stream::Views {
        round: u32::MAX,
        client,
    }
    .rng(seed);
    for _ in 0..steps {
        let pos = sampler.draw(micro_batch, &mut batch_rng);
        let batch = data.batch::<F>(&pos)?;
        let (v1, v2) = make_views(&batch, policy, &mut view_rng)?;
        let mut grads = ParameterSet::new();
        simsiam_loss_on_views(encoder, predictor, &mut params, &v1, &v2, Some(&mut grads))?;
        opt.step(&mut params, &grads, cast(lr))?;
    }
    Ok(params)
}
