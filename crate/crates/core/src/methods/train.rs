use log::{debug, warn};
use rand::seq::SliceRandom;

use crate::autodiff::{per_sample_xent, GradReversal, Sgd, SgdConfig};
use crate::datasets::{balanced_subset, upsample_to_max, Dataset, SplitSet};
use crate::error::{Error, Result};
use crate::metrics::subgroup_accuracy;
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor2;

use super::config::{ErrorSetRule, Method, MethodConfig, Selection};
use super::gdro::{adjusted_group_loss, gdro_weight_update_partial, group_losses, GroupWeights};
use super::model::{build_task_head, extract_representations, ModelStack};
use super::trajectory::{EpochRecord, Stage, Trajectory};

/// A trained stack with its diagnostics.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ModelStack,
    pub trajectory: Trajectory,
    /// JTT only: training rows the stage-1 model got wrong.
    pub error_set: Option<Vec<usize>>,
}

/// How per-sample task losses are weighted within a batch.
enum Weighting {
    /// `1/B`
    Uniform,
    /// `r_i / Σ_batch r`, indexed by dataset row.
    Relative(Vec<f64>),
    /// `s_i / B`, indexed by dataset row.
    Scaled(Vec<f64>),
    Gdro(GdroState),
}

struct GdroState {
    q: GroupWeights,
    eta: f64,
    /// Added to each subgroup's loss before the adversary step.
    offsets: Vec<f64>,
}

impl GdroState {
    fn new(num_groups: usize, eta: f64, offsets: Vec<f64>) -> Self {
        GdroState {
            q: GroupWeights::uniform(num_groups),
            eta,
            offsets,
        }
    }
}

struct Phase<'a> {
    stage: Stage,
    stream: &'a [usize],
    epochs: usize,
    batch_size: usize,
    weighting: Weighting,
    selection: Selection,
    sgd: SgdConfig,
}

#[derive(Default)]
struct EpochAccumulator {
    loss_sum: f64,
    count: usize,
    group_sum: Vec<f64>,
    group_count: Vec<usize>,
    q_sum: Vec<f64>,
    steps: usize,
    max_simplex_error: f64,
}

/// Per-group accuracy, its average and worst, and per-group domain accuracy.
type ValMetrics = (
    Option<Vec<Option<f64>>>,
    Option<f64>,
    Option<f64>,
    Option<Vec<Option<f64>>>,
);

fn val_metrics(stack: &ModelStack, ds: &Dataset, val: &[usize]) -> Result<ValMetrics> {
    if val.is_empty() {
        return Ok((None, None, None, None));
    }
    let groups = ds.groups_of(val);
    let acc = subgroup_accuracy(
        &stack.predict(ds, val)?,
        &ds.labels_of(val),
        &groups,
        ds.num_groups(),
    )?;
    let domain = match stack.predict_domain(ds, val)? {
        Some(pred) => {
            Some(subgroup_accuracy(&pred, &ds.attributes_of(val), &groups, ds.num_groups())?.values)
        }
        None => None,
    };
    Ok((Some(acc.values), Some(acc.average), Some(acc.worst), domain))
}

fn divergence(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Divergence { epoch },
        other => other,
    }
}

/// Minibatch SGD over `phase.stream`, reshuffled every epoch.
fn run_phase(
    ds: &Dataset,
    val: &[usize],
    stack: &mut ModelStack,
    mut phase: Phase<'_>,
    shuffle: &mut StreamRng,
    traj: &mut Trajectory,
) -> Result<()> {
    let g_count = ds.num_groups();
    let mut enc_opt = Sgd::new(phase.sgd, &stack.encoder)?;
    let mut head_opt = Sgd::new(phase.sgd, &stack.task_head)?;
    let mut dom_opt = match &stack.domain_head {
        Some(d) => Some(Sgd::new(phase.sgd, d)?),
        None => None,
    };
    let mut best: Option<(f64, usize, ModelStack)> = None;
    let mut order = phase.stream.to_vec();

    for epoch in 0..phase.epochs {
        order.shuffle(shuffle);
        let mut acc = EpochAccumulator {
            group_sum: vec![0.0; g_count],
            group_count: vec![0; g_count],
            q_sum: vec![0.0; g_count],
            ..Default::default()
        };
        for idx in order.chunks(phase.batch_size) {
            let x = ds.batch(idx);
            let labels = ds.labels_of(idx);
            let groups = ds.groups_of(idx);
            let attrs = ds.attributes_of(idx);
            let b = idx.len();
            let weighting = &mut phase.weighting;
            let acc_ref = &mut acc;
            let grads = stack
                .gradients(&x, &labels, Some(&attrs), |losses| {
                    let w = match weighting {
                        Weighting::Uniform => vec![1.0 / b as f64; b],
                        Weighting::Relative(r) => {
                            batch_loss_weights(&idx.iter().map(|&i| r[i]).collect::<Vec<_>>())
                        }
                        Weighting::Scaled(s) => idx.iter().map(|&i| s[i] / b as f64).collect(),
                        Weighting::Gdro(state) => {
                            let batch_losses = group_losses(losses, &groups, g_count);
                            let adv: Vec<Option<f64>> = batch_losses
                                .iter()
                                .zip(&state.offsets)
                                .map(|(l, o)| l.map(|l| l + o))
                                .collect();
                            state.q = gdro_weight_update_partial(&state.q, &adv, state.eta)?;
                            acc_ref.max_simplex_error =
                                acc_ref.max_simplex_error.max(state.q.simplex_error());
                            for (s, q) in acc_ref.q_sum.iter_mut().zip(state.q.as_slice()) {
                                *s += q;
                            }
                            acc_ref.steps += 1;
                            let mut n = vec![0usize; g_count];
                            for &g in &groups {
                                n[g] += 1;
                            }
                            groups
                                .iter()
                                .map(|&g| state.q.as_slice()[g] / n[g] as f64)
                                .collect()
                        }
                    };
                    Ok(w)
                })
                .map_err(divergence(epoch))?;
            for (&l, &g) in grads.task_losses.iter().zip(&groups) {
                acc.loss_sum += l;
                acc.group_sum[g] += l;
                acc.group_count[g] += 1;
            }
            acc.count += b;
            if !acc.loss_sum.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            enc_opt.step(&mut stack.encoder, &grads.encoder)?;
            head_opt.step(&mut stack.task_head, &grads.task_head)?;
            if let (Some(opt), Some(head), Some(g)) = (
                dom_opt.as_mut(),
                stack.domain_head.as_mut(),
                grads.domain_head.as_ref(),
            ) {
                opt.step(head, g)?;
            }
        }

        let group_losses: Vec<Option<f64>> = acc
            .group_sum
            .iter()
            .zip(&acc.group_count)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        let (q_end, q_mean, adv, simplex) = match &phase.weighting {
            Weighting::Gdro(state) => (
                Some(state.q.as_slice().to_vec()),
                (acc.steps > 0).then(|| acc.q_sum.iter().map(|s| s / acc.steps as f64).collect()),
                Some(
                    group_losses
                        .iter()
                        .zip(&state.offsets)
                        .map(|(l, o)| l.map(|l| l + o))
                        .collect(),
                ),
                Some(acc.max_simplex_error),
            ),
            _ => (None, None, None, None),
        };
        let (val_accuracy, val_average, val_worst, domain_accuracy) =
            val_metrics(stack, ds, val).map_err(divergence(epoch))?;
        debug!(
            "{:?} epoch {epoch}: loss {:.4} val avg {:?} worst {:?}",
            phase.stage,
            acc.loss_sum / acc.count.max(1) as f64,
            val_average,
            val_worst
        );
        let score = match phase.selection {
            Selection::WorstGroup => val_worst,
            Selection::Average => val_average,
            Selection::Last => None,
        };
        if let Some(s) = score {
            if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
                best = Some((s, epoch, stack.clone()));
            }
        }
        traj.epochs.push(EpochRecord {
            stage: phase.stage,
            epoch,
            train_loss: acc.loss_sum / acc.count.max(1) as f64,
            group_losses,
            group_weights: q_end,
            mean_group_weights: q_mean,
            adversary_losses: adv,
            max_simplex_error: simplex,
            val_accuracy,
            val_average,
            val_worst,
            domain_accuracy,
        });
    }
    if let Some((_, epoch, model)) = best {
        *stack = model;
        traj.selected = Some((phase.stage, epoch));
    }
    Ok(())
}

fn init_stack(ds: &Dataset, cfg: &MethodConfig, method: Method, seed: u64) -> Result<ModelStack> {
    let reversal = if method.has_domain_head() {
        Some(GradReversal::new(cfg.dann_lambda)?)
    } else {
        None
    };
    Ok(ModelStack::for_dataset(
        ds,
        &cfg.arch,
        reversal,
        &mut rng::stream(seed, "init"),
    ))
}

fn check_inputs(ds: &Dataset, splits: &SplitSet, cfg: &MethodConfig, method: Method) -> Result<()> {
    cfg.validate(method)?;
    if splits.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if let Some(&i) = splits
        .train
        .iter()
        .chain(&splits.val)
        .chain(&splits.test)
        .find(|&&i| i >= ds.len())
    {
        return Err(Error::InvalidArgument(format!(
            "split index {i} outside dataset"
        )));
    }
    Ok(())
}

fn plain_phase<'a>(
    stage: Stage,
    stream: &'a [usize],
    epochs: usize,
    weighting: Weighting,
    selection: Selection,
    cfg: &MethodConfig,
) -> Phase<'a> {
    Phase {
        stage,
        stream,
        epochs,
        batch_size: cfg.batch_size,
        weighting,
        selection,
        sgd: cfg.sgd(),
    }
}

/// Mean cross-entropy over the training split.
pub fn train_erm(
    ds: &Dataset,
    splits: &SplitSet,
    cfg: &MethodConfig,
    seed: u64,
) -> Result<TrainOutput> {
    check_inputs(ds, splits, cfg, Method::Erm)?;
    let mut stack = init_stack(ds, cfg, Method::Erm, seed)?;
    let mut traj = Trajectory::default();
    let phase = plain_phase(
        Stage::Main,
        &splits.train,
        cfg.epochs,
        Weighting::Uniform,
        cfg.selection_for(Method::Erm),
        cfg,
    );
    run_phase(
        ds,
        &splits.val,
        &mut stack,
        phase,
        &mut rng::stream(seed, "shuffle"),
        &mut traj,
    )?;
    Ok(TrainOutput {
        model: stack,
        trajectory: traj,
        error_set: None,
    })
}

/// Relative subgroup weights `N_max/N_g`; zero for empty subgroups.
pub fn importance_weights(counts: &[usize]) -> Vec<f64> {
    let n_max = counts.iter().copied().max().unwrap_or(0) as f64;
    counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { n_max / n as f64 })
        .collect()
}

/// Coefficients `r_i / Σ_batch r` of the per-sample losses in one batch,
/// i.e. weights averaging 1 applied to the batch mean.
pub fn batch_loss_weights(relative: &[f64]) -> Vec<f64> {
    let total: f64 = relative.iter().sum();
    relative.iter().map(|v| v / total).collect()
}

/// Per-sample weights `∝ 1/N_g` (training counts), normalized to average 1
/// within each batch.
pub fn train_iw(
    ds: &Dataset,
    splits: &SplitSet,
    cfg: &MethodConfig,
    seed: u64,
) -> Result<TrainOutput> {
    check_inputs(ds, splits, cfg, Method::Iw)?;
    let per_group = importance_weights(&ds.group_counts(&splits.train));
    let mut rel = vec![0.0; ds.len()];
    for &i in &splits.train {
        rel[i] = per_group[ds.group(i)];
    }
    let mut stack = init_stack(ds, cfg, Method::Iw, seed)?;
    let mut traj = Trajectory::default();
    let phase = plain_phase(
        Stage::Main,
        &splits.train,
        cfg.epochs,
        Weighting::Relative(rel),
        cfg.selection_for(Method::Iw),
        cfg,
    );
    run_phase(
        ds,
        &splits.val,
        &mut stack,
        phase,
        &mut rng::stream(seed, "shuffle"),
        &mut traj,
    )?;
    Ok(TrainOutput {
        model: stack,
        trajectory: traj,
        error_set: None,
    })
}

/// `C/√N_g` per subgroup from training counts; zero for empty subgroups.
fn adjustment_offsets(counts: &[usize], c: f64) -> Result<Vec<f64>> {
    counts
        .iter()
        .map(|&n| {
            if n == 0 {
                Ok(0.0)
            } else {
                adjusted_group_loss(0.0, n, c)
            }
        })
        .collect()
}

fn gdro_weighting(
    ds: &Dataset,
    splits: &SplitSet,
    cfg: &MethodConfig,
    adjust: bool,
) -> Result<Weighting> {
    let offsets = if adjust {
        adjustment_offsets(&ds.group_counts(&splits.train), cfg.adj_c)?
    } else {
        vec![0.0; ds.num_groups()]
    };
    Ok(Weighting::Gdro(GdroState::new(
        ds.num_groups(),
        cfg.eta_q,
        offsets,
    )))
}

/// Group DRO: per batch, update subgroup weights by exponentiated ascent on
/// the (optionally adjusted) batch group losses, then descend on `Σ_g q_g L_g`.
pub fn train_gdro(
    ds: &Dataset,
    splits: &SplitSet,
    cfg: &MethodConfig,
    seed: u64,
    with_adjustment: bool,
) -> Result<TrainOutput> {
    let method = if with_adjustment {
        Method::GdroAdj
    } else {
        Method::Gdro
    };
    check_inputs(ds, splits, cfg, method)?;
    let mut stack = init_stack(ds, cfg, method, seed)?;
    let mut traj = Trajectory::default();
    let phase = plain_phase(
        Stage::Main,
        &splits.train,
        cfg.epochs,
        gdro_weighting(ds, splits, cfg, with_adjustment)?,
        cfg.selection_for(method),
        cfg,
    );
    run_phase(
        ds,
        &splits.val,
        &mut stack,
        phase,
        &mut rng::stream(seed, "shuffle"),
        &mut traj,
    )?;
    Ok(TrainOutput {
        model: stack,
        trajectory: traj,
        error_set: None,
    })
}

fn jtt_error_set(
    model: &ModelStack,
    ds: &Dataset,
    train: &[usize],
    rule: ErrorSetRule,
) -> Result<Vec<usize>> {
    match rule {
        ErrorSetRule::Misclassified => {
            let pred = model.predict(ds, train)?;
            Ok(train
                .iter()
                .zip(pred)
                .filter(|(&i, p)| *p != ds.label(i))
                .map(|(&i, _)| i)
                .collect())
        }
        ErrorSetRule::TopLoss { fraction } => {
            let logits = model.task_logits(&ds.batch(train))?;
            let losses = per_sample_xent(&logits, &ds.labels_of(train))?;
            let mut ranked: Vec<(f64, usize)> =
                losses.into_iter().zip(train.iter().copied()).collect();
            // descending loss, ascending index on ties
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let k = ((fraction * train.len() as f64).round() as usize).min(train.len());
            let mut set: Vec<usize> = ranked[..k].iter().map(|(_, i)| *i).collect();
            set.sort_unstable();
            Ok(set)
        }
    }
}

/// Just-train-twice: ERM for `jtt_epochs`, collect its training errors, then
/// retrain from the same initialization with weight `jtt_lambda` on them.
pub fn train_jtt(
    ds: &Dataset,
    splits: &SplitSet,
    cfg: &MethodConfig,
    seed: u64,
) -> Result<TrainOutput> {
    check_inputs(ds, splits, cfg, Method::Jtt)?;
    let mut traj = Trajectory::default();
    let mut stage1 = init_stack(ds, cfg, Method::Jtt, seed)?;
    let phase = plain_phase(
        Stage::Stage1,
        &splits.train,
        cfg.jtt_epochs,
        Weighting::Uniform,
        Selection::Last,
        cfg,
    );
    run_phase(
        ds,
        &splits.val,
        &mut stage1,
        phase,
        &mut rng::stream(seed, "jtt-stage1"),
        &mut traj,
    )?;

    let error_set = jtt_error_set(&stage1, ds, &splits.train, cfg.jtt_error_rule)?;
    if error_set.is_empty() {
        warn!("jtt: stage-1 model made no training errors; stage 2 is plain ERM");
    }
    traj.error_set_counts = Some(ds.group_counts(&error_set));
    let mut scale = vec![1.0; ds.len()];
    for &i in &error_set {
        scale[i] = cfg.jtt_lambda;
    }
    let mut stack = init_stack(ds, cfg, Method::Jtt, seed)?;
    let phase = plain_phase(
        Stage::Stage2,
        &splits.train,
        cfg.epochs,
        Weighting::Scaled(scale),
        cfg.selection_for(Method::Jtt),
        cfg,
    );
    run_phase(
        ds,
        &splits.val,
        &mut stack,
        phase,
        &mut rng::stream(seed, "shuffle"),
        &mut traj,
    )?;
    Ok(TrainOutput {
        model: stack,
        trajectory: traj,
        error_set: Some(error_set),
    })
}

/// Domain-adversarial training on the subgroup-upsampled training stream.
/// The domain label is the spurious attribute.
pub fn train_dann(
    ds: &Dataset,
    splits: &SplitSet,
    cfg: &MethodConfig,
    seed: u64,
) -> Result<TrainOutput> {
    check_inputs(ds, splits, cfg, Method::Dann)?;
    let stream = upsample_to_max(ds, &splits.train, seed)?;
    let mut stack = init_stack(ds, cfg, Method::Dann, seed)?;
    let mut traj = Trajectory::default();
    let phase = plain_phase(
        Stage::Main,
        &stream,
        cfg.epochs,
        Weighting::Uniform,
        cfg.selection_for(Method::Dann),
        cfg,
    );
    run_phase(
        ds,
        &splits.val,
        &mut stack,
        phase,
        &mut rng::stream(seed, "shuffle"),
        &mut traj,
    )?;
    Ok(TrainOutput {
        model: stack,
        trajectory: traj,
        error_set: None,
    })
}

fn rows_of(z: &Tensor2, rows: &[usize]) -> Tensor2 {
    let mut data = Vec::with_capacity(rows.len() * z.cols());
    for &r in rows {
        data.extend_from_slice(z.row(r));
    }
    Tensor2::from_vec(rows.len(), z.cols(), data).expect("sized by construction")
}

/// Freeze the encoder and retrain the task head on a subgroup-balanced draw
/// from the validation split.
pub fn finetune_head(
    ds: &Dataset,
    splits: &SplitSet,
    stack: &mut ModelStack,
    cfg: &MethodConfig,
    seed: u64,
    traj: &mut Trajectory,
) -> Result<()> {
    let subset = balanced_subset(ds, &splits.val, cfg.per_group_finetune, seed)?;
    traj.finetune_with_replacement = Some(subset.with_replacement);
    let z = extract_representations(stack, ds, &subset.indices)?;
    let labels = ds.labels_of(&subset.indices);
    let groups = ds.groups_of(&subset.indices);
    if !cfg.finetune_warm_start {
        stack.task_head = build_task_head(
            &cfg.arch,
            ds.num_classes(),
            &mut rng::stream(seed, "head-init"),
        );
    }
    let mut opt = Sgd::new(cfg.finetune_sgd(), &stack.task_head)?;
    let mut shuffle = rng::stream(seed, "finetune-shuffle");
    let mut order: Vec<usize> = (0..subset.indices.len()).collect();
    for epoch in 0..cfg.finetune_epochs {
        order.shuffle(&mut shuffle);
        let g_count = ds.num_groups();
        let mut group_sum = vec![0.0; g_count];
        let mut group_count = vec![0usize; g_count];
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.finetune_batch_size) {
            let zb = rows_of(&z, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&r| labels[r]).collect();
            let logits = stack.task_head.forward(&zb).map_err(divergence(epoch))?;
            let losses = per_sample_xent(&logits, &yb)?;
            for (&r, &l) in chunk.iter().zip(&losses) {
                loss_sum += l;
                group_sum[groups[r]] += l;
                group_count[groups[r]] += 1;
            }
            let w = vec![1.0 / chunk.len() as f64; chunk.len()];
            let bp = stack
                .task_head
                .backward_xent(&yb, &w)
                .map_err(divergence(epoch))?;
            opt.step(&mut stack.task_head, &bp.grads)?;
        }
        if !loss_sum.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let (val_accuracy, val_average, val_worst, domain_accuracy) =
            val_metrics(stack, ds, &splits.val)?;
        traj.epochs.push(EpochRecord {
            stage: Stage::Finetune,
            epoch,
            train_loss: loss_sum / order.len().max(1) as f64,
            group_losses: group_sum
                .iter()
                .zip(&group_count)
                .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
                .collect(),
            group_weights: None,
            mean_group_weights: None,
            adversary_losses: None,
            max_simplex_error: None,
            val_accuracy,
            val_average,
            val_worst,
            domain_accuracy,
        });
    }
    Ok(())
}

/// ERM, then head-only retraining on a balanced validation draw.
pub fn train_dfr(
    ds: &Dataset,
    splits: &SplitSet,
    cfg: &MethodConfig,
    seed: u64,
) -> Result<TrainOutput> {
    check_inputs(ds, splits, cfg, Method::Dfr)?;
    let erm_cfg = MethodConfig {
        selection: Some(cfg.selection_for(Method::Dfr)),
        ..cfg.clone()
    };
    let mut out = train_erm(ds, splits, &erm_cfg, seed)?;
    finetune_head(ds, splits, &mut out.model, cfg, seed, &mut out.trajectory)?;
    Ok(out)
}

/// Domain-adversarial training whose task loss is the group-DRO objective,
/// followed by head-only retraining on a balanced validation draw.
pub fn train_proposed(
    ds: &Dataset,
    splits: &SplitSet,
    cfg: &MethodConfig,
    seed: u64,
) -> Result<TrainOutput> {
    check_inputs(ds, splits, cfg, Method::Proposed)?;
    let stream = upsample_to_max(ds, &splits.train, seed)?;
    let mut stack = init_stack(ds, cfg, Method::Proposed, seed)?;
    let mut traj = Trajectory::default();
    let phase = plain_phase(
        Stage::Main,
        &stream,
        cfg.epochs,
        gdro_weighting(ds, splits, cfg, cfg.proposed_adjust)?,
        cfg.selection_for(Method::Proposed),
        cfg,
    );
    run_phase(
        ds,
        &splits.val,
        &mut stack,
        phase,
        &mut rng::stream(seed, "shuffle"),
        &mut traj,
    )?;
    finetune_head(ds, splits, &mut stack, cfg, seed, &mut traj)?;
    Ok(TrainOutput {
        model: stack,
        trajectory: traj,
        error_set: None,
    })
}

pub fn train(
    method: Method,
    ds: &Dataset,
    splits: &SplitSet,
    cfg: &MethodConfig,
    seed: u64,
) -> Result<TrainOutput> {
    match method {
        Method::Erm => train_erm(ds, splits, cfg, seed),
        Method::Iw => train_iw(ds, splits, cfg, seed),
        Method::Gdro => train_gdro(ds, splits, cfg, seed, false),
        Method::GdroAdj => train_gdro(ds, splits, cfg, seed, true),
        Method::Jtt => train_jtt(ds, splits, cfg, seed),
        Method::Dann => train_dann(ds, splits, cfg, seed),
        Method::Dfr => train_dfr(ds, splits, cfg, seed),
        Method::Proposed => train_proposed(ds, splits, cfg, seed),
    }
}
