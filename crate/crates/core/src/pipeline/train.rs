use rand::seq::SliceRandom;

use super::{DiffusionConfig, PretrainConfig, KEY_PRETRAIN, KEY_PRETRAIN_INIT, KEY_STAGE1, KEY_STAGE2, KEY_STAGE2_INIT};
use crate::checkpoint::{DenoiserCheckpoint, GuidanceCheckpoint};
use crate::data::Dataset;
use crate::diffusion::{epsilon_loss, Conditioning, DenoiserNet, NoiseDraw};
use crate::guidance::{guidance_loss, GuidanceModel, GuidanceShape, GuidanceTrainConfig, GuidanceVars, Trainable};
use crate::numkit::{Tape, Tensor2, Var};
use crate::optim::{
    adam_step, clip_grad_norm, ema_update, lr_at, radam_step, AdamState, EmaState, LrPlan,
};
use crate::{rng, Error, Result};

/// Per-epoch log in `stage,epoch,lr,loss[,acc]` form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub lines: Vec<String>,
    /// Mean training loss of each epoch.
    pub losses: Vec<f64>,
}

impl TrainLog {
    fn record(&mut self, stage: &str, epoch: usize, lr: f64, loss: f64, acc: Option<f64>) {
        let mut line = format!("{stage},{epoch},{lr:.6e},{loss:.6}");
        if let Some(acc) = acc {
            line.push_str(&format!(",{acc:.4}"));
        }
        self.lines.push(line);
        self.losses.push(loss);
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.lines.extend(other.lines);
        self.losses.extend(other.losses);
    }
}

fn gather_rows(t: &Tensor2, idx: &[usize]) -> Tensor2 {
    Tensor2::from_fn(idx.len(), t.cols(), |i, j| t.get(idx[i], j))
}

fn epoch_order(n: usize, seed: u64, key: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, &[key, epoch as u64]));
    order
}

fn check_finite(stage: &str, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{stage} epoch {epoch}: non-finite loss ({loss})")))
    }
}

fn accuracy(model: &GuidanceModel, data: &Dataset) -> Result<f64> {
    let preds = model.zero_shot_batch(&data.features)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.n() as f64)
}

// Parameter groups, in optimizer order.
fn group_vars(v: &GuidanceVars, trainable: Trainable) -> Vec<Vec<Var>> {
    match trainable {
        Trainable::Nothing => vec![],
        Trainable::Base => vec![vec![v.w1, v.b1, v.w2, v.b2, v.prompts, v.log_scale]],
        Trainable::Adaptation => vec![vec![v.lora_a, v.lora_b], vec![v.prompts, v.log_scale]],
    }
}

fn read_groups(m: &GuidanceModel, trainable: Trainable) -> Vec<Vec<Tensor2>> {
    let scale = Tensor2::scalar(m.log_scale);
    match trainable {
        Trainable::Nothing => vec![],
        Trainable::Base => vec![vec![
            m.w1.clone(),
            m.b1.clone(),
            m.w2.clone(),
            m.b2.clone(),
            m.prompts.clone(),
            scale,
        ]],
        Trainable::Adaptation => vec![
            vec![m.adapter.a.clone(), m.adapter.b.clone()],
            vec![m.prompts.clone(), scale],
        ],
    }
}

fn write_groups(m: &mut GuidanceModel, trainable: Trainable, groups: Vec<Vec<Tensor2>>) {
    let mut it = groups.into_iter().flatten();
    let mut next = || it.next().expect("group layout");
    match trainable {
        Trainable::Nothing => {}
        Trainable::Base => {
            m.w1 = next();
            m.b1 = next();
            m.w2 = next();
            m.b2 = next();
            m.prompts = next();
            m.log_scale = next().item();
        }
        Trainable::Adaptation => {
            m.adapter.a = next();
            m.adapter.b = next();
            m.prompts = next();
            m.log_scale = next().item();
        }
    }
}

fn grad_or_zero(tape: &Tape, v: Var) -> Tensor2 {
    tape.grad(v).cloned().unwrap_or_else(|| {
        let (r, c) = tape.value(v).shape();
        Tensor2::zeros(r, c)
    })
}

#[derive(Clone, Copy)]
enum Rule {
    Adam,
    RAdam,
}

struct GuidanceLoop<'a> {
    stage: &'static str,
    key: u64,
    seed: u64,
    trainable: Trainable,
    rule: Rule,
    batch: usize,
    lambda_rank: f64,
    margin: f64,
    plans: &'a [LrPlan],
    weight_decay: f64,
}

impl GuidanceLoop<'_> {
    fn run(&self, model: &mut GuidanceModel, data: &Dataset, epochs: usize) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let mut states: Vec<AdamState> = read_groups(model, self.trainable)
            .iter()
            .map(|g| AdamState::new(g.iter()))
            .collect();
        for epoch in 0..epochs {
            let lrs = self
                .plans
                .iter()
                .map(|p| lr_at(epoch, p))
                .collect::<Result<Vec<f64>>>()?;
            let mut total = 0.0;
            for chunk in epoch_order(data.n(), self.seed, self.key, epoch).chunks(self.batch) {
                let x = gather_rows(&data.features, chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
                let mut tape = Tape::new();
                let vars = model.bind(&mut tape, self.trainable);
                let xv = tape.constant(x);
                let loss = guidance_loss(&mut tape, &vars, xv, &labels, self.lambda_rank, self.margin)?;
                let value = tape.value(loss).item();
                check_finite(self.stage, epoch, value)?;
                tape.backward(loss)?;
                let mut groups = read_groups(model, self.trainable);
                for (((params, vs), state), &lr) in groups
                    .iter_mut()
                    .zip(group_vars(&vars, self.trainable))
                    .zip(states.iter_mut())
                    .zip(&lrs)
                {
                    let grads: Vec<Tensor2> = vs.iter().map(|&v| grad_or_zero(&tape, v)).collect();
                    let mut refs: Vec<&mut Tensor2> = params.iter_mut().collect();
                    match self.rule {
                        Rule::Adam => adam_step(&mut refs, &grads, state, lr)?,
                        Rule::RAdam => radam_step(&mut refs, &grads, state, lr)?,
                    }
                }
                write_groups(model, self.trainable, groups);
                if self.weight_decay > 0.0 {
                    let shrink = 1.0 - lrs[0] * self.weight_decay;
                    model.w1 = model.w1.scale(shrink);
                    model.w2 = model.w2.scale(shrink);
                }
                total += value * chunk.len() as f64;
            }
            let acc = accuracy(model, data)?;
            log.record(self.stage, epoch + 1, lrs[0], total / data.n() as f64, Some(acc));
        }
        Ok(log)
    }
}

/// Trains the base encoder and prompts on the source domain from a seeded
/// initialization. The adapter is created here but left at zero.
pub fn pretrain_base(
    source: &Dataset,
    rank: usize,
    alpha: f64,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(GuidanceModel, TrainLog)> {
    cfg.validate()?;
    let shape = GuidanceShape::new(source.d_in(), source.k, rank);
    let mut model = GuidanceModel::init(shape, alpha, &mut rng::substream(seed, &[KEY_PRETRAIN_INIT]))?;
    let plan = LrPlan {
        base_lr: cfg.lr,
        min_lr: cfg.lr * 0.01,
        warmup_start_lr: cfg.lr,
        warmup_epochs: 0,
        total_epochs: cfg.epochs.max(1),
    };
    let runner = GuidanceLoop {
        stage: "pretrain",
        key: KEY_PRETRAIN,
        seed,
        trainable: Trainable::Base,
        rule: Rule::Adam,
        batch: cfg.batch,
        lambda_rank: cfg.lambda_rank,
        margin: cfg.margin,
        plans: &[plan],
        weight_decay: cfg.weight_decay,
    };
    let log = runner.run(&mut model, source, cfg.epochs)?;
    Ok((model, log))
}

/// Stage 1: adapts the LoRA factors, prompts and logit scale on the target
/// training split with RAdam; the base encoder stays fixed. The returned
/// checkpoint is marked frozen.
pub fn train_stage1(
    base: &GuidanceModel,
    train: &Dataset,
    cfg: &GuidanceTrainConfig,
) -> Result<(GuidanceCheckpoint, TrainLog)> {
    cfg.validate()?;
    base.validate()?;
    if train.d_in() != base.d_in() || train.k != base.k() {
        return Err(Error::Data(format!(
            "data has d_in = {}, k = {} but the guidance model expects {}, {}",
            train.d_in(),
            train.k,
            base.d_in(),
            base.k()
        )));
    }
    let mut model = base.clone();
    let plan = |lr: f64| LrPlan {
        base_lr: lr,
        min_lr: lr * 0.01,
        warmup_start_lr: 1e-5,
        warmup_epochs: cfg.warmup_epochs,
        total_epochs: cfg.epochs.max(1),
    };
    let plans = [plan(cfg.lr_lora), plan(cfg.lr_prompt)];
    let runner = GuidanceLoop {
        stage: "stage1",
        key: KEY_STAGE1,
        seed: cfg.seed,
        trainable: Trainable::Adaptation,
        rule: Rule::RAdam,
        batch: cfg.batch,
        lambda_rank: cfg.lambda_rank,
        margin: cfg.margin,
        plans: &plans,
        weight_decay: 0.0,
    };
    let log = runner.run(&mut model, train, cfg.epochs)?;
    Ok((GuidanceCheckpoint::from_model(&model, true), log))
}

fn gather_cond(c: &Conditioning, idx: &[usize]) -> Conditioning {
    Conditioning {
        f: gather_rows(&c.f, idx),
        d: gather_rows(&c.d, idx),
        prior: gather_rows(&c.prior, idx),
    }
}

/// Stage 2: trains the noise predictor against conditioning computed once
/// by the frozen guidance model. Returns raw and EMA weights.
pub fn train_stage2(
    guidance: &GuidanceCheckpoint,
    train: &Dataset,
    cfg: &DiffusionConfig,
) -> Result<(DenoiserCheckpoint, TrainLog)> {
    if !guidance.frozen {
        return Err(Error::Contract(
            "stage 2 needs a frozen guidance checkpoint (run stage 1 first)".into(),
        ));
    }
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let model = guidance.clone().into_model()?;
    let cond = model.condition(&train.features)?;
    let k = model.k();
    let mut net = DenoiserNet::new(
        model.feature_dim(),
        k,
        &mut rng::substream(cfg.seed, &[KEY_STAGE2_INIT]),
    )?;
    let mut adam = AdamState::new(net.params());
    let mut ema = EmaState::new(&net.params(), cfg.ema_mu)?;
    let plan = LrPlan {
        base_lr: cfg.lr,
        min_lr: cfg.lr_min,
        warmup_start_lr: cfg.lr,
        warmup_epochs: 0,
        total_epochs: cfg.epochs.max(1),
    };
    let mut log = TrainLog::default();
    let mut updates = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, &plan)?;
        let mut total = 0.0;
        for chunk in epoch_order(train.n(), cfg.seed, KEY_STAGE2, epoch).chunks(cfg.batch) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let draws: Vec<NoiseDraw> = chunk
                .iter()
                .map(|&i| NoiseDraw::for_item(cfg.seed, &[KEY_STAGE2, epoch as u64], i as u64, &sched, k))
                .collect();
            let batch_cond = gather_cond(&cond, chunk);
            let mut tape = Tape::new();
            let weights = net.bind(&mut tape, true);
            let loss = epsilon_loss(&mut tape, &net, &weights, &batch_cond, &labels, &draws, &sched)?;
            let value = tape.value(loss).item();
            check_finite("stage2", epoch, value)?;
            tape.backward(loss)?;
            let mut grads: Vec<Tensor2> = weights.iter().map(|&w| grad_or_zero(&tape, w)).collect();
            clip_grad_norm(&mut grads, cfg.clip)?;
            adam_step(&mut net.params_mut(), &grads, &mut adam, lr)?;
            // Ramped decay so the average tracks training on short runs.
            ema.mu = cfg.ema_mu.min((1.0 + updates as f64) / (10.0 + updates as f64));
            ema_update(&mut ema, &net.params())?;
            updates += 1;
            total += value * chunk.len() as f64;
        }
        log.record("stage2", epoch + 1, lr, total / train.n() as f64, None);
    }
    let mut shadow = net.clone();
    for (p, s) in shadow.params_mut().into_iter().zip(&ema.shadow) {
        *p = s.clone();
    }
    Ok((DenoiserCheckpoint::new(&net, &shadow, &sched, cfg.ema_mu), log))
}
