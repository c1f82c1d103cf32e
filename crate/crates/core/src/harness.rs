//! Training, prediction and evaluation.
//!
//! Each batch item gets its own graph; item gradients are summed in item
//! order, so a step is bit-reproducible for any thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bayeseg_tensor::{AdamConfig, Element, Graph, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bayes::{
    cross_entropy_graph, update_omega_pi, update_rho, update_upsilon, variational_loss_graph, HyperParams,
    LossConstants, LossInputs, LossTerms, PiPosterior, TermSelection, Variance, LOSS_TERM_NAMES,
};
use crate::config::{AblationFlags, Precision, RunConfig};
use crate::distributions::{reparam_from_log_var, standard_normal_field};
use crate::error::{Error, Result};
use crate::grid::{stack_grids, ImageGrid, LabelMap};
use crate::networks::Networks;
use crate::synth::{Case, Dataset};

/// `100 * 2|P & G| / (|P| + |G|)` for one class; 100 when both are empty.
pub fn dice(pred: &LabelMap, gt: &LabelMap, class: usize) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("dice", format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let (a, b) = (a as usize == class, b as usize == class);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (p + g) as f64)
}

/// Per-class Dice over the foreground classes `1..K`.
pub fn foreground_dice(pred: &LabelMap, gt: &LabelMap) -> Result<Vec<f64>> {
    (1..gt.classes()).map(|k| dice(pred, gt, k)).collect()
}

/// Standard-normal draws consumed by one training item.
#[derive(Clone, Debug)]
pub struct ItemNoise {
    pub x: ImageGrid,
    pub m: ImageGrid,
    pub z: Vec<ImageGrid>,
}

impl ItemNoise {
    pub fn draw(h: usize, w: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        ItemNoise {
            x: standard_normal_field(h, w, rng),
            m: standard_normal_field(h, w, rng),
            z: (0..classes).map(|_| standard_normal_field(h, w, rng)).collect(),
        }
    }
}

/// Graph nodes of one forward pass through all three networks.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub y: Var,
    pub mu_x: Var,
    pub log_var_x: Option<Var>,
    pub x: Var,
    pub mu_m: Var,
    pub log_var_m: Option<Var>,
    pub m: Var,
    /// Simplex class means.
    pub mu_z: Var,
    pub log_var_z: Option<Var>,
    /// Simplex sample fed to the cross-entropy.
    pub z: Var,
}

/// Runs `f_s`, `f_a` and `g`. Without `noise` every sample equals its mean
/// and the variance heads are ignored.
pub fn forward<T: Element>(
    nets: &Networks<T>,
    g: &mut Graph<T>,
    p: &[Var],
    y: &ImageGrid,
    noise: Option<&ItemNoise>,
) -> Result<ForwardNodes> {
    let yv = g.constant(stack_grids(&[vec![y]])?);
    let s = nets.shape_forward(g, p, yv)?;
    let a = nets.appearance_forward(g, p, yv)?;
    let sample =
        |g: &mut Graph<T>, mean: Var, lv: Option<Var>, eps: Option<&ImageGrid>| -> Result<(Var, Option<Var>)> {
            match (lv, eps) {
                (Some(lv), Some(e)) => {
                    let e = g.constant(stack_grids(&[vec![e]])?);
                    Ok((reparam_from_log_var(g, mean, lv, e)?, Some(lv)))
                }
                _ => Ok((mean, None)),
            }
        };
    let (x, log_var_x) = sample(g, s.mean, s.log_var, noise.map(|n| &n.x))?;
    let (m, log_var_m) = sample(g, a.mean, a.log_var, noise.map(|n| &n.m))?;
    let zo = nets.segmentation_forward(g, p, x)?;
    let mu_z = g.channel_softmax(zo.mean)?;
    let (z, log_var_z) = match (zo.log_var, noise) {
        (Some(lv), Some(n)) => {
            let e = g.constant(stack_grids(&[n.z.iter().collect()])?);
            let raw = reparam_from_log_var(g, zo.mean, lv, e)?;
            (g.channel_softmax(raw)?, Some(lv))
        }
        _ => (mu_z, None),
    };
    Ok(ForwardNodes {
        y: yv,
        mu_x: s.mean,
        log_var_x,
        x,
        mu_m: a.mean,
        log_var_m,
        m,
        mu_z,
        log_var_z,
        z,
    })
}

fn grid<T: Element>(g: &Graph<T>, v: Var, c: usize) -> Result<ImageGrid> {
    ImageGrid::from_channel(g.value(v), 0, c)
}

/// Every channel of the first item of `v`.
pub fn channel_grids<T: Element>(g: &Graph<T>, v: Var) -> Result<Vec<ImageGrid>> {
    (0..g.value(v).dims()[1]).map(|c| grid(g, v, c)).collect()
}

/// Standard deviations from an optional log-variance node; zeros when absent.
fn stds<T: Element>(g: &Graph<T>, lv: Option<Var>, like: &[ImageGrid]) -> Result<Vec<ImageGrid>> {
    match lv {
        Some(v) => Ok(channel_grids(g, v)?
            .into_iter()
            .map(|l| l.map(|a| (0.5 * a).exp()))
            .collect()),
        None => Ok(like.iter().map(|f| ImageGrid::zeros(f.height(), f.width())).collect()),
    }
}

/// Closed-form posterior means of one item.
#[derive(Clone, Debug)]
pub struct Posteriors {
    pub rho: ImageGrid,
    pub upsilon: ImageGrid,
    pub omega: Vec<ImageGrid>,
    pub pi: PiPosterior,
}

/// Evaluates `rho`, `upsilon` and the settled `omega`/`pi` pair from the
/// current forward pass.
pub fn posteriors<T: Element>(g: &Graph<T>, f: &ForwardNodes, y: &ImageGrid, h: &HyperParams) -> Result<Posteriors> {
    let x = grid(g, f.x, 0)?;
    let m = grid(g, f.m, 0)?;
    let mu_x = grid(g, f.mu_x, 0)?;
    let mu_z = channel_grids(g, f.mu_z)?;
    let sigma_x = stds(g, f.log_var_x, std::slice::from_ref(&mu_x))?.remove(0);
    let sigma_z = stds(g, f.log_var_z, &mu_z)?;
    let rho = update_rho(y, &x, &m, h)?;
    let upsilon = update_upsilon(&mu_z, &mu_x, &sigma_x, h)?;
    let (omega, pi) = update_omega_pi(&mu_z, &sigma_z, h)?;
    Ok(Posteriors {
        rho,
        upsilon,
        omega,
        pi,
    })
}

/// Losses of one item or the batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub ce: f64,
    /// Unweighted variational loss.
    pub var: f64,
    pub total: f64,
    pub terms: LossTerms,
}

impl StepLosses {
    fn accumulate(&mut self, o: &StepLosses, w: f64) {
        self.ce += w * o.ce;
        self.var += w * o.var;
        self.total += w * o.total;
        self.terms = self.terms.add(&o.terms.scaled(w));
    }

    fn finite(&self) -> bool {
        self.ce.is_finite()
            && self.var.is_finite()
            && self.total.is_finite()
            && self.terms.as_array().iter().all(|v| v.is_finite())
    }

    pub fn dump(&self) -> String {
        let mut s = format!("L_ce={} L_var={} total={}", self.ce, self.var, self.total);
        for (n, v) in LOSS_TERM_NAMES.iter().zip(self.terms.as_array()) {
            s.push_str(&format!(" {n}={v}"));
        }
        s
    }
}

fn numerical(e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::Domain { .. }) | Error::Domain { .. } => Error::Numerical(e.to_string()),
        other => other,
    }
}

/// Forward, closed-form updates, loss and backward for one item; the loss is
/// scaled by `weight` before differentiation.
pub fn item_gradients<T: Element>(
    nets: &Networks<T>,
    flags: &AblationFlags,
    h: &HyperParams,
    y: &ImageGrid,
    labels: &LabelMap,
    noise: &ItemNoise,
    weight: f64,
) -> Result<(Vec<Tensor<T>>, StepLosses)> {
    let mut g = Graph::new();
    let p = nets.bind(&mut g, true);
    let f = forward(nets, &mut g, &p, y, flags.stochastic_mapping.then_some(noise))?;
    let one_hot = g.constant(stack_grids(&[labels.one_hot().iter().collect()])?);
    let ce = cross_entropy_graph(&mut g, one_hot, f.z)?;

    let mut losses = StepLosses {
        ce: g.value(ce).item().as_f64(),
        ..StepLosses::default()
    };
    let mut total = ce;
    if flags.variational_loss {
        let post = posteriors(&g, &f, y, h)?;
        let consts = LossConstants::<T>::from_states(&[(&post.rho, &post.upsilon, &post.omega[..], &post.pi.c[..])])?;
        let var = |g: &mut Graph<T>, lv: Option<Var>| lv.map(|v| Variance::from_log_var(g, v)).transpose();
        let inputs = LossInputs {
            y: f.y,
            x_sample: f.x,
            m_sample: f.m,
            mu_x: f.mu_x,
            var_x: var(&mut g, f.log_var_x)?,
            mu_m: f.mu_m,
            var_m: var(&mut g, f.log_var_m)?,
            mu_z: f.mu_z,
            var_z: var(&mut g, f.log_var_z)?,
        };
        let sel = TermSelection {
            appearance: flags.appearance_loss,
            segmentation: flags.segmentation_loss,
            shape: true,
        };
        let nodes = variational_loss_graph(&mut g, &inputs, &consts, h, sel)?;
        let l_var = nodes.total(&mut g)?;
        losses.terms = nodes.values(&g);
        losses.var = g.value(l_var).item().as_f64();
        let weighted = g.scale(l_var, T::from_f64_lossy(h.lambda));
        total = g.add(total, weighted)?;
    }
    losses.total = g.value(total).item().as_f64();
    if !losses.finite() {
        return Err(Error::Numerical(format!("non-finite loss: {}", losses.dump())));
    }
    let scaled = g.scale(total, T::from_f64_lossy(weight));
    g.backward(scaled)?;
    let grads = p.iter().map(|&v| g.grad_or_zeros(v)).collect();
    Ok((grads, losses))
}

/// Maps `f` over `items` on up to `threads` scoped threads, preserving order.
pub fn par_map<I: Sync, O: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// One optimizer step on `batch`; returns the batch-mean losses.
pub fn train_step<T: Element>(
    nets: &mut Networks<T>,
    batch: &[(&ImageGrid, &LabelMap, ItemNoise)],
    flags: &AblationFlags,
    h: &HyperParams,
    adam: &AdamConfig,
    threads: usize,
) -> Result<StepLosses> {
    let w = 1.0 / batch.len() as f64;
    let results = {
        let nets = &*nets;
        par_map(batch, threads, |(y, l, n)| item_gradients(nets, flags, h, y, l, n, w))
    };
    let mut sum: Option<Vec<Tensor<T>>> = None;
    let mut losses = StepLosses::default();
    for r in results {
        let (grads, item) = r.map_err(numerical)?;
        losses.accumulate(&item, w);
        sum = Some(match sum {
            None => grads,
            Some(mut acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x = *x + *y;
                    }
                }
                acc
            }
        });
    }
    let grads = sum.ok_or_else(|| Error::Data("empty batch".into()))?;
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient: {}", losses.dump())));
    }
    nets.adam_step(adam, &grads)?;
    Ok(losses)
}

/// Class map from the mean path: softmax of `g(mu_x)`, then argmax (first index wins ties).
pub fn predict<T: Element>(nets: &Networks<T>, y: &ImageGrid) -> Result<LabelMap> {
    let mut g = Graph::new();
    let p = nets.bind(&mut g, false);
    let f = forward(nets, &mut g, &p, y, None)?;
    argmax_map(g.value(f.mu_z))
}

/// Argmax over channel 1 of a `[1, K, H, W]` tensor.
pub fn argmax_map<T: Element>(t: &Tensor<T>) -> Result<LabelMap> {
    let d = t.dims();
    if d.len() != 4 || d[0] != 1 {
        return Err(Error::shape("argmax_map", format!("expected [1, K, H, W], got {d:?}")));
    }
    let (k, plane) = (d[1], d[2] * d[3]);
    let data = t.data();
    let labels = (0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if data[c * plane + i] > data[best * plane + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(d[2], d[3], k, labels)
}

/// Per-case foreground Dice for one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainScores {
    pub domain: String,
    pub case_ids: Vec<String>,
    /// `[case][foreground class]`.
    pub per_case: Vec<Vec<f64>>,
}

impl DomainScores {
    /// Mean over foreground classes, per case.
    pub fn case_means(&self) -> Vec<f64> {
        self.per_case
            .iter()
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.case_means())
    }

    pub fn std(&self) -> f64 {
        let v = self.case_means();
        let m = mean(&v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len().max(1) as f64).sqrt()
    }

    pub fn class_means(&self) -> Vec<f64> {
        let k = self.per_case.first().map_or(0, |c| c.len());
        (0..k)
            .map(|j| mean(&self.per_case.iter().map(|c| c[j]).collect::<Vec<_>>()))
            .collect()
    }

    /// Element-wise mean of several evaluations of the same cases.
    pub fn average(runs: &[DomainScores]) -> Result<DomainScores> {
        let first = runs
            .first()
            .ok_or_else(|| Error::Data("no evaluations to average".into()))?;
        if runs.iter().any(|r| r.case_ids != first.case_ids) {
            return Err(Error::Data("evaluations cover different cases".into()));
        }
        let n = runs.len() as f64;
        let per_case = (0..first.per_case.len())
            .map(|i| {
                (0..first.per_case[i].len())
                    .map(|j| runs.iter().map(|r| r.per_case[i][j]).sum::<f64>() / n)
                    .collect()
            })
            .collect();
        Ok(DomainScores {
            domain: first.domain.clone(),
            case_ids: first.case_ids.clone(),
            per_case,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Test cases of `domain`: the source uses its `test` split.
pub fn test_cases<'a>(data: &'a Dataset, domain: &str) -> Result<Vec<&'a Case>> {
    let cases = data.split("test", domain);
    if cases.is_empty() {
        return Err(Error::Data(format!(
            "domain {domain:?} has no test cases in the manifest"
        )));
    }
    Ok(cases)
}

pub fn evaluate_domain<T: Element>(
    nets: &Networks<T>,
    data: &Dataset,
    domain: &str,
    threads: usize,
) -> Result<DomainScores> {
    let cases = test_cases(data, domain)?;
    let per_case = par_map(&cases, threads, |c| {
        predict(nets, &c.image).and_then(|p| foreground_dice(&p, &c.labels))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(DomainScores {
        domain: domain.to_string(),
        case_ids: cases.iter().map(|c| c.row.case_id.clone()).collect(),
        per_case,
    })
}

pub fn evaluate<T: Element>(
    nets: &Networks<T>,
    data: &Dataset,
    domains: &[String],
    threads: usize,
) -> Result<Vec<DomainScores>> {
    domains
        .iter()
        .map(|d| evaluate_domain(nets, data, d, threads))
        .collect()
}

/// One row of a metrics CSV. Evaluation rows leave the loss columns empty,
/// training rows leave the Dice columns empty.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub domain: String,
    pub dice: Option<DiceSummary>,
    pub losses: Option<StepLosses>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceSummary {
    pub cases: usize,
    pub mean: f64,
    pub std: f64,
    pub per_class: Vec<f64>,
    /// Source mean minus this domain's mean.
    pub drop: f64,
}

impl DiceSummary {
    pub fn from_scores(s: &DomainScores, source_mean: f64) -> Self {
        DiceSummary {
            cases: s.per_case.len(),
            mean: s.mean(),
            std: s.std(),
            per_class: s.class_means(),
            drop: source_mean - s.mean(),
        }
    }
}

/// Rows for a set of domain scores; the first domain is the source.
pub fn dice_rows(step: usize, split: &str, scores: &[DomainScores]) -> Vec<MetricsRow> {
    let source = scores.first().map_or(0.0, |s| s.mean());
    scores
        .iter()
        .map(|s| MetricsRow {
            step,
            split: split.to_string(),
            domain: s.domain.clone(),
            dice: Some(DiceSummary::from_scores(s, source)),
            losses: None,
        })
        .collect()
}

fn cell(v: f64) -> String {
    format!("{v:.6}")
}

/// CSV with a fixed header for `classes` classes.
pub fn metrics_csv(rows: &[MetricsRow], classes: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["step", "split", "domain", "cases", "dice_mean", "dice_std"]
        .map(String::from)
        .to_vec();
    header.extend((1..classes).map(|k| format!("dice_class{k}")));
    header.extend(["dice_drop", "L_ce", "L_var", "L_total"].map(String::from));
    header.extend(LOSS_TERM_NAMES.iter().map(|s| s.to_string()));
    let err = |e: csv::Error| Error::Data(format!("metrics csv: {e}"));
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.split.clone(), r.domain.clone()];
        match &r.dice {
            Some(d) => {
                rec.extend([d.cases.to_string(), cell(d.mean), cell(d.std)]);
                rec.extend(d.per_class.iter().map(|&v| cell(v)));
                rec.push(cell(d.drop));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 3 + (classes - 1) + 1)),
        }
        match &r.losses {
            Some(l) => {
                rec.extend([cell(l.ce), cell(l.var), cell(l.total)]);
                rec.extend(l.terms.as_array().iter().map(|&v| cell(v)));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 3 + LOSS_TERM_NAMES.len())),
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("metrics csv: {e}")))
}

/// Batches drawn epoch by epoch from a seeded permutation of the training set.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Progress notifications for the caller.
#[derive(Clone, Debug)]
pub enum Progress<'a> {
    Step {
        step: usize,
        steps: usize,
        losses: &'a StepLosses,
    },
    Eval {
        step: usize,
        scores: &'a [DomainScores],
    },
}

/// Result of a training run in memory.
pub struct TrainOutcome<T> {
    pub nets: Networks<T>,
    pub rows: Vec<MetricsRow>,
    /// Final test scores per domain, averaged over the periodic evaluations.
    pub scores: Vec<DomainScores>,
    pub seconds: f64,
}

/// Steps at which the periodic test evaluations happen (the last is the final step).
pub fn eval_steps(cfg: &RunConfig) -> Vec<usize> {
    let t = &cfg.train;
    (0..t.eval_average).rev().map(|j| t.steps - j * t.eval_every).collect()
}

/// Trains on the source `train` split and evaluates every domain's test split.
pub fn train<T: Element>(
    cfg: &RunConfig,
    data: &Dataset,
    mut progress: impl FnMut(Progress),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let train_cases = data.split("train", "source");
    if train_cases.is_empty() {
        return Err(Error::Data("no source training cases".into()));
    }
    if data.classes != cfg.net.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network {}",
            data.classes, cfg.net.classes
        )));
    }
    let domains = data.domains();
    let mut nets = Networks::<T>::new(cfg.net.clone())?;
    let mut sampler = BatchSampler::new(train_cases.len(), cfg.train.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    noise_rng.set_stream(2);
    let threads = cfg.train.worker_threads();
    let evals = eval_steps(cfg);
    let mut rows = Vec::new();
    let mut evaluations: Vec<Vec<DomainScores>> = Vec::new();
    let mut window = (StepLosses::default(), 0usize);

    for step in 1..=cfg.train.steps {
        let batch: Vec<_> = sampler
            .next_batch(cfg.train.batch_size)
            .into_iter()
            .map(|i| {
                let c = train_cases[i];
                let (h, w) = c.image.dims();
                (
                    &c.image,
                    &c.labels,
                    ItemNoise::draw(h, w, cfg.net.classes, &mut noise_rng),
                )
            })
            .collect();
        let adam = AdamConfig {
            lr: cfg.train.lr_at(step - 1),
            ..AdamConfig::default()
        };
        let losses = train_step(&mut nets, &batch, &cfg.ablation, &cfg.hyper, &adam, threads)?;
        progress(Progress::Step {
            step,
            steps: cfg.train.steps,
            losses: &losses,
        });
        window.0.accumulate(&losses, 1.0);
        window.1 += 1;
        if step % cfg.train.log_every == 0 || step == cfg.train.steps {
            let mut avg = StepLosses::default();
            avg.accumulate(&window.0, 1.0 / window.1 as f64);
            rows.push(MetricsRow {
                step,
                split: "train".into(),
                domain: "source".into(),
                dice: None,
                losses: Some(avg),
            });
            window = (StepLosses::default(), 0);
        }
        if evals.contains(&step) {
            let scores = evaluate(&nets, data, &domains, threads)?;
            progress(Progress::Eval { step, scores: &scores });
            rows.extend(dice_rows(step, "test", &scores));
            evaluations.push(scores);
        }
    }
    let scores = (0..domains.len())
        .map(|d| DomainScores::average(&evaluations.iter().map(|e| e[d].clone()).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    rows.extend(dice_rows(cfg.train.steps, "final", &scores));
    Ok(TrainOutcome {
        nets,
        rows,
        scores,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const META_FILE: &str = "run_meta.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const REPORT_FILE: &str = "report.txt";

/// Declared departures from the reference setup, echoed into run metadata.
pub fn deviations(cfg: &RunConfig) -> Vec<String> {
    let mut d = vec![
        format!(
            "normalization={} (batch normalization replaced)",
            cfg.net.norm_mode.as_str()
        ),
        "segmentation_backbone=2-level encoder-decoder".to_string(),
        format!(
            "schedule={} steps, batch {}, lr {} decayed x{} at {}",
            cfg.train.steps, cfg.train.batch_size, cfg.train.lr, cfg.train.lr_decay, cfg.train.lr_decay_at
        ),
        "variance_heads=log-variance outputs".to_string(),
    ];
    if cfg.train.precision == Precision::F32 {
        d.push("precision=f32 training".into());
    }
    d
}

/// Git-style blob hash of `text`.
pub fn content_hash(text: &str) -> String {
    use sha1::{Digest, Sha1};
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn code_version() -> String {
    format!("bayeseg {}", env!("CARGO_PKG_VERSION"))
}

pub fn run_metadata(cfg: &RunConfig, extra: &[(&str, String)]) -> String {
    let version = code_version();
    let mut s = format!(
        "code_version={version}\ncode_hash={}\nconfig_hash={}\n",
        content_hash(&version),
        content_hash(&cfg.to_text())
    );
    for (i, d) in deviations(cfg).iter().enumerate() {
        s.push_str(&format!("deviation.{i}={d}\n"));
    }
    for (k, v) in extra {
        s.push_str(&format!("{k}={v}\n"));
    }
    s
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Table of mean +- std Dice and drop per domain.
pub fn format_report(title: &str, arms: &[(String, Vec<DomainScores>)]) -> String {
    let mut out = format!("{title}\n");
    let Some((_, first)) = arms.first() else {
        return out;
    };
    out.push_str(&format!("{:<28}", "arm"));
    for s in first {
        out.push_str(&format!(" {:>22}", s.domain));
    }
    out.push('\n');
    for (name, scores) in arms {
        out.push_str(&format!("{name:<28}"));
        let source = scores.first().map_or(0.0, |s| s.mean());
        for s in scores {
            let cell = if s.domain == scores[0].domain {
                format!("{:.1}+-{:.1}", s.mean(), s.std())
            } else {
                format!("{:.1}+-{:.1} ({:+.1})", s.mean(), s.std(), s.mean() - source)
            };
            out.push_str(&format!(" {cell:>22}"));
        }
        out.push('\n');
    }
    out
}

/// Files written by [`run_training`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub scores: Vec<DomainScores>,
    pub seconds: f64,
}

/// Trains per `cfg`, writing config echo, metrics, checkpoint, report,
/// metadata and timing under `cfg.output`.
pub fn run_training(cfg: &RunConfig, data: &Dataset, progress: impl FnMut(Progress)) -> Result<RunArtifacts> {
    match cfg.train.precision {
        Precision::F32 => run_training_as::<f32>(cfg, data, progress),
        Precision::F64 => run_training_as::<f64>(cfg, data, progress),
    }
}

fn run_training_as<T: Element>(
    cfg: &RunConfig,
    data: &Dataset,
    progress: impl FnMut(Progress),
) -> Result<RunArtifacts> {
    let dir = cfg.output.clone();
    write_file(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let out = train::<T>(cfg, data, progress)?;
    write_file(&dir.join(METRICS_FILE), &metrics_csv(&out.rows, cfg.net.classes)?)?;
    out.nets.save(&dir.join(CHECKPOINT_FILE))?;
    let report = format_report(
        "test Dice (mean+-std, drop vs source)",
        &[("run".to_string(), out.scores.clone())],
    );
    write_file(&dir.join(REPORT_FILE), report.as_bytes())?;
    write_file(&dir.join(META_FILE), run_metadata(cfg, &[]).as_bytes())?;
    write_file(
        &dir.join(TIMING_FILE),
        format!("train_seconds={:.3}\n", out.seconds).as_bytes(),
    )?;
    Ok(RunArtifacts {
        dir,
        scores: out.scores,
        seconds: out.seconds,
    })
}
