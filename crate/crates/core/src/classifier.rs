//! Healthy/unhealthy classifier over noised latents. It provides
//! probabilities for scoring and input gradients of log p(healthy) for guidance.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::diffnet::{sum_grads, ArchKind, ArchSpec, Network, Real, TensorGrid, TrainConfig};
use crate::diffusion::{q_sample, GuidanceModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::phantom::Label;
use crate::{par, rng};

const TAG_BALANCE: u64 = 0xC1A5_0001;
const TAG_EPOCH: u64 = 0xC1A5_0002;
const TAG_VAL: u64 = 0xC1A5_0003;

/// Output logit order.
pub const HEALTHY: usize = 0;
pub const UNHEALTHY: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    net: Network,
    /// largest accepted timestep (T)
    steps: usize,
}

fn log_softmax2(l: [f64; 2]) -> [f64; 2] {
    let m = l[0].max(l[1]);
    let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
    [l[0] - lse, l[1] - lse]
}

impl Classifier {
    pub fn new(channels: usize, width: usize, levels: usize, steps: usize, seed: u64) -> Result<Self> {
        Self::from_network(Network::build(ArchSpec::classifier(channels, width, levels), seed)?, steps)
    }

    pub fn from_network(net: Network, steps: usize) -> Result<Self> {
        if net.spec().kind != ArchKind::Classifier {
            return Err(Error::InvalidArgument(format!("expected a classifier network, got {:?}", net.spec().kind)));
        }
        Ok(Self { net, steps })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 0..={}", self.steps)));
        }
        Ok(())
    }

    /// (healthy, unhealthy) logits.
    pub fn logits(&self, z: &TensorGrid, t: usize) -> Result<[f64; 2]> {
        self.check_t(t)?;
        let y = self.net.forward(z, Some(t))?;
        Ok([y.data()[HEALTHY] as f64, y.data()[UNHEALTHY] as f64])
    }

    /// p(healthy | z_t, t)
    pub fn classify(&self, z: &TensorGrid, t: usize) -> Result<f64> {
        Ok(log_softmax2(self.logits(z, t)?)[HEALTHY].exp())
    }

    /// Exact ∇_z log p(`target` | z_t, t).
    pub fn input_gradient(&self, z: &TensorGrid, t: usize, target: Label) -> Result<TensorGrid> {
        self.check_t(t)?;
        let tape = self.net.trace(z, Some(t))?;
        let out = tape.output();
        let p = log_softmax2([out.data()[HEALTHY] as f64, out.data()[UNHEALTHY] as f64]).map(f64::exp);
        let k = if target == Label::Healthy { HEALTHY } else { UNHEALTHY };
        let mut g = TensorGrid::zeros(out.shape());
        for j in 0..2 {
            g.data_mut()[j] = ((j == k) as u8 as f64 - p[j]) as Real;
        }
        let mut scratch = vec![0.0 as Real; self.net.param_count()];
        self.net.backprop(&tape, &g, &mut scratch)
    }
}

impl GuidanceModel for Classifier {
    fn grad_log_healthy(&self, x: &TensorGrid, t: usize) -> Result<TensorGrid> {
        self.input_gradient(x, t, Label::Healthy)
    }
}

/// Area under the ROC curve by the Mann–Whitney U statistic; `labels[i]` is
/// true for the positive class, tied scores count 1/2.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let npos = labels.iter().filter(|&&l| l).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (npos * (npos + 1)) as f64 / 2.0;
    Ok(u / (npos * nneg) as f64)
}

/// A clean latent with its (weak) case label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLatent {
    pub z: TensorGrid,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTrainConfig {
    pub train: TrainConfig,
    /// Training timesteps are uniform on `0..=max_t`.
    pub max_t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_auc: f64,
    pub stopped_early: bool,
}

impl TrainingReport {
    /// CSV with columns `epoch,loss,val_auc`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss", "val_auc"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), format!("{:.6}", e.loss), format!("{:.6}", e.val_auc)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Down-sample the majority class so both classes have equal counts.
pub fn balance(data: &[LabeledLatent], seed: u64) -> Result<Vec<LabeledLatent>> {
    let (mut h, mut u): (Vec<_>, Vec<_>) = data.iter().cloned().partition(|d| d.label == Label::Healthy);
    if h.is_empty() || u.is_empty() {
        return Err(Error::InvalidArgument("classifier training needs both classes".into()));
    }
    let mut r = rng::stream(seed, &[TAG_BALANCE]);
    let n = h.len().min(u.len());
    h.shuffle(&mut r);
    u.shuffle(&mut r);
    h.truncate(n);
    u.truncate(n);
    h.extend(u);
    Ok(h)
}

fn noised(z: &TensorGrid, t: usize, schedule: &NoiseSchedule, r: &mut rng::Rng) -> Result<TensorGrid> {
    let e = TensorGrid::new(z.shape(), rng::normal_vec(r, z.len()).into_iter().map(|v| v as Real).collect())?;
    q_sample(z, t, &e, schedule)
}

/// Score p(unhealthy) for each item at its own timestep.
fn unhealthy_scores(clf: &Classifier, items: &[(TensorGrid, usize)]) -> Result<Vec<f64>> {
    par::map(items, |(z, t)| clf.classify(z, *t).map(|p| 1.0 - p)).into_iter().collect()
}

/// Cross-entropy training on noised latents with a balanced training set.
/// Validation AUC (p(unhealthy) against weak labels, fixed noise draws) is
/// tracked per epoch; training stops after `patience` epochs without
/// improvement and the best parameters are restored.
pub fn train_classifier(
    clf: &mut Classifier,
    train: &[LabeledLatent],
    val: &[LabeledLatent],
    schedule: &NoiseSchedule,
    cfg: &ClassifierTrainConfig,
) -> Result<TrainingReport> {
    cfg.train.validate()?;
    let max_t = cfg.max_t.min(schedule.steps()).min(clf.steps);
    let seed = cfg.train.seed;
    let data = balance(train, seed)?;
    let val = if val.iter().any(|v| v.label == Label::Healthy) && val.iter().any(|v| v.label == Label::Unhealthy) { val } else { &data[..] };
    let mut vr = rng::stream(seed, &[TAG_VAL]);
    let val_items = val
        .iter()
        .map(|v| {
            let t = vr.gen_range(0..=max_t);
            Ok((noised(&v.z, t, schedule, &mut vr)?, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let val_labels: Vec<bool> = val.iter().map(|v| v.label == Label::Unhealthy).collect();

    // (auc, val cross-entropy, epoch, params); equal AUC is broken by lower loss
    let mut best = (f64::NEG_INFINITY, f64::INFINITY, 0usize, clf.net.params().to_vec());
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.train.budget {
        let mut r = rng::stream(seed, &[TAG_EPOCH, epoch as u64]);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let t = r.gen_range(0..=max_t);
                    Ok((noised(&data[i].z, t, schedule, &mut r)?, t, data[i].label))
                })
                .collect::<Result<Vec<_>>>()?;
            let net = &clf.net;
            let parts = par::map(&batch, |(z, t, label)| -> Result<(f64, Vec<Real>)> {
                let tape = net.trace(z, Some(*t))?;
                let out = tape.output();
                let lp = log_softmax2([out.data()[HEALTHY] as f64, out.data()[UNHEALTHY] as f64]);
                let k = if *label == Label::Healthy { HEALTHY } else { UNHEALTHY };
                let mut g = TensorGrid::zeros(out.shape());
                for j in 0..2 {
                    g.data_mut()[j] = (lp[j].exp() - (j == k) as u8 as f64) as Real;
                }
                let mut grads = vec![0.0 as Real; net.param_count()];
                net.backprop(&tape, &g, &mut grads)?;
                Ok((-lp[k], grads))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            loss_sum += parts.iter().map(|p| p.0).sum::<f64>();
            let n = clf.net.param_count();
            let b = parts.len();
            clf.net.accumulate(&sum_grads(parts.into_iter().map(|p| p.1).collect(), n));
            clf.net.scale_grads(1.0 / b as Real);
            clf.net.adam_step(&cfg.train);
        }
        let scores = unhealthy_scores(clf, &val_items)?;
        let val_auc = auc(&scores, &val_labels)?;
        let val_loss = scores
            .iter()
            .zip(&val_labels)
            .map(|(&p, &u)| -(if u { p } else { 1.0 - p }).max(1e-12).ln())
            .sum::<f64>()
            / scores.len() as f64;
        epochs.push(EpochRecord { epoch, loss: loss_sum / data.len() as f64, val_auc });
        if val_auc > best.0 || (val_auc == best.0 && val_loss < best.1) {
            best = (val_auc, val_loss, epoch, clf.net.params().to_vec());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.train.patience {
                stopped_early = epoch < cfg.train.budget;
                break;
            }
        }
    }
    if !epochs.is_empty() {
        clf.net.params_mut().copy_from_slice(&best.3);
    }
    Ok(TrainingReport { epochs, best_epoch: best.2, best_auc: best.0, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};

    fn randn(shape: [usize; 4], seed: u64) -> TensorGrid {
        let n = shape.iter().product();
        TensorGrid::new(shape, rng::normal_vec(&mut rng::seeded(seed), n).into_iter().map(|x| x as Real).collect()).unwrap()
    }

    fn randomized(seed: u64) -> Classifier {
        let mut c = Classifier::new(2, 4, 1, 1000, seed).unwrap();
        let v = rng::normal_vec(&mut rng::seeded(seed + 1), c.net.param_count());
        c.net.params_mut().iter_mut().zip(v).for_each(|(p, r)| *p += 0.1 * r as Real);
        c
    }

    #[test]
    fn zero_head_is_undecided() {
        let c = Classifier::new(2, 4, 1, 1000, 1).unwrap();
        let z = randn([2, 4, 4, 4], 2);
        assert_eq!(c.classify(&z, 10).unwrap(), 0.5);
        assert!(c.classify(&z, 1001).is_err());
        // constant output: zero gradient
        assert!(c.input_gradient(&z, 10, Label::Healthy).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn class_probabilities_sum_to_one() {
        let c = randomized(3);
        let z = randn([2, 4, 4, 4], 4);
        let l = c.logits(&z, 200).unwrap();
        let ls = log_softmax2(l);
        assert!((ls[0].exp() + ls[1].exp() - 1.0).abs() < 1e-12);
        assert!((c.classify(&z, 200).unwrap() - ls[0].exp()).abs() < 1e-12);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let c = randomized(5);
        let z = randn([2, 4, 4, 4], 6);
        let t = 250;
        let g = c.input_gradient(&z, t, Label::Healthy).unwrap();
        let eps = if std::mem::size_of::<Real>() == 8 { 1e-6 } else { 1e-3 };
        let f = |z: &TensorGrid| c.classify(z, t).unwrap().ln();
        let (mut diff, mut norm) = (0.0, 0.0);
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp.data_mut()[i] = (z.data()[i] as f64 + eps) as Real;
            let fp = f(&zp);
            zp.data_mut()[i] = (z.data()[i] as f64 - eps) as Real;
            let fm = f(&zp);
            let num = (fp - fm) / (2.0 * eps);
            diff += (g.data()[i] as f64 - num).powi(2);
            norm += num * num;
        }
        assert!(norm > 0.0);
        assert!((diff / norm).sqrt() < 1e-2, "{}", (diff / norm).sqrt());
    }

    #[test]
    fn healthy_and_unhealthy_gradients_oppose() {
        let c = randomized(7);
        let z = randn([2, 4, 4, 4], 8);
        let gh = c.input_gradient(&z, 30, Label::Healthy).unwrap();
        let gu = c.input_gradient(&z, 30, Label::Unhealthy).unwrap();
        let dot: f64 = gh.data().iter().zip(gu.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!(dot < 0.0);
        // p_h·∇log p_h + p_u·∇log p_u = ∇(p_h + p_u) = 0
        let p = c.classify(&z, 30).unwrap();
        for (a, b) in gh.data().iter().zip(gu.data()) {
            assert!((*a as f64 * p + *b as f64 * (1.0 - p)).abs() < 1e-4);
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
        let s = [0.3, 0.9, 0.1, 0.5, 0.5, 0.7];
        let l = [true, true, false, false, true, false];
        let a = auc(&s, &l).unwrap();
        // brute-force pair count
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if l[i] && !l[j] {
                    pairs += 1.0;
                    wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert_eq!(a, wins / pairs);
        let flipped: Vec<bool> = l.iter().map(|b| !b).collect();
        assert!((auc(&s, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        let mono: Vec<f64> = s.iter().map(|v| (3.0 * v).exp()).collect();
        assert_eq!(auc(&mono, &l).unwrap(), a);
    }

    fn toy(n: usize, seed: u64) -> Vec<LabeledLatent> {
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Healthy } else { Label::Unhealthy };
                // class sign times a left/right contrast pattern; linearly separable
                let sign = if label == Label::Healthy { -1.0 } else { 1.0 };
                let mut z = randn([2, 4, 4, 4], seed + i as u64).map(|v| 0.3 * v);
                for (k, v) in z.data_mut().iter_mut().enumerate() {
                    *v += sign * if k % 4 < 2 { 1.0 } else { -1.0 };
                }
                LabeledLatent { z, label }
            })
            .collect()
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let data = toy(16, 100);
        let mut c = Classifier::new(2, 4, 1, 1000, 9).unwrap();
        let cfg = ClassifierTrainConfig { train: TrainConfig { learning_rate: 1e-2, batch_size: 4, budget: 20, patience: 20, seed: 1 }, max_t: 0 };
        let rep = train_classifier(&mut c, &data, &data, &s, &cfg).unwrap();
        assert!(rep.epochs.len() <= 20);
        let acc = data.iter().filter(|d| (c.classify(&d.z, 0).unwrap() > 0.5) == (d.label == Label::Healthy)).count();
        assert_eq!(acc, data.len());
        assert_eq!(rep.best_auc, 1.0);
    }

    #[test]
    fn early_stopping_respects_budget_and_patience() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let data = toy(8, 300);
        // a frozen model never improves after the first epoch
        let mut c = Classifier::new(2, 4, 1, 1000, 9).unwrap();
        let cfg = ClassifierTrainConfig { train: TrainConfig { learning_rate: 1e-30, batch_size: 4, budget: 30, patience: 3, seed: 1 }, max_t: 0 };
        let rep = train_classifier(&mut c, &data, &data, &s, &cfg).unwrap();
        assert!(rep.stopped_early);
        assert_eq!((rep.best_epoch, rep.epochs.len()), (1, 4));
        // a short budget is never exceeded
        let cfg = ClassifierTrainConfig { train: TrainConfig { learning_rate: 1e-2, budget: 3, patience: 5, ..cfg.train }, max_t: 500 };
        let rep = train_classifier(&mut c, &data, &data, &s, &cfg).unwrap();
        assert!(rep.epochs.len() <= 3 && !rep.stopped_early);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        rep.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,loss,val_auc\n"));
        assert_eq!(text.lines().count(), rep.epochs.len() + 1);
    }

    #[test]
    fn single_class_rejected_and_balance_equalises() {
        let data: Vec<_> = toy(6, 1).into_iter().filter(|d| d.label == Label::Healthy).collect();
        assert!(balance(&data, 0).is_err());
        let mut mixed = toy(10, 2);
        mixed.extend(toy(6, 50).into_iter().filter(|d| d.label == Label::Healthy));
        let b = balance(&mixed, 0).unwrap();
        let h = b.iter().filter(|d| d.label == Label::Healthy).count();
        assert_eq!(h * 2, b.len());
        assert_eq!(h, 5);
    }

    #[test]
    fn batch_composition_does_not_change_scores() {
        let c = randomized(11);
        let a = randn([2, 4, 4, 4], 12);
        let b = randn([2, 4, 4, 4], 13);
        let one = unhealthy_scores(&c, &[(a.clone(), 5)]).unwrap();
        let two = unhealthy_scores(&c, &[(b, 700), (a, 5)]).unwrap();
        assert_eq!(one[0], two[1]);
    }
}
