use rand::seq::index::sample;
use rand::Rng as _;

use super::{q_sample, NoiseSchedule};
use crate::diffnet::{sum_grads, Network, Real, TensorGrid, TrainConfig};
use crate::error::{Error, Result};
use crate::{par, rng};

const TAG_DENOISER: u64 = 0xD1FF_0001;

/// ε-prediction MSE of `net` on x0 noised to level t with noise ε.
pub fn denoiser_loss(net: &Network, x0: &TensorGrid, t: usize, eps: &TensorGrid, schedule: &NoiseSchedule) -> Result<f64> {
    let xt = q_sample(x0, t, eps, schedule)?;
    let out = net.forward(&xt, Some(t))?;
    Ok(mse(&out, eps))
}

fn mse(a: &TensorGrid, b: &TensorGrid) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

struct Draw {
    index: usize,
    t: usize,
    eps: TensorGrid,
}

/// Train an ε-predictor on `data` (already in diffusion space). Timesteps are
/// uniform on `1..=max_t` (default T). Returns the batch-mean loss per step.
pub fn train_denoiser(
    net: &mut Network,
    data: &[TensorGrid],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    max_t: Option<usize>,
    mut on_step: impl FnMut(u64, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no denoiser training data".into()));
    }
    let max_t = max_t.unwrap_or(schedule.steps()).clamp(1, schedule.steps());
    let mut log = Vec::with_capacity(cfg.budget);
    for _ in 0..cfg.budget {
        let step = net.adam().step;
        let mut r = rng::stream(cfg.seed, &[TAG_DENOISER, step]);
        let b = cfg.batch_size.min(data.len());
        let draws: Vec<Draw> = sample(&mut r, data.len(), b)
            .into_iter()
            .map(|index| {
                let t = r.gen_range(1..=max_t);
                let v = rng::normal_vec(&mut r, data[index].len()).into_iter().map(|x| x as Real).collect();
                Draw { index, t, eps: TensorGrid::new(data[index].shape(), v).unwrap() }
            })
            .collect();
        let frozen: &Network = net;
        let parts = par::map(&draws, |d| -> Result<(f64, Vec<Real>)> {
            let xt = q_sample(&data[d.index], d.t, &d.eps, schedule)?;
            let tape = frozen.trace(&xt, Some(d.t))?;
            let out = tape.output();
            let n = out.len() as f64;
            let g = out.zip_map(&d.eps, |a, e| (2.0 * (a as f64 - e as f64) / n) as Real)?;
            let mut grads = vec![0.0 as Real; frozen.param_count()];
            frozen.backprop(&tape, &g, &mut grads)?;
            Ok((mse(out, &d.eps), grads))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let loss = parts.iter().map(|p| p.0).sum::<f64>() / b as f64;
        let n = net.param_count();
        net.accumulate(&sum_grads(parts.into_iter().map(|p| p.1).collect(), n));
        net.scale_grads(1.0 / b as Real);
        net.adam_step(cfg);
        on_step(step + 1, loss);
        log.push(loss);
    }
    Ok(log)
}
