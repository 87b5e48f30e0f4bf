//! Numerical gradient checks: tape gradients against central differences of
//! the eager forward pass, in `f64`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{l1, total_loss, LossWeights};
use crate::mmpnet::{MmpNet, MmpNetConfig};
use crate::mmprnn::{MmpRnn, NetConfig};
use crate::nn::{Eager, ParamId, ParamStore, Tape};
use crate::tensor::{Shape, Tensor};

/// Central-difference steps, largest first. Large steps can straddle
/// leaky-ReLU kinks and small ones lose tiny gradients to rounding, so each
/// position uses the adjacent pair of steps whose estimates agree best.
pub const FD_STEPS: [f64; 6] = [1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6];
/// Magnitude below which both gradients count as zero.
pub const ZERO_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// Positions where both gradients are below [`ZERO_FLOOR`].
    pub near_zero: usize,
    pub worst_relative: f64,
    /// Name, index, analytic and numeric gradient of the worst position.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    fn record(&mut self, name: &str, k: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        if scale < ZERO_FLOOR {
            self.near_zero += 1;
            return;
        }
        let rel = (analytic - numeric).abs() / scale;
        if rel > self.worst_relative || self.worst.is_none() {
            self.worst_relative = rel;
            self.worst = Some((name.to_string(), k, analytic, numeric));
        }
    }
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
}

/// `count` positions drawn uniformly over all scalars of `store`.
fn sample_positions(store: &ParamStore<f64>, count: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let sizes: Vec<(ParamId, usize)> = store.iter().map(|(id, _, t)| (id, t.len())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    (0..count)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            for &(id, n) in &sizes {
                if k < n {
                    return (id, k);
                }
                k -= n;
            }
            unreachable!("position within total")
        })
        .collect()
}

fn probe(
    store: &mut ParamStore<f64>,
    grads: &std::collections::HashMap<ParamId, Tensor<f64>>,
    positions: &[(ParamId, usize)],
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheck {
    let mut report = GradCheck::default();
    for &(id, k) in positions {
        let orig = store.get(id).data()[k];
        let mut central = |h: f64| {
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = loss(store);
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = loss(store);
            store.get_mut(id).data_mut()[k] = orig;
            (up - down) / (2.0 * h)
        };
        let estimates: Vec<f64> = FD_STEPS.iter().map(|&h| central(h)).collect();
        let numeric = estimates
            .windows(2)
            .min_by(|a, b| (a[0] - a[1]).abs().total_cmp(&(b[0] - b[1]).abs()))
            .map(|w| 0.5 * (w[0] + w[1]))
            .expect("at least two steps");
        let analytic = grads.get(&id).map_or(0.0, |t| t.data()[k]);
        report.record(store.name(id), k, analytic, numeric);
    }
    report
}

/// Full objective (Charbonnier, gradient and motion terms) through the
/// recurrent network on `frames` random `size×size` frames, one output frame
/// per window.
pub fn check_rnn_objective(cfg: NetConfig, size: usize, samples: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rnn = MmpRnn::<f64>::new(cfg, seed)?;
    let mmp = MmpNet::<f64>::new(MmpNetConfig::default(), seed + 1)?;
    let weights = LossWeights::default();
    let n = cfg.frames;
    let frames: Vec<Tensor<f64>> = (0..n).map(|_| random(Shape::new(1, 3, size, size), &mut rng)).collect();
    let priors: Vec<Tensor<f64>> = (0..n).map(|_| random(Shape::new(1, 1, size, size), &mut rng)).collect();
    let targets: Vec<Tensor<f64>> = (0..n - 4).map(|_| random(Shape::new(1, 3, size, size), &mut rng)).collect();

    let cfg_priors = cfg.mmam;
    let eager = |store: &ParamStore<f64>, rnn: &MmpRnn<f64>| -> f64 {
        let net = MmpRnn::from_store(*rnn.config(), store).expect("same layout");
        let fv: Vec<_> = frames.iter().map(|f| Arc::new(f.clone())).collect();
        let pv: Vec<_> = priors.iter().map(|f| Arc::new(f.clone())).collect();
        let outs = net.forward_sequence(&mut Eager, &fv, cfg_priors.then_some(pv.as_slice())).expect("forward");
        let k = 1.0 / outs.len() as f64;
        outs.iter().zip(&targets).map(|(o, t)| k * total_loss(t, o, Some(&mmp), &weights).expect("loss").total).sum()
    };

    let mut tape = Tape::train(rnn.params());
    let fv: Vec<_> = frames.iter().map(|f| tape.input(f.clone(), false)).collect();
    let pv: Vec<_> = priors.iter().map(|f| tape.input(f.clone(), false)).collect();
    let outs = rnn.forward_sequence(&mut tape, &fv, cfg_priors.then_some(pv.as_slice()))?;
    let k = 1.0 / outs.len() as f64;
    let mut terms = Vec::new();
    for (o, t) in outs.iter().zip(&targets) {
        let t = tape.input(t.clone(), false);
        let c = tape.charbonnier(t, *o, weights.epsilon);
        let g = tape.gradient_loss(t, *o, weights.gradient_op);
        let resp = mmp.forward_raw_v(&mut tape, o)?;
        let m = tape.mean(resp);
        terms.extend([(c, k), (g, k * weights.lambda1), (m, k * weights.lambda2)]);
    }
    let loss = tape.weighted_sum(&terms);
    let recorded = tape.scalar(loss);
    let direct = eager(rnn.params(), &rnn);
    if (recorded - direct).abs() > 1e-10 * direct.abs().max(1.0) {
        return Err(Error::invalid(format!("tape objective {recorded} differs from eager {direct}")));
    }
    let grads = tape.backward(loss).into_params();
    let positions = sample_positions(rnn.params(), samples, &mut rng);
    let template = rnn.clone();
    Ok(probe(rnn.params_mut(), &grads, &positions, |s| eager(s, &template)))
}

/// L1 regression loss through MMP-Net on one random `size×size` frame.
pub fn check_mmpnet_l1(cfg: MmpNetConfig, size: usize, samples: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = MmpNet::<f64>::new(cfg, seed)?;
    let x = random(Shape::new(1, 3, size, size), &mut rng);
    let y = random(Shape::new(1, 1, size, size), &mut rng);
    let mut tape = Tape::train(net.params());
    let xi = tape.input(x.clone(), false);
    let yi = tape.input(y.clone(), false);
    let o = net.forward_raw_v(&mut tape, &xi)?;
    let loss = tape.l1(o, yi);
    let grads = tape.backward(loss).into_params();
    let positions = sample_positions(net.params(), samples, &mut rng);
    Ok(probe(net.params_mut(), &grads, &positions, |s| {
        let n = MmpNet::from_store(cfg, s).expect("same layout");
        l1(&n.forward_raw(&mut Eager, &x).expect("forward"), &y).expect("loss")
    }))
}
