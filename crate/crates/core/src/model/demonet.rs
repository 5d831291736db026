//! DEMON-routed mixture of expert stems on a shared residual backbone.
//!
//! A linear router with sigmoid outputs picks one expert per sample from the
//! 1-D DEMON spectrum. Each expert is a 7×7 stride-2 convolution, batch norm,
//! ReLU and a 3×3 stride-2 max pool; the backbone is a four-stage ResNet-18
//! with a linear head.

use demonet_tensor::nn::{BatchNorm2d, Conv2d, Linear, Session};
use demonet_tensor::{Conv2dConfig, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemonetConfig {
    /// Router input length (modulation bins of the 1-D DEMON spectrum).
    pub n_mod_bins: usize,
    pub n_experts: usize,
    pub n_classes: usize,
    /// Channels of the four backbone stages; the experts emit `widths[0]`.
    pub widths: [usize; 4],
}

impl DemonetConfig {
    pub fn new(n_mod_bins: usize, n_experts: usize, n_classes: usize) -> Self {
        Self {
            n_mod_bins,
            n_experts,
            n_classes,
            widths: [64, 128, 256, 512],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mod_bins == 0 || self.n_experts == 0 || self.n_classes == 0 {
            return Err(invalid("demonet", "bins, experts and classes must be positive"));
        }
        if self.widths.contains(&0) {
            return Err(invalid("demonet", "stage widths must be positive"));
        }
        Ok(())
    }
}

/// Router decisions for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingOutput {
    /// Row-major [B, N] sigmoid outputs.
    pub probs: Vec<f64>,
    pub n_experts: usize,
    pub selected: Vec<usize>,
    pub counts: Vec<usize>,
}

impl RoutingOutput {
    /// Routing from a probability matrix: per-row argmax, lowest index on ties.
    pub fn from_probs(probs: Vec<f64>, n_experts: usize) -> Result<Self> {
        if n_experts == 0 || probs.len() % n_experts != 0 {
            return Err(invalid(
                "route",
                format!("{} probabilities do not form rows of {n_experts}", probs.len()),
            ));
        }
        let selected: Vec<usize> = probs.chunks(n_experts).map(argmax).collect();
        let mut counts = vec![0; n_experts];
        for &j in &selected {
            counts[j] += 1;
        }
        Ok(Self {
            probs,
            n_experts,
            selected,
            counts,
        })
    }

    pub fn batch(&self) -> usize {
        self.selected.len()
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
struct Expert {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, Conv2dConfig::square(3, stride, 1), false, rng)?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), cout)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, Conv2dConfig::square(3, 1, 1), false, rng)?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), cout)?;
        let down = if stride != 1 || cin != cout {
            let c = Conv2d::new(store, &format!("{name}.down.conv"), cin, cout, Conv2dConfig::square(1, stride, 0), false, rng)?;
            let b = BatchNorm2d::new(store, &format!("{name}.down.bn"), cout)?;
            Some((c, b))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            down,
        })
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.tape.relu(h)?;
        let h = self.conv2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let skip = match &self.down {
            Some((c, b)) => {
                let d = c.forward(s, x)?;
                b.forward(s, d)?
            }
            None => x,
        };
        let y = s.tape.add(h, skip)?;
        Ok(s.tape.relu(y)?)
    }
}

/// Layer definitions; values live in the owning [`Demonet`]'s store.
#[derive(Clone, Debug)]
pub struct DemonetNet {
    pub cfg: DemonetConfig,
    router: Linear,
    experts: Vec<Expert>,
    blocks: Vec<BasicBlock>,
    head: Linear,
    /// Per-bin divisor of the router input.
    pub input_scale: ParamId,
}

pub struct Demonet {
    pub store: ParamStore,
    pub net: DemonetNet,
}

impl Demonet {
    pub fn new(cfg: DemonetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let router = Linear::new(&mut store, "router", cfg.n_mod_bins, cfg.n_experts, true, &mut rng)?;
        let input_scale = store.add_buffer("router.input_scale", Tensor::ones([cfg.n_mod_bins]))?;
        let w = cfg.widths;
        let mut experts = Vec::new();
        for j in 0..cfg.n_experts {
            let conv = Conv2d::new(
                &mut store,
                &format!("expert{j}.conv"),
                1,
                w[0],
                Conv2dConfig::square(7, 2, 3),
                false,
                &mut rng,
            )?;
            let bn = BatchNorm2d::new(&mut store, &format!("expert{j}.bn"), w[0])?;
            experts.push(Expert { conv, bn });
        }
        let mut blocks = Vec::new();
        let mut cin = w[0];
        for (stage, &cout) in w.iter().enumerate() {
            let stride = if stage == 0 { 1 } else { 2 };
            blocks.push(BasicBlock::new(&mut store, &format!("layer{}.0", stage + 1), cin, cout, stride, &mut rng)?);
            blocks.push(BasicBlock::new(&mut store, &format!("layer{}.1", stage + 1), cout, cout, 1, &mut rng)?);
            cin = cout;
        }
        let head = Linear::new(&mut store, "head", w[3], cfg.n_classes, true, &mut rng)?;
        Ok(Self {
            store,
            net: DemonetNet {
                cfg,
                router,
                experts,
                blocks,
                head,
                input_scale,
            },
        })
    }

    /// Sets the router input scale to the per-bin RMS of a [rows, bins]
    /// sample. Inputs are not centered: spectra stay positive, so an
    /// untrained router sends similar spectra to the same expert.
    pub fn fit_input_scaling(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        let m = self.net.cfg.n_mod_bins;
        if rows.is_empty() || rows.iter().any(|r| r.len() != m) {
            return Err(invalid("fit_input_scaling", format!("need non-empty rows of {m} bins")));
        }
        let n = rows.len() as f64;
        let mut ms = vec![0.0; m];
        for r in rows {
            for (a, v) in ms.iter_mut().zip(r) {
                *a += v * v / n;
            }
        }
        // Silent bins would blow up; leave them unscaled.
        let rms: Vec<f64> = ms.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        self.store.set(self.net.input_scale, Tensor::new([m], rms)?)?;
        Ok(())
    }

    /// Scaled router inputs for raw 1-D DEMON spectra.
    pub fn scale_inputs(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let m = self.net.cfg.n_mod_bins;
        let scale = self.store.get(self.net.input_scale).data();
        let mut data = Vec::with_capacity(rows.len() * m);
        for r in rows {
            if r.len() != m {
                return Err(invalid("route", format!("spectrum of {} bins, router expects {m}", r.len())));
            }
            data.extend(r.iter().zip(scale).map(|(v, s)| v / s));
        }
        Ok(Tensor::new([rows.len(), m], data)?)
    }

    /// Parameters of expert `j` (batch-norm buffers excluded).
    pub fn expert_params(&self, j: usize) -> Vec<ParamId> {
        let e = &self.net.experts[j];
        let mut ids = e.conv.params();
        ids.extend(e.bn.params());
        ids
    }

    /// Every entry, parameters and buffers, of expert `j`.
    pub fn expert_entries(&self, j: usize) -> Vec<ParamId> {
        self.store.with_prefix(&format!("expert{j}."))
    }

    pub fn router_params(&self) -> Vec<ParamId> {
        self.net.router.params()
    }

    /// Eval-mode routing followed by classification; returns logits [B, C].
    pub fn predict(&mut self, x: &Tensor, router_in: &Tensor) -> Result<(Tensor, RoutingOutput)> {
        let mut s = Session::eval(&mut self.store);
        let r = s.input(router_in.clone())?;
        let (_, routing) = self.net.route(&mut s, r)?;
        let xv = s.input(x.clone())?;
        let logits = self.net.forward(&mut s, xv, &routing.selected)?;
        Ok((s.tape.value(logits).clone(), routing))
    }
}

impl DemonetNet {
    /// Sigmoid routing probabilities on the tape plus the detached decision.
    /// `d1` must already be scaled (see [`Demonet::scale_inputs`]).
    pub fn route(&self, s: &mut Session, d1: Var) -> Result<(Var, RoutingOutput)> {
        let shape = s.tape.shape(d1);
        if shape.len() != 2 || shape[1] != self.cfg.n_mod_bins {
            return Err(invalid(
                "route",
                format!("expected [B, {}], got {shape:?}", self.cfg.n_mod_bins),
            ));
        }
        let logits = self.router.forward(s, d1)?;
        let probs = s.tape.sigmoid(logits)?;
        let out = RoutingOutput::from_probs(s.tape.value(probs).data().to_vec(), self.cfg.n_experts)?;
        Ok((probs, out))
    }

    /// One expert stem on its own.
    pub fn expert_forward(&self, s: &mut Session, j: usize, x: Var) -> Result<Var> {
        let e = self
            .experts
            .get(j)
            .ok_or_else(|| invalid("forward", format!("expert {j} of {}", self.experts.len())))?;
        let h = e.conv.forward(s, x)?;
        let h = e.bn.forward(s, h)?;
        let h = s.tape.relu(h)?;
        Ok(s.tape.max_pool2d(h, Conv2dConfig::square(3, 2, 1))?)
    }

    /// Backbone and head on expert outputs.
    pub fn backbone_forward(&self, s: &mut Session, mut h: Var) -> Result<Var> {
        for b in &self.blocks {
            h = b.forward(s, h)?;
        }
        let h = s.tape.adaptive_avg_pool2d(h, (1, 1))?;
        let h = s.tape.flatten(h)?;
        Ok(self.head.forward(s, h)?)
    }

    /// Sends each sample of `x` [B, 1, T, F] through its selected expert and
    /// then the shared backbone. Samples are grouped per expert so batch norm
    /// sees each expert's sub-batch together.
    pub fn forward(&self, s: &mut Session, x: Var, selected: &[usize]) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(invalid("forward", format!("expected [B, 1, T, F], got {shape:?}")));
        }
        if selected.len() != shape[0] {
            return Err(invalid(
                "forward",
                format!("{} routing decisions for a batch of {}", selected.len(), shape[0]),
            ));
        }
        if let Some(&j) = selected.iter().find(|&&j| j >= self.experts.len()) {
            return Err(invalid("forward", format!("expert {j} of {}", self.experts.len())));
        }
        let mut order = Vec::with_capacity(selected.len());
        let mut parts = Vec::new();
        for j in 0..self.experts.len() {
            let idx: Vec<usize> = (0..selected.len()).filter(|&i| selected[i] == j).collect();
            if idx.is_empty() {
                continue;
            }
            let xi = s.tape.index_select(x, &idx)?;
            parts.push(self.expert_forward(s, j, xi)?);
            order.extend(idx);
        }
        let grouped = s.tape.concat(&parts)?;
        let mut inverse = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        let h = if inverse.iter().enumerate().all(|(i, &p)| i == p) {
            grouped
        } else {
            s.tape.index_select(grouped, &inverse)?
        };
        self.backbone_forward(s, h)
    }
}

/// `N · Σ_j frac_j · P_j`, where `frac_j` is the share of the batch routed to
/// expert `j` and `P_j` the batch mean of its row-normalized probability.
pub fn balance_loss(tape: &mut Tape, probs: Var, routing: &RoutingOutput) -> Result<Var> {
    let b = routing.batch();
    let n = routing.n_experts;
    if b == 0 {
        return Err(invalid("balance_loss", "empty batch"));
    }
    if tape.shape(probs) != [b, n] {
        return Err(invalid(
            "balance_loss",
            format!("probabilities {:?} vs routing of [{b}, {n}]", tape.shape(probs)),
        ));
    }
    let pn = tape.row_normalize(probs)?;
    let bf = b as f64;
    let row: Vec<f64> = routing.counts.iter().map(|&c| n as f64 * c as f64 / (bf * bf)).collect();
    let weights: Vec<f64> = (0..b).flat_map(|_| row.iter().copied()).collect();
    let w = tape.mul_const(pn, Tensor::new([b, n], weights)?)?;
    Ok(tape.sum(w)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub task: f64,
    pub balance: f64,
}

/// Cross-entropy plus `alpha` times the balance loss.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    probs: Var,
    routing: &RoutingOutput,
    alpha: f64,
) -> Result<(Var, LossParts)> {
    let ce = tape.cross_entropy(logits, labels)?;
    let bal = balance_loss(tape, probs, routing)?;
    let parts = LossParts {
        task: tape.value(ce).item()?,
        balance: tape.value(bal).item()?,
    };
    let scaled = tape.scale(bal, alpha)?;
    Ok((tape.add(ce, scaled)?, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.2, 0.3, 0.2, 0.2]), 2);
        assert_eq!(argmax(&[0.5; 4]), 0);
    }

    #[test]
    fn counts_sum_to_batch() {
        let r = RoutingOutput::from_probs(vec![0.1, 0.9, 0.8, 0.2, 0.4, 0.4], 2).unwrap();
        assert_eq!(r.selected, vec![1, 0, 0]);
        assert_eq!(r.counts, vec![2, 1]);
        assert!(RoutingOutput::from_probs(vec![0.1; 5], 2).is_err());
    }
}
