use crate::data::StepBatch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Gradients, Graph, Scalar, Tensor};

/// A horizon of consecutive timesteps and the memory entering the first.
#[derive(Debug, Clone)]
pub struct Rollout<F> {
    pub steps: Vec<StepBatch>,
    pub memory: Tensor<F>,
    /// Memories entering each step, if the caller already has them. They
    /// are checked against the replayed forward pass.
    pub memories: Option<Vec<Tensor<F>>>,
}

impl<F: Scalar> Rollout<F> {
    pub fn new(steps: Vec<StepBatch>, memory: Tensor<F>) -> Self {
        Self {
            steps,
            memory,
            memories: None,
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Loss normalizer: scored tokens over the whole horizon, at least 1.
    pub fn scored_tokens(&self) -> usize {
        self.steps.iter().map(StepBatch::scored_tokens).sum()
    }

    fn norm(&self) -> f64 {
        self.scored_tokens().max(1) as f64
    }
}

/// Dropout settings for one update; each timestep draws masks from its own
/// seed so recomputation reproduces them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepConfig {
    pub dropout: f64,
    pub seed: u64,
}

impl StepConfig {
    fn apply<F: Scalar>(&self, g: &mut Graph<F>, step: usize) {
        if self.dropout > 0.0 {
            g.set_dropout(self.dropout, splitmix(self.seed ^ splitmix(step as u64)));
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Gradients and diagnostics of one rollout.
#[derive(Debug, Clone)]
pub struct StepGradients<F> {
    pub grads: Gradients<F>,
    /// Mean token cross-entropy over the horizon.
    pub loss: f64,
    /// L2 norm of the gradient seeded into the oldest step's memory output.
    pub memory_grad_norm: f64,
    /// Gradient with respect to the memory entering the rollout.
    pub initial_memory_grad: Tensor<F>,
    /// Memory leaving the last step.
    pub next_memory: Tensor<F>,
    /// Memories entering each step.
    pub memories: Vec<Tensor<F>>,
    /// Largest number of tensors held by any single graph.
    pub peak_nodes: usize,
    /// Mean update gate over all slots and steps, when the variant has one.
    pub gate_mean: Option<f64>,
    pub scored_tokens: usize,
}

/// L2 norm of a memory gradient.
pub fn memory_gradient_norm<F: Scalar>(grad: &Tensor<F>) -> f64 {
    grad.l2_norm()
}

/// Memory-replay back-propagation.
///
/// First runs the encoder over the whole horizon without recording, keeping
/// the memory entering every step. Then walks the steps from last to first,
/// recomputing each on its own recording graph and back-propagating its loss
/// together with the memory gradient handed down from the later step. Only
/// one step's activations are alive at a time.
pub fn mrbp_step<F: Scalar>(model: &Model<F>, rollout: &Rollout<F>, cfg: &StepConfig) -> Result<StepGradients<F>> {
    if rollout.steps.is_empty() {
        return Err(Error::Usage("rollout has no steps".into()));
    }
    let norm = rollout.norm();

    let mut memories = vec![rollout.memory.clone()];
    let mut gate_sum = 0.0;
    let mut gate_count = 0usize;
    let mut peak = 0;
    for (i, step) in rollout.steps.iter().enumerate() {
        let mut g = Graph::no_grad();
        cfg.apply(&mut g, i);
        let m = g.constant(memories[i].clone())?;
        let enc = model.encode(&mut g, &step.src, m, &step.reset)?;
        if let Some(z) = enc.gates {
            let z = g.value(z);
            gate_sum += z.data().iter().map(|v| v.as_f64()).sum::<f64>();
            gate_count += z.len();
        }
        peak = peak.max(g.len());
        memories.push(g.value(enc.next_memory).clone());
    }
    if let Some(given) = &rollout.memories {
        let consistent = given.len() == rollout.steps.len() && given.iter().zip(&memories).all(|(a, b)| a.bitwise_eq(b));
        if !consistent {
            return Err(Error::Usage(
                "rollout memories do not match the memories produced by replaying its steps".into(),
            ));
        }
    }

    let mut grads = Gradients::zeros_for(&model.params);
    let mut grad_m = Tensor::zeros(memories[rollout.steps.len()].shape());
    let mut seeded_oldest = 0.0;
    let mut loss = 0.0;
    for (i, step) in rollout.steps.iter().enumerate().rev() {
        let mut g = Graph::new();
        cfg.apply(&mut g, i);
        let m = g.leaf(memories[i].clone())?;
        let out = model.forward_step(&mut g, step, m, norm)?;
        if i == 0 {
            seeded_oldest = memory_gradient_norm(&grad_m);
        }
        // The last step has no later loss; seeding zeros would only add +0.0.
        let carried = grad_m.data().iter().any(|v| *v != F::zero());
        let seeds: &[(_, &Tensor<F>)] = if carried { &[(out.encoded.next_memory, &grad_m)] } else { &[] };
        g.backward(Some(out.loss), seeds)?;
        loss += g.value(out.loss).item().as_f64();
        g.accumulate_param_grads(&mut grads);
        grad_m = g.grad_or_zeros(m);
        peak = peak.max(g.len());
    }
    let next_memory = memories.pop().expect("replay list holds the final memory");
    Ok(StepGradients {
        grads,
        loss,
        memory_grad_norm: seeded_oldest,
        initial_memory_grad: grad_m,
        next_memory,
        memories,
        peak_nodes: peak,
        gate_mean: (gate_count > 0).then(|| gate_sum / gate_count as f64),
        scored_tokens: rollout.scored_tokens(),
    })
}

/// Mean token loss of a rollout, forward only.
pub fn rollout_loss<F: Scalar>(model: &Model<F>, rollout: &Rollout<F>, cfg: &StepConfig) -> Result<f64> {
    let norm = rollout.norm();
    let mut memory = rollout.memory.clone();
    let mut loss = 0.0;
    for (i, step) in rollout.steps.iter().enumerate() {
        let mut g = Graph::no_grad();
        cfg.apply(&mut g, i);
        let m = g.constant(memory)?;
        let out = model.forward_step(&mut g, step, m, norm)?;
        loss += g.value(out.loss).item().as_f64();
        memory = g.value(out.encoded.next_memory).clone();
    }
    Ok(loss)
}

/// Reference implementation: the whole horizon on one recording graph. With
/// `detach`, memory is cut between steps so no gradient crosses them.
pub fn unrolled_bptt_step<F: Scalar>(
    model: &Model<F>,
    rollout: &Rollout<F>,
    cfg: &StepConfig,
    detach: bool,
) -> Result<StepGradients<F>> {
    if rollout.steps.is_empty() {
        return Err(Error::Usage("rollout has no steps".into()));
    }
    let norm = rollout.norm();
    let mut g = Graph::new();
    let m0 = g.leaf(rollout.memory.clone())?;
    let mut m = m0;
    let mut memories = Vec::new();
    let mut losses = Vec::new();
    let mut first_out = None;
    let mut gate_sum = 0.0;
    let mut gate_count = 0usize;
    for (i, step) in rollout.steps.iter().enumerate() {
        cfg.apply(&mut g, i);
        memories.push(g.value(m).clone());
        let out = model.forward_step(&mut g, step, m, norm)?;
        if let Some(z) = out.encoded.gates {
            let z = g.value(z);
            gate_sum += z.data().iter().map(|v| v.as_f64()).sum::<f64>();
            gate_count += z.len();
        }
        first_out.get_or_insert(out.encoded.next_memory);
        losses.push(out.loss);
        m = if detach { g.detach(out.encoded.next_memory)? } else { out.encoded.next_memory };
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    g.backward(Some(total), &[])?;
    let mut grads = Gradients::zeros_for(&model.params);
    g.accumulate_param_grads(&mut grads);
    let first = first_out.expect("at least one step");
    Ok(StepGradients {
        grads,
        loss: g.value(total).item().as_f64(),
        memory_grad_norm: memory_gradient_norm(&g.grad_or_zeros(first)),
        initial_memory_grad: g.grad_or_zeros(m0),
        next_memory: g.value(m).clone(),
        memories,
        peak_nodes: g.len(),
        gate_mean: (gate_count > 0).then(|| gate_sum / gate_count as f64),
        scored_tokens: rollout.scored_tokens(),
    })
}
