// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use super::graph::{ComputationalGraph, EdgeMask, NodeId, Qkv, Slot};
use super::params::{block, head_param};
use super::{ModelParams, Objective};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-node residual contributions from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    tokens: Vec<usize>,
    /// Indexed by node position; the logits node has no entry.
    outputs: Vec<Tensor>,
    slot_inputs: Vec<Tensor>,
    logits: Tensor,
}

impl ActivationCache {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Output of the node at graph position `node_pos` (`seq_len x d_model`).
    pub fn output(&self, node_pos: usize) -> &Tensor {
        &self.outputs[node_pos]
    }

    pub fn node_output(&self, graph: &ComputationalGraph, node: NodeId) -> Option<&Tensor> {
        self.outputs.get(graph.node_position(node))
    }

    /// Input embedding: the Input node's output.
    pub fn input_embedding(&self) -> &Tensor {
        &self.outputs[0]
    }

    /// Residual-stream value the forward pass fed into slot `slot_pos`.
    pub fn slot_input(&self, slot_pos: usize) -> &Tensor {
        &self.slot_inputs[slot_pos]
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Copy with node `node_pos`'s output replaced.
    pub fn with_output(&self, node_pos: usize, output: Tensor) -> ActivationCache {
        let mut c = self.clone();
        c.outputs[node_pos] = output;
        c
    }
}

/// A weight (and optional bias) applied as `output = input * weight + bias`.
/// The full weight gradient is `sum_t input[t]^T doutput[t]`.
#[derive(Clone, Debug)]
pub struct LinearSite {
    pub weight: String,
    pub bias: Option<String>,
    pub input: Var,
    pub output: Var,
}

/// A recorded forward pass with handles to every intermediate of interest.
pub struct ModelRun {
    pub tape: Tape,
    pub logits: Var,
    pub input: Var,
    /// Indexed by node position; the logits node has no entry.
    pub node_outputs: Vec<Var>,
    pub slot_inputs: Vec<Var>,
    pub params: BTreeMap<String, Var>,
    pub sites: Vec<LinearSite>,
    pub tokens: Vec<usize>,
}

impl ModelRun {
    pub fn cache(&self) -> ActivationCache {
        let tokens = self.tokens.clone();
        ActivationCache {
            tokens,
            outputs: self
                .node_outputs
                .iter()
                .map(|&v| self.tape.value(v).clone())
                .collect(),
            slot_inputs: self
                .slot_inputs
                .iter()
                .map(|&v| self.tape.value(v).clone())
                .collect(),
            logits: self.tape.value(self.logits).clone(),
        }
    }
}

pub(crate) enum InputSource<'a> {
    Tokens(&'a [usize]),
    /// A precomputed input embedding; `track` makes it a gradient leaf.
    Embedding {
        value: Tensor,
        tokens: &'a [usize],
        track: bool,
    },
}

pub(crate) enum Routing<'a> {
    Residual,
    Patched {
        graph: &'a ComputationalGraph,
        circuit: &'a EdgeMask,
        corrupted: &'a ActivationCache,
    },
}

pub(crate) fn check_tokens(params: &ModelParams, tokens: &[usize]) -> Result<()> {
    let cfg = params.config();
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {t} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

struct Builder<'a> {
    tape: Tape,
    params: BTreeMap<String, Var>,
    routing: Routing<'a>,
    outputs: Vec<Option<Var>>,
    slot_inputs: Vec<Var>,
    sites: Vec<LinearSite>,
    n_heads: usize,
}

impl Builder<'_> {
    fn p(&self, path: &str) -> Var {
        self.params[path]
    }

    fn node_pos(&self, n: NodeId) -> usize {
        match n {
            NodeId::Input => 0,
            NodeId::Head { layer, head } => 1 + layer * (self.n_heads + 1) + head,
            NodeId::Mlp(layer) => 1 + layer * (self.n_heads + 1) + self.n_heads,
            NodeId::Logits => unreachable!("logits produce no residual output"),
        }
    }

    fn set_output(&mut self, n: NodeId, v: Var) {
        let i = self.node_pos(n);
        self.outputs[i] = Some(v);
    }

    /// Reads the residual stream for `slot`. Under patching, each incoming
    /// edge contributes either the live source output or the corrupted one.
    fn slot(&mut self, slot: Slot, resid: Var) -> Result<Var> {
        let v = match &self.routing {
            Routing::Residual => self.tape.identity(resid),
            Routing::Patched {
                graph,
                circuit,
                corrupted,
            } => {
                let sp = graph.slot_position(slot);
                let mut acc: Option<Var> = None;
                for &ei in graph.incoming(sp) {
                    let np = graph.node_position(graph.edges()[ei].src);
                    let term = if circuit.contains(ei) {
                        self.outputs[np].expect("sources run before their destinations")
                    } else {
                        self.tape.constant(corrupted.outputs[np].clone())
                    };
                    acc = Some(match acc {
                        None => term,
                        Some(a) => self.tape.add(a, term)?,
                    });
                }
                let acc = acc.expect("every slot has the input edge");
                self.tape.identity(acc)
            }
        };
        self.slot_inputs.push(v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
        let wv = self.p(w);
        let mut y = self.tape.matmul(x, wv)?;
        if let Some(b) = b {
            let bv = self.p(b);
            y = self.tape.add_row(y, bv)?;
        }
        self.sites.push(LinearSite {
            weight: w.to_string(),
            bias: b.map(str::to_string),
            input: x,
            output: y,
        });
        Ok(y)
    }

    fn layernorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (g, b) = (
            self.p(&format!("{prefix}.w")),
            self.p(&format!("{prefix}.b")),
        );
        self.tape.layernorm(x, g, b)
    }
}

/// Runs the model on one sequence, recording everything on a fresh tape.
/// `track(path)` selects which parameters become gradient leaves.
pub(crate) fn forward(
    params: &ModelParams,
    input: InputSource<'_>,
    routing: Routing<'_>,
    track: &dyn Fn(&str) -> bool,
) -> Result<ModelRun> {
    let cfg = params.config().clone();
    let mut tape = Tape::new();
    let mut pvars = BTreeMap::new();
    for (path, t) in params.iter_shared() {
        let v = tape.shared_leaf(t.clone(), track(path));
        pvars.insert(path.clone(), v);
    }

    let (tokens, z_in) = match input {
        InputSource::Tokens(ids) => {
            check_tokens(params, ids)?;
            let tok = tape.embedding(pvars["embed.tok"], ids)?;
            let positions: Vec<usize> = (0..ids.len()).collect();
            let pos = tape.embedding(pvars["embed.pos"], &positions)?;
            (ids.to_vec(), tape.add(tok, pos)?)
        }
        InputSource::Embedding {
            value,
            tokens,
            track,
        } => {
            check_tokens(params, tokens)?;
            if value.shape() != [tokens.len(), cfg.d_model] {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "input embedding {:?} for {} tokens",
                        value.shape(),
                        tokens.len()
                    ),
                ));
            }
            let v = if track {
                tape.param(value)
            } else {
                tape.constant(value)
            };
            (tokens.to_vec(), v)
        }
    };

    if let Routing::Patched { corrupted, .. } = &routing {
        if corrupted.seq_len() != tokens.len() {
            return Err(Error::Patching(format!(
                "corrupted cache covers {} positions, run has {}",
                corrupted.seq_len(),
                tokens.len()
            )));
        }
    }

    let n_nodes = 1 + cfg.n_layers * (cfg.n_heads + 1);
    let mut b = Builder {
        tape,
        params: pvars,
        routing,
        outputs: vec![None; n_nodes],
        slot_inputs: Vec::new(),
        sites: Vec::new(),
        n_heads: cfg.n_heads,
    };
    b.set_output(NodeId::Input, z_in);

    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let mut resid = z_in;
    for layer in 0..cfg.n_layers {
        let ln1 = block(layer, "ln1");
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let mut proj = [resid; 3];
            for (i, (input, w, bias)) in [
                (Qkv::Q, "wq", "bq"),
                (Qkv::K, "wk", "bk"),
                (Qkv::V, "wv", "bv"),
            ]
            .into_iter()
            .enumerate()
            {
                let x = b.slot(Slot::Head { layer, head, input }, resid)?;
                let xn = b.layernorm(x, &ln1)?;
                proj[i] = b.linear(
                    xn,
                    &head_param(layer, head, w),
                    Some(&head_param(layer, head, bias)),
                )?;
            }
            let [q, k, v] = proj;
            let scores = b.tape.matmul_nt(q, k)?;
            let scores = b.tape.scale(scores, scale);
            let pattern = b.tape.causal_softmax(scores)?;
            let mixed = b.tape.matmul(pattern, v)?;
            let z = b.linear(mixed, &head_param(layer, head, "wo"), None)?;
            b.set_output(NodeId::Head { layer, head }, z);
            head_outs.push(z);
        }
        for z in head_outs {
            resid = b.tape.add(resid, z)?;
        }

        let x = b.slot(Slot::MlpIn(layer), resid)?;
        let xn = b.layernorm(x, &block(layer, "ln2"))?;
        let h = b.linear(
            xn,
            &block(layer, "mlp.w_in"),
            Some(&block(layer, "mlp.b_in")),
        )?;
        let h = b.tape.gelu(h);
        let z = b.linear(
            h,
            &block(layer, "mlp.w_out"),
            Some(&block(layer, "mlp.b_out")),
        )?;
        b.set_output(NodeId::Mlp(layer), z);
        resid = b.tape.add(resid, z)?;
    }

    let x = b.slot(Slot::LogitsIn, resid)?;
    let xn = b.layernorm(x, "ln_f")?;
    let unembed = b.p("unembed");
    let logits = b.tape.matmul(xn, unembed)?;

    Ok(ModelRun {
        input: z_in,
        logits,
        node_outputs: b
            .outputs
            .into_iter()
            .map(|o| o.expect("all nodes ran"))
            .collect(),
        slot_inputs: b.slot_inputs,
        params: b.params,
        sites: b.sites,
        tape: b.tape,
        tokens,
    })
}

/// Clean forward pass: logits (`seq_len x vocab`) and every node's output.
pub fn run_with_cache(params: &ModelParams, tokens: &[usize]) -> Result<(Tensor, ActivationCache)> {
    let run = forward(
        params,
        InputSource::Tokens(tokens),
        Routing::Residual,
        &|_| false,
    )?;
    let cache = run.cache();
    Ok((cache.logits.clone(), cache))
}

/// Forward pass where each slot reads the live output of its in-circuit
/// sources and the corrupted-cache output of every other source.
pub fn run_patched(
    params: &ModelParams,
    graph: &ComputationalGraph,
    clean_cache: &ActivationCache,
    corrupted_cache: &ActivationCache,
    circuit: &EdgeMask,
) -> Result<Tensor> {
    if clean_cache.seq_len() != corrupted_cache.seq_len() {
        return Err(Error::Patching(format!(
            "clean cache has {} positions, corrupted cache has {}",
            clean_cache.seq_len(),
            corrupted_cache.seq_len()
        )));
    }
    if circuit.len() != graph.edges().len() {
        return Err(Error::Patching(format!(
            "circuit mask covers {} edges, graph has {}",
            circuit.len(),
            graph.edges().len()
        )));
    }
    let run = forward(
        params,
        InputSource::Embedding {
            value: clean_cache.input_embedding().clone(),
            tokens: clean_cache.tokens(),
            track: false,
        },
        Routing::Patched {
            graph,
            circuit,
            corrupted: corrupted_cache,
        },
        &|_| false,
    )?;
    Ok(run.tape.value(run.logits).clone())
}

/// Where along the corrupted-to-clean line gradients are taken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InputPoint {
    Clean,
    Corrupted,
    /// `(1 - alpha) * corrupted + alpha * clean` input embedding.
    Interpolated(f64),
}

pub(crate) fn interpolate(corrupted: &Tensor, clean: &Tensor, alpha: f64) -> Tensor {
    let data = corrupted
        .data()
        .iter()
        .zip(clean.data())
        .map(|(c, x)| (1.0 - alpha) * c + alpha * x)
        .collect();
    Tensor::new(corrupted.shape().to_vec(), data).expect("same shape")
}

/// Loss value, logits and the gradient of the loss with respect to every
/// slot input, for a forward pass started from `embedding`.
pub fn slot_gradients_from_embedding(
    params: &ModelParams,
    tokens: &[usize],
    embedding: Tensor,
    objective: &Objective,
) -> Result<(f64, Tensor, Vec<Tensor>)> {
    let mut run = forward(
        params,
        InputSource::Embedding {
            value: embedding,
            tokens,
            track: true,
        },
        Routing::Residual,
        &|_| false,
    )?;
    let loss = objective.loss(&mut run.tape, run.logits)?;
    if !run.tape.value(loss).is_scalar() {
        return Err(Error::Usage(format!(
            "loss must be scalar, got shape {:?}",
            run.tape.value(loss).shape()
        )));
    }
    let value = run.tape.value(loss).data()[0];
    let logits = run.tape.value(run.logits).clone();
    let grads = run.tape.backward(loss, None)?;
    let slot_grads = run.slot_inputs.iter().map(|&s| grads.wrt(s)).collect();
    Ok((value, logits, slot_grads))
}

/// Gradient of `objective` with respect to each destination slot's input,
/// indexed by slot position, at the chosen point between the corrupted and
/// clean inputs.
pub fn node_input_gradients(
    params: &ModelParams,
    clean_tokens: &[usize],
    corrupted_tokens: &[usize],
    point: InputPoint,
    objective: &Objective,
) -> Result<Vec<Tensor>> {
    if clean_tokens.len() != corrupted_tokens.len() {
        return Err(Error::Input(
            "clean and corrupted sequences differ in length".into(),
        ));
    }
    let embed = |tokens: &[usize]| -> Result<Tensor> {
        let run = forward(
            params,
            InputSource::Tokens(tokens),
            Routing::Residual,
            &|_| false,
        )?;
        Ok(run.tape.value(run.input).clone())
    };
    let embedding = match point {
        InputPoint::Clean => embed(clean_tokens)?,
        InputPoint::Corrupted => embed(corrupted_tokens)?,
        InputPoint::Interpolated(alpha) => {
            interpolate(&embed(corrupted_tokens)?, &embed(clean_tokens)?, alpha)
        }
    };
    Ok(slot_gradients_from_embedding(params, clean_tokens, embedding, objective)?.2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::graph::precedes;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 12,
            vocab_size: 13,
            max_seq_len: 9,
        }
    }

    const TOKENS: [usize; 7] = [3, 1, 4, 1, 5, 9, 2];
    const CORRUPT: [usize; 7] = [3, 1, 4, 1, 7, 9, 2];

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let p = ModelParams::init(&cfg(), 5).unwrap();
        let (a, cache) = run_with_cache(&p, &TOKENS).unwrap();
        let (b, _) = run_with_cache(&p, &TOKENS).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[7, 13]);
        assert_eq!(cache.output(3).shape(), &[7, 8]);
    }

    #[test]
    fn rejects_bad_tokens() {
        let p = ModelParams::init(&cfg(), 5).unwrap();
        assert!(matches!(run_with_cache(&p, &[0, 13]), Err(Error::Input(_))));
        assert!(matches!(run_with_cache(&p, &[0; 10]), Err(Error::Input(_))));
    }

    #[test]
    fn slot_inputs_rebuild_from_cached_outputs() {
        let p = ModelParams::init(&cfg(), 6).unwrap();
        let g = ComputationalGraph::build(&cfg());
        let (_, cache) = run_with_cache(&p, &TOKENS).unwrap();
        for (si, &slot) in g.slots().iter().enumerate() {
            let mut sum = Tensor::zeros(&[7, 8]);
            for (ni, &node) in g.nodes().iter().enumerate() {
                if precedes(node, slot) {
                    sum.add_assign(cache.output(ni));
                }
            }
            assert!(sum.max_abs_diff(cache.slot_input(si)) <= 1e-10, "{slot}");
        }
    }

    #[test]
    fn zero_writers_leave_only_the_embedding() {
        let c = ModelConfig {
            n_layers: 1,
            ..cfg()
        };
        let mut p = ModelParams::init(&c, 2).unwrap();
        for (path, t) in p.iter_mut() {
            if path.ends_with(".wo") || path.contains("mlp.w_out") || path.contains("mlp.b_out") {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let (logits, cache) = run_with_cache(&p, &TOKENS).unwrap();

        let mut tape = Tape::new();
        let e = tape.constant(cache.input_embedding().clone());
        let g = tape.constant(p.get("ln_f.w").unwrap().clone());
        let bb = tape.constant(p.get("ln_f.b").unwrap().clone());
        let u = tape.constant(p.get("unembed").unwrap().clone());
        let n = tape.layernorm(e, g, bb).unwrap();
        let expected = tape.matmul(n, u).unwrap();
        assert!(logits.max_abs_diff(tape.value(expected)) <= 1e-12);
    }

    #[test]
    fn full_and_empty_circuits_reproduce_clean_and_corrupted_runs() {
        let p = ModelParams::init(&cfg(), 8).unwrap();
        let g = ComputationalGraph::build(&cfg());
        let (clean_logits, clean) = run_with_cache(&p, &TOKENS).unwrap();
        let (corrupt_logits, corrupt) = run_with_cache(&p, &CORRUPT).unwrap();

        let all = EdgeMask::all(&g);
        let full = run_patched(&p, &g, &clean, &corrupt, &all).unwrap();
        assert!(full.max_abs_diff(&clean_logits) <= 1e-10);

        let none = EdgeMask::none(&g);
        let empty = run_patched(&p, &g, &clean, &corrupt, &none).unwrap();
        assert!(empty.max_abs_diff(&corrupt_logits) <= 1e-10);

        let (_, short) = run_with_cache(&p, &TOKENS[..5]).unwrap();
        assert!(matches!(
            run_patched(&p, &g, &clean, &short, &all),
            Err(Error::Patching(_))
        ));
    }

    #[test]
    fn slot_gradients_match_finite_differences() {
        let p = ModelParams::init(&cfg(), 9).unwrap();
        let g = ComputationalGraph::build(&cfg());
        let objective = Objective::NegLogitDiff {
            target: 4,
            distractor: 7,
        };
        let grads =
            node_input_gradients(&p, &TOKENS, &CORRUPT, InputPoint::Clean, &objective).unwrap();
        let (_, cache) = run_with_cache(&p, &TOKENS).unwrap();
        assert_eq!(grads.len(), g.slots().len());

        let loss_with_offset = |slot_pos: usize, coord: usize, delta: f64| {
            perturbed_loss(&p, &objective, slot_pos, coord, delta)
        };
        let h = 1e-5;
        for slot_pos in [0, 4, 6, g.slots().len() - 1] {
            let analytic = &grads[slot_pos];
            assert_eq!(analytic.shape(), cache.slot_input(slot_pos).shape());
            for coord in [0, 13, 55] {
                let numeric = (loss_with_offset(slot_pos, coord, h)
                    - loss_with_offset(slot_pos, coord, -h))
                    / (2.0 * h);
                let a = analytic.data()[coord];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
                assert!(
                    rel < 1e-4 || (a - numeric).abs() < 1e-9,
                    "slot {slot_pos} coord {coord}: {a} vs {numeric}"
                );
            }
        }
    }

    /// Loss after adding `delta` to one coordinate of one slot's input only.
    fn perturbed_loss(
        p: &ModelParams,
        objective: &Objective,
        slot_pos: usize,
        coord: usize,
        delta: f64,
    ) -> f64 {
        let g = ComputationalGraph::build(p.config());
        let (_, clean) = run_with_cache(p, &TOKENS).unwrap();
        // Build a corrupted cache identical to the clean one except that the
        // input node's output carries the offset, then route only that slot's
        // input edge through it.
        let mut shifted = clean.clone();
        shifted.outputs[0].data_mut()[coord] += delta;
        let mut mask = EdgeMask::all(&g);
        let input_edge = g.incoming(slot_pos)[0];
        mask.set(input_edge, false);
        let logits = run_patched(p, &g, &clean, &shifted, &mask).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let loss = objective.loss(&mut tape, l).unwrap();
        tape.value(loss).data()[0]
    }

    #[test]
    fn constant_loss_has_zero_slot_gradients() {
        let p = ModelParams::init(&cfg(), 10).unwrap();
        let (_, cache) = run_with_cache(&p, &TOKENS).unwrap();
        let mut run = forward(
            &p,
            InputSource::Embedding {
                value: cache.input_embedding().clone(),
                tokens: &TOKENS,
                track: true,
            },
            Routing::Residual,
            &|_| false,
        )
        .unwrap();
        let s = run.tape.sum(run.logits);
        let loss = run.tape.scale(s, 0.0);
        let grads = run.tape.backward(loss, None).unwrap();
        assert!(run
            .slot_inputs
            .iter()
            .all(|&v| grads.wrt(v).data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let p = ModelParams::init(&cfg(), 11).unwrap();
        let obj = Objective::CrossEntropy { target: 2 };
        let at_one =
            node_input_gradients(&p, &TOKENS, &CORRUPT, InputPoint::Interpolated(1.0), &obj)
                .unwrap();
        let clean = node_input_gradients(&p, &TOKENS, &CORRUPT, InputPoint::Clean, &obj).unwrap();
        assert_eq!(at_one, clean);
    }
}
