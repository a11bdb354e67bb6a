//! Minimal reverse-mode engine.
//!
//! A [`LayerGraph`] is an ordered list of nodes, each a trait-object
//! [`Layer`] naming its input node(s); residual wiring is just a node with
//! two parents. A forward pass records per-node outputs and caches on a
//! [`Tape`]; [`LayerGraph::backward`] consumes the tape and replays each
//! layer's VJP in reverse order, accumulating gradients keyed by parameter.

pub mod layers;

use crate::dynamic::dcdc::DcdcCache;
use crate::dynamic::gsi::GsiCache;
use crate::dynamic::lsa::LsaCache;
use crate::error::{Error, Result};
use crate::io;
use crate::norm::BnCache;
use crate::tensor::{Element, Tensor};
use std::collections::HashMap;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Forward-pass values a layer's VJP consumes. Cleared when the tape is
/// dropped after backward.
pub enum Cache<T: Element> {
    None,
    Tensors(Vec<Tensor<T>>),
    Bn(BnCache<T>),
    Indices(Vec<usize>),
    Lsa(Box<LsaCache<T>>),
    Gsi(Box<GsiCache<T>>),
    Dcdc(Box<DcdcCache<T>>),
}

/// Reference to a named parameter tensor with its weight-decay tag.
pub struct Param<'a, T: Element> {
    pub name: String,
    pub tensor: &'a Tensor<T>,
    pub decay: bool,
}

pub struct ParamMutRef<'a, T: Element> {
    pub name: String,
    pub tensor: &'a mut Tensor<T>,
    pub decay: bool,
}

/// Predicted dynamic kernels of a layer for one input, used by kernel dumps.
pub struct DynamicKernels<T: Element> {
    pub lsa: Option<crate::dynamic::lsa::LsaKernelField<T>>,
    pub gsi: Option<crate::dynamic::gsi::GsiKernel<T>>,
}

/// Per-sample multiply-accumulate counts. `spatial` scales with the input's
/// spatial extent; `fixed` does not (per-sample kernel prediction, the
/// classifier head).
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerCost {
    pub spatial_macs: u64,
    pub fixed_macs: u64,
}

impl LayerCost {
    pub fn total(&self) -> u64 {
        self.spatial_macs + self.fixed_macs
    }
}

pub trait Layer<T: Element>: Send + Sync {
    fn kind(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>], phase: Phase) -> Result<(Tensor<T>, Cache<T>)>;

    /// Commits running-state updates (batch-norm statistics) gathered during
    /// a training forward pass.
    fn update_state(&mut self, _cache: &Cache<T>) {}

    /// Returns (gradient per input, gradient per parameter in `params()` order).
    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)>;

    fn params(&self) -> Vec<Param<'_, T>> {
        vec![]
    }

    fn params_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        vec![]
    }

    fn buffers(&self) -> Vec<Param<'_, T>> {
        vec![]
    }

    fn buffers_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        vec![]
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>>;

    fn cost(&self, _in_shapes: &[Vec<usize>]) -> Result<LayerCost> {
        Ok(LayerCost::default())
    }

    /// Dynamic kernels this layer would predict for `input` (running
    /// statistics); `None` for layers without predicted kernels.
    fn dynamic_kernels(&self, _input: &Tensor<T>) -> Option<Result<DynamicKernels<T>>> {
        None
    }
}

pub struct Node<T: Element> {
    pub name: String,
    pub layer: Box<dyn Layer<T>>,
    pub inputs: Vec<NodeId>,
}

/// Ordered differentiable layers with residual-skip wiring. Node 0 is the
/// graph input; every other node consumes earlier nodes only, so the order
/// is topological by construction and the graph is acyclic with one output.
pub struct LayerGraph<T: Element> {
    nodes: Vec<Node<T>>,
    output: NodeId,
}

/// Recorded forward pass: one output tensor and one cache per node.
/// Single-use; [`LayerGraph::backward`] consumes it.
pub struct Tape<T: Element> {
    outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T: Element> Tape<T> {
    pub fn output(&self, id: NodeId) -> &Tensor<T> {
        &self.outputs[id]
    }

    pub fn cache(&self, id: NodeId) -> &Cache<T> {
        &self.caches[id]
    }
}

/// Gradients keyed by parameter name, stored in graph parameter order so
/// iteration is deterministic.
pub struct Gradients<T: Element> {
    pub input: Tensor<T>,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(self.tensors.iter())
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub(crate) fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }
}

/// Incremental graph builder; `add` wires a layer to its parents and returns
/// the new node id.
pub struct GraphBuilder<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> GraphBuilder<T> {
    pub fn new() -> Self {
        GraphBuilder {
            nodes: vec![Node {
                name: "input".to_string(),
                layer: Box::new(layers::InputLayer),
                inputs: vec![],
            }],
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        layer: impl Layer<T> + 'static,
        inputs: &[NodeId],
    ) -> NodeId {
        let id = self.nodes.len();
        for &p in inputs {
            assert!(p < id, "node inputs must precede the node");
        }
        self.nodes.push(Node {
            name: name.into(),
            layer: Box::new(layer),
            inputs: inputs.to_vec(),
        });
        id
    }

    pub fn finish(self, output: NodeId) -> Result<LayerGraph<T>> {
        if output >= self.nodes.len() {
            return Err(Error::Graph("output node out of range".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for node in &self.nodes {
            if !seen.insert(node.name.clone()) {
                return Err(Error::Graph(format!("duplicate node name {}", node.name)));
            }
        }
        Ok(LayerGraph {
            nodes: self.nodes,
            output,
        })
    }
}

impl<T: Element> Default for GraphBuilder<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> LayerGraph<T> {
    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Forward pass; read-only, safe to share across threads for inference.
    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<(Tensor<T>, Tape<T>)> {
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut caches: Vec<Cache<T>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let (out, cache) = if id == 0 {
                (x.clone(), Cache::None)
            } else {
                let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&p| &outputs[p]).collect();
                node.layer.forward(&ins, phase).map_err(|e| {
                    Error::Graph(format!("node {} ({}): {e}", node.name, node.layer.kind()))
                })?
            };
            outputs.push(out);
            caches.push(cache);
        }
        let y = outputs[self.output].clone();
        Ok((y, Tape { outputs, caches }))
    }

    /// Training forward: batch statistics plus running-state commits.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let (y, tape) = self.forward(x, Phase::Train)?;
        for (node, cache) in self.nodes.iter_mut().zip(tape.caches.iter()) {
            node.layer.update_state(cache);
        }
        Ok((y, tape))
    }

    /// Reverse pass. Consumes the tape (single use); caches are dropped on
    /// return. Gradients of nodes feeding several consumers accumulate.
    pub fn backward(&self, tape: Tape<T>, dy: &Tensor<T>) -> Result<Gradients<T>> {
        if dy.shape() != tape.outputs[self.output].shape() {
            return Err(Error::ShapeMismatch(format!(
                "dy {:?} vs output {:?}",
                dy.shape(),
                tape.outputs[self.output].shape()
            )));
        }
        let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        node_grads[self.output] = Some(dy.clone());
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut by_node: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        for _ in 0..self.nodes.len() {
            by_node.push(Vec::new());
        }
        for id in (1..self.nodes.len()).rev() {
            let grad = match node_grads[id].take() {
                Some(g) => g,
                None => continue, // node does not influence the output
            };
            let node = &self.nodes[id];
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&p| &tape.outputs[p]).collect();
            let (dxs, dparams) = node
                .layer
                .vjp(&ins, &tape.caches[id], &grad)
                .map_err(|e| Error::Graph(format!("vjp at node {}: {e}", node.name)))?;
            if dxs.len() != node.inputs.len() {
                return Err(Error::Graph(format!(
                    "node {} returned {} input grads for {} inputs",
                    node.name,
                    dxs.len(),
                    node.inputs.len()
                )));
            }
            for (&p, dx) in node.inputs.iter().zip(dxs.into_iter()) {
                node_grads[p] = Some(match node_grads[p].take() {
                    Some(acc) => acc.add(&dx)?,
                    None => dx,
                });
            }
            by_node[id] = dparams;
        }
        // Emit parameter gradients in forward graph order.
        for (id, node) in self.nodes.iter().enumerate() {
            let dparams = std::mem::take(&mut by_node[id]);
            let params = node.layer.params();
            if dparams.len() != params.len() && !dparams.is_empty() {
                return Err(Error::Graph(format!(
                    "node {} returned {} param grads for {} params",
                    node.name,
                    dparams.len(),
                    params.len()
                )));
            }
            if dparams.is_empty() {
                for p in params {
                    names.push(format!("{}.{}", node.name, p.name));
                    tensors.push(Tensor::zeros(p.tensor.shape()));
                }
            } else {
                for (p, g) in params.into_iter().zip(dparams.into_iter()) {
                    names.push(format!("{}.{}", node.name, p.name));
                    tensors.push(g);
                }
            }
        }
        let input_grad = node_grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(tape.outputs[0].shape()));
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Gradients {
            input: input_grad,
            names,
            tensors,
            index,
        })
    }

    /// Named parameters in graph order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>, bool)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            for p in node.layer.params() {
                out.push((format!("{}.{}", node.name, p.name), p.tensor, p.decay));
            }
        }
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            for p in node.layer.buffers() {
                out.push((format!("{}.{}", node.name, p.name), p.tensor));
            }
        }
        out
    }

    /// Visits every parameter mutably, in graph order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, bool, &mut Tensor<T>)) {
        for node in &mut self.nodes {
            let name = node.name.clone();
            for p in node.layer.params_mut() {
                f(&format!("{name}.{}", p.name), p.decay, p.tensor);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t, _)| t.numel()).sum()
    }

    /// Output shape of every node for a given input shape.
    pub fn infer_shapes(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            if id == 0 {
                shapes.push(input_shape.to_vec());
                continue;
            }
            let ins: Vec<Vec<usize>> = node.inputs.iter().map(|&p| shapes[p].clone()).collect();
            let s = node.layer.out_shape(&ins).map_err(|e| {
                Error::Graph(format!("shape at node {}: {e}", node.name))
            })?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Serialises parameters and buffers (running statistics) to the named
    /// tensor checkpoint format.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, &Tensor<T>)> = Vec::new();
        for (name, t, _) in self.named_params() {
            entries.push((name, t));
        }
        for (name, t) in self.named_buffers() {
            entries.push((name, t));
        }
        io::write_checkpoint_bytes(&entries)
    }

    pub fn save_checkpoint<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = io::read_checkpoint_bytes::<T>(bytes)?;
        let mut by_name: HashMap<String, Tensor<T>> = entries
            .into_iter()
            .map(|(m, t)| (m.name, t))
            .collect();
        let mut missing = Vec::new();
        let restore = |name: &str, p: ParamMutRef<'_, T>, by_name: &mut HashMap<String, Tensor<T>>, missing: &mut Vec<String>| -> Result<()> {
            let key = format!("{name}.{}", p.name);
            match by_name.remove(&key) {
                Some(t) => {
                    if t.shape() != p.tensor.shape() {
                        return Err(Error::ShapeMismatch(format!(
                            "checkpoint {key}: {:?} vs {:?}",
                            t.shape(),
                            p.tensor.shape()
                        )));
                    }
                    *p.tensor = t;
                }
                None => missing.push(key),
            }
            Ok(())
        };
        for node in &mut self.nodes {
            let name = node.name.clone();
            for p in node.layer.params_mut() {
                restore(&name, p, &mut by_name, &mut missing)?;
            }
            for p in node.layer.buffers_mut() {
                restore(&name, p, &mut by_name, &mut missing)?;
            }
        }
        if !missing.is_empty() {
            return Err(Error::Format(format!(
                "checkpoint missing tensors: {missing:?}"
            )));
        }
        if !by_name.is_empty() {
            let extra: Vec<_> = by_name.keys().cloned().collect();
            return Err(Error::Format(format!("checkpoint has extra tensors: {extra:?}")));
        }
        Ok(())
    }

    pub fn load_checkpoint<P: AsRef<std::path::Path>>(&mut self, path: P) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.load_checkpoint_bytes(&bytes)
    }
}
