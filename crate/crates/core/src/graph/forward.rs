use super::weights::unit_prefix;
use super::{BlockKind, GraphError, ModelGraph, WeightStore, BN_EPS};
use crate::tensor::{add, concat_channels, conv2d, fold_batchnorm, maxpool2d, silu_inplace, BnParams, ConvParams, Tensor};

/// Three successive stride-1 max pools of size `k`. The outputs equal
/// parallel pools of size `k`, `2k-1` and `3k-2` (5, 9, 13 for `k = 5`).
pub fn pool_pyramid(x: &Tensor, k: usize) -> Result<[Tensor; 3], GraphError> {
    let p = k / 2;
    let p1 = maxpool2d(x, k, 1, p)?;
    let p2 = maxpool2d(&p1, k, 1, p)?;
    let p3 = maxpool2d(&p2, k, 1, p)?;
    Ok([p1, p2, p3])
}

/// A block with batch norm folded into its convolutions, ready to run.
#[derive(Debug, Clone)]
pub struct Block {
    kind: BlockKind,
    units: Vec<ConvParams>,
}

fn conv_act(x: &Tensor, unit: &ConvParams) -> Result<Tensor, GraphError> {
    let mut y = conv2d(x, unit)?;
    silu_inplace(&mut y);
    Ok(y)
}

fn bottleneck(x: &Tensor, cv1: &ConvParams, cv2: &ConvParams, residual: bool) -> Result<Tensor, GraphError> {
    let y = conv_act(&conv_act(x, cv1)?, cv2)?;
    if residual {
        Ok(add(x, &y)?)
    } else {
        Ok(y)
    }
}

fn slot<'a>(store: &'a WeightStore, name: &str) -> Result<&'a [f32], GraphError> {
    store
        .get(name)
        .map(|e| e.data.as_slice())
        .ok_or_else(|| GraphError::MissingSlot(name.to_string()))
}

impl Block {
    /// Uses already-folded convolution parameters, one per conv unit in slot order.
    pub fn with_units(kind: BlockKind, units: Vec<ConvParams>) -> Result<Self, GraphError> {
        let expected = kind.conv_units();
        if expected.len() != units.len() {
            return Err(GraphError::InvalidLayer {
                layer: 0,
                msg: format!("{} needs {} convolutions, got {}", kind.name(), expected.len(), units.len()),
            });
        }
        for (u, p) in expected.iter().zip(&units) {
            p.validate()?;
            if (p.in_channels, p.out_channels, p.kernel, p.stride, p.padding) != (u.cin, u.cout, u.k, u.s, u.p) {
                return Err(GraphError::InvalidLayer {
                    layer: 0,
                    msg: format!("convolution '{}' has the wrong geometry", u.name),
                });
            }
        }
        Ok(Block { kind, units })
    }

    /// Reads the block's slots from `store` and folds batch norm.
    pub fn from_store(layer: usize, kind: &BlockKind, store: &WeightStore) -> Result<Self, GraphError> {
        let mut units = Vec::new();
        for u in kind.conv_units() {
            let prefix = unit_prefix(layer, &u.name);
            let params = if u.bn {
                let conv = ConvParams::new(
                    u.cin,
                    u.cout,
                    u.k,
                    u.s,
                    u.p,
                    slot(store, &format!("{prefix}.conv.weight"))?.to_vec(),
                    vec![0.0; u.cout],
                )?;
                let bn = BnParams {
                    gamma: slot(store, &format!("{prefix}.bn.weight"))?.to_vec(),
                    beta: slot(store, &format!("{prefix}.bn.bias"))?.to_vec(),
                    running_mean: slot(store, &format!("{prefix}.bn.running_mean"))?.to_vec(),
                    running_var: slot(store, &format!("{prefix}.bn.running_var"))?.to_vec(),
                    epsilon: BN_EPS,
                };
                fold_batchnorm(&conv, &bn)?
            } else {
                ConvParams::new(
                    u.cin,
                    u.cout,
                    u.k,
                    u.s,
                    u.p,
                    slot(store, &format!("{prefix}.weight"))?.to_vec(),
                    slot(store, &format!("{prefix}.bias"))?.to_vec(),
                )?
            };
            units.push(params);
        }
        Ok(Block {
            kind: kind.clone(),
            units,
        })
    }

    pub fn kind(&self) -> &BlockKind {
        &self.kind
    }

    pub fn units(&self) -> &[ConvParams] {
        &self.units
    }

    /// Runs a single-output block. Detect heads go through [`Block::forward_heads`].
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GraphError> {
        let u = &self.units;
        let x = inputs.first().copied().ok_or_else(|| GraphError::InvalidLayer {
            layer: 0,
            msg: "block called without inputs".into(),
        })?;
        match self.kind {
            BlockKind::Conv { .. } => conv_act(x, &u[0]),
            BlockKind::Bottleneck { cin, cout, shortcut, .. } => bottleneck(x, &u[0], &u[1], shortcut && cin == cout),
            BlockKind::C3 { n, shortcut, .. } => {
                let mut a = conv_act(x, &u[0])?;
                for i in 0..n {
                    a = bottleneck(&a, &u[3 + 2 * i], &u[4 + 2 * i], shortcut)?;
                }
                let b = conv_act(x, &u[1])?;
                conv_act(&concat_channels(&[&a, &b])?, &u[2])
            }
            BlockKind::C2f { cout, n, shortcut, .. } => {
                let h = cout / 2;
                let y = conv_act(x, &u[0])?;
                let mut parts = vec![y.slice_channels(0, h)?, y.slice_channels(h, 2 * h)?];
                for i in 0..n {
                    let next = bottleneck(&parts[parts.len() - 1], &u[2 + 2 * i], &u[3 + 2 * i], shortcut)?;
                    parts.push(next);
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                conv_act(&concat_channels(&refs)?, &u[1])
            }
            BlockKind::Sppf { k, .. } => {
                let y = conv_act(x, &u[0])?;
                let [p1, p2, p3] = pool_pyramid(&y, k)?;
                conv_act(&concat_channels(&[&y, &p1, &p2, &p3])?, &u[1])
            }
            BlockKind::SppfCsp { k, .. } => {
                let x1 = conv_act(&conv_act(&conv_act(x, &u[0])?, &u[2])?, &u[3])?;
                let [p1, p2, p3] = pool_pyramid(&x1, k)?;
                let pooled = concat_channels(&[&x1, &p1, &p2, &p3])?;
                let y1 = conv_act(&conv_act(&pooled, &u[4])?, &u[5])?;
                let y2 = conv_act(x, &u[1])?;
                conv_act(&concat_channels(&[&y1, &y2])?, &u[6])
            }
            BlockKind::Upsample { .. } => Ok(crate::tensor::upsample_nearest2x(x)),
            BlockKind::Concat { .. } => Ok(concat_channels(inputs)?),
            BlockKind::Detect { .. } => Err(GraphError::InvalidLayer {
                layer: 0,
                msg: "detect head yields three outputs; use forward_heads".into(),
            }),
        }
    }

    /// Raw head logits, one tensor per scale.
    pub fn forward_heads(&self, inputs: &[&Tensor]) -> Result<[Tensor; 3], GraphError> {
        if !matches!(self.kind, BlockKind::Detect { .. }) || inputs.len() != 3 {
            return Err(GraphError::InvalidLayer {
                layer: 0,
                msg: "forward_heads needs a detect block and three inputs".into(),
            });
        }
        Ok([
            conv2d(inputs[0], &self.units[0])?,
            conv2d(inputs[1], &self.units[1])?,
            conv2d(inputs[2], &self.units[2])?,
        ])
    }
}

/// A graph bound to folded weights. Immutable, so one instance can serve
/// concurrent callers.
#[derive(Debug, Clone)]
pub struct Model {
    graph: ModelGraph,
    blocks: Vec<Block>,
    last_use: Vec<usize>,
}

impl Model {
    pub fn new(graph: ModelGraph, store: &WeightStore) -> Result<Self, GraphError> {
        store.check_against(&graph)?;
        let blocks = graph
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| Block::from_store(i, &l.kind, store))
            .collect::<Result<Vec<_>, _>>()?;
        let mut last_use: Vec<usize> = (0..graph.layers().len()).collect();
        for (i, l) in graph.layers().iter().enumerate() {
            for &s in &l.inputs {
                last_use[s] = last_use[s].max(i);
            }
        }
        Ok(Model { graph, blocks, last_use })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    /// Raw head outputs for a `(1, 3, H, W)` image with `H`, `W` multiples of 32.
    pub fn forward(&self, input: &Tensor) -> Result<[Tensor; 3], GraphError> {
        let [n, c, h, w] = input.shape();
        if n != 1 || c != 3 || h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
            return Err(GraphError::BadInput(input.shape()));
        }
        let layers = self.graph.layers();
        let mut outputs: Vec<Option<Tensor>> = vec![None; layers.len()];
        for (i, (layer, block)) in layers.iter().zip(&self.blocks).enumerate() {
            let inputs: Vec<&Tensor> = if layer.inputs.is_empty() {
                vec![input]
            } else {
                layer
                    .inputs
                    .iter()
                    .map(|&s| outputs[s].as_ref().expect("producer output retained until last use"))
                    .collect()
            };
            if matches!(layer.kind, BlockKind::Detect { .. }) {
                return block.forward_heads(&inputs);
            }
            let out = block.forward(&inputs)?;
            drop(inputs);
            for &s in &layer.inputs {
                if self.last_use[s] == i {
                    outputs[s] = None;
                }
            }
            outputs[i] = Some(out);
        }
        Err(GraphError::InvalidLayer {
            layer: layers.len(),
            msg: "graph has no detect head".into(),
        })
    }
}

/// Binds `weights` to `graph` and runs one forward pass.
pub fn forward(graph: &ModelGraph, weights: &WeightStore, input: &Tensor) -> Result<[Tensor; 3], GraphError> {
    Model::new(graph.clone(), weights)?.forward(input)
}
