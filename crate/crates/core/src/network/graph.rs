use crate::reparam::ConvKind;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKind {
    PillarEncode,
    Conv {
        kind: ConvKind,
        kernel: usize,
        cin: usize,
        cout: usize,
        relu: bool,
    },
    /// Sum of the parallel 3x3 and 1x1 convolutions of a training-form layer.
    BranchSum,
    Relu,
    /// Addition of a tensor from an earlier point in the graph: identity
    /// branches in training form and the multi-scale fusion. `factor` is the
    /// stride ratio of the added tensor.
    ResidualAdd { factor: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    pub name: String,
    pub op: OpKind,
}

impl GraphNode {
    pub fn new(name: impl Into<String>, op: OpKind) -> Self {
        Self { name: name.into(), op }
    }

    pub fn is_residual(&self) -> bool {
        matches!(self.op, OpKind::ResidualAdd { .. })
    }
}

/// One executed node with the number of active output sites it produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub node: GraphNode,
    pub active: usize,
}

pub fn residual_count(nodes: &[GraphNode]) -> usize {
    nodes.iter().filter(|n| n.is_residual()).count()
}

pub(crate) fn align_node(cin: usize, cout: usize) -> GraphNode {
    GraphNode::new(
        "align",
        OpKind::Conv {
            kind: ConvKind::Submanifold,
            kernel: 1,
            cin,
            cout,
            relu: false,
        },
    )
}

/// The two multi-scale additions, adding stage 3 then stage 4.
pub(crate) fn fusion_node(step: usize) -> GraphNode {
    GraphNode::new(format!("fuse{step}"), OpKind::ResidualAdd { factor: 1 << step })
}
