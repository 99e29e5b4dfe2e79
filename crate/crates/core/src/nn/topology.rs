//! Temporal layer graph used for receptive-field analysis.

use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Topology {
    /// Pointwise in time.
    Identity,
    /// Convolution along time (frequency taps do not matter here).
    Layer {
        name: String,
        kernel: usize,
        dilation: usize,
        pad_lo: usize,
        transposed: bool,
    },
    /// Statistics pooled over the whole utterance.
    Global { name: String },
    Seq(Vec<Topology>),
    /// Branches whose outputs are merged elementwise or concatenated.
    Parallel(Vec<Topology>),
}

/// Frame count that may be unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Extent {
    Finite(usize),
    Unbounded,
}

impl Extent {
    fn plus(self, other: Extent) -> Self {
        match (self, other) {
            (Extent::Finite(a), Extent::Finite(b)) => Extent::Finite(a + b),
            _ => Extent::Unbounded,
        }
    }

    pub fn finite(self) -> Option<usize> {
        match self {
            Extent::Finite(v) => Some(v),
            Extent::Unbounded => None,
        }
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extent::Finite(v) => write!(f, "{v}"),
            Extent::Unbounded => write!(f, "unbounded"),
        }
    }
}

/// Past and future context of one output frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub past: Extent,
    pub future: Extent,
}

impl Span {
    pub const ZERO: Span = Span {
        past: Extent::Finite(0),
        future: Extent::Finite(0),
    };
}

impl Topology {
    /// Input-frame interval an output frame depends on, by interval
    /// propagation through the graph.
    pub fn span(&self) -> Span {
        match self {
            Topology::Identity => Span::ZERO,
            Topology::Global { .. } => Span {
                past: Extent::Unbounded,
                future: Extent::Unbounded,
            },
            Topology::Layer {
                kernel,
                dilation,
                pad_lo,
                transposed,
                ..
            } => {
                let reach = (kernel - 1) * dilation;
                if *transposed {
                    // out[u] gathers in[u + pad_lo - k*d]
                    Span {
                        past: Extent::Finite(reach.saturating_sub(*pad_lo)),
                        future: Extent::Finite(*pad_lo),
                    }
                } else {
                    // out[t] gathers in[t - pad_lo + k*d]
                    Span {
                        past: Extent::Finite(*pad_lo),
                        future: Extent::Finite(reach.saturating_sub(*pad_lo)),
                    }
                }
            }
            Topology::Seq(items) => items.iter().fold(Span::ZERO, |acc, t| {
                let s = t.span();
                Span {
                    past: acc.past.plus(s.past),
                    future: acc.future.plus(s.future),
                }
            }),
            Topology::Parallel(branches) => branches.iter().fold(Span::ZERO, |acc, t| {
                let s = t.span();
                Span {
                    past: acc.past.max(s.past),
                    future: acc.future.max(s.future),
                }
            }),
        }
    }

    /// Names of layers that see future frames on their own.
    pub fn lookahead_layers(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_lookahead(&mut out);
        out
    }

    fn collect_lookahead(&self, out: &mut Vec<String>) {
        match self {
            Topology::Identity => {}
            Topology::Global { name } => out.push(name.clone()),
            Topology::Layer { name, .. } => {
                if self.span().future != Extent::Finite(0) {
                    out.push(name.clone());
                }
            }
            Topology::Seq(v) | Topology::Parallel(v) => v.iter().for_each(|t| t.collect_lookahead(out)),
        }
    }

    pub fn residual(branch: Topology) -> Topology {
        Topology::Parallel(vec![Topology::Identity, branch])
    }
}
