//! Assignment of `M` parameter blocks to the `N` layer positions of a stack.
//!
//! Layer positions and block indices are 1-based in everything this module
//! exposes. The same procedure is applied to the encoder and the decoder
//! independently; the two stacks never share blocks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("total layers must be at least 1")]
    NoLayers,
    #[error("independent blocks must be at least 1")]
    NoBlocks,
    #[error("independent blocks ({blocks}) exceed total layers ({layers})")]
    TooManyBlocks { layers: usize, blocks: usize },
    #[error(
        "indivisible sequence plan: {blocks} blocks do not divide {layers} layers; \
         the run length floor({layers}/{blocks}) = {run} would open {opened} blocks instead of {blocks}"
    )]
    IndivisibleSequence {
        layers: usize,
        blocks: usize,
        run: usize,
        opened: usize,
    },
    #[error("unknown sharing strategy `{0}` (expected sequence, cycle or cycle_rev)")]
    UnknownStrategy(String),
    #[error("malformed plan line {line}: `{text}`")]
    MalformedLine { line: usize, text: String },
    #[error("plan does not match the {strategy} assignment for N={layers}, M={blocks}")]
    Mismatch {
        strategy: ShareStrategy,
        layers: usize,
        blocks: usize,
    },
}

/// How blocks are laid out over the depth of a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareStrategy {
    /// Each block covers a contiguous run of `N / M` layers.
    Sequence,
    /// Blocks `1..=M` repeated in order.
    Cycle,
    /// Like `Cycle`, except the final round runs `M..=1` backwards.
    CycleRev,
}

impl ShareStrategy {
    pub const ALL: [ShareStrategy; 3] = [
        ShareStrategy::Sequence,
        ShareStrategy::Cycle,
        ShareStrategy::CycleRev,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShareStrategy::Sequence => "sequence",
            ShareStrategy::Cycle => "cycle",
            ShareStrategy::CycleRev => "cycle_rev",
        }
    }
}

impl fmt::Display for ShareStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShareStrategy {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "sequence" => Ok(ShareStrategy::Sequence),
            "cycle" => Ok(ShareStrategy::Cycle),
            "cycle_rev" | "cycle(rev)" | "cycle_(rev)" | "cyclerev" => Ok(ShareStrategy::CycleRev),
            _ => Err(PlanError::UnknownStrategy(s.to_string())),
        }
    }
}

/// Layer position to parameter block map for one stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAssignment {
    #[serde(rename = "N")]
    total_layers: usize,
    #[serde(rename = "M")]
    independent_layers: usize,
    strategy: ShareStrategy,
    blocks: Vec<usize>,
}

/// Builds the block assignment for a stack of `total_layers` positions that
/// owns `independent_layers` parameter blocks.
///
/// `Sequence` additionally requires `M | N`: with a remainder, runs of
/// `floor(N/M)` layers open more than `M` blocks.
pub fn build_assignment(
    total_layers: usize,
    independent_layers: usize,
    strategy: ShareStrategy,
) -> Result<LayerAssignment, PlanError> {
    let (n, m) = (total_layers, independent_layers);
    if n == 0 {
        return Err(PlanError::NoLayers);
    }
    if m == 0 {
        return Err(PlanError::NoBlocks);
    }
    if m > n {
        return Err(PlanError::TooManyBlocks { layers: n, blocks: m });
    }

    let blocks = match strategy {
        ShareStrategy::Sequence => {
            let run = n / m;
            if n % m != 0 {
                return Err(PlanError::IndivisibleSequence {
                    layers: n,
                    blocks: m,
                    run,
                    opened: n.div_ceil(run),
                });
            }
            (0..n).map(|i| i / run + 1).collect()
        }
        ShareStrategy::Cycle => (0..n).map(|i| i % m + 1).collect(),
        ShareStrategy::CycleRev => {
            let forward_span = m * (n.div_ceil(m) - 1);
            (0..n)
                .map(|i| {
                    if i < m.max(forward_span) {
                        i % m + 1
                    } else {
                        m - i % m
                    }
                })
                .collect()
        }
    };

    Ok(LayerAssignment {
        total_layers: n,
        independent_layers: m,
        strategy,
        blocks,
    })
}

impl LayerAssignment {
    pub fn total_layers(&self) -> usize {
        self.total_layers
    }

    pub fn independent_layers(&self) -> usize {
        self.independent_layers
    }

    pub fn strategy(&self) -> ShareStrategy {
        self.strategy
    }

    /// 1-based block index of every layer, bottom to top.
    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    /// 0-based block slot used by 0-based layer position `layer`.
    pub fn slot(&self, layer: usize) -> usize {
        self.blocks[layer] - 1
    }

    /// 0-based layer positions served by 0-based block slot `slot`.
    pub fn positions_of(&self, slot: usize) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == slot + 1)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("assignment serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Number of layers each block serves, keyed by 1-based block index.
pub fn block_usage_counts(assignment: &LayerAssignment) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for &b in &assignment.blocks {
        *counts.entry(b).or_insert(0) += 1;
    }
    counts
}

/// One `layer i → block b` line per layer.
pub fn render_plan(assignment: &LayerAssignment) -> String {
    assignment
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| format!("layer {} → block {}", i + 1, b))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Reads text produced by [`render_plan`] back into an assignment, checking it
/// against the plan `strategy` would build for the same `N` and `M`.
pub fn parse_plan(text: &str, strategy: ShareStrategy) -> Result<LayerAssignment, PlanError> {
    let mut blocks = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let malformed = || PlanError::MalformedLine {
            line: idx + 1,
            text: line.to_string(),
        };
        let (lhs, rhs) = line.split_once('→').ok_or_else(malformed)?;
        let layer: usize = lhs
            .trim()
            .strip_prefix("layer")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(malformed)?;
        let block: usize = rhs
            .trim()
            .strip_prefix("block")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(malformed)?;
        if layer != idx + 1 {
            return Err(malformed());
        }
        blocks.push(block);
    }
    let n = blocks.len();
    let m = blocks.iter().copied().max().unwrap_or(0);
    let expected = build_assignment(n, m, strategy)?;
    if expected.blocks != blocks {
        return Err(PlanError::Mismatch {
            strategy,
            layers: n,
            blocks: m,
        });
    }
    Ok(expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ShareStrategy::*;

    fn plan(n: usize, m: usize, s: ShareStrategy) -> Vec<usize> {
        build_assignment(n, m, s).unwrap().blocks().to_vec()
    }

    #[test]
    fn figure_one_examples() {
        assert_eq!(plan(6, 3, Sequence), [1, 1, 2, 2, 3, 3]);
        assert_eq!(plan(6, 3, Cycle), [1, 2, 3, 1, 2, 3]);
        assert_eq!(plan(6, 3, CycleRev), [1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn degenerate_plans() {
        for s in ShareStrategy::ALL {
            assert_eq!(plan(6, 6, s), [1, 2, 3, 4, 5, 6]);
            assert_eq!(plan(6, 1, s), [1; 6]);
        }
    }

    #[test]
    fn hand_traced_plans() {
        assert_eq!(plan(12, 6, Cycle), [1, 2, 3, 4, 5, 6, 1, 2, 3, 4, 5, 6]);
        assert_eq!(
            plan(18, 6, CycleRev),
            [1, 2, 3, 4, 5, 6, 1, 2, 3, 4, 5, 6, 6, 5, 4, 3, 2, 1]
        );
        assert_eq!(plan(6, 4, CycleRev), [1, 2, 3, 4, 4, 3]);
    }

    #[test]
    fn rejects_bad_block_counts() {
        assert_eq!(build_assignment(4, 0, Cycle), Err(PlanError::NoBlocks));
        assert_eq!(build_assignment(0, 0, Cycle), Err(PlanError::NoLayers));
        assert_eq!(
            build_assignment(3, 4, CycleRev),
            Err(PlanError::TooManyBlocks { layers: 3, blocks: 4 })
        );
    }

    #[test]
    fn indivisible_sequence_is_its_own_error() {
        let err = build_assignment(7, 3, Sequence).unwrap_err();
        assert_eq!(
            err,
            PlanError::IndivisibleSequence {
                layers: 7,
                blocks: 3,
                run: 2,
                opened: 4
            }
        );
        assert!(err.to_string().contains("indivisible sequence plan"));
        // cycle variants are well defined without divisibility
        assert_eq!(plan(7, 3, Cycle), [1, 2, 3, 1, 2, 3, 1]);
        assert_eq!(plan(7, 3, CycleRev), [1, 2, 3, 1, 2, 3, 3]);
    }

    #[test]
    fn usage_counts() {
        let counts = |b: &[usize]| {
            let a = LayerAssignment {
                total_layers: b.len(),
                independent_layers: *b.iter().max().unwrap(),
                strategy: Cycle,
                blocks: b.to_vec(),
            };
            block_usage_counts(&a).into_iter().collect::<Vec<_>>()
        };
        assert_eq!(counts(&[1, 1, 2, 2, 3, 3]), [(1, 2), (2, 2), (3, 2)]);
        assert_eq!(counts(&[1, 2, 3, 3, 2, 1]), [(1, 2), (2, 2), (3, 2)]);
        assert_eq!(counts(&[1, 1, 1]), [(1, 3)]);
    }

    #[test]
    fn render_and_parse() {
        let a = build_assignment(2, 1, Sequence).unwrap();
        assert_eq!(render_plan(&a), "layer 1 → block 1\nlayer 2 → block 1");

        let a = build_assignment(6, 3, Cycle).unwrap();
        let text = render_plan(&a);
        assert_eq!(text.lines().count(), 6);
        assert_eq!(parse_plan(&text, Cycle).unwrap(), a);
        assert!(matches!(
            parse_plan(&text, CycleRev),
            Err(PlanError::Mismatch { .. })
        ));
        assert!(matches!(
            parse_plan("layer 1 -> block 1", Cycle),
            Err(PlanError::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn json_uses_stable_keys() {
        let a = build_assignment(6, 3, CycleRev).unwrap();
        assert_eq!(
            a.to_json(),
            r#"{"N":6,"M":3,"strategy":"cycle_rev","blocks":[1,2,3,3,2,1]}"#
        );
        assert_eq!(LayerAssignment::from_json(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn strategy_names_parse() {
        assert_eq!("cycle_rev".parse::<ShareStrategy>().unwrap(), CycleRev);
        assert_eq!("CYCLE (REV)".parse::<ShareStrategy>().unwrap(), CycleRev);
        assert_eq!("Sequence".parse::<ShareStrategy>().unwrap(), Sequence);
        assert!("zigzag".parse::<ShareStrategy>().is_err());
    }
}
