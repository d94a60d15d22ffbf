//! Forward-pass settings shared by every block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::superpixel::MaskSampling;
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Infer,
}

/// How the expert mixture is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// All experts, weighted by the full router distribution.
    Dense,
    /// Only the `k` highest-weighted experts, renormalized.
    TopK,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub routing: Routing,
    pub sampling: MaskSampling,
}

impl From<Mode> for Pass {
    fn from(mode: Mode) -> Self {
        match mode {
            Mode::Train => Pass {
                routing: Routing::Dense,
                sampling: MaskSampling::Gumbel,
            },
            Mode::Infer => Pass {
                routing: Routing::TopK,
                sampling: MaskSampling::Argmax,
            },
        }
    }
}

/// Expert executions per mixture layer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExpertUsage {
    counts: BTreeMap<String, Vec<u64>>,
}

impl ExpertUsage {
    pub fn record(&mut self, layer: &str, expert: usize, n_experts: usize) {
        let row = self.counts.entry(layer.to_string()).or_insert_with(|| vec![0; n_experts]);
        if row.len() < n_experts {
            row.resize(n_experts, 0);
        }
        row[expert] += 1;
    }

    /// Total expert executions over all layers.
    pub fn executions(&self) -> u64 {
        self.counts.values().flatten().sum()
    }

    pub fn layer(&self, name: &str) -> Option<&[u64]> {
        self.counts.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<u64>)> {
        self.counts.iter()
    }

    pub fn merge(&mut self, other: &ExpertUsage) {
        for (name, row) in &other.counts {
            for (e, &c) in row.iter().enumerate() {
                if c > 0 {
                    let dst = self.counts.entry(name.clone()).or_insert_with(|| vec![0; row.len()]);
                    if dst.len() < row.len() {
                        dst.resize(row.len(), 0);
                    }
                    dst[e] += c;
                }
            }
        }
    }

    /// `layer,expert,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,expert,count\n");
        for (name, row) in &self.counts {
            for (e, c) in row.iter().enumerate() {
                out.push_str(&format!("{name},{e},{c}\n"));
            }
        }
        out
    }
}

/// Mutable state threaded through one forward pass.
pub struct Ctx {
    pub pass: Pass,
    /// Source of Gumbel noise.
    pub rng: Rng,
    pub usage: ExpertUsage,
}

impl Ctx {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Ctx::with_pass(mode.into(), seed)
    }

    pub fn with_pass(pass: Pass, seed: u64) -> Self {
        Ctx {
            pass,
            rng: Rng::new(seed),
            usage: ExpertUsage::default(),
        }
    }
}
