//! JSON snapshot of stack weights. Floats are written in shortest round-trip
//! form, so save followed by load reproduces every weight bit for bit.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{AttentionKind, AttentionLayer, IterationLayers, StackWeights};
use crate::embedding::EmbeddingWeights;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{MatrixRecord, ProjectionSet};

pub const SNAPSHOT_FORMAT: &str = "cmha-stack-weights/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    kind: AttentionKind,
    seed: u64,
    /// `w_q, w_k, w_v, w_g, w_f` in that order.
    matrices: Vec<MatrixRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackSnapshot {
    format: String,
    d: usize,
    n_iters: usize,
    seed: u64,
    embedding: Vec<MatrixRecord>,
    layers: Vec<LayerRecord>,
}

impl StackSnapshot {
    pub fn capture<T: Real>(w: &StackWeights<T>) -> Self {
        let layer = |l: &AttentionLayer<T>| LayerRecord {
            kind: l.kind,
            seed: l.proj.seed,
            matrices: l.proj.matrices().into_iter().map(MatrixRecord::from).collect(),
        };
        Self {
            format: SNAPSHOT_FORMAT.to_owned(),
            d: w.d(),
            n_iters: w.n_iters(),
            seed: w.seed,
            embedding: w.embedding.records(),
            layers: w
                .iterations
                .iter()
                .flat_map(|it| [layer(&it.self_attn), layer(&it.aggregation), layer(&it.cross)])
                .collect(),
        }
    }

    pub fn restore<T: Real>(&self) -> Result<StackWeights<T>> {
        if self.format != SNAPSHOT_FORMAT {
            return Err(Error::parse("weight snapshot", format!("unknown format {:?}", self.format)));
        }
        if self.layers.len() != 3 * self.n_iters {
            return Err(Error::parse(
                "weight snapshot",
                format!("{} layers for {} iterations", self.layers.len(), self.n_iters),
            ));
        }
        let layer = |r: &LayerRecord, expected: AttentionKind| -> Result<AttentionLayer<T>> {
            if r.kind != expected {
                return Err(Error::parse("weight snapshot", format!("expected {expected:?} layer, found {:?}", r.kind)));
            }
            let [q, k, v, g, f] = r.matrices.as_slice() else {
                return Err(Error::parse("weight snapshot", "a layer needs exactly 5 matrices"));
            };
            let proj = ProjectionSet {
                w_q: q.to_matrix()?,
                w_k: k.to_matrix()?,
                w_v: v.to_matrix()?,
                w_g: g.to_matrix()?,
                w_f: f.to_matrix()?,
                seed: r.seed,
            };
            if proj.dim() != self.d {
                return Err(Error::parse("weight snapshot", format!("layer width {} != header d {}", proj.dim(), self.d)));
            }
            AttentionLayer::new(expected, proj)
        };
        let iterations = self
            .layers
            .chunks(3)
            .map(|c| {
                Ok(IterationLayers {
                    self_attn: layer(&c[0], AttentionKind::SelfAttention)?,
                    aggregation: layer(&c[1], AttentionKind::Aggregation)?,
                    cross: layer(&c[2], AttentionKind::Cross)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let embedding = EmbeddingWeights::from_records(&self.embedding)?;
        if embedding.w_d.shape() != (self.d, self.d) {
            return Err(Error::parse("weight snapshot", "embedding weights do not match header d"));
        }
        Ok(StackWeights {
            seed: self.seed,
            embedding,
            iterations,
        })
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::HybridStackConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = HybridStackConfig {
            n_iters: 2,
            ..Default::default()
        };
        let w = StackWeights::<f64>::init(&cfg, 42).unwrap();
        let mut buf = Vec::new();
        StackSnapshot::capture(&w).write(&mut buf).unwrap();
        let back: StackWeights<f64> = StackSnapshot::read(buf.as_slice()).unwrap().restore().unwrap();
        assert_eq!(back, w);
        for (a, b) in back.iterations[1].cross.proj.w_v.as_slice().iter().zip(w.iterations[1].cross.proj.w_v.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_mismatch_rejected() {
        let cfg = HybridStackConfig::default();
        let w = StackWeights::<f64>::init(&cfg, 1).unwrap();
        let mut snap = StackSnapshot::capture(&w);
        snap.n_iters = 5;
        assert!(snap.restore::<f64>().is_err());
    }
}
