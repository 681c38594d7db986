//! Checkpoint container.
//!
//! Layout: magic `MCKP`, u16 version, u16 reserved (0), u32 header length,
//! a JSON header, then every tensor of every group as little-endian f32 in
//! header order. The header echoes the training config and carries the
//! iteration counter, the tensor manifest and the class statistics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ema::TeacherState;
use crate::error::{Error, Result};
use crate::network::{manifest_diff, Network, ParamTensor, ParamVector, TensorInfo};
use crate::trainer::{BranchState, TrainConfig, TrainerState};
use crate::weights::{ClassStats, ClassWeights};

pub const MAGIC: &[u8; 4] = b"MCKP";
pub const VERSION: u16 = 1;

/// Parameter groups, in payload order.
pub const GROUPS: [&str; 6] = [
    "a.student",
    "a.teacher",
    "a.velocity",
    "b.student",
    "b.teacher",
    "b.velocity",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    /// Number of completed iterations.
    iteration: u64,
    groups: Vec<String>,
    tensors: Vec<TensorInfo>,
    stats: ClassStats,
    weights: ClassWeights,
}

/// A decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainerState,
}

fn groups(state: &TrainerState) -> [&ParamVector; 6] {
    [
        &state.a.student,
        &state.a.teacher.params,
        &state.a.velocity,
        &state.b.student,
        &state.b.teacher.params,
        &state.b.velocity,
    ]
}

impl Checkpoint {
    pub fn encode(config: &TrainConfig, state: &TrainerState) -> Result<Vec<u8>> {
        let gs = groups(state);
        for g in &gs[1..] {
            gs[0].check_layout(g)?;
        }
        let header = Header {
            config: config.clone(),
            iteration: state.iter,
            groups: GROUPS.iter().map(|s| s.to_string()).collect(),
            tensors: gs[0].manifest(),
            stats: state.stats.clone(),
            weights: state.weights.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * 6 * gs[0].len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for g in gs {
            for v in g.iter_values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(err("not a checkpoint (bad magic or truncated header)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(err("header truncated".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| err(format!("bad header: {e}")))?;
        if header.groups != GROUPS {
            return Err(err(format!("unexpected groups {:?}", header.groups)));
        }
        let per_group: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let payload = &body[hlen..];
        let want = per_group * GROUPS.len() * 4;
        if payload.len() != want {
            return Err(err(format!("payload is {} bytes, expected {want}", payload.len())));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut read_group = || -> Result<ParamVector> {
            let tensors = header
                .tensors
                .iter()
                .map(|t| {
                    let n = t.shape.iter().product();
                    ParamTensor {
                        name: t.name.clone(),
                        shape: t.shape.clone(),
                        data: values.by_ref().take(n).collect(),
                    }
                })
                .collect();
            ParamVector::new(tensors)
        };
        let mut branch = || -> Result<BranchState> {
            Ok(BranchState {
                student: read_group()?,
                teacher: TeacherState { params: read_group()? },
                velocity: read_group()?,
            })
        };
        let a = branch()?;
        let b = branch()?;
        Ok(Checkpoint {
            config: header.config,
            state: TrainerState {
                iter: header.iteration,
                a,
                b,
                stats: header.stats,
                weights: header.weights,
            },
        })
    }

    pub fn save(config: &TrainConfig, state: &TrainerState, path: &Path) -> Result<()> {
        let bytes = Checkpoint::encode(config, state)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }

    /// Fail with a manifest diff unless the stored tensors fit `net`.
    pub fn check_network(&self, net: &Network, path: &Path) -> Result<()> {
        let want = net.manifest();
        let got = self.state.a.student.manifest();
        if want != got {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("tensor manifest does not match the network:\n{}", manifest_diff(&want, &got)),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::trainer::init_state;

    fn state() -> (TrainConfig, TrainerState) {
        let mut cfg = TrainConfig::default();
        cfg.network = NetworkConfig::new(3, 2);
        let mut s = init_state(&cfg, vec![10, 5, 1]).unwrap();
        s.iter = 17;
        s.stats.ema_dice = vec![0.1, 0.123_456_789_012_345_67, 0.9];
        (cfg, s)
    }

    #[test]
    fn round_trip_is_exact() {
        let (cfg, s) = state();
        let bytes = Checkpoint::encode(&cfg, &s).unwrap();
        let back = Checkpoint::decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.state, s);
        assert_eq!(Checkpoint::encode(&back.config, &back.state).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_rejected() {
        let (cfg, s) = state();
        let bytes = Checkpoint::encode(&cfg, &s).unwrap();
        let p = Path::new("mem");
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 4], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(Checkpoint::decode(&bad, p).is_err());
        assert!(Checkpoint::decode(&bytes[..20], p).is_err());
    }

    #[test]
    fn network_mismatch_reports_diff() {
        let (cfg, s) = state();
        let ck = Checkpoint {
            config: cfg,
            state: s,
        };
        let net = Network::new(NetworkConfig::new(4, 2)).unwrap();
        let msg = ck.check_network(&net, Path::new("c.ckpt")).unwrap_err().to_string();
        assert!(msg.contains("head"), "{msg}");
        ck.check_network(&Network::new(NetworkConfig::new(3, 2)).unwrap(), Path::new("c")).unwrap();
    }
}
