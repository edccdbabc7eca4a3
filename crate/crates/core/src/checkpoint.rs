//! Binary checkpoints.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MFGNCKPT"
//! 8       4     format version (u32, currently 1)
//! 12      4     spatial dimension d (u32)
//! 16      4     network width (u32)
//! 20      4     hidden layers (u32)
//! 24      8     skip weight (f64)
//! 32      8     seed (u64)
//! 40      8     iteration (u64)
//! 48      16    training stream word position (u128)
//! 64      1     value kind: 0 network, 1 closed form
//! 65      1     optimizer state present: 0 or 1
//! 66      6     zero padding
//! 72      8     closed-form alpha (f64, 0 for a network)
//! 80      8     value parameter count n_v (u64, 0 for closed form)
//! 88      8     generator parameter count n_g (u64)
//! 96      ..    n_v value parameters, then n_g generator parameters (f64)
//! then, when optimizer state is present:
//!         value m (n_v f64), value v (n_v f64), value step (u64),
//!         generator m (n_g f64), generator v (n_g f64), generator step (u64)
//! ```
//!
//! Parameters follow the flat layout of [`NetworkParams`]: per layer the
//! weight matrix in row-major order, then the bias.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::networks::{NetworkParams, ResNetConfig, Role, ValueModel};
use crate::trainer::{stream_rng, streams, AdamState, TrainSettings, TrainerState};

pub const MAGIC: &[u8; 8] = b"MFGNCKPT";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dim: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub skip_weight: f64,
    pub seed: u64,
    pub iteration: u64,
    pub word_pos: u128,
    pub value: ValueModel,
    pub generator: NetworkParams,
    pub optimizer: Option<(AdamState, AdamState)>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainerState) -> Self {
        let g = &state.generator.config;
        Checkpoint {
            dim: g.output_dim,
            width: g.width,
            hidden_layers: g.hidden_layers,
            skip_weight: g.skip_weight,
            seed: state.settings.seed,
            iteration: state.iteration,
            word_pos: state.rng.get_word_pos(),
            value: state.value.clone(),
            generator: state.generator.clone(),
            optimizer: Some((state.value_adam.clone(), state.generator_adam.clone())),
        }
    }

    /// Rebuilds a trainer state; hyperparameters come from `settings`.
    pub fn into_state(self, settings: TrainSettings) -> Result<TrainerState> {
        if settings.seed != self.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written with seed {} but the run uses seed {}",
                self.seed, settings.seed
            )));
        }
        let mut state = TrainerState::from_parts(self.value, self.generator, settings);
        state.iteration = self.iteration;
        if let Some((va, ga)) = self.optimizer {
            state.value_adam.m = va.m;
            state.value_adam.v = va.v;
            state.value_adam.step = va.step;
            state.generator_adam.m = ga.m;
            state.generator_adam.v = ga.v;
            state.generator_adam.step = ga.step;
        }
        let mut rng: ChaCha8Rng = stream_rng(self.seed, streams::TRAINING);
        rng.set_word_pos(self.word_pos);
        state.rng = rng;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.dim, self.width, self.hidden_layers] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.skip_weight.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.word_pos.to_le_bytes());
        let (kind, alpha, values): (u8, f64, &[f64]) = match &self.value {
            ValueModel::Network(p) => (0, 0.0, p.as_slice()),
            ValueModel::ClosedForm { alpha } => (1, *alpha, &[]),
        };
        out.push(kind);
        out.push(self.optimizer.is_some() as u8);
        out.extend_from_slice(&[0; 6]);
        out.extend_from_slice(&alpha.to_le_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.generator.len() as u64).to_le_bytes());
        let put = |out: &mut Vec<u8>, xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(&mut out, values);
        put(&mut out, self.generator.as_slice());
        if let Some((va, ga)) = &self.optimizer {
            for a in [va, ga] {
                put(&mut out, &a.m);
                put(&mut out, &a.v);
                out.extend_from_slice(&a.step.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let dim = r.u32()? as usize;
        let width = r.u32()? as usize;
        let hidden_layers = r.u32()? as usize;
        let skip_weight = r.f64()?;
        let seed = r.u64()?;
        let iteration = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let kind = r.take(1)?[0];
        let has_opt = r.take(1)?[0];
        r.take(6)?;
        let alpha = r.f64()?;
        let n_v = r.u64()? as usize;
        let n_g = r.u64()? as usize;

        let vcfg = ResNetConfig {
            skip_weight,
            ..ResNetConfig::value(dim).with_width(width, hidden_layers)
        };
        let gcfg = ResNetConfig {
            skip_weight,
            ..ResNetConfig::generator(dim).with_width(width, hidden_layers)
        };
        let value = match kind {
            0 => ValueModel::Network(NetworkParams::from_flat(vcfg, Role::Value, r.reals(n_v)?)?),
            1 if n_v == 0 => ValueModel::ClosedForm { alpha },
            _ => return Err(Error::Checkpoint(format!("bad value kind {kind} with {n_v} parameters"))),
        };
        let generator = NetworkParams::from_flat(gcfg, Role::Generator, r.reals(n_g)?)?;
        let optimizer = match has_opt {
            0 => None,
            1 => {
                let mut read_adam = |n: usize, lr: f64| -> Result<AdamState> {
                    let m = r.reals(n)?;
                    let v = r.reals(n)?;
                    let step = r.u64()?;
                    let mut a = AdamState::new(crate::trainer::AdamConfig::new(lr), n);
                    a.m = m;
                    a.v = v;
                    a.step = step;
                    Ok(a)
                };
                let va = read_adam(n_v, 4e-4)?;
                let ga = read_adam(n_g, 1e-4)?;
                Some((va, ga))
            }
            _ => return Err(Error::Checkpoint("bad optimizer flag".into())),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            dim,
            width,
            hidden_layers,
            skip_weight,
            seed,
            iteration,
            word_pos,
            value,
            generator,
            optimizer,
        })
    }

    /// Writes through a temporary file and a rename so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
