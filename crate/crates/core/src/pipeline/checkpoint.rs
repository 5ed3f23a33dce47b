//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `LGENETv1`, `u32` version, config TOML,
//! class names, intensity scale, epoch, generator state, both kernel
//! layouts, element width, then every parameter (name, shape, value,
//! momentum) and every running-statistics buffer (name, mean, variance).
//! Strings are `u32` length plus UTF-8 bytes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::network::Network;
use crate::error::{Error, Result};
use crate::kernel::KernelLayout;
use crate::tensor::{ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LGENETv1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained or in-training model with everything needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: Config,
    pub classes: Vec<String>,
    pub intensity_max: f64,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub network: Network,
    pub store: ParamStore<T>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn reals<T: Real>(&mut self, v: &[T]) {
        self.u64(v.len() as u64);
        for &x in v {
            x.write_le(&mut self.0);
        }
    }
    fn layout(&mut self, l: &KernelLayout) {
        self.u32(l.dim as u32);
        self.u32(l.points.len() as u32);
        self.f64(l.energy);
        self.u8(l.converged as u8);
        for p in &l.points {
            p.iter().for_each(|&c| self.f64(c));
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
    fn reals<T: Real>(&mut self) -> Result<Vec<T>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
    fn layout(&mut self) -> Result<KernelLayout> {
        let dim = self.u32()? as usize;
        let k = self.u32()? as usize;
        let energy = self.f64()?;
        let converged = self.u8()? != 0;
        let mut points = Vec::with_capacity(k.min(1 << 16));
        for _ in 0..k {
            points.push([self.f64()?, self.f64()?, self.f64()?]);
        }
        Ok(KernelLayout {
            dim,
            points,
            energy,
            converged,
        })
    }
}

impl<T: Real> Checkpoint<T> {
    /// Fresh model with initialized parameters.
    pub fn initialize(config: Config, classes: Vec<String>, intensity_max: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let network = Network::new(&config.network, classes.len(), &mut store, &mut rng)?;
        Ok(Checkpoint {
            config,
            classes,
            intensity_max,
            epoch: 0,
            rng,
            network,
            store,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config.to_toml());
        w.u32(self.classes.len() as u32);
        self.classes.iter().for_each(|c| w.str(c));
        w.f64(self.intensity_max);
        w.u64(self.epoch as u64);
        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.0.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        w.layout(&self.network.layout3);
        w.layout(&self.network.layout2);
        w.u8(T::BYTES as u8);
        w.u32(self.store.params().len() as u32);
        for p in self.store.params() {
            w.str(&p.name);
            w.u32(p.value.shape().len() as u32);
            p.value.shape().iter().for_each(|&d| w.u64(d as u64));
            w.reals(p.value.data());
            w.reals(p.momentum.data());
        }
        w.u32(self.store.buffers().len() as u32);
        for b in self.store.buffers() {
            w.str(&b.name);
            w.reals(&b.mean);
            w.reals(&b.var);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = Config::from_toml(&r.str()?)?;
        let nc = r.u32()? as usize;
        let classes = (0..nc).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let intensity_max = r.f64()?;
        let epoch = r.u64()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let layout3 = r.layout()?;
        let layout2 = r.layout()?;
        let width = r.u8()? as usize;
        if width != T::BYTES {
            return Err(Error::Format(format!(
                "checkpoint stores {width}-byte values, expected {}",
                T::BYTES
            )));
        }
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(0);
        let network = Network::build(&config.network, classes.len(), layout3, layout2, &mut store, &mut init_rng)?;
        let np = r.u32()? as usize;
        if np != store.params().len() {
            return Err(Error::Format(format!(
                "checkpoint has {np} parameters, the configured network {}",
                store.params().len()
            )));
        }
        for p in store.params_mut() {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if name != p.name || shape != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` {shape:?} does not match `{}` {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(shape.clone(), r.reals()?)?;
            p.momentum = Tensor::new(shape, r.reals()?)?;
        }
        let nb = r.u32()? as usize;
        if nb != store.buffers().len() {
            return Err(Error::Format(format!("checkpoint has {nb} buffers")));
        }
        for b in store.buffers_mut() {
            let name = r.str()?;
            let mean = r.reals()?;
            let var = r.reals()?;
            if name != b.name || mean.len() != b.mean.len() || var.len() != b.var.len() {
                return Err(Error::Format(format!("buffer `{name}` does not match `{}`", b.name)));
            }
            b.mean = mean;
            b.var = var;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            classes,
            intensity_max,
            epoch,
            rng,
            network,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("write checkpoint {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("read checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn round_trip_is_bitwise() {
        let mut cfg = Config::desk();
        cfg.network.widths = vec![8, 8, 16];
        let mut ck = Checkpoint::<f32>::initialize(cfg, vec!["a".into(), "b".into()], 255.0).unwrap();
        ck.epoch = 3;
        ck.rng.next_u64();
        ck.store.params_mut()[0].momentum.fill(0.25);
        ck.store.buffers_mut()[0].mean[0] = 1.5;
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.store, ck.store);
        assert_eq!(back.network, ck.network);
        assert_eq!(back.rng, ck.rng);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ck = Checkpoint::<f32>::initialize(Config::desk(), vec!["a".into(), "b".into()], 255.0).unwrap();
        let bytes = ck.to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
    }
}
