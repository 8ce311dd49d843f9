//! Binary checkpoints: `SAFF`, a u32 format version, then the network,
//! optimizer state, label code, normalization, an optional head and the
//! config hash. All numbers are little-endian; reals are stored as f64.

use std::path::Path;

use saff_core::data::Normalization;
use saff_core::ffnet::{AdamConfig, AdamState, FFLayer, FFNetwork, LayerKind, ResidualLink};
use saff_core::sampling::LabelEmbedder;
use saff_core::training::{Head, HeadTask};
use saff_core::{Error, Scalar, Tensor};

use crate::error::{CliError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAFF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub net: FFNetwork<T>,
    pub embedder: Option<LabelEmbedder>,
    pub normalization: Option<Normalization>,
    pub head: Option<Head<T>>,
    pub config_hash: u64,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn reals<T: Scalar>(&mut self, v: &[T]) {
        v.iter().for_each(|x| self.f64(x.as_f64()));
    }
    fn dims(&mut self, d: &[usize]) {
        self.u32(d.len());
        d.iter().for_each(|&x| self.u32(x));
    }
    fn adam<T: Scalar>(&mut self, cfg: &AdamConfig, st: &AdamState<T>) {
        for v in [cfg.lr, cfg.beta1, cfg.beta2, cfg.eps] {
            self.f64(v);
        }
        self.u64(st.step);
        self.reals(&st.m_weights);
        self.reals(&st.v_weights);
        self.reals(&st.m_bias);
        self.reals(&st.v_bias);
        self.reals(&[st.m_theta, st.v_theta]);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn truncated() -> Error {
    Error::Format("checkpoint is truncated".into())
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], Error> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, Error> {
        Ok(self.take(1)?[0])
    }
    fn flag(&mut self) -> Result<bool, Error> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("flag byte {v}"))),
        }
    }
    fn u32(&mut self) -> Result<usize, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, Error> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn reals<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>, Error> {
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(truncated());
        }
        (0..n).map(|_| self.f64().map(T::of)).collect()
    }
    fn dims(&mut self) -> Result<Vec<usize>, Error> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::Format(format!("tensor rank {rank}")));
        }
        (0..rank).map(|_| self.u32()).collect()
    }
    fn tensor<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>, Error> {
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(truncated)?;
        Tensor::new(shape, self.reals(n)?)
    }
    fn adam<T: Scalar>(&mut self, n_weights: usize, n_bias: usize) -> Result<(AdamConfig, AdamState<T>), Error> {
        let cfg = AdamConfig {
            lr: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
        };
        let step = self.u64()?;
        let mut st = AdamState::new(n_weights, n_bias);
        st.step = step;
        st.m_weights = self.reals(n_weights)?;
        st.v_weights = self.reals(n_weights)?;
        st.m_bias = self.reals(n_bias)?;
        st.v_bias = self.reals(n_bias)?;
        st.m_theta = T::of(self.f64()?);
        st.v_theta = T::of(self.f64()?);
        Ok((cfg, st))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION as usize);
        w.u64(self.config_hash);
        let net = &self.net;
        w.dims(net.input_shape());
        w.u32(net.label_slots);
        w.u32(net.len());
        for (layer, &frozen) in net.layers.iter().zip(&net.frozen) {
            match layer.kind {
                LayerKind::Dense => {
                    w.u8(0);
                    w.u32(0);
                    w.u32(0);
                }
                LayerKind::Conv { stride, padding } => {
                    w.u8(1);
                    w.u32(stride);
                    w.u32(padding);
                }
            }
            w.u8(u8::from(frozen));
            w.u8(u8::from(layer.theta_trainable));
            w.f64(layer.theta.as_f64());
            w.dims(layer.weights.shape());
            w.reals(layer.weights.data());
            w.u32(layer.bias.len());
            w.reals(layer.bias.data());
            w.reals(layer.mask.data());
            w.adam(&layer.adam, &layer.opt);
        }
        w.u32(net.residual_links().len());
        for l in net.residual_links() {
            w.u32(l.source);
            w.u32(l.target);
        }
        match &self.normalization {
            Some(n) => {
                w.u8(1);
                w.f64(n.mean);
                w.f64(n.std);
            }
            None => w.u8(0),
        }
        match &self.embedder {
            Some(e) => {
                w.u8(1);
                w.u32(e.n_classes);
                e.slot_positions.iter().for_each(|&s| w.u32(s));
                w.f64(e.max_intensity);
            }
            None => w.u8(0),
        }
        match &self.head {
            Some(h) => {
                w.u8(1);
                w.u8(match h.task {
                    HeadTask::Classification => 0,
                    HeadTask::Reconstruction => 1,
                });
                w.dims(h.weights.shape());
                w.reals(h.weights.data());
                w.reals(h.bias.data());
                w.adam(&h.adam, &h.opt);
            }
            None => w.u8(0),
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a SAFF checkpoint".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config_hash = r.u64()?;
        let input_shape = r.dims()?;
        let label_slots = r.u32()?;
        let n_layers = r.u32()?;
        let mut layers = Vec::new();
        let mut frozen = Vec::new();
        for _ in 0..n_layers {
            let tag = r.u8()?;
            let (stride, padding) = (r.u32()?, r.u32()?);
            let kind = match tag {
                0 => LayerKind::Dense,
                1 => LayerKind::Conv { stride, padding },
                t => return Err(Error::Format(format!("layer kind {t}"))),
            };
            frozen.push(r.flag()?);
            let trainable = r.flag()?;
            let theta = T::of(r.f64()?);
            let shape = r.dims()?;
            let weights = r.tensor(&shape)?;
            let n_bias = r.u32()?;
            let bias = r.tensor(&[n_bias])?;
            let mask = r.tensor(&shape)?;
            let (adam, opt) = r.adam(weights.len(), n_bias)?;
            layers.push(FFLayer::from_parts(kind, weights, bias, theta, trainable, mask, adam, opt)?);
        }
        let links = (0..r.u32()?)
            .map(|_| Ok(ResidualLink { source: r.u32()?, target: r.u32()? }))
            .collect::<Result<Vec<_>, Error>>()?;
        let mut net = FFNetwork::new(&input_shape, layers, links, label_slots)?;
        net.frozen = frozen;
        let normalization = if r.flag()? {
            Some(Normalization { mean: r.f64()?, std: r.f64()? })
        } else {
            None
        };
        let embedder = if r.flag()? {
            let n = r.u32()?;
            let slots = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, Error>>()?;
            Some(LabelEmbedder::with_slots(n, slots, r.f64()?)?)
        } else {
            None
        };
        let head = if r.flag()? {
            let task = match r.u8()? {
                0 => HeadTask::Classification,
                1 => HeadTask::Reconstruction,
                t => return Err(Error::Format(format!("head task {t}"))),
            };
            let shape = r.dims()?;
            if shape.len() != 2 {
                return Err(Error::Format(format!("head weight shape {shape:?}")));
            }
            let weights = r.tensor(&shape)?;
            let bias = r.tensor(&[shape[1]])?;
            let (adam, opt) = r.adam(weights.len(), shape[1])?;
            Some(Head { task, weights, bias, adam, opt })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            net,
            embedder,
            normalization,
            head,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}
