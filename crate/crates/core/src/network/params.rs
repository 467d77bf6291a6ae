use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::NetworkSpec;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

/// One entry of the parameter layout. Shapes of convolution kernels are
/// `(out, in, kx, ky, kz)` for regular convolutions and `(in, out, kx, ky, kz)` for
/// transposed ones; memory order has kx fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Trainable weights plus batch-norm running statistics for one network instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub spec: NetworkSpec,
    pub spec_hash: String,
    pub seed: u64,
    pub tensors: Vec<NamedTensor>,
}

fn push_conv(slots: &mut Vec<Slot>, name: &str, shape: [usize; 5], bias: usize) {
    slots.push(Slot {
        name: format!("{name}.weight"),
        shape: shape.to_vec(),
        trainable: true,
    });
    slots.push(Slot {
        name: format!("{name}.bias"),
        shape: vec![bias],
        trainable: true,
    });
}

fn push_bn(slots: &mut Vec<Slot>, name: &str, ch: usize) {
    for (suffix, trainable) in [
        ("gamma", true),
        ("beta", true),
        ("running_mean", false),
        ("running_var", false),
    ] {
        slots.push(Slot {
            name: format!("{name}.{suffix}"),
            shape: vec![ch],
            trainable,
        });
    }
}

/// Ordered parameter layout implied by a spec.
pub fn layout(spec: &NetworkSpec) -> Vec<Slot> {
    let [w1, w2, w3, w4] = spec.widths();
    let mut s = Vec::new();
    push_conv(&mut s, "conv1", [w1, spec.in_channels, 5, 5, 5], w1);
    push_bn(&mut s, "bn1", w1);
    for (i, (cin, cout)) in [(w1, w2), (w2, w3), (w3, w4)].into_iter().enumerate() {
        push_conv(&mut s, &format!("down{}", i + 1), [cout, cin, 3, 3, 1], cout);
        push_bn(&mut s, &format!("down{}.bn", i + 1), cout);
    }
    for r in 0..spec.num_resblocks {
        for part in ["a", "b"] {
            push_conv(&mut s, &format!("res{}.conv_{part}", r + 1), [w4, w4, 3, 3, 1], w4);
            push_bn(&mut s, &format!("res{}.bn_{part}", r + 1), w4);
        }
    }
    for (i, (cin, cout)) in [(w4, w3), (w3, w2), (w2, w1)].into_iter().enumerate() {
        push_conv(&mut s, &format!("up{}", i + 1), [cin, cout, 3, 3, 1], cout);
        push_bn(&mut s, &format!("up{}.bn", i + 1), cout);
    }
    push_conv(&mut s, "head", [spec.num_classes, w1, 5, 5, 1], spec.num_classes);
    s
}

/// Number of trainable scalars for a spec.
pub fn trainable_count(spec: &NetworkSpec) -> usize {
    layout(spec)
        .iter()
        .filter(|s| s.trainable)
        .map(Slot::len)
        .sum()
}

/// Fresh parameters: He-style Gaussian kernels (σ = √(2 / fan-in)), zero biases,
/// unit BN scale, zero BN offset, running stats (0, 1).
pub fn build(spec: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout(spec)
        .into_iter()
        .map(|slot| {
            let n = slot.len();
            let data = if slot.name.ends_with(".weight") {
                let fan_in = if slot.name.starts_with("up") {
                    slot.shape[0] * slot.shape[2..].iter().product::<usize>()
                } else {
                    slot.shape[1..].iter().product::<usize>()
                };
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                    .expect("finite std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if slot.name.ends_with(".gamma") || slot.name.ends_with(".running_var") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            NamedTensor {
                name: slot.name,
                shape: slot.shape,
                data,
            }
        })
        .collect();
    Ok(ParamSet {
        spec_hash: spec.hash(),
        spec: spec.clone(),
        seed,
        tensors,
    })
}

const MAGIC: &[u8; 4] = b"CSPS";

impl ParamSet {
    pub fn trainable_count(&self) -> usize {
        layout(&self.spec)
            .iter()
            .zip(&self.tensors)
            .filter(|(s, _)| s.trainable)
            .map(|(_, t)| t.data.len())
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Checks tensor names, shapes and the spec hash against the layout.
    pub fn verify(&self) -> Result<()> {
        if self.spec_hash != self.spec.hash() {
            return Err(Error::Integrity("spec hash does not match spec".into()));
        }
        let slots = layout(&self.spec);
        if slots.len() != self.tensors.len() {
            return Err(Error::Integrity(format!(
                "{} tensors, layout expects {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for (s, t) in slots.iter().zip(&self.tensors) {
            if s.name != t.name || s.shape != t.shape || t.data.len() != s.len() {
                return Err(Error::Integrity(format!("tensor {} does not match layout", t.name)));
            }
        }
        Ok(())
    }

    /// Little-endian binary dump of all tensors (name, dims, f32 data).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Integrity("truncated parameter file".into()))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format("not a parameter file".into()));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
        let count = u32_at(take(4)?);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32_at(take(4)?);
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = u32_at(take(4)?);
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32_at(take(4)?));
            }
            let n: usize = shape.iter().product();
            let data = take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let p = ParamSet {
            spec_hash: spec.hash(),
            spec,
            seed,
            tensors,
        };
        p.verify()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path, spec: NetworkSpec, seed: u64) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, spec, seed)
    }
}
