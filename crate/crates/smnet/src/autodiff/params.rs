use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{AutodiffError, Result, Tensor2D};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SMN1";

/// Named trainable (and bookkeeping) tensors with momentum buffers.
///
/// Entry order is insertion order and is preserved through checkpoints, so
/// save/load round-trips are byte-identical.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor2D,
    momentum: Vec<f32>,
    grad: Option<Vec<f32>>,
    trainable: bool,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor2D) -> Result<()> {
        self.insert_with(name, tensor, true)
    }

    /// Inserts a non-trainable entry (running statistics and the like).
    pub fn insert_buffer(&mut self, name: &str, tensor: Tensor2D) -> Result<()> {
        self.insert_with(name, tensor, false)
    }

    fn insert_with(&mut self, name: &str, tensor: Tensor2D, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(AutodiffError::DuplicateParameter(name.into()));
        }
        let momentum = vec![0.0; tensor.values().len()];
        self.entries.push(Entry {
            name: name.into(),
            tensor,
            momentum,
            grad: None,
            trainable,
        });
        self.index.insert(name.into(), self.entries.len() - 1);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2D> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.into()))?;
        Ok(&self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2D> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.into()))?;
        Ok(&mut self.entries[i].tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `delta` into the accumulated gradient of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &[f32]) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.into()))?;
        let e = &mut self.entries[i];
        if delta.len() != e.tensor.values().len() {
            return Err(AutodiffError::Dimension(format!(
                "gradient for '{name}' has {} values, expected {}",
                delta.len(),
                e.tensor.values().len()
            )));
        }
        let g = e
            .grad
            .get_or_insert_with(|| vec![0.0; delta.len()]);
        for (gv, &dv) in g.iter_mut().zip(delta) {
            *gv += dv;
        }
        Ok(())
    }

    /// Multiplies all accumulated gradients by `s` (batch averaging).
    pub fn scale_grads(&mut self, s: f32) {
        for e in self.entries.iter_mut() {
            if let Some(g) = &mut e.grad {
                for gv in g.iter_mut() {
                    *gv *= s;
                }
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad = None;
        }
    }

    pub fn grad(&self, name: &str) -> Option<&[f32]> {
        let &i = self.index.get(name)?;
        self.entries[i].grad.as_deref()
    }

    /// Writes the documented "SMN1" little-endian checkpoint.
    ///
    /// Layout: magic, u32 entry count, then per entry
    /// (u32 name length, name bytes, u32 rows, u32 cols, f32 values),
    /// then the momentum buffers as raw f32 runs in the same entry order.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for e in &self.entries {
            w.write_u32::<LittleEndian>(e.name.len() as u32)?;
            w.write_all(e.name.as_bytes())?;
            w.write_u32::<LittleEndian>(e.tensor.rows() as u32)?;
            w.write_u32::<LittleEndian>(e.tensor.cols() as u32)?;
            for &v in e.tensor.values() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        for e in &self.entries {
            for &v in &e.momentum {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.save(std::io::BufWriter::new(f))
    }

    /// Loads a checkpoint; trainability of each entry is recovered from the
    /// name (entries ending in `.running_mean` / `.running_var` are buffers).
    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(AutodiffError::Checkpoint(format!(
                "bad magic {magic:?}, expected \"SMN1\""
            )));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
            let rows = r.read_u32::<LittleEndian>()? as usize;
            let cols = r.read_u32::<LittleEndian>()? as usize;
            let mut values = vec![0.0f32; rows * cols];
            r.read_f32_into::<LittleEndian>(&mut values)?;
            let tensor = Tensor2D::new(rows, cols, values)?;
            let trainable = !(name.ends_with(".running_mean")
                || name.ends_with(".running_var"));
            store.insert_with(&name, tensor, trainable)?;
        }
        for i in 0..count {
            let len = store.entries[i].momentum.len();
            let mut buf = vec![0.0f32; len];
            r.read_f32_into::<LittleEndian>(&mut buf)?;
            store.entries[i].momentum = buf;
        }
        Ok(store)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(f))
    }

    fn trainable_entries_mut(&mut self) -> impl Iterator<Item = &mut Entry> {
        self.entries.iter_mut().filter(|e| e.trainable)
    }
}

/// One SGD-with-momentum update over every trainable entry.
///
/// buffer ← momentum·buffer + grad; param ← param − lr·buffer.
/// All gradients (including buffers') are cleared afterwards.
pub fn sgd_momentum_step(params: &mut ParameterStore, lr: f32, momentum: f32) -> Result<()> {
    for e in params.trainable_entries_mut() {
        if e.grad.is_none() {
            return Err(AutodiffError::MissingGradient(e.name.clone()));
        }
    }
    for e in params.trainable_entries_mut() {
        let grad = e.grad.as_ref().expect("checked above");
        for ((m, p), &g) in e
            .momentum
            .iter_mut()
            .zip(e.tensor.values_mut().iter_mut())
            .zip(grad)
        {
            *m = momentum * *m + g;
            *p -= lr * *m;
        }
    }
    params.clear_grads();
    Ok(())
}
