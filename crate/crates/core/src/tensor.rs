//! Dense f32 tensors with stable buffer identities, and the kernel metadata
//! every dispatch carries.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_BUFFER_ID: AtomicU64 = AtomicU64::new(1);

/// Opaque identity of an allocated buffer. Assigned once at allocation and
/// never reused within a process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(u64);

impl BufferId {
    fn fresh() -> Self {
        BufferId(NEXT_BUFFER_ID.fetch_add(1, Ordering::Relaxed))
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

impl fmt::Display for BufferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    id: BufferId,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
            id: BufferId::fresh(),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("zero dimension in {shape:?}"),
            });
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} holds {len} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            id: BufferId::fresh(),
        })
    }

    pub fn id(&self) -> BufferId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// In-place writes never change the buffer identity.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, shape: &[usize]) -> Result<()> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_width(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

/// Graph-safety class of an operation. Fixed per kernel name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpClass {
    Static,
    Dynamic,
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpClass::Static => "STATIC",
            OpClass::Dynamic => "DYNAMIC",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSpec {
    pub name: &'static str,
    pub op_class: OpClass,
    pub input_buffers: Vec<BufferId>,
    pub output_buffers: Vec<BufferId>,
    pub flops: u64,
}

impl KernelSpec {
    /// The class is looked up from the kernel name so it cannot drift per call site.
    pub fn new(
        name: &'static str,
        input_buffers: Vec<BufferId>,
        output_buffers: Vec<BufferId>,
        flops: u64,
    ) -> Self {
        Self {
            name,
            op_class: crate::kernels::op_class_of(name),
            input_buffers,
            output_buffers,
            flops,
        }
    }

    pub fn bindings(&self) -> impl Iterator<Item = BufferId> + '_ {
        self.input_buffers
            .iter()
            .chain(self.output_buffers.iter())
            .copied()
    }
}

/// A set of tensors addressable by buffer id.
#[derive(Debug, Default, Clone)]
pub struct BufferStore {
    buffers: HashMap<BufferId, Tensor>,
    order: Vec<BufferId>,
}

impl BufferStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, t: Tensor) -> BufferId {
        let id = t.id();
        if self.buffers.insert(id, t).is_none() {
            self.order.push(id);
        }
        id
    }

    pub fn alloc(&mut self, shape: &[usize]) -> BufferId {
        self.insert(Tensor::zeros(shape))
    }

    pub fn get(&self, id: BufferId) -> Option<&Tensor> {
        self.buffers.get(&id)
    }

    pub fn get_mut(&mut self, id: BufferId) -> Option<&mut Tensor> {
        self.buffers.get_mut(&id)
    }

    pub fn contains(&self, id: BufferId) -> bool {
        self.buffers.contains_key(&id)
    }

    /// Temporarily removes a buffer so it can be written while other buffers
    /// are read. Must be paired with [`BufferStore::restore`].
    pub(crate) fn take(&mut self, id: BufferId) -> Option<Tensor> {
        self.buffers.remove(&id)
    }

    pub(crate) fn restore(&mut self, t: Tensor) {
        self.buffers.insert(t.id(), t);
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Buffer ids in allocation order.
    pub fn ids(&self) -> &[BufferId] {
        &self.order
    }

    pub fn total_bytes(&self) -> usize {
        self.buffers.values().map(Tensor::size_bytes).sum()
    }
}
