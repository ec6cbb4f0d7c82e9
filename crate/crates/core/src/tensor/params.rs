use std::sync::Arc;

use crate::error::{Error, Result};

use super::Tensor;

/// Index of a named segment inside a [`ParamLayout`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegmentId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Contiguous, non-overlapping segments covering a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    len: usize,
}

impl ParamLayout {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.segments[id.0]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Segment that owns flat index `i`.
    pub fn segment_of(&self, i: usize) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| i >= s.offset && i < s.offset + s.len)
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    layout: ParamLayout,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> SegmentId {
        let len: usize = shape.iter().product();
        assert!(len > 0, "segment shapes must be non-empty");
        let id = SegmentId(self.layout.segments.len());
        self.layout.segments.push(Segment {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.layout.len,
            len,
        });
        self.layout.len += len;
        id
    }

    pub fn finish(self) -> Arc<ParamLayout> {
        Arc::new(self.layout)
    }
}

/// Flat vector of trainable parameters with a shared named layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LengthMismatch {
                expected: layout.len(),
                actual: values.len(),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segment(&self, id: SegmentId) -> &[f64] {
        let s = self.layout.segment(id);
        &self.values[s.offset..s.offset + s.len]
    }

    pub fn segment_mut(&mut self, id: SegmentId) -> &mut [f64] {
        let s = self.layout.segment(id).clone();
        &mut self.values[s.offset..s.offset + s.len]
    }

    pub fn segment_tensor(&self, id: SegmentId) -> Tensor {
        let s = self.layout.segment(id);
        Tensor::from_parts(s.shape.clone(), self.segment(id).to_vec())
    }

    pub fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(())
    }

    /// Name of the first segment holding a non-finite value.
    pub fn first_non_finite_segment(&self) -> Option<&str> {
        self.values
            .iter()
            .position(|v| !v.is_finite())
            .and_then(|i| self.layout.segment_of(i))
            .map(|s| s.name.as_str())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            layout: self.layout.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
