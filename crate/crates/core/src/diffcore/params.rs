//! Flat parameter vector with a named segment table.

use super::tensor::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How a segment is filled at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] where fan_in is the
    /// product of all dims after the first.
    FanInUniform,
    Zeros,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub dims: Vec<usize>,
    pub init: InitKind,
}

/// Disjoint segments covering a flat vector in declaration order.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SegmentTable {
    segments: Vec<Segment>,
}

impl SegmentTable {
    pub fn push(&mut self, name: &str, dims: Vec<usize>, init: InitKind) -> usize {
        assert!(
            self.segments.iter().all(|s| s.name != name),
            "duplicate parameter segment {name}"
        );
        let offset = self.total_len();
        let len = dims.iter().product();
        self.segments.push(Segment { name: name.to_string(), offset, len, dims, init });
        self.segments.len() - 1
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map(|s| s.offset + s.len).unwrap_or(0)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get(&self, id: usize) -> &Segment {
        &self.segments[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Parameter values plus the seed they were initialized from.
#[derive(Clone, Debug)]
pub struct Params<T> {
    pub values: Vec<T>,
    pub seed: u64,
}

impl<T: Real> Params<T> {
    pub fn zeros(table: &SegmentTable) -> Self {
        Params { values: vec![T::zero(); table.total_len()], seed: 0 }
    }

    /// Seeded init: fan-in-scaled uniform draws consumed in segment order,
    /// so the layout alone fixes the byte-level result.
    pub fn init(table: &SegmentTable, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![T::zero(); table.total_len()];
        for seg in table.segments() {
            match seg.init {
                InitKind::Zeros => {}
                InitKind::FanInUniform => {
                    let fan_in: usize = seg.dims.iter().skip(1).product::<usize>().max(1);
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for v in &mut values[seg.offset..seg.offset + seg.len] {
                        let u: f64 = rng.random();
                        *v = T::of_f64((2.0 * u - 1.0) * bound);
                    }
                }
            }
        }
        Params { values, seed }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params { values: self.values.iter().map(|v| U::of_f64(v.as_f64())).collect(), seed: self.seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_are_disjoint_and_cover() {
        let mut t = SegmentTable::default();
        t.push("a.w", vec![2, 3], InitKind::FanInUniform);
        t.push("a.b", vec![2], InitKind::Zeros);
        assert_eq!(t.total_len(), 8);
        assert_eq!(t.get(0).offset, 0);
        assert_eq!(t.get(1).offset, 6);
        assert_eq!(t.by_name("a.b").unwrap().len, 2);
    }

    #[test]
    fn init_is_reproducible_and_respects_kind() {
        let mut t = SegmentTable::default();
        t.push("w", vec![4, 9], InitKind::FanInUniform);
        t.push("b", vec![4], InitKind::Zeros);
        let p1 = Params::<f32>::init(&t, 42);
        let p2 = Params::<f32>::init(&t, 42);
        assert_eq!(p1.values, p2.values);
        assert!(p1.values[36..].iter().all(|v| *v == 0.0));
        let bound = 1.0 / 3.0;
        assert!(p1.values[..36].iter().all(|v| v.abs() <= bound as f32));
        assert!(p1.values[..36].iter().any(|v| *v != 0.0));
        let p3 = Params::<f32>::init(&t, 43);
        assert_ne!(p1.values, p3.values);
    }
}
