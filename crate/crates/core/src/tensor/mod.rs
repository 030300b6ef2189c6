//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately single-threaded and order-canonical: every
//! reduction that ranges over the K conditionals of an episode is summed in a
//! value-sorted order, which makes those reductions bitwise invariant under
//! permutation of the inputs. That property is load-bearing for the
//! permutation tests on similarity scores and fused features.

pub mod ops;
pub mod tape;

pub use tape::{Gradients, Tape, Var};

/// Element type used throughout the crate.
pub type Elem = f64;

/// Dynamic-rank tensor storage.
pub type TensorData = ndarray::ArrayD<Elem>;

/// Sum a small buffer in a canonical (value-sorted) order.
///
/// Floating-point addition is commutative but not associative; sorting by the
/// IEEE total order before summing gives a result that depends only on the
/// multiset of summands, not their arrangement.
pub fn canonical_sum(vals: &mut [Elem]) -> Elem {
    vals.sort_unstable_by(|a, b| a.total_cmp(b));
    vals.iter().sum()
}

/// Scalar extraction from a 0-d or single-element tensor.
pub fn scalar_of(t: &TensorData) -> Elem {
    debug_assert_eq!(t.len(), 1, "expected scalar tensor, got shape {:?}", t.shape());
    *t.iter().next().expect("scalar tensor is empty")
}

/// 0-d tensor holding one value.
pub fn scalar_tensor(v: Elem) -> TensorData {
    ndarray::arr0(v).into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_sum_is_permutation_invariant() {
        let base = [0.1, -3.7, 2.5e-9, 1.0e9, -1.0e9, 0.3333];
        let mut a = base;
        let mut b = [0.3333, 1.0e9, -3.7, 0.1, -1.0e9, 2.5e-9];
        let sa = canonical_sum(&mut a);
        let sb = canonical_sum(&mut b);
        assert_eq!(sa.to_bits(), sb.to_bits());
    }
}
