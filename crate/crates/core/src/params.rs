//! Named parameter sets and their tape bindings.

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Declares a parameter struct of tensors plus a matching struct of tape
/// handles. Field order fixes serialization and optimizer order.
macro_rules! param_set {
    (
        $(#[$meta:meta])*
        $name:ident => $vars:ident { $($(#[$fmeta:meta])* $field:ident),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $($(#[$fmeta])* pub $field: Tensor,)+
        }

        /// Tape handles for the matching parameter set.
        #[derive(Clone, Copy, Debug)]
        pub struct $vars {
            $(pub $field: Var,)+
        }

        impl $name {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn tensors(&self) -> Vec<&Tensor> {
                vec![$(&self.$field),+]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                vec![$(&mut self.$field),+]
            }

            /// Binds every tensor via `f(tape, position, tensor)`.
            pub fn bind_with(
                &self,
                tape: &mut Tape,
                mut f: impl FnMut(&mut Tape, usize, &Tensor) -> Var,
            ) -> $vars {
                let mut i = 0usize;
                $(
                    let $field = f(tape, i, &self.$field);
                    i += 1;
                )+
                let _ = i;
                $vars { $($field),+ }
            }

            /// Binds each tensor according to its own `requires_grad` flag.
            pub fn bind(&self, tape: &mut Tape) -> $vars {
                self.bind_with(tape, |t, _, x| t.leaf(x))
            }

            /// Binds every tensor as a constant.
            pub fn bind_frozen(&self, tape: &mut Tape) -> $vars {
                self.bind_with(tape, |t, _, x| t.constant(x))
            }
        }

        impl $vars {
            pub fn vars(&self) -> Vec<Var> {
                vec![$(self.$field),+]
            }
        }
    };
}

pub(crate) use param_set;

/// Total element count of a tensor list.
pub fn count(tensors: &[&Tensor]) -> usize {
    tensors.iter().map(|t| t.numel()).sum()
}

/// SHA-256 over shapes and little-endian values, in list order.
pub fn content_hash(tensors: &[&Tensor]) -> String {
    let mut h = Sha256::new();
    h.update((tensors.len() as u64).to_le_bytes());
    for t in tensors {
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Copies gradients of `vars` off the tape into a flat list aligned with them.
/// Vars without a gradient produce zeros.
pub fn collect_grads(tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(v).len()],
        })
        .collect()
}
