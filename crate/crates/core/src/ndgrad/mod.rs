//! Dense tensors, a recording graph with reverse-mode gradients, and
//! fully connected networks.

mod graph;
mod mlp;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Precision, Var, LEAKY_SLOPE};
pub use mlp::{Activation, Layer, LayerVars, MlpParams, MlpVars, Residual};
pub use tensor::{cosine, cosine_matrix, dot, euclidean, l2_norm, Tensor};

#[cfg(test)]
pub(crate) mod fdcheck {
    use super::Tensor;

    /// Central finite-difference gradient of `f` with respect to every entry
    /// of every tensor in `params`.
    pub fn numeric_grad(
        params: &[Tensor],
        h: f64,
        mut f: impl FnMut(&[Tensor]) -> f64,
    ) -> Vec<Tensor> {
        let mut work = params.to_vec();
        let mut out = Vec::with_capacity(params.len());
        for t in 0..params.len() {
            let mut g = params[t].clone();
            for i in 0..params[t].len() {
                let orig = work[t].data()[i];
                work[t].data_mut()[i] = orig + h;
                let fp = f(&work);
                work[t].data_mut()[i] = orig - h;
                let fm = f(&work);
                work[t].data_mut()[i] = orig;
                g.data_mut()[i] = (fp - fm) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    /// max |a - n| / max(max |n|, floor) over all entries.
    pub fn rel_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (a, n) in analytic.iter().zip(numeric) {
            for (x, y) in a.data().iter().zip(n.data()) {
                diff = diff.max((x - y).abs());
                scale = scale.max(y.abs());
            }
        }
        diff / scale.max(1e-8)
    }
}
