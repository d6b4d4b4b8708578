//! Dot-product attention over the CDI and SI feature vectors, followed by a
//! two-layer classifier whose hidden activations feed the alignment loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::octnet::{kaiming, Forward};
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct FusionHead {
    pub dim: usize,
    pub q: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

/// Graph handles produced by [`FusionHead::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub fused: Var,
    pub penultimate: Var,
    pub logits: Var,
}

impl FusionHead {
    /// `q` starts at zero so both streams are weighted equally.
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dim must be positive".into()));
        }
        let mut add = |suffix: &str, v: Tensor<T>| store.add(format!("{name}.{suffix}"), v, ParamKind::Weight);
        Ok(FusionHead {
            dim,
            q: add("q", Tensor::zeros(&[dim]))?,
            fc1_w: add("fc1.w", kaiming(&[dim, 2 * dim], 2 * dim, rng))?,
            fc1_b: add("fc1.b", Tensor::zeros(&[dim]))?,
            fc2_w: add("fc2.w", kaiming(&[2, dim], dim, rng))?,
            fc2_b: add("fc2.b", Tensor::zeros(&[2]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, v_cdi: Var, v_si: Var) -> Result<FusionVars> {
        let fused = f.graph.attention_fuse(v_cdi, v_si, f.param(self.q))?;
        let (penultimate, logits) = self.classify(f, fused)?;
        Ok(FusionVars { fused, penultimate, logits })
    }

    /// `penultimate = relu(fc1(fused))`, `logits = fc2(penultimate)`.
    pub fn classify<T: Scalar>(&self, f: &mut Forward<'_, T>, fused: Var) -> Result<(Var, Var)> {
        let h = f.graph.linear(fused, f.param(self.fc1_w), f.param(self.fc1_b))?;
        let penultimate = f.graph.relu(h)?;
        let logits = f.graph.linear(penultimate, f.param(self.fc2_w), f.param(self.fc2_b))?;
        Ok((penultimate, logits))
    }
}

/// Value-level fusion of single vectors: returns the fused vector and
/// `(w_cdi, w_si)`.
pub fn attention_fuse<T: Scalar>(v_cdi: &[T], v_si: &[T], q: &[T]) -> Result<(Vec<T>, (T, T))> {
    if v_cdi.len() != v_si.len() || q.len() != v_cdi.len() {
        return Err(Error::shape(
            "attention_fuse",
            format!("dims differ: cdi {}, si {}, q {}", v_cdi.len(), v_si.len(), q.len()),
        ));
    }
    let d = q.len();
    let mut g = Graph::new();
    let a = g.input(Tensor::new(vec![1, d], v_cdi.to_vec())?)?;
    let b = g.input(Tensor::new(vec![1, d], v_si.to_vec())?)?;
    let qv = g.input(Tensor::new(vec![d], q.to_vec())?)?;
    let y = g.attention_fuse(a, b, qv)?;
    let w = g.fusion_weights(y).expect("attention node")[0];
    Ok((g.value(y).data().to_vec(), w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_kernel_halves_both_streams() {
        let (fused, w) = attention_fuse(&[1.0, -2.0], &[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert_eq!(w, (0.5, 0.5));
        assert_eq!(fused, vec![0.5, -1.0, 1.5, 2.0]);
    }

    #[test]
    fn closed_form_weights_and_swap() {
        let (_, (a, b)) = attention_fuse(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((a - expect).abs() < 1e-12 && (b - (1.0 - expect)).abs() < 1e-12);
        assert!((a - 0.7311).abs() < 1e-4);
        let (_, (c, d)) = attention_fuse(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!((c, d), (b, a));
        assert!(attention_fuse(&[1.0], &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn classify_examples() {
        let mut store = ParamStore::<f64>::new();
        let head = FusionHead::new(&mut store, "head", 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let run = |store: &ParamStore<f64>, fused: &[f64]| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g).unwrap();
            let x = g.input(Tensor::from_f64(&[1, 6], fused).unwrap()).unwrap();
            let mut f = Forward::new(&mut g, store, &bound, false);
            let (p, l) = head.classify(&mut f, x).unwrap();
            (g.value(p).data().to_vec(), g.value(l).data().to_vec())
        };
        let (_, logits) = run(&store, &[0.0; 6]);
        assert_eq!(logits, vec![0.0, 0.0]);

        let w = store.get_mut(head.fc1_w).value.data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..3 {
            w[i * 6 + i] = 1.0;
        }
        let (pen, _) = run(&store, &[0.5, 2.0, 0.0, 7.0, 8.0, 9.0]);
        assert_eq!(pen, vec![0.5, 2.0, 0.0]);
    }
}
