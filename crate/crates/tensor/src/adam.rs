use crate::{Element, ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
///
/// `grads` is indexed like the store. A missing gradient aborts before any
/// parameter is touched.
pub fn adam_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(TensorError::Usage(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for (p, g) in store.iter().zip(grads) {
        match g {
            None => return Err(TensorError::MissingGradient(p.name.clone())),
            Some(g) if g.shape() != p.value.shape() => {
                return Err(TensorError::shape(
                    "adam_step",
                    format!(
                        "gradient {:?} for `{}` of shape {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    ),
                ))
            }
            Some(_) => {}
        }
    }

    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let eps = T::from_f64(cfg.eps);
    for (p, g) in store.params_mut().iter_mut().zip(grads) {
        let g = g.as_ref().expect("checked above");
        p.adam.step += 1;
        let t = p.adam.step as i32;
        let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
        let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64(cfg.lr);
        let st = &mut p.adam;
        for (((w, m), v), &gi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
            .zip(g.data())
        {
            *m = b1 * *m + (one - b1) * gi;
            *v = b2 * *v + (one - b2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
