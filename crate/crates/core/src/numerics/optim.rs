use super::{NumericsError, Tensor};

/// Plain SGD with decoupled-into-gradient weight decay:
/// `p <- p - lr * (grad + weight_decay * p)`. Gradients are cleared afterwards.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64, weight_decay: f64) -> Result<(), NumericsError> {
    if params.iter().any(|p| p.grad().is_none()) {
        return Err(NumericsError::Contract(
            "sgd_step on a parameter without a gradient".into(),
        ));
    }
    for p in params.iter_mut() {
        let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_default();
        for (v, g) in p.data_mut().iter_mut().zip(grad) {
            *v -= lr * (g + weight_decay * *v);
        }
        p.clear_grad();
    }
    Ok(())
}
