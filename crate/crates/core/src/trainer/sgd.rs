use crate::error::Result;
use crate::geometry::Matrix;

/// One momentum-SGD update with coupled L2 weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
pub fn sgd_step(
    param: &mut Matrix,
    grad: &Matrix,
    velocity: &mut Matrix,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    param.same_shape(grad, "sgd grad")?;
    param.same_shape(velocity, "sgd velocity")?;
    for ((p, g), v) in param
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(velocity.as_mut_slice())
    {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}
