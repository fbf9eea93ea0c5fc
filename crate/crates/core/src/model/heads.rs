use rand::Rng;

use crate::autograd::{Graph, Var};

use super::params::ParamStore;

/// FC-ReLU-Dropout-FC. Dropout is active only when `rng` is given.
pub(crate) fn mlp_head<R: Rng>(
    g: &mut Graph,
    params: &ParamStore,
    name: &str,
    x: Var,
    dropout_rate: f64,
    rng: Option<&mut R>,
) -> Var {
    let bind = |g: &mut Graph, n: &str| g.param(n, params.get(n));
    let w1 = bind(g, &format!("{name}.fc1.w"));
    let b1 = bind(g, &format!("{name}.fc1.b"));
    let w2 = bind(g, &format!("{name}.fc2.w"));
    let b2 = bind(g, &format!("{name}.fc2.b"));
    let h = g.linear(x, w1, b1);
    let mut h = g.relu(h);
    if let Some(rng) = rng.filter(|_| dropout_rate > 0.0) {
        let keep = 1.0 - dropout_rate;
        let mask = (0..g.value(h).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        h = g.dropout(h, mask);
    }
    g.linear(h, w2, b2)
}

/// Deformation offsets in pixels from finest-level features `(M, C)`.
pub(crate) fn deformation_head<R: Rng>(
    g: &mut Graph,
    params: &ParamStore,
    finest: Var,
    dropout_rate: f64,
    scale: f64,
    rng: Option<&mut R>,
) -> Var {
    let raw = mlp_head(g, params, "deform", finest, dropout_rate, rng);
    g.scale(raw, scale)
}

/// Regression offsets `(M, 2)` in pixels and logits `(M, C + 1)`.
pub(crate) fn decode_heads<R: Rng>(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    features: Var,
    dropout_rate: f64,
    scale: f64,
    mut rng: Option<&mut R>,
) -> (Var, Var) {
    let raw = mlp_head(g, params, &format!("{prefix}reg"), features, dropout_rate, rng.as_deref_mut());
    let offsets = g.scale(raw, scale);
    let logits = mlp_head(g, params, &format!("{prefix}cls"), features, dropout_rate, rng);
    (offsets, logits)
}
