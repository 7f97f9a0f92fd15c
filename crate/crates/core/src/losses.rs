//! Adversarial and regression objectives.
//!
//! Every loss is a single scalar graph node whose gradient with respect to its
//! graph inputs is computed together with the value. Discriminator outputs are
//! N×1×h×w probability grids; depth tensors are N×1×H×W with a 0/1 mask of the
//! same shape. Log arguments are clamped to `[eps, 1 - eps]` and the clamp
//! passes no gradient.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Share of the pair discriminator in the generator's adversarial term.
    pub lambda: f64,
    /// Weight of the L1 term in supervised steps.
    pub beta: f64,
    /// Decay β linearly to 1 over the first third of training.
    pub beta_decay: bool,
    pub epsilon: f64,
    /// Use `-mean(log D(G))` for the generator instead of `mean(log(1 - D(G)))`.
    pub non_saturating: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            beta: 10.0,
            beta_decay: false,
            epsilon: 1e-7,
            non_saturating: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must be in (0, 1], got {}", self.lambda)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon must be in (0, 0.5), got {}", self.epsilon)));
        }
        Ok(())
    }

    /// β at `progress` ∈ [0, 1] of the run.
    pub fn beta_at(&self, progress: f64) -> f64 {
        if !self.beta_decay || self.beta <= 1.0 {
            return self.beta;
        }
        let t = (progress * 3.0).clamp(0.0, 1.0);
        self.beta + (1.0 - self.beta) * t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// A scalar loss together with its weighted parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub scalar: f64,
    pub components: Vec<Component>,
}

impl LossValue {
    fn single(name: &str, value: f64) -> Self {
        Self {
            scalar: value,
            components: vec![Component {
                name: name.to_string(),
                value,
                weight: 1.0,
            }],
        }
    }

    fn weighted(parts: Vec<(String, f64, f64)>) -> Self {
        let scalar = parts.iter().map(|(_, v, w)| w * v).sum();
        Self {
            scalar,
            components: parts
                .into_iter()
                .map(|(name, value, weight)| Component { name, value, weight })
                .collect(),
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }
}

/// A loss node in a graph plus its logged value.
#[derive(Clone, Debug)]
pub struct Loss {
    pub var: Var,
    pub value: LossValue,
}

fn scalar_node(g: &mut Graph, value: f64, inputs: &[(Var, Tensor)]) -> Var {
    let grads: Vec<Arc<Tensor>> = inputs.iter().map(|(_, t)| Arc::new(t.clone())).collect();
    let parents: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
    g.push_op(
        Tensor::scalar(value),
        &parents,
        Box::new(move |up, needs| {
            let s = up.data()[0];
            grads
                .iter()
                .zip(needs)
                .map(|(gr, &need)| need.then(|| gr.scale(s)))
                .collect()
        }),
    )
}

/// Mean of `ln(clamp(p))`, or of `ln(1 - clamp(p))` when `complement`, with its gradient.
pub fn mean_log(p: &Tensor, eps: f64, complement: bool) -> Result<(f64, Tensor)> {
    if p.is_empty() || p.shape().first() == Some(&0) {
        return Err(Error::EmptyBatch);
    }
    let n = p.len() as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(p.shape());
    for (gi, &x) in grad.data_mut().iter_mut().zip(p.data()) {
        let c = x.clamp(eps, 1.0 - eps);
        let inside = x > eps && x < 1.0 - eps;
        if complement {
            sum += (1.0 - c).ln();
            if inside {
                *gi = -1.0 / ((1.0 - c) * n);
            }
        } else {
            sum += c.ln();
            if inside {
                *gi = 1.0 / (c * n);
            }
        }
    }
    Ok((sum / n, grad))
}

fn mean_log_node(g: &mut Graph, p: Var, eps: f64, complement: bool) -> Result<(Var, f64)> {
    let (v, grad) = mean_log(g.value(p), eps, complement)?;
    Ok((scalar_node(g, v, &[(p, grad)]), v))
}

fn discriminator_loss(g: &mut Graph, real: Var, fake: Var, eps: f64, tag: &str) -> Result<Loss> {
    let (lr, vr) = mean_log_node(g, real, eps, false)?;
    let (lf, vf) = mean_log_node(g, fake, eps, true)?;
    let var = g.weighted_sum(&[(lr, -1.0), (lf, -1.0)])?;
    Ok(Loss {
        var,
        value: LossValue::weighted(vec![
            (format!("{tag}_real"), -vr, 1.0),
            (format!("{tag}_fake"), -vf, 1.0),
        ]),
    })
}

/// Pair discriminator objective: `-mean(log PD(i, y)) - mean(log(1 - PD(i', G(i'))))`.
pub fn loss_pd(g: &mut Graph, pd_real: Var, pd_fake: Var, w: &LossWeights) -> Result<Loss> {
    discriminator_loss(g, pd_real, pd_fake, w.epsilon, "pd")
}

/// Depth discriminator objective: `-mean(log DD(y)) - mean(log(1 - DD(G(i'))))`.
pub fn loss_dd(g: &mut Graph, dd_real: Var, dd_fake: Var, w: &LossWeights) -> Result<Loss> {
    discriminator_loss(g, dd_real, dd_fake, w.epsilon, "dd")
}

fn generator_adv(g: &mut Graph, fake: Var, w: &LossWeights, name: &str) -> Result<Loss> {
    let (var, value) = if w.non_saturating {
        let (v, x) = mean_log_node(g, fake, w.epsilon, false)?;
        (g.affine(v, -1.0, 0.0), -x)
    } else {
        mean_log_node(g, fake, w.epsilon, true)?
    };
    Ok(Loss {
        var,
        value: LossValue::single(name, value),
    })
}

/// Generator term against the pair discriminator, `mean(log(1 - PD(i', G(i'))))`.
pub fn loss_g_pd(g: &mut Graph, pd_fake: Var, w: &LossWeights) -> Result<Loss> {
    generator_adv(g, pd_fake, w, "g_pd")
}

/// Generator term against the depth discriminator, `mean(log(1 - DD(G(i'))))`.
pub fn loss_g_dd(g: &mut Graph, dd_fake: Var, w: &LossWeights) -> Result<Loss> {
    generator_adv(g, dd_fake, w, "g_dd")
}

/// `λ·loss_g_pd + (1 - λ)·loss_g_dd`. A term whose weight is zero is left
/// out of the graph, so it contributes no gradient at all.
pub fn loss_g_semi(g: &mut Graph, w: &LossWeights, pd_fake: Option<Var>, dd_fake: Option<Var>) -> Result<Loss> {
    let mut terms = Vec::new();
    let mut parts = Vec::new();
    for (fake, weight, f) in [
        (pd_fake, w.lambda, loss_g_pd as fn(&mut Graph, Var, &LossWeights) -> Result<Loss>),
        (dd_fake, 1.0 - w.lambda, loss_g_dd),
    ] {
        let Some(fake) = fake else {
            if weight != 0.0 {
                return Err(Error::Config("adversarial term with nonzero weight has no discriminator".into()));
            }
            continue;
        };
        let l = f(g, fake, w)?;
        let c = &l.value.components[0];
        parts.push((c.name.clone(), c.value, weight));
        if weight != 0.0 {
            terms.push((l.var, weight));
        }
    }
    let var = match terms.as_slice() {
        [(v, wt)] if *wt == 1.0 => *v,
        _ => g.weighted_sum(&terms)?,
    };
    Ok(Loss {
        var,
        value: LossValue::weighted(parts),
    })
}

/// `loss_g_semi + β·masked L1(pred, gt)`.
pub fn loss_g_sup(
    g: &mut Graph,
    w: &LossWeights,
    beta: f64,
    pd_fake: Option<Var>,
    dd_fake: Option<Var>,
    pred: Var,
    gt: &Tensor,
    mask: &Tensor,
) -> Result<Loss> {
    let adv = loss_g_semi(g, w, pd_fake, dd_fake)?;
    let l1 = pixel_loss(g, LossKind::L1, pred, gt, mask)?;
    let var = g.weighted_sum(&[(adv.var, 1.0), (l1.var, beta)])?;
    let mut parts: Vec<_> = adv
        .value
        .components
        .into_iter()
        .map(|c| (c.name, c.value, c.weight))
        .collect();
    parts.push(("l1".into(), l1.value.scalar, beta));
    Ok(Loss {
        var,
        value: LossValue::weighted(parts),
    })
}

/// Value of the three-player game,
/// `E log PD(i,y) + E log(1 - PD(i',G(i'))) + E log DD(y) + E log(1 - DD(G(i')))`.
/// Used for logging only.
pub fn minimax_value(pd_real: &Tensor, pd_fake: &Tensor, dd_real: &Tensor, dd_fake: &Tensor, eps: f64) -> Result<LossValue> {
    Ok(LossValue::weighted(vec![
        ("pd_real".into(), mean_log(pd_real, eps, false)?.0, 1.0),
        ("pd_fake".into(), mean_log(pd_fake, eps, true)?.0, 1.0),
        ("dd_real".into(), mean_log(dd_real, eps, false)?.0, 1.0),
        ("dd_fake".into(), mean_log(dd_fake, eps, true)?.0, 1.0),
    ]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2,
    Huber,
    ScaleInvariant,
    Berhu,
    EdgeAware,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::L1,
        LossKind::L2,
        LossKind::Huber,
        LossKind::ScaleInvariant,
        LossKind::Berhu,
        LossKind::EdgeAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::Huber => "huber",
            LossKind::ScaleInvariant => "scale_invariant",
            LossKind::Berhu => "berhu",
            LossKind::EdgeAware => "edge_aware",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}'")))
    }
}

pub const HUBER_DELTA: f64 = 1.0;
pub const SCALE_INVARIANT_COEF: f64 = 0.5;
pub const BERHU_FRACTION: f64 = 0.2;

/// Regression loss of `kind` with default settings.
pub fn pixel_loss(g: &mut Graph, kind: LossKind, pred: Var, gt: &Tensor, mask: &Tensor) -> Result<Loss> {
    pixel_loss_with(g, kind, SCALE_INVARIANT_COEF, pred, gt, mask)
}

/// As [`pixel_loss`] with an explicit scale-invariant coefficient.
pub fn pixel_loss_with(
    g: &mut Graph,
    kind: LossKind,
    si_coefficient: f64,
    pred: Var,
    gt: &Tensor,
    mask: &Tensor,
) -> Result<Loss> {
    let (value, grad) = pixel_loss_value(kind, si_coefficient, g.value(pred), gt, mask)?;
    let var = scalar_node(g, value.scalar, &[(pred, grad)]);
    Ok(Loss { var, value })
}

/// Value and gradient with respect to `pred` of a regression loss.
pub fn pixel_loss_value(
    kind: LossKind,
    si_coefficient: f64,
    pred: &Tensor,
    gt: &Tensor,
    mask: &Tensor,
) -> Result<(LossValue, Tensor)> {
    if pred.shape() != gt.shape() || pred.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "pred {:?}, gt {:?} and mask {:?} differ",
            pred.shape(),
            gt.shape(),
            mask.shape()
        )));
    }
    let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i] != 0.0).collect();
    if valid.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (p, y) = (pred.data(), gt.data());
    let n = valid.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let gd = grad.data_mut();
    let value = match kind {
        LossKind::L1 => {
            let mut s = 0.0;
            for &i in &valid {
                let r = p[i] - y[i];
                s += r.abs();
                gd[i] = sign(r) / n;
            }
            s / n
        }
        LossKind::L2 => {
            let mut s = 0.0;
            for &i in &valid {
                let r = p[i] - y[i];
                s += r * r;
                gd[i] = 2.0 * r / n;
            }
            s / n
        }
        LossKind::Huber => {
            let mut s = 0.0;
            for &i in &valid {
                let r = p[i] - y[i];
                if r.abs() <= HUBER_DELTA {
                    s += 0.5 * r * r;
                    gd[i] = r / n;
                } else {
                    s += HUBER_DELTA * (r.abs() - 0.5 * HUBER_DELTA);
                    gd[i] = HUBER_DELTA * sign(r) / n;
                }
            }
            s / n
        }
        LossKind::ScaleInvariant => {
            let mut d = Vec::with_capacity(valid.len());
            for &i in &valid {
                for v in [p[i], y[i]] {
                    if v <= 0.0 {
                        return Err(Error::NonPositiveDepth { value: v });
                    }
                }
                d.push(p[i].ln() - y[i].ln());
            }
            let mean_d = d.iter().sum::<f64>() / n;
            let mean_sq = d.iter().map(|x| x * x).sum::<f64>() / n;
            for (&i, di) in valid.iter().zip(&d) {
                gd[i] = (2.0 * di / n - 2.0 * si_coefficient * mean_d / n) / p[i];
            }
            mean_sq - si_coefficient * mean_d * mean_d
        }
        LossKind::Berhu => berhu(p, y, &valid, gd),
        LossKind::EdgeAware => return edge_aware(pred, gt, mask, grad),
    };
    Ok((LossValue::single(kind.name(), value), grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Reverse Huber with `c = 0.2 · max |r|` over the batch; `c` is differentiated too.
fn berhu(p: &[f64], y: &[f64], valid: &[usize], gd: &mut [f64]) -> f64 {
    let n = valid.len() as f64;
    let (arg, rmax) = valid
        .iter()
        .map(|&i| (i, (p[i] - y[i]).abs()))
        .fold((valid[0], -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    let c = BERHU_FRACTION * rmax;
    if c == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    let mut dc = 0.0;
    for &i in valid {
        let r = p[i] - y[i];
        if r.abs() <= c {
            s += r.abs();
            gd[i] = sign(r) / n;
        } else {
            s += (r * r + c * c) / (2.0 * c);
            gd[i] = r / (c * n);
            dc += (0.5 - r * r / (2.0 * c * c)) / n;
        }
    }
    gd[arg] += dc * BERHU_FRACTION * sign(p[arg] - y[arg]);
    s / n
}

/// Depth L1 + gradient-difference L1 + surface-normal term, weights 1, 1, 1.
///
/// Gradients are forward differences taken where both pixels are valid.
/// Normals are `(-dx, -dy, 1)` at pixels whose right and lower neighbours are
/// valid, and the normal term is `mean(1 - cos(n_pred, n_gt))`. A term with no
/// eligible pixels contributes zero.
fn edge_aware(pred: &Tensor, gt: &Tensor, mask: &Tensor, mut grad: Tensor) -> Result<(LossValue, Tensor)> {
    let (nb, c, h, w) = pred.dims4()?;
    if c != 1 {
        return Err(Error::Shape("edge-aware loss expects single-channel depth".into()));
    }
    let (p, y, m) = (pred.data(), gt.data(), mask.data());
    let gd = grad.data_mut();
    let ok = |i: usize| m[i] != 0.0;

    let valid: Vec<usize> = (0..p.len()).filter(|&i| ok(i)).collect();
    let n = valid.len() as f64;
    let mut depth = 0.0;
    for &i in &valid {
        let r = p[i] - y[i];
        depth += r.abs();
        gd[i] += sign(r) / n;
    }
    depth /= n;

    let mut grad_term = 0.0;
    for (step, limit) in [(1usize, (h, w - 1)), (w, (h - 1, w))] {
        let mut pairs = Vec::new();
        for b in 0..nb {
            for r in 0..limit.0 {
                for col in 0..limit.1 {
                    let i = (b * h + r) * w + col;
                    if ok(i) && ok(i + step) {
                        pairs.push(i);
                    }
                }
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let k = pairs.len() as f64;
        let mut s = 0.0;
        for i in pairs {
            let d = (p[i + step] - p[i]) - (y[i + step] - y[i]);
            s += d.abs();
            gd[i + step] += sign(d) / k;
            gd[i] -= sign(d) / k;
        }
        grad_term += s / k;
    }

    let mut normal = 0.0;
    let mut sites = Vec::new();
    for b in 0..nb {
        for r in 0..h.saturating_sub(1) {
            for col in 0..w.saturating_sub(1) {
                let i = (b * h + r) * w + col;
                if ok(i) && ok(i + 1) && ok(i + w) {
                    sites.push(i);
                }
            }
        }
    }
    if !sites.is_empty() {
        let k = sites.len() as f64;
        for i in sites {
            let np = [-(p[i + 1] - p[i]), -(p[i + w] - p[i]), 1.0];
            let ng = [-(y[i + 1] - y[i]), -(y[i + w] - y[i]), 1.0];
            let lp = np.iter().map(|v| v * v).sum::<f64>().sqrt();
            let lg = ng.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = np.iter().zip(&ng).map(|(a, b)| a * b).sum();
            let cos = dot / (lp * lg);
            normal += 1.0 - cos;
            // d(1 - cos)/d np, then chain through np = (-dx, -dy, 1)
            let dn: Vec<f64> = (0..2).map(|j| -(ng[j] / (lp * lg) - cos * np[j] / (lp * lp)) / k).collect();
            gd[i + 1] -= dn[0];
            gd[i + w] -= dn[1];
            gd[i] += dn[0] + dn[1];
        }
        normal /= k;
    }
    let value = LossValue::weighted(vec![
        ("depth".into(), depth, 1.0),
        ("gradient".into(), grad_term, 1.0),
        ("normal".into(), normal, 1.0),
    ]);
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn grid(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.001..0.999)).collect()).unwrap()
    }

    fn value_of(f: impl FnOnce(&mut Graph) -> Result<Loss>) -> (f64, LossValue) {
        let mut g = Graph::new();
        let l = f(&mut g).unwrap();
        (g.value(l.var).data()[0], l.value)
    }

    fn oracle_d(real: &Tensor, fake: &Tensor, eps: f64) -> f64 {
        let (mut a, mut b) = (0.0, 0.0);
        for &x in real.data() {
            a += x.clamp(eps, 1.0 - eps).ln();
        }
        for &x in fake.data() {
            b += (1.0 - x.clamp(eps, 1.0 - eps)).ln();
        }
        -a / real.len() as f64 - b / fake.len() as f64
    }

    fn oracle_g(fake: &Tensor, eps: f64) -> f64 {
        let mut s = 0.0;
        for &x in fake.data() {
            s += (1.0 - x.clamp(eps, 1.0 - eps)).ln();
        }
        s / fake.len() as f64
    }

    #[test]
    fn discriminator_losses_at_fixed_points() {
        let w = LossWeights::default();
        let half = Tensor::full(&[2, 1, 3, 3], 0.5);
        for f in [loss_pd, loss_dd] {
            let (v, lv) = value_of(|g| {
                let (r, fk) = (g.constant(half.clone()), g.constant(half.clone()));
                f(g, r, fk, &w)
            });
            assert_relative_eq!(v, 2.0 * LN2, epsilon = 1e-12);
            assert_relative_eq!(lv.scalar, v, epsilon = 1e-12);
            let perfect = value_of(|g| {
                let r = g.constant(Tensor::full(&[2, 1, 3, 3], 1.0));
                let fk = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
                f(g, r, fk, &w)
            })
            .0;
            assert!(perfect > 0.0 && perfect <= 2.0 * w.epsilon * 1.001, "{perfect}");
        }
    }

    #[test]
    fn discriminator_losses_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = LossWeights::default();
        for _ in 0..20 {
            let real = grid(&[3, 1, 4, 5], &mut rng);
            let fake = grid(&[3, 1, 4, 5], &mut rng);
            let (v, _) = value_of(|g| {
                let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
                loss_pd(g, r, f, &w)
            });
            assert!((v - oracle_d(&real, &fake, w.epsilon)).abs() < 1e-9);
        }
    }

    #[test]
    fn generator_terms() {
        let w = LossWeights::default();
        let (v, _) = value_of(|g| {
            let f = g.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
            loss_g_pd(g, f, &w)
        });
        assert_relative_eq!(v, 0.5f64.ln(), epsilon = 1e-12);
        let (v, _) = value_of(|g| {
            let f = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
            loss_g_dd(g, f, &w)
        });
        assert_relative_eq!(v, w.epsilon.ln(), epsilon = 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fake = grid(&[2, 1, 3, 3], &mut rng);
        let (v, _) = value_of(|g| {
            let f = g.constant(fake.clone());
            loss_g_dd(g, f, &w)
        });
        assert!((v - oracle_g(&fake, w.epsilon)).abs() < 1e-9);
        let ns = LossWeights {
            non_saturating: true,
            ..w
        };
        let (v, _) = value_of(|g| {
            let f = g.constant(fake.clone());
            loss_g_pd(g, f, &ns)
        });
        let want = -fake.data().iter().map(|x| x.ln()).sum::<f64>() / fake.len() as f64;
        assert!((v - want).abs() < 1e-9);
    }

    #[test]
    fn semi_composition_and_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pd = grid(&[2, 1, 3, 3], &mut rng);
        let dd = grid(&[2, 1, 3, 3], &mut rng);
        let w = LossWeights::default();
        let (v, lv) = value_of(|g| {
            let (a, b) = (g.constant(pd.clone()), g.constant(dd.clone()));
            loss_g_semi(g, &w, Some(a), Some(b))
        });
        let want = 0.7 * oracle_g(&pd, w.epsilon) + 0.3 * oracle_g(&dd, w.epsilon);
        assert!((v - want).abs() < 1e-9);
        assert!((lv.scalar - v).abs() < 1e-9);

        let w1 = LossWeights { lambda: 1.0, ..w.clone() };
        let (semi, _) = value_of(|g| {
            let (a, b) = (g.constant(pd.clone()), g.constant(dd.clone()));
            loss_g_semi(g, &w1, Some(a), Some(b))
        });
        let (only, _) = value_of(|g| {
            let a = g.constant(pd.clone());
            loss_g_pd(g, a, &w1)
        });
        assert_eq!(semi.to_bits(), only.to_bits());

        let half = Tensor::full(&[1, 1, 2, 2], 0.5);
        let (v, _) = value_of(|g| {
            let (a, b) = (g.constant(half.clone()), g.constant(half.clone()));
            loss_g_semi(g, &w, Some(a), Some(b))
        });
        assert_relative_eq!(v, 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn supervised_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = LossWeights::default();
        let half = Tensor::full(&[1, 1, 2, 2], 0.5);
        let gt = Tensor::new(vec![1, 1, 3, 3], (0..9).map(|i| 1.0 + i as f64).collect()).unwrap();
        let mask = Tensor::full(&[1, 1, 3, 3], 1.0);
        let (v, _) = value_of(|g| {
            let (a, b, p) = (g.constant(half.clone()), g.constant(half.clone()), g.param(gt.clone()));
            loss_g_sup(g, &w, 10.0, Some(a), Some(b), p, &gt, &mask)
        });
        assert_relative_eq!(v, 0.5f64.ln(), epsilon = 1e-12);

        let pd = grid(&[2, 1, 3, 3], &mut rng);
        let dd = grid(&[2, 1, 3, 3], &mut rng);
        let pred = Tensor::new(vec![1, 1, 3, 3], (0..9).map(|_| rng.random_range(0.5..9.0)).collect()).unwrap();
        let mut mask = mask.clone();
        mask.data_mut()[4] = 0.0;
        let (semi, _) = value_of(|g| {
            let (a, b) = (g.constant(pd.clone()), g.constant(dd.clone()));
            loss_g_semi(g, &w, Some(a), Some(b))
        });
        let (beta0, _) = value_of(|g| {
            let (a, b, p) = (g.constant(pd.clone()), g.constant(dd.clone()), g.constant(pred.clone()));
            loss_g_sup(g, &w, 0.0, Some(a), Some(b), p, &gt, &mask)
        });
        assert!((semi - beta0).abs() < 1e-12);
        let (v, lv) = value_of(|g| {
            let (a, b, p) = (g.constant(pd.clone()), g.constant(dd.clone()), g.constant(pred.clone()));
            loss_g_sup(g, &w, 10.0, Some(a), Some(b), p, &gt, &mask)
        });
        let l1: f64 = (0..9)
            .filter(|&i| i != 4)
            .map(|i| (pred.data()[i] - gt.data()[i]).abs())
            .sum::<f64>()
            / 8.0;
        let want = 0.7 * oracle_g(&pd, w.epsilon) + 0.3 * oracle_g(&dd, w.epsilon) + 10.0 * l1;
        assert!((v - want).abs() < 1e-9);
        let parts: f64 = lv.components.iter().map(|c| c.weight * c.value).sum();
        assert!((parts - lv.scalar).abs() < 1e-9);

        let empty = Tensor::zeros(&[1, 1, 3, 3]);
        let mut g = Graph::new();
        let (a, b, p) = (g.constant(pd.clone()), g.constant(dd.clone()), g.constant(pred.clone()));
        assert!(matches!(
            loss_g_sup(&mut g, &w, 10.0, Some(a), Some(b), p, &gt, &empty),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn minimax_fixed_points() {
        let half = Tensor::full(&[1, 1, 2, 2], 0.5);
        let v = minimax_value(&half, &half, &half, &half, 1e-7).unwrap();
        assert_relative_eq!(v.scalar, 4.0 * 0.5f64.ln(), epsilon = 1e-12);
        let one = Tensor::full(&[1, 1, 2, 2], 1.0);
        let zero = Tensor::zeros(&[1, 1, 2, 2]);
        let v = minimax_value(&one, &zero, &one, &zero, 1e-12).unwrap();
        assert!(v.scalar < 0.0 && v.scalar > -1e-11);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g4: Vec<_> = (0..4).map(|_| grid(&[2, 1, 3, 3], &mut rng)).collect();
        let v = minimax_value(&g4[0], &g4[1], &g4[2], &g4[3], 1e-7).unwrap();
        let want = -(oracle_d(&g4[0], &g4[1], 1e-7) + oracle_d(&g4[2], &g4[3], 1e-7));
        assert!((v.scalar - want).abs() < 1e-9);
    }

    #[test]
    fn empty_batch() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[0, 1, 2, 2]));
        let r = g.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        assert!(matches!(loss_pd(&mut g, r, e, &LossWeights::default()), Err(Error::EmptyBatch)));
    }

    fn baseline(kind: LossKind, coef: f64, p: &[f64], y: &[f64]) -> f64 {
        let n = p.len();
        let t = |v: &[f64]| Tensor::new(vec![1, 1, 1, n], v.to_vec()).unwrap();
        let mask = Tensor::full(&[1, 1, 1, n], 1.0);
        pixel_loss_value(kind, coef, &t(p), &t(y), &mask).unwrap().0.scalar
    }

    #[test]
    fn baselines_vanish_at_zero_residual() {
        let y = [1.0, 2.0, 3.5, 4.0, 0.5, 7.0];
        for kind in LossKind::ALL {
            assert_eq!(baseline(kind, 0.5, &y, &y), 0.0, "{kind:?}");
        }
    }

    #[test]
    fn scale_invariant_closed_form() {
        let y = [1.0, 2.0, 3.5, 4.0];
        let p: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        assert_relative_eq!(baseline(LossKind::ScaleInvariant, 0.5, &p, &y), 0.5 * LN2 * LN2, epsilon = 1e-12);
        assert!((0.5 * LN2 * LN2 - 0.2402).abs() < 1e-4);
        // with coefficient one the loss ignores a global scale
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..5.0)).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..5.0)).collect();
        let base = baseline(LossKind::ScaleInvariant, 1.0, &p, &y);
        for c in [0.1, 3.0, 17.0] {
            let scaled: Vec<f64> = p.iter().map(|v| v * c).collect();
            assert!((baseline(LossKind::ScaleInvariant, 1.0, &scaled, &y) - base).abs() < 1e-9);
        }
        let t = |v: f64| Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap();
        let one = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert!(matches!(
            pixel_loss_value(LossKind::ScaleInvariant, 0.5, &t(-1.0), &t(1.0), &one),
            Err(Error::NonPositiveDepth { .. })
        ));
    }

    #[test]
    fn berhu_hand_example() {
        let v = baseline(LossKind::Berhu, 0.5, &[1.1, 5.0], &[1.0, 2.0]);
        assert_relative_eq!(v, 3.95, epsilon = 1e-12);
    }

    #[test]
    fn huber_l1_l2_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..5.0)).collect();
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..5.0)).collect();
        let (mut l1, mut l2, mut hu) = (0.0, 0.0, 0.0);
        for (a, b) in p.iter().zip(&y) {
            let r: f64 = a - b;
            l1 += r.abs();
            l2 += r * r;
            hu += if r.abs() <= 1.0 { 0.5 * r * r } else { r.abs() - 0.5 };
        }
        assert!((baseline(LossKind::L1, 0.5, &p, &y) - l1 / 30.0).abs() < 1e-12);
        assert!((baseline(LossKind::L2, 0.5, &p, &y) - l2 / 30.0).abs() < 1e-12);
        assert!((baseline(LossKind::Huber, 0.5, &p, &y) - hu / 30.0).abs() < 1e-12);
    }

    #[test]
    fn edge_aware_on_constant_offset() {
        // a constant offset leaves gradients and normals untouched
        let y: Vec<f64> = (0..16).map(|i| 1.0 + (i % 5) as f64 * 0.3).collect();
        let p: Vec<f64> = y.iter().map(|v| v + 0.25).collect();
        let t = |v: &[f64]| Tensor::new(vec![1, 1, 4, 4], v.to_vec()).unwrap();
        let mask = Tensor::full(&[1, 1, 4, 4], 1.0);
        let (lv, _) = pixel_loss_value(LossKind::EdgeAware, 0.5, &t(&p), &t(&y), &mask).unwrap();
        assert_relative_eq!(lv.component("depth").unwrap(), 0.25, epsilon = 1e-12);
        assert!(lv.component("gradient").unwrap().abs() < 1e-12);
        assert!(lv.component("normal").unwrap().abs() < 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = [2, 1, 5, 6];
        let n = 60;
        let y = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..8.0)).collect()).unwrap();
        let p = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..8.0)).collect()).unwrap();
        let mask = Tensor::new(shape.to_vec(), (0..n).map(|i| if i % 7 == 3 { 0.0 } else { 1.0 }).collect()).unwrap();
        for kind in LossKind::ALL {
            let (_, grad) = pixel_loss_value(kind, 0.5, &p, &y, &mask).unwrap();
            for i in 0..n {
                let h = 1e-6;
                let mut a = p.clone();
                a.data_mut()[i] += h;
                let mut b = p.clone();
                b.data_mut()[i] -= h;
                let fa = pixel_loss_value(kind, 0.5, &a, &y, &mask).unwrap().0.scalar;
                let fb = pixel_loss_value(kind, 0.5, &b, &y, &mask).unwrap().0.scalar;
                let fd = (fa - fb) / (2.0 * h);
                let an = grad.data()[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{kind:?} [{i}] fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn beta_schedule() {
        let w = LossWeights { beta_decay: true, ..Default::default() };
        assert_eq!(w.beta_at(0.0), 10.0);
        assert_relative_eq!(w.beta_at(1.0 / 6.0), 5.5, epsilon = 1e-12);
        assert_eq!(w.beta_at(0.5), 1.0);
        assert_eq!(LossWeights::default().beta_at(0.9), 10.0);
    }
}
