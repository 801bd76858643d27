//! Additive angular margin classification head and the analytic backward
//! pass through loss, L2 normalization, per-dimension softmax aggregation and
//! the cascaded tanh blocks. No autodiff; derivatives are hand-written for
//! exactly this computation graph and checked against central differences.

use crate::attention::{forward_trace, AttentionParams, Mode};
use crate::pool::{nan_weights, stable_softmax, NanParams};
use crate::rng::SplitMix64;
use crate::types::{FeatureSet, FeatureVector};
use crate::{Error, Result};

const COS_CLAMP: f64 = 1.0 - 1e-7;

/// Classification head: one unit-norm weight row per identity, with the
/// true-class logit pushed by an additive angular margin.
/// Logits are s*cos(theta_y + m) for the labeled class and s*cos(theta_j)
/// otherwise; the loss is cross-entropy over these logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginHead {
    dim: usize,
    num_classes: usize,
    /// C x M row-major; rows kept unit-norm.
    pub class_weights: Vec<f64>,
    pub margin_m: f64,
    pub scale_s: f64,
}

impl MarginHead {
    /// Rows drawn as random unit vectors from the given generator.
    pub fn random_unit(dim: usize, num_classes: usize, rng: &mut SplitMix64) -> Self {
        let mut class_weights = Vec::with_capacity(num_classes * dim);
        for _ in 0..num_classes {
            let row = rng.gaussian_vec(dim, 1.0);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            class_weights.extend(row.iter().map(|x| x / norm));
        }
        Self {
            dim,
            num_classes,
            class_weights,
            margin_m: 0.5,
            scale_s: 8.0,
        }
    }

    pub fn with_margin(mut self, margin_m: f64, scale_s: f64) -> Self {
        self.margin_m = margin_m;
        self.scale_s = scale_s;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.class_weights[class * self.dim..(class + 1) * self.dim]
    }

    /// Re-normalize every class row to unit norm (called after each update).
    pub fn renormalize(&mut self) {
        for row in self.class_weights.chunks_mut(self.dim) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in row {
                    *x /= norm;
                }
            }
        }
    }
}

/// Gradients of the loss with respect to every trainable parameter.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub d_q1: Vec<f64>,
    pub d_b1: Vec<f64>,
    pub d_q2: Vec<f64>,
    pub d_b2: Vec<f64>,
    pub d_class_weights: Vec<f64>,
    pub loss_value: f64,
}

impl GradientBundle {
    pub fn zeros(dim: usize, num_classes: usize) -> Self {
        Self {
            d_q1: vec![0.0; dim * dim],
            d_b1: vec![0.0; dim],
            d_q2: vec![0.0; dim * dim],
            d_b2: vec![0.0; dim],
            d_class_weights: vec![0.0; num_classes * dim],
            loss_value: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &GradientBundle, factor: f64) {
        let pairs: [(&mut Vec<f64>, &Vec<f64>); 5] = [
            (&mut self.d_q1, &other.d_q1),
            (&mut self.d_b1, &other.d_b1),
            (&mut self.d_q2, &other.d_q2),
            (&mut self.d_b2, &other.d_b2),
            (&mut self.d_class_weights, &other.d_class_weights),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
        self.loss_value += factor * other.loss_value;
    }
}

fn logits(template: &FeatureVector, label: u32, head: &MarginHead) -> Result<Vec<f64>> {
    if template.dim() != head.dim {
        return Err(Error::DimensionMismatch {
            expected: head.dim,
            got: template.dim(),
        });
    }
    if label as usize >= head.num_classes {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: head.num_classes,
        });
    }
    let mut out = Vec::with_capacity(head.num_classes);
    for j in 0..head.num_classes {
        let cos: f64 = head
            .row(j)
            .iter()
            .zip(template.values())
            .map(|(w, t)| w * t)
            .sum();
        let cos = cos.clamp(-COS_CLAMP, COS_CLAMP);
        let logit = if j == label as usize {
            head.scale_s * (cos.acos() + head.margin_m).cos()
        } else {
            head.scale_s * cos
        };
        out.push(logit);
    }
    Ok(out)
}

/// Cross-entropy over margin logits. With margin 0 this is plain scaled
/// cosine-softmax cross-entropy.
pub fn margin_loss(template: &FeatureVector, label: u32, head: &MarginHead) -> Result<f64> {
    let logit = logits(template, label, head)?;
    let max = logit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logit.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logit[label as usize])
}

/// Gradient of the margin loss with respect to the template and the class
/// weights. Returns (loss, dL/dtemplate, dL/dclass_weights).
fn margin_loss_backward(
    template: &FeatureVector,
    label: u32,
    head: &MarginHead,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let logit = logits(template, label, head)?;
    let mut probs = logit.clone();
    stable_softmax(&mut probs);
    let max = logit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logit.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = lse - logit[label as usize];

    let y = label as usize;
    let mut d_template = vec![0.0; head.dim];
    let mut d_class_weights = vec![0.0; head.num_classes * head.dim];
    for j in 0..head.num_classes {
        let g_logit = probs[j] - if j == y { 1.0 } else { 0.0 };
        let cos: f64 = head
            .row(j)
            .iter()
            .zip(template.values())
            .map(|(w, t)| w * t)
            .sum();
        // Inside the clamp the margin logit is s*cos(acos(c)+m) with
        // derivative s*sin(theta+m)/sin(theta); at the clamp boundary the
        // logit is constant in c and the derivative is zero.
        let d_logit_d_cos = if j == y {
            if cos.abs() >= COS_CLAMP {
                0.0
            } else {
                let theta = cos.acos();
                head.scale_s * (theta + head.margin_m).sin() / theta.sin()
            }
        } else if cos.abs() >= COS_CLAMP {
            0.0
        } else {
            head.scale_s
        };
        let g_cos = g_logit * d_logit_d_cos;
        for m in 0..head.dim {
            d_template[m] += g_cos * head.row(j)[m];
            d_class_weights[j * head.dim + m] += g_cos * template[m];
        }
    }
    Ok((loss, d_template, d_class_weights))
}

/// Full backward pass: gradients of margin_loss(forward(s, p), label, head)
/// with respect to the aggregation parameters and the head.
pub fn backward(
    s: &FeatureSet,
    p: &AttentionParams,
    head: &MarginHead,
    label: u32,
) -> Result<GradientBundle> {
    let dim = s.dim();
    let k_frames = s.len();
    let trace = forward_trace(s, p)?;
    let (loss, d_template, d_class_weights) =
        margin_loss_backward(&trace.template, label, head)?;

    // Through L2 normalization: dL/dr = (g - (g . r~) r~) / ||r||.
    let g_dot_t: f64 = d_template
        .iter()
        .zip(trace.template.values())
        .map(|(g, t)| g * t)
        .sum();
    let d_raw: Vec<f64> = d_template
        .iter()
        .zip(trace.template.values())
        .map(|(g, t)| (g - g_dot_t * t) / trace.raw_norm)
        .collect();

    // Through the weighted sum and the per-row softmax over frames:
    // dL/da_mk = dL/dr_m * F_k[m];
    // dL/de_mk = a_mk (dL/da_mk - sum_j a_mj dL/da_mj).
    let a = &trace.weights;
    let mut d_sig = vec![0.0; dim * k_frames];
    for m in 0..dim {
        let row = &a.entries[m * k_frames..(m + 1) * k_frames];
        let d_a_row: Vec<f64> = (0..k_frames)
            .map(|k| d_raw[m] * s.frames()[k][m])
            .collect();
        let weighted: f64 = row.iter().zip(&d_a_row).map(|(a, d)| a * d).sum();
        for k in 0..k_frames {
            d_sig[m * k_frames + k] = row[k] * (d_a_row[k] - weighted);
        }
    }

    let mut out = GradientBundle::zeros(dim, head.num_classes);
    out.loss_value = loss;
    out.d_class_weights = d_class_weights;

    match p.mode {
        Mode::LinearSingleBlock => {
            // e_mk = sum_d q1[m][d] F_k[d]
            for m in 0..dim {
                for k in 0..k_frames {
                    let g = d_sig[m * k_frames + k];
                    if g == 0.0 {
                        continue;
                    }
                    let frame = s.frames()[k].values();
                    let row = &mut out.d_q1[m * dim..(m + 1) * dim];
                    for (dq, &x) in row.iter_mut().zip(frame) {
                        *dq += g * x;
                    }
                }
            }
        }
        Mode::CascadedTanh => {
            for k in 0..k_frames {
                let hidden = &trace.hidden[k];
                let frame = s.frames()[k].values();
                // dL/dz2 = dL/de * (1 - e^2)
                let mut d_z2 = vec![0.0; dim];
                for m in 0..dim {
                    let e = trace.significance.get(m, k);
                    d_z2[m] = d_sig[m * k_frames + k] * (1.0 - e * e);
                }
                let mut d_hidden = vec![0.0; dim];
                for m in 0..dim {
                    let g = d_z2[m];
                    out.d_b2[m] += g;
                    if g == 0.0 {
                        continue;
                    }
                    let q2_row = &p.q2[m * dim..(m + 1) * dim];
                    let dq2_row = &mut out.d_q2[m * dim..(m + 1) * dim];
                    for d in 0..dim {
                        dq2_row[d] += g * hidden[d];
                        d_hidden[d] += g * q2_row[d];
                    }
                }
                // dL/dz1 = dL/dh * (1 - h^2)
                for d in 0..dim {
                    let g = d_hidden[d] * (1.0 - hidden[d] * hidden[d]);
                    out.d_b1[d] += g;
                    if g == 0.0 {
                        continue;
                    }
                    let dq1_row = &mut out.d_q1[d * dim..(d + 1) * dim];
                    for (dq, &x) in dq1_row.iter_mut().zip(frame) {
                        *dq += g * x;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of the frame-level baseline trained with the same loss:
/// r = sum_k softmax_k(q . F_k) F_k, normalized, fed to the margin head.
/// Returns (loss, dL/dq, dL/dclass_weights).
pub fn backward_frame_level(
    s: &FeatureSet,
    p: &NanParams,
    head: &MarginHead,
    label: u32,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let dim = s.dim();
    let weights = nan_weights(s, p)?;
    let mut raw = vec![0.0; dim];
    for (f, &w) in s.frames().iter().zip(&weights) {
        for (r, &x) in raw.iter_mut().zip(f.values()) {
            *r += w * x;
        }
    }
    let raw_norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if raw_norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let template = FeatureVector::new(raw.iter().map(|x| x / raw_norm).collect())?;
    let (loss, d_template, d_class_weights) = margin_loss_backward(&template, label, head)?;

    let g_dot_t: f64 = d_template
        .iter()
        .zip(template.values())
        .map(|(g, t)| g * t)
        .sum();
    let d_raw: Vec<f64> = d_template
        .iter()
        .zip(template.values())
        .map(|(g, t)| (g - g_dot_t * t) / raw_norm)
        .collect();

    // dL/da_k = dL/dr . F_k; scalar softmax Jacobian over frames.
    let d_a: Vec<f64> = s
        .frames()
        .iter()
        .map(|f| f.values().iter().zip(&d_raw).map(|(x, g)| x * g).sum())
        .collect();
    let weighted: f64 = weights.iter().zip(&d_a).map(|(a, d)| a * d).sum();
    let mut d_q = vec![0.0; dim];
    for (k, frame) in s.frames().iter().enumerate() {
        let g = weights[k] * (d_a[k] - weighted);
        for (dq, &x) in d_q.iter_mut().zip(frame.values()) {
            *dq += g * x;
        }
    }
    Ok((loss, d_q, d_class_weights))
}

/// Central difference of a scalar function of one variable.
pub fn central_difference<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the analytic gradient of every trainable parameter against a
/// central finite difference with step `h`; returns the max relative error.
pub fn finite_diff_check(
    s: &FeatureSet,
    p: &AttentionParams,
    head: &MarginHead,
    label: u32,
    h: f64,
) -> Result<f64> {
    let analytic = backward(s, p, head, label)?;
    let mut worst = 0.0f64;

    let mut probe = |analytic_g: f64, loss_at: &mut dyn FnMut(f64) -> Result<f64>| -> Result<()> {
        let plus = loss_at(h)?;
        let minus = loss_at(-h)?;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic_g, numeric));
        Ok(())
    };

    // Aggregation parameters.
    for (field, grads) in [
        (0usize, &analytic.d_q1),
        (1, &analytic.d_b1),
        (2, &analytic.d_q2),
        (3, &analytic.d_b2),
    ] {
        for (i, &g) in grads.iter().enumerate() {
            probe(g, &mut |delta| {
                let mut pp = p.clone();
                match field {
                    0 => pp.q1[i] += delta,
                    1 => pp.b1[i] += delta,
                    2 => pp.q2[i] += delta,
                    _ => pp.b2[i] += delta,
                }
                let trace = forward_trace(s, &pp)?;
                margin_loss(&trace.template, label, head)
            })?;
        }
    }

    // Head weights.
    let template = forward_trace(s, p)?.template;
    for (i, &g) in analytic.d_class_weights.iter().enumerate() {
        probe(g, &mut |delta| {
            let mut hh = head.clone();
            hh.class_weights[i] += delta;
            margin_loss(&template, label, &hh)
        })?;
    }
    Ok(worst)
}

/// Finite-difference check for the frame-level baseline gradients.
pub fn finite_diff_check_frame_level(
    s: &FeatureSet,
    p: &NanParams,
    head: &MarginHead,
    label: u32,
    h: f64,
) -> Result<f64> {
    let (_, d_q, d_cw) = backward_frame_level(s, p, head, label)?;
    let loss_of = |p: &NanParams, head: &MarginHead| -> Result<f64> {
        let (loss, _, _) = backward_frame_level(s, p, head, label)?;
        Ok(loss)
    };
    let mut worst = 0.0f64;
    for (i, &g) in d_q.iter().enumerate() {
        let mut vals = p.q.values().to_vec();
        vals[i] += h;
        let plus = loss_of(&NanParams { q: FeatureVector::new(vals.clone())? }, head)?;
        vals[i] -= 2.0 * h;
        let minus = loss_of(&NanParams { q: FeatureVector::new(vals)? }, head)?;
        worst = worst.max(relative_error(g, (plus - minus) / (2.0 * h)));
    }
    for (i, &g) in d_cw.iter().enumerate() {
        let mut hh = head.clone();
        hh.class_weights[i] += h;
        let plus = loss_of(p, &hh)?;
        hh.class_weights[i] -= 2.0 * h;
        let minus = loss_of(p, &hh)?;
        worst = worst.max(relative_error(g, (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}
