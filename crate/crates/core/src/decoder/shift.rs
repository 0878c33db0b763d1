//! Downstream attention changes caused by steering.
//!
//! The same forced continuation is decoded twice, with and without the plan,
//! and the head-averaged attention rows of a layer above every steered head
//! are compared step by step.

use std::io::Write;

use super::model::{decode_forced, DecodeOptions, Token, ToyDecoder};
use super::synth::Perturbation;
use crate::error::{Error, Result};
use crate::steering::SteeringPlan;

/// Default `eps` in the relative-shift denominator.
pub const DEFAULT_SHIFT_EPS: f64 = 1e-6;

/// Relative attention change `(W_steered - W_unsteered) / (W_unsteered + eps)`
/// at one layer. `rows[t][j]` is query step `t` attending to key position
/// `j`; keys beyond the query position are masked in both streams and stay 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionShift {
    pub layer: usize,
    /// First step at which any unit fired, if one did.
    pub t_fire: Option<usize>,
    pub eps: f64,
    pub rows: Vec<Vec<f64>>,
}

impl AttentionShift {
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    /// Largest absolute entry of query step `t`.
    pub fn row_max(&self, t: usize) -> f64 {
        self.rows[t].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.rows.iter().flatten().all(|&v| v == 0.0)
    }

    /// Query steps with any nonzero entry.
    pub fn shifted_steps(&self) -> Vec<usize> {
        (0..self.rows.len()).filter(|&t| self.row_max(t) != 0.0).collect()
    }
}

/// First layer strictly above every steered head, if the model has one.
pub fn default_shift_layer(plan: &SteeringPlan, layers: usize) -> Option<usize> {
    let l = plan.max_layer()? + 1;
    (l < layers).then_some(l)
}

pub fn attention_shift(
    model: &ToyDecoder,
    plan: &SteeringPlan,
    prompt: &[Token],
    forced: &[Token],
    layer: Option<usize>,
    eps: f64,
    perturbation: Option<&Perturbation>,
) -> Result<AttentionShift> {
    if forced.is_empty() {
        return Err(Error::Empty("forced tokens"));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps {eps} must be positive")));
    }
    let layers = model.config().layers;
    let layer = match layer {
        Some(l) if l < layers => l,
        Some(l) => return Err(Error::InvalidArgument(format!("layer {l} outside model with {layers} layers"))),
        None => default_shift_layer(plan, layers)
            .ok_or_else(|| Error::InvalidArgument("no layer above the steered heads".into()))?,
    };
    let opts = DecodeOptions {
        perturbation,
        capture_attention: true,
        ..Default::default()
    };
    let base = decode_forced(model, prompt, forced, opts)?;
    let steered = decode_forced(model, prompt, forced, DecodeOptions { plan: Some(plan), ..opts })?;

    let width = prompt.len() + forced.len() - 1;
    let (a, b) = (base.attention.unwrap_or_default(), steered.attention.unwrap_or_default());
    let rows = a
        .iter()
        .zip(&b)
        .map(|(u, s)| {
            let mut row = vec![0.0; width];
            for (j, (wu, ws)) in u[layer].iter().zip(&s[layer]).enumerate() {
                row[j] = (ws - wu) / (wu + eps);
            }
            row
        })
        .collect();
    Ok(AttentionShift {
        layer,
        t_fire: steered.trigger_log.first_fire(),
        eps,
        rows,
    })
}

/// `# layer <l> t_fire <t|none>`, then `step,<key positions...>` and one row per query step.
pub fn write_shift_csv<W: Write>(mut out: W, shift: &AttentionShift) -> Result<()> {
    let io = |e| Error::io("<attention shift>", e);
    let t_fire = shift.t_fire.map_or_else(|| "none".to_owned(), |t| t.to_string());
    writeln!(out, "# layer {} t_fire {t_fire}", shift.layer).map_err(io)?;
    let width = shift.rows.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let header = std::iter::once("step".to_owned()).chain((0..width).map(|j| j.to_string()));
    w.write_record(header)?;
    for (t, row) in shift.rows.iter().enumerate() {
        w.write_record(std::iter::once(t.to_string()).chain(row.iter().map(|v| v.to_string())))?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::detector::Threshold;
    use crate::manifold::ErrorManifold;
    use crate::steering::SteeringUnit;
    use crate::trace::HeadId;

    fn setup(tau: f64) -> (ToyDecoder, SteeringPlan) {
        let model = ToyDecoder::new(DecoderConfig {
            layers: 3,
            heads: 2,
            head_dim: 4,
            vocab: 16,
            context: 32,
            seed: 3,
        })
        .unwrap();
        let m = ErrorManifold::new(HeadId::new(0, 1), vec![1.0, 0.0, 0.0, 0.0], vec![0.0; 4], vec![1.0]).unwrap();
        let unit = SteeringUnit::new(Arc::new(m), Threshold::fixed(tau), 1.0).unwrap();
        (model, SteeringPlan::new("demo", vec![unit]).unwrap())
    }

    #[test]
    fn disabled_steering_leaves_attention_unchanged() {
        let (model, plan) = setup(f64::INFINITY);
        let s = attention_shift(&model, &plan, &[1, 2, 3], &[4, 5, 6, 7], None, DEFAULT_SHIFT_EPS, None).unwrap();
        assert_eq!(s.layer, 1);
        assert_eq!(s.t_fire, None);
        assert_eq!(s.steps(), 4);
        assert!(s.is_zero());
    }

    #[test]
    fn firing_shifts_downstream_attention() {
        let (model, plan) = setup(0.0);
        let s = attention_shift(&model, &plan, &[1, 2, 3], &[4, 5, 6, 7], None, DEFAULT_SHIFT_EPS, None).unwrap();
        assert_eq!(s.t_fire, Some(0));
        assert!(!s.is_zero());
        assert!(s.rows.iter().enumerate().all(|(t, r)| r[3 + t..].iter().all(|&v| v == 0.0)));
        let mut buf = Vec::new();
        write_shift_csv(&mut buf, &s).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# layer 1 t_fire 0\nstep,0,1,2,3,4,5\n"));
    }

    #[test]
    fn top_layer_has_no_default() {
        let (model, _) = setup(0.0);
        let m = ErrorManifold::new(HeadId::new(2, 0), vec![1.0, 0.0, 0.0, 0.0], vec![0.0; 4], vec![1.0]).unwrap();
        let unit = SteeringUnit::new(Arc::new(m), Threshold::fixed(0.0), 1.0).unwrap();
        let plan = SteeringPlan::new("top", vec![unit]).unwrap();
        assert_eq!(default_shift_layer(&plan, 3), None);
        assert!(attention_shift(&model, &plan, &[1], &[2], None, 1e-6, None).is_err());
    }
}
