use super::cascade::StageOutput;
use super::rpn::RpnOutput;
use super::sampling::SampledBatch;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// The loss and its two parts; `total = cls + λ·reg`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// Classification mean over a batch plus box regression summed over its
/// positives, both divided by the batch size.
fn batch_terms<T: Real>(
    tape: &mut Tape<T>,
    batch: &SampledBatch,
    logits: Var,
    positive_deltas: impl FnOnce(&mut Tape<T>, &[usize]) -> Result<Var>,
) -> Result<(Var, Var)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::invalid("total_loss", "empty sample batch (N = 0)"));
    }
    let cls = tape.softmax_cross_entropy_labels(logits, &batch.labels)?;
    let rows: Vec<usize> = (0..n).filter(|&r| batch.targets[r].is_some()).collect();
    let reg = if rows.is_empty() {
        tape.constant(Tensor::scalar(T::zero()))
    } else {
        let pred = positive_deltas(tape, &rows)?;
        let target = Tensor::from_fn(&[rows.len(), 4], |i| T::lit(batch.targets[rows[i / 4]].expect("positive")[i % 4]));
        tape.smooth_l1_normalized(pred, target, T::lit(n as f64))?
    };
    Ok((cls, reg))
}

/// Multi-task loss over the RPN batch and every cascade stage. Row `r` of
/// `stage_outputs[t]` must correspond to row `r` of `stage_batches[t]`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    stage_batches: &[SampledBatch],
    stage_outputs: &[StageOutput],
    rpn_batch: &SampledBatch,
    rpn_output: &RpnOutput,
    lambda: f64,
) -> Result<LossTerms> {
    if stage_batches.len() != stage_outputs.len() {
        return Err(Error::invalid(
            "total_loss",
            format!("{} stage batches for {} stage outputs", stage_batches.len(), stage_outputs.len()),
        ));
    }
    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();

    if rpn_batch.is_empty() {
        return Err(Error::invalid("total_loss", "empty RPN sample batch (N = 0)"));
    }
    let rpn_logits = rpn_output.gather_logits(tape, &rpn_batch.indices)?;
    let (c, r) = batch_terms(tape, rpn_batch, rpn_logits, |tape, rows| {
        let anchors: Vec<usize> = rows.iter().map(|&r| rpn_batch.indices[r]).collect();
        rpn_output.gather_deltas(tape, &anchors)
    })?;
    cls_terms.push(c);
    reg_terms.push(r);

    for (t, (batch, out)) in stage_batches.iter().zip(stage_outputs).enumerate() {
        let rows_out = tape.shape(out.class_logits)[0];
        if rows_out != batch.len() {
            return Err(Error::invalid("total_loss", format!("stage {t}: {rows_out} outputs for {} samples", batch.len())));
        }
        let deltas = out.box_deltas;
        let (c, r) = batch_terms(tape, batch, out.class_logits, |tape, rows| {
            let index = rows.iter().flat_map(|&r| (0..4).map(move |k| Some(r * 4 + k))).collect();
            tape.gather(deltas, index, &[rows.len(), 4])
        })?;
        cls_terms.push(c);
        reg_terms.push(r);
    }

    let cls = tape.add_all(&cls_terms)?;
    let reg = tape.add_all(&reg_terms)?;
    let weighted = tape.scale(reg, T::lit(lambda));
    let total = tape.add(cls, weighted)?;
    Ok(LossTerms { total, cls, reg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    struct Case {
        tape: Tape<f64>,
        rpn: RpnOutput,
        rpn_batch: SampledBatch,
        stage: StageOutput,
        batch: SampledBatch,
    }

    fn case(objectness: f64, logits: Vec<f64>, deltas: Vec<f64>) -> Case {
        let mut tape = Tape::new();
        let obj = tape.leaf(Tensor::new(&[1, 1, 1, 1], vec![objectness]).unwrap());
        let rd = tape.leaf(Tensor::new(&[1, 4, 1, 1], vec![0.1, -0.2, 1.5, 0.0]).unwrap());
        let rpn = RpnOutput { objectness: vec![obj], deltas: vec![rd], extents: vec![(1, 1)], per_cell: 1 };
        let rpn_batch = SampledBatch { indices: vec![0], labels: vec![1], targets: vec![Some([0.0; 4])] };
        let class_logits = tape.leaf(Tensor::new(&[2, 11], logits).unwrap());
        let box_deltas = tape.leaf(Tensor::new(&[2, 4], deltas).unwrap());
        let b = BBox::new(0.0, 0.0, 8.0, 8.0);
        let stage = StageOutput { boxes_in: vec![b; 2], class_logits, box_deltas, refined: vec![b; 2] };
        let batch =
            SampledBatch { indices: vec![0, 1], labels: vec![3, 10], targets: vec![Some([0.5, 0.0, 0.0, 0.0]), None] };
        Case { tape, rpn, rpn_batch, stage, batch }
    }

    fn hand_case() -> Case {
        let mut logits = vec![0.0; 22];
        logits[3] = 2.0;
        case(0.5, logits, vec![0.5, 0.0, 2.0, 0.0, 9.0, 9.0, 9.0, 9.0])
    }

    #[test]
    fn matches_hand_evaluation() {
        // RPN: −log σ(0.5); smooth-L1 of (0.1, −0.2, 1.5, 0) = 0.005 + 0.02 + 1.0
        let rpn_cls = (1.0 + (-0.5f64).exp()).ln();
        let rpn_reg = 1.025;
        // stage: rows (class 3 with logit 2, background with all-zero logits)
        let stage_cls = (((2.0f64).exp() + 10.0).ln() - 2.0 + 11.0f64.ln()) / 2.0;
        // positive row differs by 2 in one coordinate → 1.5; N = 2
        let stage_reg = 1.5 / 2.0;
        for lambda in [0.0, 1.0, 2.0] {
            let mut c = hand_case();
            let terms = total_loss(&mut c.tape, &[c.batch.clone()], &[c.stage.clone()], &c.rpn_batch, &c.rpn, lambda).unwrap();
            let v = |x: Var| c.tape.value(x).data()[0];
            let expect = rpn_cls + stage_cls + lambda * (rpn_reg + stage_reg);
            assert!((v(terms.total) - expect).abs() < 1e-12, "lambda {lambda}");
            assert!((v(terms.cls) - (rpn_cls + stage_cls)).abs() < 1e-12);
            assert!((v(terms.reg) - (rpn_reg + stage_reg)).abs() < 1e-12);
            assert!((v(terms.total) - (v(terms.cls) + lambda * v(terms.reg))).abs() < 1e-12);
        }
    }

    #[test]
    fn minimum_at_perfect_predictions() {
        let mut logits = vec![0.0; 22];
        logits[3] = 60.0;
        logits[11 + 10] = 60.0;
        let mut c = case(60.0, logits, vec![0.5, 0.0, 0.0, 0.0, 3.0, 3.0, 3.0, 3.0]);
        c.rpn_batch.targets[0] = Some([0.1, -0.2, 1.5, 0.0]);
        let terms = total_loss(&mut c.tape, &[c.batch], &[c.stage], &c.rpn_batch, &c.rpn, 1.0).unwrap();
        assert_eq!(c.tape.value(terms.reg).data()[0], 0.0);
        assert!(c.tape.value(terms.cls).data()[0] < 1e-20);
    }

    #[test]
    fn background_rows_carry_no_regression_gradient() {
        let mut c = hand_case();
        let terms = total_loss(&mut c.tape, &[c.batch], &[c.stage.clone()], &c.rpn_batch, &c.rpn, 1.0).unwrap();
        let g = c.tape.backward(terms.total, &mut Default::default()).unwrap();
        let gd = g.wrt(c.stage.box_deltas).unwrap().data().to_vec();
        assert_eq!(&gd[4..], &[0.0; 4]);
        // d/dx of smooth-L1 at 2 is 1, divided by N = 2
        assert_eq!(&gd[..4], &[0.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut c = hand_case();
        let empty = SampledBatch::default();
        assert!(total_loss(&mut c.tape, std::slice::from_ref(&empty), std::slice::from_ref(&c.stage), &c.rpn_batch, &c.rpn, 1.0).is_err());
        assert!(total_loss(&mut c.tape, &[c.batch.clone()], &[c.stage], &empty, &c.rpn, 1.0).is_err());
    }
}
