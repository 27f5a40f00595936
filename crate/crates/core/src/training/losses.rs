use crate::tensor::{Result, Tensor, TensorError};

fn invalid(op: &'static str, detail: String) -> TensorError {
    TensorError::InvalidArgument { op, detail }
}

/// Mean over the batch of `−Σ_c q_c log softmax(z)_c`, where `q` is the
/// one-hot target smoothed by `smoothing` (`0` for the plain loss).
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<Tensor> {
    let &[batch, classes] = logits.shape() else {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("logits {:?}", logits.shape()),
        });
    };
    if labels.len() != batch || batch == 0 {
        return Err(invalid(
            "cross_entropy",
            format!("{} labels for batch {batch}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(invalid(
            "cross_entropy",
            format!("label {bad} out of range for {classes} classes"),
        ));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(invalid(
            "cross_entropy",
            format!("smoothing {smoothing} outside [0, 1)"),
        ));
    }
    let off = smoothing / classes as f64;
    let on = 1.0 - smoothing + off;
    let mut probs = vec![0.0; batch * classes];
    let mut loss = 0.0;
    for (i, (row, p)) in logits.data().chunks(classes).zip(probs.chunks_mut(classes)).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (pj, &x) in p.iter_mut().zip(row) {
            *pj = (x - max).exp();
            z += *pj;
        }
        let log_z = z.ln();
        for (j, (pj, &x)) in p.iter_mut().zip(row).enumerate() {
            *pj /= z;
            let q = if j == labels[i] { on } else { off };
            if q != 0.0 {
                loss -= q * (x - max - log_z);
            }
        }
    }
    let labels = labels.to_vec();
    Tensor::from_op(
        "cross_entropy",
        vec![],
        vec![loss / batch as f64],
        &[logits],
        move |ctx| {
            let scale = ctx.grad[0] / batch as f64;
            let mut g = probs.clone();
            for (i, row) in g.chunks_mut(classes).enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    let q = if j == labels[i] { on } else { off };
                    *v = (*v - q) * scale;
                }
            }
            vec![Some(g)]
        },
    )
}

/// Batch-hard triplet loss with Euclidean distance: for each anchor the
/// farthest same-label sample and the nearest other-label sample, averaged
/// `max(0, d_pos − d_neg + margin)`. Anchors without another same-label
/// sample in the batch are left out of the mean.
pub fn batch_hard_triplet_loss(embeddings: &Tensor, labels: &[usize], margin: f64) -> Result<Tensor> {
    let &[batch, dim] = embeddings.shape() else {
        return Err(TensorError::ShapeMismatch {
            op: "triplet",
            detail: format!("embeddings {:?}", embeddings.shape()),
        });
    };
    if labels.len() != batch {
        return Err(invalid("triplet", format!("{} labels for batch {batch}", labels.len())));
    }
    let e = embeddings.data();
    let mut dist = vec![0.0; batch * batch];
    for i in 0..batch {
        for j in i + 1..batch {
            let d = e[i * dim..(i + 1) * dim]
                .iter()
                .zip(&e[j * dim..(j + 1) * dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[i * batch + j] = d;
            dist[j * batch + i] = d;
        }
    }

    // (anchor, hardest positive, hardest negative, active)
    let mut triples = Vec::with_capacity(batch);
    let mut loss = 0.0;
    for i in 0..batch {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..batch {
            if j == i {
                continue;
            }
            let d = dist[i * batch + j];
            if labels[j] == labels[i] {
                if pos.is_none_or(|p| d > dist[i * batch + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| d < dist[i * batch + n]) {
                neg = Some(j);
            }
        }
        let Some(n) = neg else {
            return Err(invalid("triplet", "batch has a single identity, no negatives".into()));
        };
        let Some(p) = pos else { continue };
        let hinge = dist[i * batch + p] - dist[i * batch + n] + margin;
        loss += hinge.max(0.0);
        triples.push((i, p, n, hinge > 0.0));
    }
    if triples.is_empty() {
        return Err(invalid("triplet", "no identity appears twice in the batch".into()));
    }
    let count = triples.len() as f64;
    let data = e.to_vec();
    Tensor::from_op("triplet", vec![], vec![loss / count], &[embeddings], move |ctx| {
        let scale = ctx.grad[0] / count;
        let mut g = vec![0.0; batch * dim];
        // d‖a − b‖ / da = (a − b) / ‖a − b‖, taken as zero at a = b.
        let mut pull = |a: usize, b: usize, sign: f64| {
            let d = dist[a * batch + b];
            if d == 0.0 {
                return;
            }
            for k in 0..dim {
                let v = sign * scale * (data[a * dim + k] - data[b * dim + k]) / d;
                g[a * dim + k] += v;
                g[b * dim + k] -= v;
            }
        };
        for &(a, p, n, active) in &triples {
            if active {
                pull(a, p, 1.0);
                pull(a, n, -1.0);
            }
        }
        vec![Some(g)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_n() {
        let l = cross_entropy_loss(&Tensor::zeros([3, 7]), &[0, 3, 6], 0.0).unwrap();
        assert!((l.item().unwrap() - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits() {
        let z = Tensor::new([1, 2], vec![10.0, -10.0]).unwrap();
        let l = cross_entropy_loss(&z, &[0], 0.0).unwrap().item().unwrap();
        let expect = (1.0 + (-20f64).exp()).ln();
        assert!((l - expect).abs() < 1e-20);
        assert!((l - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        assert!(cross_entropy_loss(&Tensor::zeros([2, 3]), &[0, 3], 0.0).is_err());
        assert!(cross_entropy_loss(&Tensor::zeros([2, 3]), &[0], 0.0).is_err());
    }

    #[test]
    fn separated_clusters_have_zero_loss() {
        let e = Tensor::new([4, 2], vec![0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 10.0, 0.0]).unwrap();
        let l = batch_hard_triplet_loss(&e, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
    }

    #[test]
    fn identical_embeddings_give_margin() {
        let e = Tensor::full([4, 3], 0.7).unwrap();
        let l = batch_hard_triplet_loss(&e, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(l.item().unwrap(), 0.3);
    }

    #[test]
    fn coincident_points_have_zero_gradient() {
        let e = Tensor::param([4, 3], vec![0.7; 12]).unwrap();
        batch_hard_triplet_loss(&e, &[0, 0, 1, 1], 0.3)
            .unwrap()
            .backward()
            .unwrap();
        assert!(e.grad().unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn single_identity_is_rejected() {
        let e = Tensor::zeros([3, 2]);
        assert!(batch_hard_triplet_loss(&e, &[1, 1, 1], 0.3).is_err());
        assert!(batch_hard_triplet_loss(&e, &[0, 1, 2], 0.3).is_err());
    }
}
