use super::TrainingExample;
use crate::encoder::{CrossEncoderModel, EncoderModel, ScoreMode, TokenId};
use crate::hashing::derive_seed;
use std::collections::BTreeMap;

/// Gradient over embedding-table rows; rows not present are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    pub rows: BTreeMap<u32, Vec<f64>>,
}

impl SparseGrad {
    /// Adds `scale * g` to the row of every token in `tokens`.
    fn spread(&mut self, tokens: &[TokenId], g: &[f64], scale: f64) {
        for t in tokens {
            let row = self.rows.entry(t.0).or_insert_with(|| vec![0.0; g.len()]);
            for (r, v) in row.iter_mut().zip(g) {
                *r += scale * v;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &SparseGrad, scale: f64) {
        for (&k, g) in &other.rows {
            let row = self.rows.entry(k).or_insert_with(|| vec![0.0; g.len()]);
            for (r, v) in row.iter_mut().zip(g) {
                *r += scale * v;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.rows.values().flatten().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginGrad {
    pub loss: f64,
    pub table: SparseGrad,
    /// A distance term was exactly zero and contributed subgradient 0.
    pub degenerate: bool,
}

fn diff_over_norm(a: &[f64], b: &[f64], norm: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x - y) / norm).collect()
}

/// `L = max(|q - p| - |q - n| + margin, 0)` with its gradient over the rows
/// touched by the query, positive and (single) negative.
pub fn margin_loss_and_grad(model: &EncoderModel, ex: &TrainingExample, margin: f64) -> MarginGrad {
    assert_eq!(ex.negative_texts.len(), 1, "margin loss takes exactly one negative");
    let tq = model.tokenize(&ex.query_text);
    let tp = model.tokenize(&ex.positive_text);
    let tn = model.tokenize(&ex.negative_texts[0]);
    let eq = model.embed_tokens(&tq).0;
    let ep = model.embed_tokens(&tp).0;
    let en = model.embed_tokens(&tn).0;
    let dp = crate::encoder::l2(&eq, &ep);
    let dn = crate::encoder::l2(&eq, &en);
    let loss = (dp - dn + margin).max(0.0);
    let mut out = MarginGrad {
        loss,
        table: SparseGrad::default(),
        degenerate: false,
    };
    if loss <= 0.0 {
        return out;
    }
    let d = eq.len();
    // d|q - x| / dq = (q - x) / |q - x|, taken as 0 when the distance is 0.
    let (up, un) = (
        if dp > 0.0 { diff_over_norm(&eq, &ep, dp) } else { vec![0.0; d] },
        if dn > 0.0 { diff_over_norm(&eq, &en, dn) } else { vec![0.0; d] },
    );
    out.degenerate = dp == 0.0 || dn == 0.0;
    let gq: Vec<f64> = up.iter().zip(&un).map(|(a, b)| a - b).collect();
    if !tq.is_empty() {
        out.table.spread(&tq, &gq, 1.0 / tq.len() as f64);
    }
    if !tp.is_empty() {
        out.table.spread(&tp, &up, -1.0 / tp.len() as f64);
    }
    if !tn.is_empty() {
        out.table.spread(&tn, &un, 1.0 / tn.len() as f64);
    }
    out
}

/// Softmax cross-entropy with the positive at index 0. Returns the loss and
/// `dL/ds_i = softmax_i - [i = 0]`.
pub fn ce_loss_from_scores(scores: &[f64]) -> (f64, Vec<f64>) {
    assert!(scores.len() >= 2, "need a positive and at least one negative");
    let (imax, &m) = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let rest: f64 = exps.iter().enumerate().filter(|&(i, _)| i != imax).map(|(_, e)| e).sum();
    let lse_minus_m = rest.ln_1p();
    let loss = (m - scores[0]) + lse_minus_m;
    let z = 1.0 + rest;
    let grads = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / z - if i == 0 { 1.0 } else { 0.0 })
        .collect();
    (loss.max(0.0), grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeGrad {
    pub loss: f64,
    pub table: SparseGrad,
    /// `D x H`, row-major.
    pub proj: Vec<f64>,
    pub out: Vec<f64>,
}

/// Cross-entropy over `[positive, negatives...]` scored by `model`. Candidate
/// `i` uses the dropout mask seeded by `(seed, i)` in both passes.
pub fn ce_loss_and_grad(model: &CrossEncoderModel, ex: &TrainingExample, seed: u64) -> CeGrad {
    assert!(!ex.negative_texts.is_empty(), "cross-entropy needs at least one negative");
    let candidates = std::iter::once(&ex.positive_text).chain(&ex.negative_texts);
    let forwards: Vec<_> = candidates
        .enumerate()
        .map(|(i, doc)| {
            let mode = ScoreMode::Training {
                seed: derive_seed(seed, &[i as u64]),
            };
            model.forward(&ex.query_text, doc, mode)
        })
        .collect();
    let scores: Vec<f64> = forwards.iter().map(|f| f.score).collect();
    let (loss, ds) = ce_loss_from_scores(&scores);

    let d = model.base.dim();
    let h = model.hidden();
    let w_proj = model.proj();
    let w_out = model.out();
    let mut grad = CeGrad {
        loss,
        table: SparseGrad::default(),
        proj: vec![0.0; d * h],
        out: vec![0.0; h],
    };
    for (f, &dsi) in forwards.iter().zip(&ds) {
        if dsi == 0.0 {
            continue;
        }
        // u_j = m_j w_j is ds/dz_j for the pre-dropout hidden unit z_j.
        let u: Vec<f64> = f.mask.iter().zip(w_out).map(|(m, w)| m * w).collect();
        for j in 0..h {
            grad.out[j] += dsi * f.hidden[j] * f.mask[j];
        }
        let mut g = vec![0.0; d];
        for r in 0..d {
            let row = &w_proj[r * h..(r + 1) * h];
            let x = f.joint[r];
            let grow = &mut grad.proj[r * h..(r + 1) * h];
            let mut acc = 0.0;
            for j in 0..h {
                grow[j] += dsi * x * u[j];
                acc += row[j] * u[j];
            }
            g[r] = dsi * acc;
        }
        let gq: Vec<f64> = g.iter().zip(&f.doc_vec).map(|(a, b)| a * b).collect();
        let gd: Vec<f64> = g.iter().zip(&f.query_vec).map(|(a, b)| a * b).collect();
        if !f.query_tokens.is_empty() {
            grad.table.spread(&f.query_tokens, &gq, 1.0 / f.query_tokens.len() as f64);
        }
        if !f.doc_tokens.is_empty() {
            grad.table.spread(&f.doc_tokens, &gd, 1.0 / f.doc_tokens.len() as f64);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_buckets: 1024,
            dim: 4,
            hash_seed: 3,
        }
    }

    fn ex(q: &str, p: &str, n: &[&str]) -> TrainingExample {
        TrainingExample {
            query_id: "q".into(),
            query_text: q.into(),
            positive_text: p.into(),
            negative_texts: n.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn identical_positive_and_negative_gives_margin() {
        let m = EncoderModel::new(cfg(), 1).unwrap();
        let g = margin_loss_and_grad(&m, &ex("a b", "c d", &["c d"]), 1.0);
        assert_eq!(g.loss, 1.0);
        assert!(g.table.is_zero());
    }

    #[test]
    fn inactive_hinge_zero_gradient() {
        // 1-D style: table rows chosen so d(q,p) = 0.5 and d(q,n) = 2.0.
        let c = cfg();
        let mut table = vec![0.0; c.vocab_buckets * c.dim];
        let row = |w: &str| crate::encoder::hash_word(w, 1024, 3).0 as usize * 4;
        table[row("p")] = 0.5;
        table[row("n")] = 2.0;
        let m = EncoderModel::from_table(c, table).unwrap();
        let g = margin_loss_and_grad(&m, &ex("q", "p", &["n"]), 1.0);
        assert_eq!(g.loss, 0.0);
        assert!(g.table.rows.is_empty());
    }

    #[test]
    fn degenerate_distance_flagged() {
        let m = EncoderModel::new(cfg(), 1).unwrap();
        let g = margin_loss_and_grad(&m, &ex("same words", "words same", &["other"]), 5.0);
        assert!(g.degenerate);
        assert!(g.loss.is_finite());
    }

    #[test]
    fn uniform_scores_give_ln5() {
        let (loss, grads) = ce_loss_from_scores(&[0.3; 5]);
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!((grads[0] + 0.8).abs() < 1e-12);
        assert!((grads.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn saturated_positive_near_zero_loss() {
        let (loss, _) = ce_loss_from_scores(&[50.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(loss < 1e-20, "{loss}");
        let (big, _) = ce_loss_from_scores(&[-800.0, 800.0]);
        assert!((big - 1600.0).abs() < 1e-9);
    }

    #[test]
    fn ce_gradient_shapes() {
        let m = CrossEncoderModel::new(cfg(), 3, 0.0, 2).unwrap();
        let g = ce_loss_and_grad(&m, &ex("x y", "y z", &["a", "b"]), 9);
        assert_eq!(g.proj.len(), 12);
        assert_eq!(g.out.len(), 3);
        assert!(g.loss > 0.0);
    }

    fn rel_err(a: &[f64], n: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na.max(nn) == 0.0 {
            0.0
        } else {
            diff / na.max(nn)
        }
    }

    #[test]
    fn margin_gradient_matches_finite_differences() {
        let e = ex("river walk cafe", "walk by the river", &["loud arcade"]);
        let base = EncoderModel::new(cfg(), 7).unwrap();
        let g = margin_loss_and_grad(&base, &e, 1.0);
        assert!(g.loss > 0.0);
        let h = 1e-5;
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (&row, grow) in &g.table.rows {
            for (c, &gc) in grow.iter().enumerate() {
                let idx = row as usize * 4 + c;
                let mut plus = base.table().to_vec();
                plus[idx] += h;
                let mut minus = base.table().to_vec();
                minus[idx] -= h;
                let lp = margin_loss_and_grad(&EncoderModel::from_table(cfg(), plus).unwrap(), &e, 1.0).loss;
                let lm = margin_loss_and_grad(&EncoderModel::from_table(cfg(), minus).unwrap(), &e, 1.0).loss;
                analytic.push(gc);
                numeric.push((lp - lm) / (2.0 * h));
            }
        }
        assert!(rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let e = ex("river walk cafe", "walk by the river", &["loud arcade", "cafe"]);
        let m = CrossEncoderModel::new(cfg(), 3, 0.0, 7).unwrap();
        let g = ce_loss_and_grad(&m, &e, 1);
        let loss_of = |table: Vec<f64>, proj: Vec<f64>, out: Vec<f64>| {
            let base = EncoderModel::from_table(cfg(), table).unwrap();
            let mm = CrossEncoderModel::from_parts(base, 3, proj, out, 0.0).unwrap();
            ce_loss_and_grad(&mm, &e, 1).loss
        };
        let h = 1e-5;
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (&row, grow) in &g.table.rows {
            for (c, &gc) in grow.iter().enumerate() {
                let idx = row as usize * 4 + c;
                let mut p = m.base.table().to_vec();
                p[idx] += h;
                let mut q = m.base.table().to_vec();
                q[idx] -= h;
                let lp = loss_of(p, m.proj().to_vec(), m.out().to_vec());
                let lm = loss_of(q, m.proj().to_vec(), m.out().to_vec());
                analytic.push(gc);
                numeric.push((lp - lm) / (2.0 * h));
            }
        }
        for i in 0..m.proj().len() {
            let mut p = m.proj().to_vec();
            p[i] += h;
            let mut q = m.proj().to_vec();
            q[i] -= h;
            let lp = loss_of(m.base.table().to_vec(), p, m.out().to_vec());
            let lm = loss_of(m.base.table().to_vec(), q, m.out().to_vec());
            analytic.push(g.proj[i]);
            numeric.push((lp - lm) / (2.0 * h));
        }
        for i in 0..m.out().len() {
            let mut p = m.out().to_vec();
            p[i] += h;
            let mut q = m.out().to_vec();
            q[i] -= h;
            let lp = loss_of(m.base.table().to_vec(), m.proj().to_vec(), p);
            let lm = loss_of(m.base.table().to_vec(), m.proj().to_vec(), q);
            analytic.push(g.out[i]);
            numeric.push((lp - lm) / (2.0 * h));
        }
        assert!(rel_err(&analytic, &numeric) < 1e-4, "{}", rel_err(&analytic, &numeric));
    }
}
