//! Linear-chain CRF over sentence labels.
//!
//! For emissions `r_1..r_n` and transitions `T` the score of a path is
//!
//! ```text
//! s(y) = Σ_i r_i(y_i) + Σ_{i≥2} T[y_{i-1}, y_i]
//! ```
//!
//! and `p(y) = exp(s(y)) / Σ_ŷ exp(s(ŷ))`. The normalizer is computed with
//! the forward algorithm in log space; decoding uses Viterbi. Optional start
//! and end scores add `start[y_1]` and `end[y_n]` to every path.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;

use crate::data::LabelSet;
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct CrfParams {
    /// `l × l`, row = previous label, column = current label.
    pub transitions: ParamId,
    pub start: Option<ParamId>,
    pub end: Option<ParamId>,
}

impl CrfParams {
    /// Zero-initialized transitions.
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, labels: usize, boundary: bool, _rng: &mut ChaCha8Rng) -> Self {
        let transitions = store.insert("crf.transitions", nn::zeros(&[labels, labels]));
        let (start, end) = if boundary {
            (
                Some(store.insert("crf.start", nn::zeros(&[labels]))),
                Some(store.insert("crf.end", nn::zeros(&[labels]))),
            )
        } else {
            (None, None)
        };
        CrfParams {
            transitions,
            start,
            end,
        }
    }

    pub fn bind<F: Scalar>(&self, g: &mut Graph<'_, F>) -> CrfVars {
        CrfVars {
            transitions: g.param(self.transitions),
            start: self.start.map(|p| g.param(p)),
            end: self.end.map(|p| g.param(p)),
        }
    }
}

/// CRF parameters as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct CrfVars {
    pub transitions: Var,
    pub start: Option<Var>,
    pub end: Option<Var>,
}

impl CrfVars {
    pub fn new(transitions: Var) -> Self {
        CrfVars {
            transitions,
            start: None,
            end: None,
        }
    }
}

fn labels_of<F: Scalar>(g: &Graph<'_, F>, emissions: &[Var], crf: CrfVars) -> Result<usize> {
    let first = emissions
        .first()
        .ok_or_else(|| Error::Contract("CRF needs at least one emission vector".into()))?;
    let l = g.shape(*first).first().copied().unwrap_or(0);
    if g.shape(crf.transitions) != [l, l] {
        return Err(Error::dim("crf", g.shape(crf.transitions), &[l, l]));
    }
    for &r in emissions {
        if g.shape(r) != [l] {
            return Err(Error::dim("crf", g.shape(r), &[l]));
        }
    }
    Ok(l)
}

/// Score of one label path.
pub fn sequence_score<F: Scalar>(
    g: &mut Graph<'_, F>,
    emissions: &[Var],
    path: &[usize],
    crf: CrfVars,
) -> Result<Var> {
    let l = labels_of(g, emissions, crf)?;
    if path.len() != emissions.len() {
        return Err(Error::Contract(format!(
            "path length {} does not match {} emissions",
            path.len(),
            emissions.len()
        )));
    }
    if let Some(&bad) = path.iter().find(|&&y| y >= l) {
        return Err(Error::Contract(format!("label index {bad} out of range for {l} labels")));
    }
    let mut terms = Vec::with_capacity(2 * path.len() + 1);
    for (i, (&r, &y)) in emissions.iter().zip(path).enumerate() {
        terms.push(g.pick(r, y)?);
        if i > 0 {
            terms.push(g.pick(crf.transitions, path[i - 1] * l + y)?);
        }
    }
    if let Some(start) = crf.start {
        terms.push(g.pick(start, path[0])?);
    }
    if let Some(end) = crf.end {
        terms.push(g.pick(end, path[path.len() - 1])?);
    }
    g.add_n(&terms)
}

/// `log Σ_y exp(s(y))` by the forward algorithm.
pub fn log_partition<F: Scalar>(g: &mut Graph<'_, F>, emissions: &[Var], crf: CrfVars) -> Result<Var> {
    labels_of(g, emissions, crf)?;
    let mut alpha = emissions[0];
    if let Some(start) = crf.start {
        alpha = g.add(alpha, start)?;
    }
    for &r in &emissions[1..] {
        // scores[i, j] = alpha[i] + T[i, j]; reduce over the previous label i.
        let scores = g.add_bias(crf.transitions, alpha)?;
        let reduced = g.logsumexp(scores, Some(0))?;
        alpha = g.add(reduced, r)?;
    }
    if let Some(end) = crf.end {
        alpha = g.add(alpha, end)?;
    }
    g.logsumexp(alpha, None)
}

/// Negative log-likelihood of the gold path.
pub fn nll_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    emissions: &[Var],
    gold: &[usize],
    crf: CrfVars,
) -> Result<Var> {
    let score = sequence_score(g, emissions, gold, crf)?;
    let log_z = log_partition(g, emissions, crf)?;
    g.sub(log_z, score)
}

/// Sum of per-sentence softmax cross-entropies, used when the CRF is
/// ablated.
pub fn cross_entropy<F: Scalar>(g: &mut Graph<'_, F>, emissions: &[Var], gold: &[usize]) -> Result<Var> {
    if gold.len() != emissions.len() {
        return Err(Error::Contract("gold length does not match emissions".into()));
    }
    let mut terms = Vec::with_capacity(emissions.len());
    for (&r, &y) in emissions.iter().zip(gold) {
        let lse = g.logsumexp(r, None)?;
        let pick = g.pick(r, y)?;
        terms.push(g.sub(lse, pick)?);
    }
    g.add_n(&terms)
}

/// Highest-scoring path. `transitions` is `l × l` row-major. Ties resolve to
/// the lowest label index.
pub fn viterbi_decode<F: Scalar>(
    emissions: &[Vec<F>],
    transitions: &[F],
    start: Option<&[F]>,
    end: Option<&[F]>,
) -> Vec<usize> {
    let Some(first) = emissions.first() else {
        return Vec::new();
    };
    let l = first.len();
    debug_assert_eq!(transitions.len(), l * l);
    let mut score: Vec<F> = first.clone();
    if let Some(s) = start {
        score.iter_mut().zip(s).for_each(|(a, &b)| *a += b);
    }
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(emissions.len());
    for r in &emissions[1..] {
        let mut next = vec![F::zero(); l];
        let mut ptr = vec![0; l];
        for j in 0..l {
            let mut best = 0;
            let mut best_val = score[0] + transitions[j];
            for i in 1..l {
                let v = score[i] + transitions[i * l + j];
                if v > best_val {
                    best = i;
                    best_val = v;
                }
            }
            next[j] = best_val + r[j];
            ptr[j] = best;
        }
        back.push(ptr);
        score = next;
    }
    if let Some(e) = end {
        score.iter_mut().zip(e).for_each(|(a, &b)| *a += b);
    }
    let mut last = 0;
    for j in 1..l {
        if score[j] > score[last] {
            last = j;
        }
    }
    let mut path = vec![last];
    for ptr in back.iter().rev() {
        last = ptr[last];
        path.push(last);
    }
    path.reverse();
    path
}

/// Per-position argmax, lowest index on ties.
pub fn argmax_decode<F: Scalar>(emissions: &[Vec<F>]) -> Vec<usize> {
    emissions
        .iter()
        .map(|r| {
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Best path of `len` labels scored by the transition matrix alone.
pub fn transition_only_path<F: Scalar>(transitions: &[F], labels: usize, len: usize) -> Vec<usize> {
    viterbi_decode(&vec![vec![F::zero(); labels]; len], transitions, None, None)
}

/// Transition table with label headers: rows are the previous sentence's
/// label, columns the current one, two decimals.
pub fn export_transitions(transitions: &[f32], labels: &LabelSet) -> String {
    let l = labels.len();
    let width = labels
        .names()
        .iter()
        .map(String::len)
        .max()
        .unwrap_or(0)
        .max(8);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "prev\\next");
    for name in labels.names() {
        let _ = write!(out, " {name:>width$}");
    }
    out.push('\n');
    for i in 0..l {
        let _ = write!(out, "{:<width$}", labels.name(i));
        for j in 0..l {
            // Avoid printing "-0.00".
            let v = transitions[i * l + j];
            let v = if v.abs() < 0.005 { 0.0 } else { v };
            let _ = write!(out, " {v:>width$.2}");
        }
        out.push('\n');
    }
    out
}

/// Reads a table produced by [`export_transitions`].
pub fn parse_transition_report(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let bad = |msg: &str| Error::Format {
        path: "transition report".into(),
        msg: msg.into(),
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty report"))?;
    let labels: Vec<String> = header.split_whitespace().skip(1).map(String::from).collect();
    let mut rows = Vec::with_capacity(labels.len());
    for (i, line) in lines.enumerate() {
        let mut fields = line.split_whitespace();
        let name = fields.next().ok_or_else(|| bad("missing row label"))?;
        if labels.get(i).map(String::as_str) != Some(name) {
            return Err(bad(&format!("row {i} is labeled `{name}`")));
        }
        let row: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad(&format!("bad number `{f}`"))))
            .collect::<Result<_>>()?;
        if row.len() != labels.len() {
            return Err(bad("row width does not match header"));
        }
        rows.push(row);
    }
    if rows.len() != labels.len() {
        return Err(bad("matrix is not square"));
    }
    Ok((labels, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(g: &mut Graph<'_, f64>, r: &[Vec<f64>], t: &[f64]) -> (Vec<Var>, CrfVars) {
        let l = r[0].len();
        let rs = r.iter().map(|v| g.constant(&[l], v.clone()).unwrap()).collect();
        let tv = g.constant(&[l, l], t.to_vec()).unwrap();
        (rs, CrfVars::new(tv))
    }

    #[test]
    fn trivial_scores_and_partitions() {
        let mut g = Graph::<f64>::new();
        let (r, crf) = setup(&mut g, &[vec![0.3, -1.0]], &[5.0, 5.0, 5.0, 5.0]);
        let s = sequence_score(&mut g, &r, &[1], crf).unwrap();
        assert_eq!(g.scalar(s), -1.0);

        let (r, crf) = setup(&mut g, &[vec![0.0, 0.0]], &[1.0, -2.0, 3.0, 0.5]);
        let z = log_partition(&mut g, &r, crf).unwrap();
        assert!((g.scalar(z) - 2f64.ln()).abs() < 1e-12);

        let (r, crf) = setup(&mut g, &[vec![0.0, 0.0], vec![0.0, 0.0]], &[0.0; 4]);
        let z = log_partition(&mut g, &r, crf).unwrap();
        assert!((g.scalar(z) - 4f64.ln()).abs() < 1e-12);

        let (r, crf) = setup(&mut g, &[vec![1.0, 2.0], vec![3.0, 4.0]], &[0.0; 4]);
        let s = sequence_score(&mut g, &r, &[1, 0], crf).unwrap();
        assert_eq!(g.scalar(s), 5.0);
        assert!(sequence_score(&mut g, &r, &[1], crf).is_err());
    }

    #[test]
    fn nll_edge_cases() {
        let mut g = Graph::<f64>::new();
        let (r, crf) = setup(&mut g, &[vec![0.0; 5]], &[0.0; 25]);
        let loss = nll_loss(&mut g, &r, &[2], crf).unwrap();
        assert!((g.scalar(loss) - 5f64.ln()).abs() < 1e-12);

        let peaked: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let mut v = vec![0.0; 3];
                v[i] = 100.0;
                v
            })
            .collect();
        let (r, crf) = setup(&mut g, &peaked, &[0.0; 9]);
        let loss = nll_loss(&mut g, &r, &[0, 1, 2], crf).unwrap();
        assert!(g.scalar(loss) >= 0.0 && g.scalar(loss) < 1e-40);
    }

    #[test]
    fn viterbi_simple_cases() {
        let r = vec![vec![0.1, 0.9, 0.3], vec![2.0, 1.0, 0.0], vec![0.0, 0.0, 0.5]];
        assert_eq!(viterbi_decode(&r, &[0.0; 9], None, None), [1, 0, 2]);
        assert_eq!(viterbi_decode(&r[..1], &[7.0; 9], None, None), [1]);
        // Exact ties resolve to the lowest index.
        let tied = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
        assert_eq!(viterbi_decode(&tied, &[0.0; 4], None, None), [0, 0]);
        assert_eq!(argmax_decode(&r), [1, 0, 2]);
    }

    #[test]
    fn transition_report_round_trip() {
        let labels = LabelSet::new(["BACKGROUND", "RESULTS", "CONCLUSIONS"]).unwrap();
        let zero = export_transitions(&[0.0; 9], &labels);
        let (names, rows) = parse_transition_report(&zero).unwrap();
        assert_eq!(names, labels.names());
        assert!(rows.iter().flatten().all(|&v| v == 0.0));
        assert!(!zero.contains("-0.00"));

        let t = [0.5, -5.46, 1.0, -5.46, 0.25, 2.48, 0.0, 0.004, -0.001];
        let text = export_transitions(&t, &labels);
        let (_, rows) = parse_transition_report(&text).unwrap();
        assert_eq!(rows[1], [-5.46, 0.25, 2.48]);
        assert_eq!(rows[2], [0.0, 0.0, 0.0]);
        assert!(parse_transition_report("a b\nc 1 2\n").is_err());
    }

    /// Every label path of length `n` over `l` labels.
    fn all_paths(n: usize, l: usize) -> Vec<Vec<usize>> {
        (0..l.pow(n as u32))
            .map(|mut code| {
                let mut p = vec![0; n];
                for slot in p.iter_mut().rev() {
                    *slot = code % l;
                    code /= l;
                }
                p
            })
            .collect()
    }

    fn direct_score(r: &[Vec<f64>], t: &[f64], y: &[usize]) -> f64 {
        let l = r[0].len();
        let mut s = 0.0;
        for i in 0..y.len() {
            s += r[i][y[i]];
            if i > 0 {
                s += t[y[i - 1] * l + y[i]];
            }
        }
        s
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (1usize..=4, 2usize..=5).prop_flat_map(|(n, l)| {
            (
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, l), n),
                prop::collection::vec(-3.0f64..3.0, l * l),
            )
        })
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn forward_algorithm_matches_enumeration((r, t) in instance()) {
            let (n, l) = (r.len(), r[0].len());
            let paths = all_paths(n, l);
            let scores: Vec<f64> = paths.iter().map(|y| direct_score(&r, &t, y)).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let brute = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();

            let mut g = Graph::<f64>::new();
            let (rs, crf) = setup(&mut g, &r, &t);
            let z = log_partition(&mut g, &rs, crf).unwrap();
            let log_z = g.scalar(z);
            prop_assert!((log_z - brute).abs() < 1e-4);

            let total: f64 = scores.iter().map(|s| (s - log_z).exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);

            let gold = &paths[paths.len() / 2];
            let s = sequence_score(&mut g, &rs, gold, crf).unwrap();
            prop_assert!((g.scalar(s) - scores[paths.len() / 2]).abs() < 1e-9);
            let nll = nll_loss(&mut g, &rs, gold, crf).unwrap();
            prop_assert!(g.scalar(nll) >= 0.0);
            prop_assert!((g.scalar(nll) - (brute - scores[paths.len() / 2])).abs() < 1e-4);

            let best = viterbi_decode(&r, &t, None, None);
            let arg = paths
                .iter()
                .zip(&scores)
                .fold((None::<&Vec<usize>>, f64::NEG_INFINITY), |acc, (p, &s)| if s > acc.1 { (Some(p), s) } else { acc });
            prop_assert_eq!(&best, arg.0.unwrap());
        }

        #[test]
        fn shifting_one_emission_vector((r, t) in instance(), c in -10.0f64..10.0, pick in 0usize..4) {
            let i = pick % r.len();
            let mut shifted = r.clone();
            shifted[i].iter_mut().for_each(|x| *x += c);
            prop_assert_eq!(viterbi_decode(&r, &t, None, None), viterbi_decode(&shifted, &t, None, None));
            let mut g = Graph::<f64>::new();
            let (a, ca) = setup(&mut g, &r, &t);
            let (b, cb) = setup(&mut g, &shifted, &t);
            let za = log_partition(&mut g, &a, ca).unwrap();
            let zb = log_partition(&mut g, &b, cb).unwrap();
            prop_assert!((g.scalar(zb) - g.scalar(za) - c).abs() < 1e-9);
        }

        #[test]
        fn boundary_scores_match_enumeration((r, t) in instance(), seed in 0u64..1000) {
            let l = r[0].len();
            let start: Vec<f64> = (0..l).map(|k| ((seed + k as u64) % 7) as f64 * 0.3 - 1.0).collect();
            let end: Vec<f64> = (0..l).map(|k| ((seed * 3 + k as u64) % 5) as f64 * 0.4 - 0.8).collect();
            let paths = all_paths(r.len(), l);
            let scores: Vec<f64> = paths
                .iter()
                .map(|y| direct_score(&r, &t, y) + start[y[0]] + end[y[y.len() - 1]])
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let brute = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            let mut g = Graph::<f64>::new();
            let (rs, mut crf) = setup(&mut g, &r, &t);
            crf.start = Some(g.constant(&[l], start.clone()).unwrap());
            crf.end = Some(g.constant(&[l], end.clone()).unwrap());
            let z = log_partition(&mut g, &rs, crf).unwrap();
            prop_assert!((g.scalar(z) - brute).abs() < 1e-4);
            let best = viterbi_decode(&r, &t, Some(&start), Some(&end));
            let best_score = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let idx = paths.iter().position(|p| *p == best).unwrap();
            prop_assert!((scores[idx] - best_score).abs() < 1e-12);
        }
    }

    #[test]
    fn five_by_five_viterbi_matches_search() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let r: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let t: Vec<f64> = (0..25).map(|_| rng.random_range(-2.0..2.0)).collect();
            let paths = all_paths(5, 5);
            assert_eq!(paths.len(), 3125);
            let best = paths
                .iter()
                .max_by(|a, b| direct_score(&r, &t, a).total_cmp(&direct_score(&r, &t, b)))
                .unwrap();
            assert_eq!(&viterbi_decode(&r, &t, None, None), best);
        }
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let r = vec![vec![0.2, -0.7, 1.1], vec![0.4, 0.0, -0.3], vec![-1.0, 0.5, 0.2]];
        let t = vec![0.1, -0.4, 0.3, 0.6, -0.2, 0.0, -0.5, 0.2, 0.7];
        let gold = [2, 0, 1];
        let eval = |r: &[Vec<f64>], t: &[f64]| {
            let mut g = Graph::<f64>::new();
            let (rs, crf) = setup(&mut g, r, t);
            let loss = nll_loss(&mut g, &rs, &gold, crf).unwrap();
            g.scalar(loss)
        };
        let mut g = Graph::<f64>::new();
        let rs: Vec<Var> = r
            .iter()
            .map(|v| g.leaf(&crate::tensor::Tensor::new(&[3], v.clone()).unwrap().with_requires_grad(true)))
            .collect();
        let tv = g.leaf(&crate::tensor::Tensor::new(&[3, 3], t.clone()).unwrap().with_requires_grad(true));
        let loss = nll_loss(&mut g, &rs, &gold, CrfVars::new(tv)).unwrap();
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        for k in 0..9 {
            let (mut tp, mut tm) = (t.clone(), t.clone());
            tp[k] += h;
            tm[k] -= h;
            let numeric = (eval(&r, &tp) - eval(&r, &tm)) / (2.0 * h);
            assert!((grads.wrt(tv).unwrap()[k] - numeric).abs() < 1e-7);
        }
        for i in 0..3 {
            for k in 0..3 {
                let (mut rp, mut rm) = (r.clone(), r.clone());
                rp[i][k] += h;
                rm[i][k] -= h;
                let numeric = (eval(&rp, &t) - eval(&rm, &t)) / (2.0 * h);
                assert!((grads.wrt(rs[i]).unwrap()[k] - numeric).abs() < 1e-7);
            }
        }
    }
}
