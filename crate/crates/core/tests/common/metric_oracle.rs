//! Brute-force reimplementation of the multi-label metrics, recomputed from
//! raw label vectors without the library's counting code.

use reef_lora::metrics;

#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub match_ratio: f64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn oracle<B: AsRef<[bool]>>(preds: &[B], truths: &[B], classes: usize) -> Oracle {
    let exact = (0..preds.len())
        .filter(|&s| (0..classes).all(|c| preds[s].as_ref()[c] == truths[s].as_ref()[c]))
        .count();
    let mut per_class_f1 = Vec::new();
    let (mut all_tp, mut all_fp, mut all_fn) = (0, 0, 0);
    for c in 0..classes {
        let cell = |p: bool, t: bool| {
            (0..preds.len())
                .filter(|&s| preds[s].as_ref()[c] == p && truths[s].as_ref()[c] == t)
                .count()
        };
        let (tp, fp, fn_) = (cell(true, true), cell(true, false), cell(false, true));
        all_tp += tp;
        all_fp += fp;
        all_fn += fn_;
        per_class_f1.push(harmonic(ratio(tp, tp + fp), ratio(tp, tp + fn_)));
    }
    let mut sum = 0.0;
    for f in &per_class_f1 {
        sum += f;
    }
    let micro_precision = ratio(all_tp, all_tp + all_fp);
    let micro_recall = ratio(all_tp, all_tp + all_fn);
    Oracle {
        match_ratio: ratio(exact, preds.len()),
        macro_f1: if classes == 0 { 0.0 } else { sum / classes as f64 },
        per_class_f1,
        micro_precision,
        micro_recall,
        micro_f1: harmonic(micro_precision, micro_recall),
    }
}

pub fn library<B: AsRef<[bool]>>(preds: &[B], truths: &[B]) -> Oracle {
    let counts = metrics::confusion_counts(preds, truths).unwrap();
    let ma = metrics::macro_f1(&counts);
    let mi = metrics::micro_f1(&counts);
    Oracle {
        match_ratio: metrics::match_ratio(preds, truths).unwrap(),
        per_class_f1: ma.per_class_f1,
        macro_f1: ma.macro_f1,
        micro_precision: mi.micro_precision,
        micro_recall: mi.micro_recall,
        micro_f1: mi.micro_f1,
    }
}

/// Decodes a per-sample state: low `C` bits are the prediction, the next
/// `C` bits the truth.
fn decode<const C: usize>(state: usize) -> ([bool; C], [bool; C]) {
    let mut p = [false; C];
    let mut t = [false; C];
    for c in 0..C {
        p[c] = state >> c & 1 == 1;
        t[c] = state >> (C + c) & 1 == 1;
    }
    (p, t)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Tally {
    pub checked: u64,
    pub mismatches: u64,
}

fn compare<const C: usize>(states: &[usize], tally: &mut Tally, first: &mut Option<String>) {
    let mut preds = [[false; C]; 6];
    let mut truths = [[false; C]; 6];
    for (i, &s) in states.iter().enumerate() {
        (preds[i], truths[i]) = decode::<C>(s);
    }
    let n = states.len();
    let (p, t) = (&preds[..n], &truths[..n]);
    let expected = oracle(p, t, C);
    let got = library(p, t);
    tally.checked += 1;
    if expected != got {
        tally.mismatches += 1;
        if first.is_none() {
            *first = Some(format!("states {states:?}: oracle {expected:?} library {got:?}"));
        }
    }
}

fn rec<const C: usize>(depth: usize, lo: usize, buf: &mut Vec<usize>, tally: &mut Tally, first: &mut Option<String>) {
    if depth == buf.len() {
        compare::<C>(buf, tally, first);
        return;
    }
    for s in lo..1 << (2 * C) {
        buf[depth] = s;
        rec::<C>(depth + 1, s, buf, tally, first);
    }
}

fn multisets<const C: usize>(n: usize) -> (Tally, Option<String>) {
    let mut tally = Tally::default();
    let mut first = None;
    rec::<C>(0, 0, &mut vec![0; n], &mut tally, &mut first);
    (tally, first)
}

fn ordered<const C: usize>(n: usize) -> (Tally, Option<String>) {
    let states = 1usize << (2 * C);
    let mut tally = Tally::default();
    let mut first = None;
    let mut buf = vec![0usize; n];
    for mut code in 0..states.pow(n as u32) {
        for slot in buf.iter_mut() {
            *slot = code % states;
            code /= states;
        }
        compare::<C>(&buf, &mut tally, &mut first);
    }
    (tally, first)
}

/// Every multiset of `n` samples over `classes` classes. The metrics are
/// invariant to sample order, so multisets cover all batches.
pub fn exhaustive_multisets(classes: usize, n: usize) -> (Tally, Option<String>) {
    match classes {
        1 => multisets::<1>(n),
        2 => multisets::<2>(n),
        3 => multisets::<3>(n),
        _ => panic!("enumeration supports 1 to 3 classes"),
    }
}

/// Every ordered tuple of `n` samples.
pub fn exhaustive_ordered(classes: usize, n: usize) -> (Tally, Option<String>) {
    match classes {
        1 => ordered::<1>(n),
        2 => ordered::<2>(n),
        3 => ordered::<3>(n),
        _ => panic!("enumeration supports 1 to 3 classes"),
    }
}
