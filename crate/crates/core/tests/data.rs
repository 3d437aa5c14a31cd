//! Independent oracles for the synthetic tasks and the IDX loader.

use std::collections::BTreeMap;
use std::io::Write;

use slicesort::data::{
    gen_listops_lite, gen_multiset_majority, listops, load_idx, BatchIterator, LabeledSequence,
};
use slicesort::Error;

/// Most frequent token modulo `n_classes`, or `None` without a strict majority.
fn recount(tokens: &[usize], n_classes: usize) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut by_count: Vec<(usize, usize)> = counts.into_iter().map(|(t, c)| (c, t)).collect();
    by_count.sort_unstable_by(|a, b| b.cmp(a));
    match by_count.as_slice() {
        [(c0, t0), (c1, _), ..] if c0 > c1 => Some(t0 % n_classes),
        [(_, t0)] => Some(t0 % n_classes),
        _ => None,
    }
}

#[test]
fn majority_labels_match_recount() {
    for (seed, seq_len, vocab, classes) in [(0, 63, 8, 4), (1, 16, 10, 3), (2, 40, 5, 5), (3, 9, 4, 1)] {
        let data = gen_multiset_majority(seed, 300, seq_len, vocab, classes).unwrap();
        assert_eq!(data.len(), 300);
        for s in &data {
            assert_eq!(s.tokens.len(), seq_len);
            assert!(s.tokens.iter().all(|&t| t < vocab));
            assert_eq!(recount(&s.tokens, classes), Some(s.label));
        }
    }
}

#[test]
fn majority_class_histogram_is_uniform() {
    let data = gen_multiset_majority(11, 10_000, 63, 8, 4).unwrap();
    let mut hist = [0usize; 4];
    for s in &data {
        hist[s.label] += 1;
    }
    for &h in &hist {
        let frac = h as f64 / data.len() as f64;
        assert!((frac - 0.25).abs() <= 0.05 * 0.25, "histogram {hist:?}");
    }
}

#[test]
fn majority_is_pure_in_seed() {
    let a = gen_multiset_majority(5, 50, 20, 6, 3).unwrap();
    assert_eq!(a, gen_multiset_majority(5, 50, 20, 6, 3).unwrap());
    assert_ne!(a, gen_multiset_majority(6, 50, 20, 6, 3).unwrap());
    assert!(matches!(gen_multiset_majority(0, 1, 10, 3, 4), Err(Error::Contract(_))));
}

/// Recursive-descent evaluator over the token stream, written against the
/// alphabet alone.
fn parse_eval(tokens: &[usize], pos: &mut usize) -> Option<usize> {
    let t = *tokens.get(*pos)?;
    *pos += 1;
    if t <= 9 {
        return Some(t);
    }
    if t != listops::OPEN {
        return None;
    }
    let op = *tokens.get(*pos)?;
    *pos += 1;
    let mut args = Vec::new();
    while *tokens.get(*pos)? != listops::CLOSE {
        args.push(parse_eval(tokens, pos)?);
    }
    *pos += 1;
    if args.is_empty() {
        return None;
    }
    args.sort_unstable();
    Some(match op {
        listops::MAX => *args.last()?,
        listops::MIN => args[0],
        listops::MED => args[args.len() / 2],
        _ => return None,
    })
}

fn eval_sequence(tokens: &[usize]) -> Option<usize> {
    let start = tokens.iter().position(|&t| t != listops::PAD)?;
    let mut pos = start;
    let value = parse_eval(tokens, &mut pos)?;
    (pos == tokens.len()).then_some(value)
}

#[test]
fn listops_labels_match_independent_evaluator() {
    for (seed, depth, len) in [(0, 3, 64), (1, 2, 32), (2, 1, 16), (3, 0, 1)] {
        let data = gen_listops_lite(seed, 500, depth, len).unwrap();
        for s in &data {
            assert_eq!(s.tokens.len(), len);
            assert!(s.label < listops::CLASSES);
            assert!(s.tokens.iter().all(|&t| t < listops::VOCAB));
            assert_eq!(eval_sequence(&s.tokens), Some(s.label), "{:?}", s.tokens);
        }
    }
}

#[test]
fn listops_hand_evaluated_expression() {
    use listops::*;
    // [MAX 2 [MIN 5 3] 9]
    let tokens = [OPEN, MAX, 2, OPEN, MIN, 5, 3, CLOSE, 9, CLOSE];
    assert_eq!(eval_sequence(&tokens), Some(9));
    assert_eq!(eval_sequence(&[PAD, PAD, 4]), Some(4));
}

#[test]
fn listops_caps() {
    assert!(gen_listops_lite(0, 1, 4, 64).is_err());
    assert!(gen_listops_lite(0, 1, 3, 65).is_err());
}

fn write_file(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let path = dir.path().join(name);
    std::fs::File::create(&path).unwrap().write_all(bytes).unwrap();
    path
}

#[test]
fn idx_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let labels = write_file(&dir, "labels", &[0, 0, 8, 1, 0, 0, 0, 2, 7, 3]);
    let mut image_bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    image_bytes.extend([0, 255, 10, 20, 1, 2, 3, 4]);
    let images = write_file(&dir, "images", &image_bytes);
    let data = load_idx(&images, &labels, None).unwrap();
    assert_eq!(
        data,
        vec![
            LabeledSequence { tokens: vec![0, 255, 10, 20], label: 7 },
            LabeledSequence { tokens: vec![1, 2, 3, 4], label: 3 },
        ]
    );
    assert_eq!(load_idx(&images, &labels, Some(1)).unwrap().len(), 1);
}

#[test]
fn idx_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_file(&dir, "bad", &[0x12, 0x34, 0x56, 0x78, 0, 0, 0, 0]);
    let labels = write_file(&dir, "labels", &[0, 0, 8, 1, 0, 0, 0, 1, 7]);
    let err = load_idx(&bad, &labels, None).unwrap_err();
    assert!(matches!(err, Error::Format(ref m) if m.contains("12345678")), "{err}");
    let short = write_file(&dir, "short", &[0, 0, 8, 1, 0, 0, 0, 5, 1]);
    assert!(matches!(
        slicesort::data::parse_idx_labels(&std::fs::read(short).unwrap()),
        Err(Error::Format(_))
    ));
    let missing = dir.path().join("nope");
    assert!(matches!(load_idx(&missing, &labels, None), Err(Error::Io { .. })));
}

#[test]
fn batches_cover_dataset_each_epoch() {
    let data = gen_multiset_majority(3, 37, 8, 4, 2).unwrap();
    let it = BatchIterator::new(&data, 5, 9).unwrap();
    for epoch in 0..3 {
        let batches = it.epoch(epoch);
        assert_eq!(batches.len(), 8);
        assert!(batches[..7].iter().all(|b| b.len() == 5));
        assert_eq!(batches[7].len(), 2);
        let mut seen: Vec<&LabeledSequence> = batches.into_iter().flatten().collect();
        let mut all: Vec<&LabeledSequence> = data.iter().collect();
        let key = |s: &&LabeledSequence| (s.tokens.clone(), s.label);
        seen.sort_by_key(key);
        all.sort_by_key(key);
        assert_eq!(seen, all);
    }
    let again = BatchIterator::new(&data, 5, 9).unwrap();
    assert_eq!(it.epoch(1), again.epoch(1));
    assert_ne!(it.epoch(0), it.epoch(1));
    let whole = BatchIterator::new(&data, data.len(), 0).unwrap().epoch(0);
    assert_eq!(whole.len(), 1);
    assert!(BatchIterator::new(&[], 1, 0).is_err());
}
