use nartts::corpus::{
    generate, read_corpus, write_corpus, write_corpus_text, zero_fraction, CorpusSpec, Inventory, SyntheticRules,
    Utterance, CORPUS_MAGIC, MIN_TEMPLATE_DISTANCE, CORPUS_VERSION, SILENCE,
};
use nartts::Error;
use proptest::prelude::*;

fn bytes(spec: &CorpusSpec, utts: &[Utterance]) -> Vec<u8> {
    let mut out = Vec::new();
    write_corpus(&mut out, spec.frame_rate, spec.mel_bins, utts).unwrap();
    out
}

#[test]
fn same_seed_gives_byte_identical_corpora() {
    let spec = CorpusSpec::default();
    let inv = Inventory::default();
    let a = generate(&spec, &inv, 20).unwrap();
    let b = generate(&spec, &inv, 20).unwrap();
    assert_eq!(bytes(&spec, &a), bytes(&spec, &b));
    let other = CorpusSpec { seed: spec.seed + 1, ..spec.clone() };
    assert_ne!(bytes(&spec, &a), bytes(&other, &generate(&other, &inv, 20).unwrap()));
}

#[test]
fn utterances_are_well_formed() {
    let spec = CorpusSpec::default();
    let inv = Inventory::default();
    let sil = inv.id(SILENCE).unwrap();
    for u in generate(&spec, &inv, 200).unwrap() {
        assert_eq!(u.tokens.len(), u.durations.len());
        assert_eq!(u.mel.len(), u.durations.iter().sum::<usize>() * spec.mel_bins);
        assert!(u.mel.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(u.speaker < spec.num_speakers);
        assert_eq!(u.tokens[0], sil);
        assert!(inv.is_pause(*u.tokens.last().unwrap()));
        for (&t, &f) in u.tokens.iter().zip(&u.durations) {
            if !inv.is_pause(t) {
                assert!(f > 0, "phoneme {} lasts zero frames", inv.symbol(t));
            }
        }
        // Words are separated by a single silence.
        let words = u.tokens[1..u.tokens.len() - 1].split(|&t| t == sil).count();
        assert!((spec.min_words..=spec.max_words).contains(&words));
    }
}

#[test]
fn targets_follow_from_the_rules_alone() {
    let spec = CorpusSpec::default();
    let inv = Inventory::default();
    let rules = SyntheticRules::new(&spec, &inv);
    let utts = generate(&spec, &inv, 100).unwrap();
    let mut dropped = 0;
    for u in &utts {
        assert_eq!(rules.render(&u.tokens, &u.durations, u.speaker, spec.mel_bins), u.mel);
        // Removing zero-length tokens changes nothing.
        let (tokens, durations): (Vec<usize>, Vec<usize>) =
            u.tokens.iter().zip(&u.durations).filter(|(_, &f)| f > 0).map(|(&t, &f)| (t, f)).unzip();
        dropped += u.tokens.len() - tokens.len();
        assert_eq!(rules.render(&tokens, &durations, u.speaker, spec.mel_bins), u.mel);
    }
    assert!(dropped > 0);
}

#[test]
fn templates_are_pairwise_distinguishable() {
    let inv = Inventory::default();
    for seed in [7, 8, 9, 1234] {
        let spec = CorpusSpec { seed, ..CorpusSpec::default() };
        let rules = SyntheticRules::new(&spec, &inv);
        for s in 0..spec.num_speakers {
            for a in 0..inv.len() {
                for b in 0..a {
                    let (ta, tb) = (&rules.templates[a][s], &rules.templates[b][s]);
                    let d: f64 = ta.iter().zip(tb).map(|(x, y)| (x - y).abs()).sum::<f64>() / spec.mel_bins as f64;
                    assert!(d >= MIN_TEMPLATE_DISTANCE, "seed {seed}: symbols {a} and {b} differ by {d} per bin");
                }
            }
        }
    }
}

#[test]
fn zero_duration_rate_matches_configuration() {
    let inv = Inventory::default();
    for p in [0.1, 0.3, 0.6] {
        let spec = CorpusSpec { zero_prob: p, seed: 40, ..CorpusSpec::default() };
        let utts = generate(&spec, &inv, 600).unwrap();
        let (pauses, frac) = zero_fraction(&utts, &inv);
        assert!(pauses >= 1000, "only {pauses} pause tokens");
        assert!((frac - p).abs() <= 0.05, "configured {p}, realized {frac}");
    }
}

#[test]
fn generation_rejects_bad_requests() {
    let inv = Inventory::default();
    assert!(generate(&CorpusSpec::default(), &inv, 0).is_err());
    let bad = CorpusSpec { zero_prob: 1.5, min_words: 3, max_words: 2, ..CorpusSpec::default() };
    match generate(&bad, &inv, 1) {
        Err(Error::Config(problems)) => assert_eq!(problems.len(), 2),
        other => panic!("expected config errors, got {other:?}"),
    }
}

#[test]
fn empty_and_large_corpora_round_trip() {
    let spec = CorpusSpec::default();
    let empty = read_corpus(&bytes(&spec, &[])[..]).unwrap();
    assert!(empty.utterances.is_empty());
    assert_eq!((empty.bins, empty.frame_rate), (spec.mel_bins, spec.frame_rate));

    let utts = generate(&spec, &Inventory::default(), 100).unwrap();
    let raw = bytes(&spec, &utts);
    let back = read_corpus(&raw[..]).unwrap();
    assert_eq!(back.utterances, utts);
    assert_eq!(bytes(&spec, &back.utterances), raw);
}

#[test]
fn damaged_files_give_errors() {
    let spec = CorpusSpec { mel_bins: 8, ..CorpusSpec::default() };
    let utts = generate(&spec, &Inventory::default(), 3).unwrap();
    let raw = bytes(&spec, &utts);

    let mut magic = raw.clone();
    magic[0] = b'X';
    assert!(matches!(read_corpus(&magic[..]), Err(Error::BadMagic { .. })));
    let mut version = raw.clone();
    version[8] = CORPUS_VERSION + 1;
    assert!(matches!(read_corpus(&version[..]), Err(Error::UnsupportedVersion { .. })));

    // Header: magic, version, bins, rate, then the utterance count.
    let count_at = CORPUS_MAGIC.len() + 1 + 4 + 8;
    let mut count = raw.clone();
    count[count_at..count_at + 4].copy_from_slice(&4u32.to_le_bytes());
    assert!(matches!(read_corpus(&count[..]), Err(Error::Truncated(_))));
    count[count_at..count_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(read_corpus(&count[..]), Err(Error::Truncated(_))));

    let mut frames = raw.clone();
    let tokens = utts[0].tokens.len();
    let frames_at = count_at + 4 + 8 + 8 * tokens;
    frames[frames_at..frames_at + 4].copy_from_slice(&9999u32.to_le_bytes());
    assert!(read_corpus(&frames[..]).is_err());

    for cut in [0, 5, count_at + 2, raw.len() - 1] {
        assert!(matches!(read_corpus(&raw[..cut]), Err(Error::Truncated(_))), "cut at {cut}");
    }
    let mut trailing = raw;
    trailing.push(0);
    assert!(read_corpus(&trailing[..]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_byte_damage_never_panics(seed in 0..50u64, pos in 0..4000usize, byte in any::<u8>()) {
        let spec = CorpusSpec { mel_bins: 4, seed, ..CorpusSpec::default() };
        let mut raw = bytes(&spec, &generate(&spec, &Inventory::default(), 4).unwrap());
        let pos = pos % raw.len();
        raw[pos] = byte;
        let _ = read_corpus(&raw[..]);
    }
}

#[test]
fn inventory_text_round_trips() {
    let inv = Inventory::default();
    assert_eq!(inv.len(), 28);
    assert_eq!(Inventory::from_text(&inv.to_text()).unwrap(), inv);
    assert_eq!(inv.encode("sil k ae t .").unwrap(), vec![24, 10, 1, 19, 26]);
    assert!(matches!(inv.encode("k zz"), Err(Error::UnknownSymbol(s)) if s == "zz"));
    assert!(Inventory::from_text("a\nb\na\n").is_err());
    assert!(Inventory::from_text("\n\n").is_err());
}

#[test]
fn text_dump_lists_every_token() {
    let spec = CorpusSpec::default();
    let inv = Inventory::default();
    let utts = generate(&spec, &inv, 5).unwrap();
    let mut out = Vec::new();
    write_corpus_text(&mut out, &inv, &utts).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 5);
    for (line, u) in text.lines().zip(&utts) {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields[2], format!("frames={}", u.frames()));
        let pairs: Vec<&str> = fields[3].split(' ').collect();
        assert_eq!(pairs.len(), u.tokens.len());
        for (p, (&t, &f)) in pairs.iter().zip(u.tokens.iter().zip(&u.durations)) {
            assert_eq!(*p, format!("{}:{f}", inv.symbol(t)));
        }
    }
}

#[test]
fn spec_text_round_trips_and_reports_every_problem() {
    let spec = CorpusSpec { zero_prob: 0.25, seed: 99, mel_bins: 16, ..CorpusSpec::default() };
    assert_eq!(CorpusSpec::parse(&spec.to_text()).unwrap(), spec);
    assert_eq!(CorpusSpec::parse("# comment only\n\n").unwrap(), CorpusSpec::default());
    match CorpusSpec::parse("seed = x\ncolour = red\nzero_prob = 2\n") {
        Err(Error::Config(problems)) => assert_eq!(problems.len(), 3, "{problems:?}"),
        other => panic!("expected config errors, got {other:?}"),
    }
}
