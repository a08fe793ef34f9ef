use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};

use fac_core::audio::Utterance;
use fac_core::evaluation::*;
use fac_core::{Error, Result};
use proptest::prelude::*;

/// Exhaustive alignment search: minimal total cost, then most substitutions.
fn oracle(r: &[u8], h: &[u8]) -> EditOps {
    fn go(
        r: &[u8],
        h: &[u8],
        memo: &mut HashMap<(usize, usize), (usize, usize, usize)>,
    ) -> (usize, usize, usize) {
        let key = (r.len(), h.len());
        if let Some(v) = memo.get(&key) {
            return *v;
        }
        let v = if r.is_empty() {
            (0, 0, h.len())
        } else if h.is_empty() {
            (0, r.len(), 0)
        } else {
            let mut cands = Vec::new();
            let (s, d, i) = go(&r[1..], &h[1..], memo);
            cands.push((s + usize::from(r[0] != h[0]), d, i));
            let (s, d, i) = go(&r[1..], h, memo);
            cands.push((s, d + 1, i));
            let (s, d, i) = go(r, &h[1..], memo);
            cands.push((s, d, i + 1));
            cands
                .into_iter()
                .min_by_key(|&(s, d, i)| (s + d + i, d + i))
                .unwrap()
        };
        memo.insert(key, v);
        v
    }
    let (substitutions, deletions, insertions) = go(r, h, &mut HashMap::new());
    EditOps {
        substitutions,
        deletions,
        insertions,
    }
}

fn utt(id: &str, transcript: &str) -> Utterance {
    let samples = (0..1600).map(|i| 0.1 * (i as f64 * 0.05).sin()).collect();
    Utterance::new(id, "spk", id, 16000, samples, transcript)
}

fn rating(listener: &str, axis: Axis, value: i64) -> RatingRecord {
    RatingRecord {
        listener_id: listener.into(),
        sample_id: format!("s-{listener}"),
        system_id: "sys".into(),
        axis,
        value,
        timestamp: "2026-03-01T12:00:00Z".into(),
    }
}

struct MapAsr(HashMap<String, Option<String>>);

impl AsrClient for MapAsr {
    fn client_id(&self) -> &str {
        "map"
    }

    fn transcribe(&self, u: &Utterance) -> Result<String> {
        self.0[&u.utterance_id]
            .clone()
            .ok_or_else(|| Error::External("recognizer crashed".into()))
    }
}

const SENTENCES: [&str; 10] = [
    "the cat sat on the mat",
    "author of the danger trail",
    "we will go home now",
    "she sells sea shells",
    "it is a lovely day",
    "don't stop believing",
    "a quick brown fox",
    "jumps over the lazy dog",
    "one two three four five",
    "never say never again",
];

fn samples() -> Vec<(Utterance, String)> {
    SENTENCES
        .iter()
        .enumerate()
        .map(|(i, s)| (utt(&format!("u{i}"), s), s.to_string()))
        .collect()
}

#[test]
fn edit_distance_matches_exhaustive_oracle_on_100_pairs() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let r: Vec<u8> = (0..rng.gen_range(0..=8))
            .map(|_| rng.gen_range(0..3))
            .collect();
        let h: Vec<u8> = (0..rng.gen_range(0..=8))
            .map(|_| rng.gen_range(0..3))
            .collect();
        assert_eq!(edit_distance(&r, &h), oracle(&r, &h), "ref {r:?} hyp {h:?}");
    }
}

#[test]
fn documented_edit_examples() {
    let k: Vec<char> = "kitten".chars().collect();
    let s: Vec<char> = "sitting".chars().collect();
    assert_eq!(edit_distance(&k, &s).total(), 3);
    let r = word_tokens("the cat sat on the mat");
    let h = word_tokens("the cat sat mat");
    assert_eq!(
        edit_distance(&r, &h),
        EditOps {
            substitutions: 0,
            deletions: 2,
            insertions: 0
        }
    );
    assert_eq!(
        edit_distance(&['a', 'b', 'c'], &['a', 'b', 'c']),
        EditOps::default()
    );
    let (_, wer) = cer_wer("the cat sat on the mat", "the cat sat mat").unwrap();
    assert!((wer - 2.0 / 6.0).abs() < 1e-12);
    assert_eq!(cer_wer("three little words", "").unwrap().1, 1.0);
    assert!(matches!(cer_wer("...", "x"), Err(Error::InvalidInput(_))));
}

#[test]
fn perfect_recognizer_scores_zero() {
    let s = samples();
    let asr = MapAsr(
        s.iter()
            .map(|(u, t)| (u.utterance_id.clone(), Some(t.clone())))
            .collect(),
    );
    let score = score_system(&s, &asr, 4).unwrap();
    assert_eq!((score.cer, score.wer), (0.0, 0.0));
    assert!(score.exclusions.is_empty());
}

#[test]
fn dropped_last_word_gives_pooled_deletion_rate() {
    let s = samples();
    let asr = MapAsr(
        s.iter()
            .map(|(u, t)| {
                let mut w: Vec<&str> = t.split(' ').collect();
                w.pop();
                (u.utterance_id.clone(), Some(w.join(" ")))
            })
            .collect(),
    );
    let score = score_system(&s, &asr, 3).unwrap();
    let total_words: usize = SENTENCES.iter().map(|t| t.split(' ').count()).sum();
    assert_eq!(score.totals.words.deletions, 10);
    assert_eq!(score.totals.words.total(), 10);
    assert!((score.wer - 10.0 / total_words as f64).abs() < 1e-12);
    // pooled, not the mean of per-utterance rates
    let mean: f64 = score.per_utterance.iter().map(|u| u.wer).sum::<f64>() / 10.0;
    assert!((mean - score.wer).abs() > 1e-4);
    let order: Vec<&str> = score
        .per_utterance
        .iter()
        .map(|u| u.utterance_id.as_str())
        .collect();
    assert_eq!(order, (0..10).map(|i| format!("u{i}")).collect::<Vec<_>>());
}

#[test]
fn failing_sample_is_excluded_and_reported() {
    let s = samples();
    let mut map: HashMap<_, _> = s
        .iter()
        .map(|(u, t)| (u.utterance_id.clone(), Some(t.clone())))
        .collect();
    map.insert("u4".into(), None);
    let score = score_system(&s, &MapAsr(map), 2).unwrap();
    assert_eq!(score.exclusions.len(), 1);
    assert_eq!(score.exclusions[0].utterance_id, "u4");
    assert_eq!(score.exclusions[0].index, 4);
    assert_eq!(score.per_utterance.len(), 9);
    assert_eq!(score.cer, 0.0);
}

#[test]
fn command_adapter_reads_stdout() {
    let s: Vec<_> = samples().into_iter().take(3).collect();
    let asr =
        CommandAsr::new("test -s {wav} && head -c 4 {wav} | grep -q RIFF && printf 'the cat'");
    let score = score_system(&s, &asr, 2).unwrap();
    assert_eq!(score.per_utterance[0].hypothesis, "the cat");
    assert_eq!(
        score.per_utterance[0].counts.words,
        EditOps {
            substitutions: 0,
            deletions: 4,
            insertions: 0
        }
    );
    let broken = CommandAsr::new("exit 1");
    assert!(score_system(&s, &broken, 2).is_err());
}

fn spawn_http_asr(text: &'static str) -> (String, std::sync::Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/transcribe", listener.local_addr().unwrap());
    let seen = std::sync::Arc::new(AtomicUsize::new(0));
    let counter = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut wav = false;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                wav |= lower.starts_with("content-type: audio/wav");
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let (status, payload) = if wav && body.starts_with(b"RIFF") {
                counter.fetch_add(1, Ordering::SeqCst);
                ("200 OK", format!("{{\"text\": \"{text}\"}}"))
            } else {
                ("400 Bad Request", "{}".to_string())
            };
            let resp = format!(
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

#[test]
fn http_adapter_posts_wav_and_parses_json() {
    let (url, seen) = spawn_http_asr("the cat sat on the mat");
    let s: Vec<_> = samples().into_iter().take(2).collect();
    let score = score_system(&s, &HttpAsr::new(url), 1).unwrap();
    assert_eq!(seen.load(Ordering::SeqCst), 2);
    assert_eq!(score.per_utterance[0].wer, 0.0);
    assert!(score.per_utterance[1].wer > 0.0);
    let dead = HttpAsr::new("http://127.0.0.1:9/none");
    assert!(dead.transcribe(&s[0].0).is_err());
}

#[test]
fn rating_aggregation_examples() {
    let recs: Vec<_> = [4, 4, 4, 4]
        .iter()
        .map(|&v| rating("a", Axis::Naturalness, v))
        .collect();
    let m = aggregate_ratings(&recs, Axis::Naturalness).unwrap();
    assert_eq!((m.mean, m.half_width), (4.0, Some(0.0)));
    let recs: Vec<_> = [3, 4, 5]
        .iter()
        .map(|&v| rating("a", Axis::Naturalness, v))
        .collect();
    let m = aggregate_ratings(&recs, Axis::Naturalness).unwrap();
    assert!((m.mean - 4.0).abs() < 1e-12);
    assert!((m.half_width.unwrap() - 2.48).abs() < 0.005);
    assert_eq!(format_mean(&m), "4.00±2.48");
    assert!(aggregate_ratings(&recs, Axis::Accentedness).is_err());
    let one = aggregate_ratings(&recs[..1], Axis::Naturalness).unwrap();
    assert_eq!(one.half_width, None);
}

#[test]
fn wilson_37_of_100() {
    let recs: Vec<_> = (0..100)
        .map(|i| rating("a", Axis::Similarity, if i < 37 { 3 } else { 2 }))
        .collect();
    let p = similarity_percentage(&recs).unwrap();
    assert!((p.percent - 37.0).abs() < 1e-12);
    let (phat, n, z): (f64, f64, f64) = (0.37, 100.0, 1.959964);
    let half =
        z / (1.0 + z * z / n) * (phat * (1.0 - phat) / n + z * z / (4.0 * n * n)).sqrt() * 100.0;
    assert!((p.half_width - half).abs() < 1e-4);
    assert!((p.half_width - 9.3).abs() < 0.05);
    assert!(similarity_percentage(&[]).is_err());
}

#[test]
fn reference_table_correlations() {
    let rows = reference_table().unwrap();
    let c = correlation_report(&rows).unwrap();
    assert_eq!(c.n, 8);
    assert!(
        (c.accentedness_vs_cer - 0.413).abs() < 0.02,
        "{}",
        c.accentedness_vs_cer
    );
    assert!(
        (c.accentedness_vs_wer - 0.442).abs() < 0.02,
        "{}",
        c.accentedness_vs_wer
    );
    let seven: Vec<_> = rows
        .iter()
        .filter(|r| r.system != "target")
        .cloned()
        .collect();
    let c7 = correlation_report(&seven).unwrap();
    assert_eq!(c7.n, 7);
    assert!((c7.accentedness_vs_cer - pearson_naive(&seven)).abs() < 1e-9);
    let mut flat = rows.clone();
    flat.iter_mut().for_each(|r| r.accentedness = 5.0);
    assert!(matches!(
        correlation_report(&flat),
        Err(Error::Statistics(_))
    ));
}

fn pearson_naive(rows: &[TableRow]) -> f64 {
    let n = rows.len() as f64;
    let (sx, sy): (f64, f64) = rows
        .iter()
        .fold((0.0, 0.0), |a, r| (a.0 + r.cer, a.1 + r.accentedness));
    let sxy: f64 = rows.iter().map(|r| r.cer * r.accentedness).sum();
    let sxx: f64 = rows.iter().map(|r| r.cer * r.cer).sum();
    let syy: f64 = rows.iter().map(|r| r.accentedness * r.accentedness).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn report_combines_scores_and_ratings() {
    let mut scores = BTreeMap::new();
    let mut ratings = Vec::new();
    for (k, sys) in ["a", "b", "c"].iter().enumerate() {
        let s = samples();
        let asr = MapAsr(
            s.iter()
                .enumerate()
                .map(|(i, (u, t))| {
                    (
                        u.utterance_id.clone(),
                        Some(if i < k * 3 { String::new() } else { t.clone() }),
                    )
                })
                .collect(),
        );
        scores.insert(sys.to_string(), score_system(&s, &asr, 1).unwrap());
        for (j, v) in [2, 3, 4].iter().enumerate() {
            let mut r = rating(&format!("l{j}"), Axis::Accentedness, v + k as i64 * 2);
            r.system_id = sys.to_string();
            ratings.push(r.clone());
            r.axis = Axis::Naturalness;
            r.value = 3;
            ratings.push(r.clone());
            r.axis = Axis::Similarity;
            r.value = 4;
            ratings.push(r);
        }
    }
    let report = build_report(&scores, &ratings).unwrap();
    assert_eq!(report.systems.len(), 3);
    let c = report.correlations.unwrap();
    assert!(c.accentedness_vs_cer > 0.9 && c.accentedness_vs_wer > 0.9);
    let json = serde_json::to_string(&report).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    let table = render_table(&report);
    assert!(table.lines().next().unwrap().starts_with("System"));
    assert!(table.contains("3.00±0.00"));
    assert!(table.contains("100.0±"));
}

#[test]
fn ratings_csv_round_trip_preserves_aggregates() {
    let recs: Vec<_> = (0..30)
        .map(|i| rating(&format!("l{i}"), Axis::Accentedness, 1 + i % 9))
        .collect();
    let mut buf = Vec::new();
    write_ratings_csv(&mut buf, &recs).unwrap();
    let back = read_ratings_csv(&buf[..]).unwrap();
    assert_eq!(
        aggregate_ratings(&back, Axis::Accentedness).unwrap(),
        aggregate_ratings(&recs, Axis::Accentedness).unwrap()
    );
    let bad = b"listener_id,sample_id,system_id,axis,value,timestamp\nl,s,x,naturalness,7,t\n";
    assert!(read_ratings_csv(&bad[..]).is_err());
}

proptest! {
    #[test]
    fn error_rates_are_bounded(r in prop::collection::vec("[a-c]{1,3}", 1..8), h in prop::collection::vec("[a-c]{1,3}", 0..8)) {
        let (cer, wer) = cer_wer(&r.join(" "), &h.join(" ")).unwrap();
        prop_assert!(cer >= 0.0 && wer >= 0.0);
        prop_assert!(wer <= 1.0 + h.len() as f64 / r.len() as f64 + 1e-12);
    }

    #[test]
    fn aggregation_is_permutation_invariant(values in prop::collection::vec(1i64..=9, 1..30), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let recs: Vec<_> = values.iter().map(|&v| rating("x", Axis::Accentedness, v)).collect();
        let mut shuffled = recs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = aggregate_ratings(&recs, Axis::Accentedness).unwrap();
        let b = aggregate_ratings(&shuffled, Axis::Accentedness).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-12);
        match (a.half_width, b.half_width) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn pearson_is_affine_invariant(
        pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..20),
        a in 0.1f64..10.0, b in -50.0f64..50.0, c in 0.1f64..10.0, d in -50.0f64..50.0,
    ) {
        let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
        if let Ok(r) = pearson(&x, &y) {
            let x2: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let y2: Vec<f64> = y.iter().map(|v| c * v + d).collect();
            prop_assert!((pearson(&x2, &y2).unwrap() - r).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn similarity_depends_only_on_partition(same in prop::collection::vec(any::<bool>(), 1..60), sure in prop::collection::vec(any::<bool>(), 60)) {
        let coarse: Vec<_> = same.iter().map(|&s| rating("x", Axis::Similarity, if s { 4 } else { 1 })).collect();
        let fine: Vec<_> = same
            .iter()
            .zip(&sure)
            .map(|(&s, &c)| rating("x", Axis::Similarity, match (s, c) { (true, true) => 4, (true, false) => 3, (false, false) => 2, (false, true) => 1 }))
            .collect();
        prop_assert_eq!(similarity_percentage(&coarse).unwrap(), similarity_percentage(&fine).unwrap());
    }
}
