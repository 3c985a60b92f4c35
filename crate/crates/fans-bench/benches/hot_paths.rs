//! Criterion benches for the pipeline's hot paths: answer normalization and
//! grouping, the selection policies, and run-log replay.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use fans_bench::{synthetic_completions, synthetic_input, ANSWER_POOL};
use fans_core::corpus::{Candidate, RunLog, RunRecord, StagePayload};
use fans_core::mathtext::{equivalent, extract_answer, group_by_equivalence, normalize};
use fans_core::select::{fans_select, majority_vote, orm_fans_select, orm_select, Threshold};

fn bench_mathtext(c: &mut Criterion) {
    let mut group = c.benchmark_group("mathtext");
    group.bench_function("normalize_pool", |b| {
        b.iter(|| {
            for raw in ANSWER_POOL {
                black_box(normalize(black_box(raw)));
            }
        })
    });

    let completions = synthetic_completions(7, 64);
    group.bench_function("extract_answer_64", |b| {
        b.iter(|| {
            for completion in &completions {
                black_box(extract_answer(black_box(completion)).ok());
            }
        })
    });

    let canon: Vec<_> = ANSWER_POOL.iter().map(|raw| normalize(raw)).collect();
    group.bench_function("equivalent_pairwise", |b| {
        b.iter(|| {
            for a in &canon {
                for other in &canon {
                    black_box(equivalent(black_box(a), black_box(other)));
                }
            }
        })
    });

    let many: Vec<_> = (0..256)
        .map(|i| normalize(ANSWER_POOL[i % ANSWER_POOL.len()]))
        .collect();
    group.bench_function("group_by_equivalence_256", |b| {
        b.iter(|| black_box(group_by_equivalence(black_box(&many))))
    });
    group.finish();
}

fn bench_select(c: &mut Criterion) {
    let mut group = c.benchmark_group("select");
    for &n in &[8usize, 64] {
        let input = synthetic_input(11, n);
        group.bench_with_input(BenchmarkId::new("majority_vote", n), &input, |b, input| {
            b.iter(|| majority_vote(black_box(input)).expect("valid input"))
        });
        group.bench_with_input(BenchmarkId::new("fans_select", n), &input, |b, input| {
            b.iter(|| fans_select(black_box(input), Threshold::default()).expect("valid input"))
        });
        group.bench_with_input(BenchmarkId::new("orm_select", n), &input, |b, input| {
            b.iter(|| orm_select(black_box(input)).expect("valid input"))
        });
        group.bench_with_input(BenchmarkId::new("orm_fans_select", n), &input, |b, input| {
            b.iter(|| orm_fans_select(black_box(input)).expect("valid input"))
        });
    }
    group.finish();
}

fn bench_log_replay(c: &mut Criterion) {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("log.jsonl");
    let fingerprint = "bench-fingerprint";
    let (mut log, _) = RunLog::open(&path, fingerprint).expect("open log");
    for problem in 0..250 {
        for index in 0..8 {
            let candidate = Candidate {
                problem_id: format!("p{problem}"),
                candidate_index: index,
                completion: format!("The final answer is $\\boxed{{{}}}$.", problem % 97),
                answer: Some(normalize(&format!("{}", problem % 97))),
                extraction_error: None,
                score: Some(0.5),
            };
            log.append(&RunRecord::new(
                &candidate.problem_id.clone(),
                StagePayload::Sampled(candidate),
                fingerprint,
            ))
            .expect("append");
        }
    }
    drop(log);

    c.bench_function("log_replay_2000_records", |b| {
        b.iter(|| {
            let (_, state) = RunLog::open(black_box(&path), fingerprint).expect("replay");
            black_box(state)
        })
    });
}

criterion_group!(benches, bench_mathtext, bench_select, bench_log_replay);
criterion_main!(benches);
