mod common;

use proptest::prelude::*;

use common::{timeline_problems, workload};
use profinfer::event::{
    read_session_binary, read_session_jsonl, validate_session, write_session_binary, write_session_jsonl, Addr, Payload,
};
use profinfer::ingest::ingest;
use profinfer::profdag::{bucket, build_profdag};
use profinfer::proftime::{build_timeline, emit_chrome_trace, parse_chrome_trace, SchedSemantics};
use profinfer::synth::{generate, RunSpec};
use profinfer::tracer::{probe_overhead, ProbeClass, ProbeMask, QosController, DISABLE_ORDER};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn session_formats_round_trip((model, run) in workload()) {
        let s = generate(&model, &run).unwrap().session;
        let mut buf = Vec::new();
        write_session_jsonl(&s, &mut buf).unwrap();
        prop_assert_eq!(&read_session_jsonl(&buf[..]).unwrap(), &s);
        buf.clear();
        write_session_binary(&s, &mut buf).unwrap();
        prop_assert_eq!(&read_session_binary(&buf[..]).unwrap(), &s);
    }

    #[test]
    fn validation_ignores_event_order((model, run) in workload(), seed in any::<u64>(), corrupt in 0usize..50) {
        let mut s = generate(&model, &run).unwrap().session;
        let n = s.events.len();
        // plant a few violations
        s.events[corrupt % n].seq = s.events[(corrupt + 1) % n].seq;
        if let Payload::Op(op) = &mut s.events[(corrupt * 7) % n].payload {
            op.op_name = "x".repeat(80);
        }
        let expected = validate_session(&s);
        prop_assert!(!expected.is_empty());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut s.events[..], &mut rng);
        prop_assert_eq!(validate_session(&s), expected);
    }

    #[test]
    fn ingest_is_pure_and_order_free((model, run) in workload(), seed in any::<u64>()) {
        let mut s = generate(&model, &run).unwrap().session;
        let a = ingest(&s).unwrap();
        prop_assert_eq!(&ingest(&s).unwrap(), &a);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut s.events[..], &mut rng);
        prop_assert_eq!(&ingest(&s).unwrap(), &a);
    }

    #[test]
    fn ingest_conserves_events((model, mut run) in workload(), rate in 0.0f64..0.05) {
        run.drop_rate = rate;
        let s = generate(&model, &run).unwrap().session;
        let ing = ingest(&s).unwrap();
        prop_assert_eq!(s.events.len(), 2 * ing.spans.len() + ing.orphans.len() + ing.non_op_event_count());
    }

    #[test]
    fn dags_are_well_formed((model, mut run) in workload()) {
        run.flags.str = true;
        let g = generate(&model, &run).unwrap();
        let ing = ingest(&g.session).unwrap();
        for i in 0..ing.iterations.len() {
            let dag = build_profdag(&ing, i).unwrap();
            prop_assert_eq!(dag.check_invariants(), Ok(()));
            let listed: usize = dag.ordered().iter().map(|n| n.srcs.len()).sum();
            prop_assert_eq!(dag.edges.values().map(|m| *m as usize).sum::<usize>(), listed);
            let orders: Vec<usize> = dag.ordered().iter().map(|n| n.order.unwrap()).collect();
            prop_assert_eq!(orders, (0..dag.ordered().len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn timelines_are_valid_and_round_trip((model, run) in workload(), kernel in any::<bool>()) {
        let s = generate(&model, &run).unwrap().session;
        let semantics = if kernel { SchedSemantics::Kernel } else { SchedSemantics::Compat };
        let doc = build_timeline(&ingest(&s).unwrap(), semantics);
        prop_assert_eq!(timeline_problems(&doc), Vec::<String>::new());
        prop_assert_eq!(&parse_chrome_trace(&emit_chrome_trace(&doc)).unwrap(), &doc);
    }

    #[test]
    fn qos_changes_one_class_at_a_time(tpots in prop::collection::vec(50_000_000u64..400_000_000, 1..80)) {
        let mut q = QosController::new(5.0);
        let mut window = Vec::new();
        for t in tpots {
            window.push(t);
            let before = q.mask;
            let tps = q.measured_tps(&window).unwrap();
            let d = q.qos_update(&window);
            prop_assert!(d.toggled.len() <= 1);
            prop_assert!(d.mask.contains(ProbeClass::Token));
            if tps < 5.0 {
                prop_assert!(d.mask.count() <= before.count());
            } else if tps > 6.0 {
                prop_assert!(d.mask.count() >= before.count());
            } else {
                prop_assert_eq!(d.mask, before);
            }
            // shed classes are always a prefix of the disable order
            let shed = DISABLE_ORDER.iter().take_while(|c| !d.mask.contains(**c)).count();
            let expected = DISABLE_ORDER[..shed].iter().fold(ProbeMask::FULL, |m, c| m.with(*c, false));
            prop_assert_eq!(d.mask, expected);
        }
    }

    #[test]
    fn overhead_is_linear(costs in prop::collection::vec(0u64..10_000_000, 0..20), k in 1u64..50,
                          runtime in 1u64..10_000_000_000, threads in 1u32..16) {
        let base = probe_overhead(&costs, runtime, threads).unwrap();
        let scaled: Vec<u64> = costs.iter().map(|c| c * k).collect();
        let got = probe_overhead(&scaled, runtime, threads).unwrap();
        prop_assert!((got - base * k as f64).abs() <= 1e-12 * got.abs().max(1e-300));
        let (a, b) = costs.split_at(costs.len() / 2);
        let parts = probe_overhead(a, runtime, threads).unwrap() + probe_overhead(b, runtime, threads).unwrap();
        prop_assert!((parts - base).abs() <= 1e-12 * base.max(1e-300));
    }

    #[test]
    fn buckets_are_monotone(mut values in prop::collection::vec(0.0f64..1e9, 2..40), palette in 1usize..12) {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (min, max) = (values[0], values[values.len() - 1]);
        let buckets: Vec<usize> = values.iter().map(|v| bucket(*v, min, max, palette)).collect();
        prop_assert!(buckets.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(buckets.iter().all(|b| *b < palette));
        if max > min {
            prop_assert_eq!(buckets[buckets.len() - 1], palette - 1);
        }
    }
}

#[test]
fn generator_rejects_nothing_it_emits() {
    for m in 0..4 {
        let g = generate(&common::preset(m), &RunSpec { gen_len: 2, ..RunSpec::default() }).unwrap();
        assert_eq!(validate_session(&g.session), vec![]);
        assert!(g.session.events.iter().all(|e| e.op().is_none_or(|op| op.op_addr != Addr(0))));
    }
}
