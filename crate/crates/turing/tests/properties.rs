use proptest::prelude::*;

use freetumor_turing::reference::reference_cases;
use freetumor_turing::report::{report, Grouping};
use freetumor_turing::session::TuringSession;
use freetumor_turing::store::SessionStore;
use freetumor_turing::{ReaderLevel, Verdict};

fn level(i: u8) -> ReaderLevel {
    [ReaderLevel::Junior, ReaderLevel::Mid, ReaderLevel::Senior][i as usize % 3]
}

// 0 = unanswered, 1 = real, 2 = synthetic.
fn calls() -> impl Strategy<Value = Vec<(u8, Vec<u8>)>> {
    prop::collection::vec((0u8..3, prop::collection::vec(0u8..3, 90)), 1..5)
}

fn sessions(calls: &[(u8, Vec<u8>)]) -> Vec<TuringSession> {
    let cases = reference_cases();
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    calls
        .iter()
        .enumerate()
        .map(|(k, (lv, v))| {
            let mut s = TuringSession::new(format!("s{k}"), format!("r{k}"), level(*lv), &ids, k as u64, 0);
            for (c, &x) in cases.iter().zip(v) {
                if x > 0 {
                    let verdict = if x == 1 { Verdict::Real } else { Verdict::Synthetic };
                    s.record_verdict(&c.id, verdict, 1).unwrap();
                }
            }
            s.close(2);
            s
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_grouping_accounts_for_every_case(calls in calls()) {
        let cases = reference_cases();
        let ss = sessions(&calls);
        let refs: Vec<&TuringSession> = ss.iter().collect();
        let answered: usize = ss.iter().map(|s| s.answered()).sum();
        for g in Grouping::ALL {
            let r = report(&refs, &cases, g).unwrap();
            let n: u64 = r.rows.iter().map(|x| x.counts.n_total).sum();
            let u: u64 = r.rows.iter().map(|x| x.unanswered).sum();
            prop_assert_eq!(n as usize, answered);
            prop_assert_eq!(n + u, 90 * ss.len() as u64);
            let tp: u64 = r.rows.iter().map(|x| x.counts.tp).sum();
            let tn: u64 = r.rows.iter().map(|x| x.counts.tn).sum();
            let total = &report(&refs, &cases, Grouping::Total).unwrap().rows[0];
            prop_assert_eq!((tp, tn), (total.counts.tp, total.counts.tn));
        }
    }

    #[test]
    fn store_replay_matches_memory(calls in calls(), overwrite in 0usize..90) {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = SessionStore::open(tmp.path()).unwrap();
        let ss = sessions(&calls);
        for s in &ss {
            let fresh = TuringSession { verdicts: Default::default(), audit: vec![], closed_at: None, ..s.clone() };
            store.create(fresh).unwrap();
            for (cid, v) in &s.verdicts {
                store.record(&s.session_id, cid, v.verdict, v.at).unwrap();
            }
        }
        let first = &ss[0];
        let cid = &first.case_order[overwrite];
        let flipped = match first.verdicts.get(cid).map(|v| v.verdict) {
            Some(Verdict::Real) => Verdict::Synthetic,
            _ => Verdict::Real,
        };
        store.record(&first.session_id, cid, flipped, 3).unwrap();
        for s in &ss {
            store.close(&s.session_id, 2).unwrap();
        }
        let reopened = SessionStore::open(tmp.path()).unwrap();
        let a: Vec<_> = store.sessions().cloned().collect();
        let b: Vec<_> = reopened.sessions().cloned().collect();
        prop_assert_eq!(a, b);
    }
}
