use proptest::prelude::*;

use xva::cli_io::{credit_to_csv, parse_credit_csv, parse_portfolio_csv, portfolio_to_csv, to_stable_json};
use xva::exposure::{CreditCurve, CreditSetup, FundingSpec};
use xva::instruments::{ImModel, MarginSpec, NettingSet, Portfolio, Trade, TradeType};

fn im() -> impl Strategy<Value = ImModel> {
    prop_oneof![
        Just(ImModel::None),
        (0.0f64..1e4).prop_map(|amount| ImModel::Fixed { amount }),
        (0.001f64..0.2, 0.01f64..0.5).prop_map(|(alpha, horizon)| ImModel::Quantile { alpha, horizon }),
    ]
}

fn portfolio() -> impl Strategy<Value = Portfolio> {
    let set = (prop_oneof![Just(f64::INFINITY), 0.0f64..1e5], im(), im());
    let trade = (any::<bool>(), 1.0f64..1e6, 1u32..60, prop::option::of(-0.01f64..0.1), prop::sample::select(vec![3u32, 6, 12]));
    (prop::collection::vec(set, 1..4), prop::collection::vec((trade, 0usize..4), 0..12)).prop_map(|(sets, trades)| {
        let mut netting_sets: Vec<NettingSet> = sets
            .into_iter()
            .enumerate()
            .map(|(i, (th, r, p))| NettingSet {
                id: format!("S{i}"),
                counterparty: format!("C{}", i % 2),
                margin: MarginSpec {
                    vm_threshold: th,
                    im_received: r,
                    im_posted: p,
                },
                trades: Vec::new(),
            })
            .collect();
        let n = netting_sets.len();
        for (j, ((payer, notional, half_years, fixed, tenor), s)) in trades.into_iter().enumerate() {
            let set = &mut netting_sets[s % n];
            set.trades.push(Trade {
                id: format!("T{j}"),
                trade_type: if payer { TradeType::Payer } else { TradeType::Receiver },
                notional,
                maturity_years: half_years as f64 * 0.5,
                fixed_rate: fixed,
                fixed_tenor_months: tenor,
                float_tenor_months: 3,
                netting_set: set.id.clone(),
            });
        }
        Portfolio { netting_sets }
    })
}

proptest! {
    #[test]
    fn portfolio_csv_and_json_round_trip(p in portfolio()) {
        let again = parse_portfolio_csv(&portfolio_to_csv(&p), "p").unwrap();
        prop_assert_eq!(&again, &p);
        let json = serde_json::to_string(&p).unwrap();
        prop_assert_eq!(serde_json::from_str::<Portfolio>(&json).unwrap(), p);
    }

    #[test]
    fn credit_csv_round_trip(spreads in prop::collection::vec(prop::collection::vec(0.0f64..2000.0, 1..6), 2..5), rec in 0.0f64..0.9) {
        let curve = |i: usize, s: &Vec<f64>| {
            let tenors = (1..=s.len()).map(|t| t as f64 * 1.5).collect();
            CreditCurve::new(&format!("E{i}"), rec, tenors, s.clone()).unwrap()
        };
        let (bank, cps) = spreads.split_last().unwrap();
        let c = CreditSetup {
            counterparties: cps.iter().enumerate().map(|(i, s)| curve(i, s)).collect(),
            bank: curve(99, bank),
            funding: FundingSpec::default(),
        };
        prop_assert_eq!(parse_credit_csv(&credit_to_csv(&c), "c").unwrap(), c);
    }

    #[test]
    fn stable_json_is_a_fixed_point(xs in prop::collection::vec(-1e12f64..1e12, 0..20)) {
        let once = to_stable_json(&xs);
        let back: Vec<f64> = serde_json::from_str(&once).unwrap();
        prop_assert_eq!(to_stable_json(&back), once);
    }
}
