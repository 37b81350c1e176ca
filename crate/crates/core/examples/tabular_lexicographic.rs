//! Solves a small two-objective MOMDP exactly and with tabular
//! thresholded lexicographic Q-learning, then compares the admissible sets.

use lexdrive::momdp::oracle::{benchmark_momdp, BENCHMARK_SLACKS};
use lexdrive::momdp::{lexicographic_value_iteration, tabular_tlq_learning, TabularSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let m = benchmark_momdp();
    let (exact_q, exact) = lexicographic_value_iteration(&m, &BENCHMARK_SLACKS, 1e-12)?;
    let learned_q = tabular_tlq_learning(&m, &BENCHMARK_SLACKS, &TabularSchedule { seed: 7, ..Default::default() }, 400_000)?;
    let learned = learned_q.admissible_sets()?;

    println!("{} states, {} actions, slacks {:?}", m.n_states(), m.n_actions(), BENCHMARK_SLACKS);
    println!("state  exact A1  learned A1  exact A2  learned A2");
    let mut matched = 0;
    for s in 0..m.n_states() {
        let same = (1..=m.n_objectives()).all(|i| exact.at(i, s) == learned.at(i, s));
        matched += usize::from(same);
        println!(
            "{s:>5}  {:>8}  {:>10}  {:>8}  {:>10}{}",
            format!("{:?}", exact.at(1, s).iter().collect::<Vec<_>>()),
            format!("{:?}", learned.at(1, s).iter().collect::<Vec<_>>()),
            format!("{:?}", exact.at(2, s).iter().collect::<Vec<_>>()),
            format!("{:?}", learned.at(2, s).iter().collect::<Vec<_>>()),
            if same { "" } else { "  <- differs" }
        );
    }
    let err = exact_q.q.iter().flatten().zip(learned_q.q.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("{matched}/{} states match, max |Q error| {err:.3}", m.n_states());
    Ok(())
}
