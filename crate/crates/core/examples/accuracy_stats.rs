//! Accuracy with a 95% interval, bias normalization, and a small grouped
//! report built from verdicts alone.
//!
//!     cargo run -p clinsim --example accuracy_stats

use clinsim::eval::{accuracy_stat, accuracy_stat_with, normalized_bias_accuracy, AccuracyStat, Interval};
use clinsim::Verdict;

fn verdicts(correct: usize, n: usize) -> Vec<Verdict> {
    (0..n).map(|i| if i < correct { Verdict::Yes } else { Verdict::No }).collect()
}

fn main() {
    // 134 of 215 cases correct.
    let stat = accuracy_stat(verdicts(134, 215)).unwrap();
    println!("wald:   {}", stat.render());
    let wilson = accuracy_stat_with(verdicts(134, 215), Interval::Wilson).unwrap();
    println!("wilson: {}", wilson.render());

    // Ungraded episodes are excluded from the denominator.
    let mut mixed = verdicts(3, 10);
    mixed.push(Verdict::Ungraded);
    let s: AccuracyStat = accuracy_stat(mixed).unwrap();
    println!("with one ungraded: {} correct of {} graded", s.n_correct, s.n_graded);

    // A biased run at 48% against a 52% baseline.
    println!("normalized: {:.1}%", normalized_bias_accuracy(0.48, 0.52).unwrap());
}
