//! The acceptance battery at full scale. Prints one line per criterion and
//! fails if any criterion fails.

use zeta_gibbs::verify::{Scale, Suite, CRITERIA, DEFAULT_SEED};

#[test]
fn acceptance_criteria() {
    let suite = Suite::new(Scale::acceptance(), DEFAULT_SEED);
    let mut failed = Vec::new();
    for id in CRITERIA {
        let outcome = suite.run(id);
        println!("{}", outcome.line());
        if !outcome.passed {
            failed.push(id);
        }
    }
    println!("failed criteria: {failed:?}");
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
