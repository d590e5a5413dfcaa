use std::io::Write;

use perstab::verify::{run_criterion, CRITERIA};

#[test]
fn acceptance_criteria() {
    // Written to the real stdout so the lines survive libtest's capture.
    let mut stdout = std::io::stdout().lock();
    let mut failed = Vec::new();
    for (id, _, _) in CRITERIA {
        let outcome = run_criterion(id).expect("listed criterion");
        writeln!(stdout, "{}", outcome.summary()).unwrap();
        stdout.flush().unwrap();
        if !outcome.pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
