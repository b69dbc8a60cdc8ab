use nartts::gradcheck_suite::{run_suite, SuiteOptions, SUITES};

#[test]
fn every_suite_passes() {
    let opts = SuiteOptions::default();
    let mut failed = Vec::new();
    for name in SUITES {
        let report = run_suite(name, &opts).unwrap();
        let worst = report.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
        println!("{name:<24} params {:>3} max rel {:.2e} ({} a={:e} n={:e})", report.params.len(), report.max_rel_error(), worst.name, worst.analytic, worst.numeric);
        if !report.passed() {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failing suites: {failed:?}");
}

#[test]
fn injected_fault_is_caught() {
    let opts = SuiteOptions {
        corrupt: Some(1.01),
        ..SuiteOptions::default()
    };
    for name in ["lconv_block", "upsampler", "loss_global"] {
        assert!(!run_suite(name, &opts).unwrap().passed(), "{name}");
    }
}

#[test]
fn unknown_suite_is_rejected() {
    assert!(run_suite("nope", &SuiteOptions::default()).is_err());
}

#[test]
#[ignore]
fn sweep_seeds_full() {
    for seed in 11..16 {
        let opts = SuiteOptions { seed, max_entries: None, corrupt: None };
        for name in SUITES {
            let r = run_suite(name, &opts).unwrap();
            if !r.passed() {
                let w = r.failures()[0];
                println!("seed {seed} {name} FAIL {:.2e} {} a={:e} n={:e}", r.max_rel_error(), w.name, w.analytic, w.numeric);
            }
        }
        println!("seed {seed} done");
    }
}
