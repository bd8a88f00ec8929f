//! Parse a run configuration, inspect derived settings and print the
//! resolved form that commands echo as resolved.cfg. Ends with the key table.
//!
//! cargo run --release --example run_config

use himix::config::{RunConfig, KEYS};

fn main() -> himix::Result<()> {
    let text = "# lighter run\ntrain.epochs = 4\nmixup.alpha = 0.5\nmodule.cgf = off\n";
    let cfg = RunConfig::parse(text)?;
    println!("toggles     {}", cfg.toggles());
    println!("train seed  {}", cfg.train().seed);
    println!("mixup       {:?}", cfg.mixup());
    println!("config hash {}", cfg.hash());
    assert_eq!(RunConfig::parse(&cfg.to_text())?, cfg);
    match RunConfig::parse("learning_rate = 0.1") {
        Err(e) => println!("rejected: {e} (exit code {})", e.exit_code()),
        Ok(_) => unreachable!(),
    }
    print!("{}", cfg.to_text());
    println!();
    for k in KEYS {
        println!("{:<24} {:<12} {}", k.key, k.default, k.doc);
    }
    Ok(())
}
