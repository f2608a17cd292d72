//! Writes a synthetic training corpus, a held-out test corpus and the
//! matching type list, ready for the `vdtrain` command line.
//!
//! cargo run -p vdtrain-core --example mini_corpus -- <out-dir> [train-pairs] [test-pairs]

use std::path::PathBuf;

use vdtrain_core::corpus::write_corpus;
use vdtrain_core::minicorpus::{generate_mini_corpus, mini_type_list};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "mini".into()));
    let n_train: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let n_test: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(40);
    std::fs::create_dir_all(&out)?;
    let all = generate_mini_corpus(n_train + n_test, 7);
    let (train, test) = all.split_at(n_train);
    write_corpus(&out.join("train.jsonl"), train)?;
    write_corpus(&out.join("test.jsonl"), test)?;
    std::fs::write(out.join("types.json"), serde_json::to_string_pretty(&mini_type_list())?)?;
    println!("wrote {} train and {} test pairs to {}", train.len(), test.len(), out.display());
    Ok(())
}
