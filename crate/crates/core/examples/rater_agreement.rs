//! Cohen's kappa from a two-rater CSV, with and without unsure answers.
//!
//! `cargo run --release --example rater_agreement [ratings.csv]`

use ecg_senet::metrics::{cohens_kappa, parse_rater_csv};

const SAMPLE: &str = "\
example_id,rater1,rater2
1,pos,pos
2,pos,neg
3,neg,neg
4,neg,neg
5,unsure,pos
6,pos,pos
7,neg,pos
8,neg,neg
9,pos,unsure
10,neg,neg
";

fn main() -> ecg_senet::Result<()> {
    let text = match std::env::args().nth(1) {
        Some(path) => std::fs::read_to_string(path)?,
        None => SAMPLE.to_owned(),
    };
    let (a, b) = parse_rater_csv(&text)?;
    for exclude_unsure in [true, false] {
        let k = cohens_kappa(&a, &b, exclude_unsure)?;
        println!(
            "exclude unsure = {exclude_unsure}: kappa = {:.3} over {} examples",
            k.kappa, k.n_used
        );
        for (row, name) in k.table.iter().zip(["pos", "neg", "unsure"]) {
            println!("  {name:>6} {:?}", row);
        }
    }
    Ok(())
}
