//! Scalar-first against decoupled advantages on a hand-made batch where one
//! objective's scale swamps the other.
//!
//! cargo run --example advantage_pipelines

use flowpref::advantage::{collapse_witness, compute_advantage, read_rewards_csv, write_advantage_csv, AdvantageConfig, AdvantageMode};

fn main() -> flowpref::Result<()> {
    let (batch, (g, j, jj)) = collapse_witness();
    for mode in [AdvantageMode::ScalarFirst, AdvantageMode::Decoupled] {
        let res = compute_advantage(&batch, &AdvantageConfig::new(mode, vec![1.0; batch.k()]))?;
        println!("{}:", mode.name());
        for (i, row) in res.advantages.iter().enumerate() {
            let a: Vec<String> = row.iter().map(|a| format!("{a:+.3}")).collect();
            let w: Vec<String> = res.reward_weights[i].iter().map(|w| format!("{w:.3}")).collect();
            println!("  group {i}: A [{}]  r [{}]", a.join(" "), w.join(" "));
        }
        println!("  |A_{j} - A_{jj}| in group {g}: {:.4}", (res.advantages[g][j] - res.advantages[g][jj]).abs());
    }

    // The same computation driven from CSV, as `flowpref analyze-advantage` does.
    let csv = "group_id,rollout_id,r_1,r_2\nimg7,a,0.61,0.90\nimg7,b,0.64,0.88\nimg7,c,0.58,0.93\n";
    let table = read_rewards_csv(csv.as_bytes())?;
    let res = compute_advantage(&table.batch, &AdvantageConfig::new(AdvantageMode::Decoupled, vec![1.0, 1.0]))?;
    let mut out = Vec::new();
    write_advantage_csv(&table, &res, &mut out)?;
    print!("{}", String::from_utf8_lossy(&out));
    Ok(())
}
