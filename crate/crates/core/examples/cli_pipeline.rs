// Drive the command-line pipeline in-process: phantom corpus, harmonize,
// pretrain, fine-tune, infer and evaluate.

use petmae::cli::run;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let d = |s: &str| dir.path().join(s).display().to_string();
    let steps: [&[&str]; 6] = [
        &["phantom", "--out", &d("raw"), "--n", "5", "--seed", "1", "--shape", "20", "28", "28"],
        &["harmonize", "--corpus", &d("raw"), "--out", &d("h")],
        &["pretrain", "--corpus", &d("h"), "--out", &d("pre"), "--max-steps", "4", "--crop", "12", "16", "16", "--lr", "1e-3"],
        &["finetune", "--corpus", &d("h"), "--out", &d("ft"), "--init", &d("pre/checkpoint"), "--max-steps", "4"],
        &["infer", "--checkpoint", &d("ft/checkpoint"), "--corpus", &d("h"), "--out", &d("pred")],
        &["eval", "--pred", &d("pred"), "--corpus", &d("h"), "--out", &d("eval")],
    ];
    for args in steps {
        let code = run(std::iter::once("petmae").chain(args.iter().copied()));
        if code != 0 {
            return Err(format!("{} exited with {code}", args[0]).into());
        }
    }
    print!("{}", std::fs::read_to_string(dir.path().join("eval/metrics.csv"))?);
    Ok(())
}
