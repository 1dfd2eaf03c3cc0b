use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sentemb::formats::{read_embeddings, write_nli_csv, write_sts_tsv, EMBEDDING_HEADER_LEN, EMBEDDING_MAGIC};
use sentemb::{synthetic, ScoredSentencePair};
use serde_json::Value;

fn sentemb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sentemb"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

// Independent oracles for the planted-score check.

fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum();
    dot / (na.sqrt() * nb.sqrt())
}

/// Position of each element in ascending order (inputs are tie-free).
fn order_ranks(xs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut r = vec![0; xs.len()];
    for (pos, &i) in idx.iter().enumerate() {
        r[i] = pos;
    }
    r
}

#[test]
fn embed_writes_header_payload_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "in.txt", "A dog runs.\n\nThe cat sleeps.\nA man plays guitar.\n");
    let out = sentemb(dir.path(), &["embed", "--input", "in.txt", "-o", "e.bin", "--seed", "3"]);
    ok(&out);
    let bytes = std::fs::read(dir.path().join("e.bin")).unwrap();
    assert_eq!(&bytes[..4], EMBEDDING_MAGIC);
    assert_eq!(bytes.len() - EMBEDDING_HEADER_LEN, 3 * 64 * 4);
    let (dim, rows) = read_embeddings(&bytes).unwrap();
    assert_eq!((dim, rows.len()), (64, 3));

    let manifest = read_json(&dir.path().join("e.bin.manifest.json"));
    assert_eq!(manifest["method"], "prompt_eol");
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["demonstration"].is_null());
    assert!(manifest["backend"].as_str().unwrap().starts_with("reference-seed3"));
    assert!(manifest["created_unix"].is_u64());
}

#[test]
fn embed_output_is_identical_with_cold_warm_and_no_cache() {
    let dir = tempfile::tempdir().unwrap();
    let lines: Vec<String> = synthetic::nli_triplets(10, 4).into_iter().map(|t| t.anchor).collect();
    write(dir.path(), "in.txt", &lines.join("\n"));
    let run = |out: &str, cache: bool| {
        let mut args = vec!["embed", "--input", "in.txt", "-o", out, "--method", "avg_tokens"];
        if cache {
            args.extend(["--cache-dir", "cache"]);
        }
        ok(&sentemb(dir.path(), &args));
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let cold = run("cold.bin", true);
    let warm = run("warm.bin", true);
    let uncached = run("none.bin", false);
    assert_eq!(cold, warm);
    assert_eq!(cold, uncached);
}

#[test]
fn concurrent_commands_share_a_cache() {
    let dir = tempfile::tempdir().unwrap();
    let lines: Vec<String> = synthetic::nli_triplets(30, 8).into_iter().map(|t| t.positive).collect();
    write(dir.path(), "in.txt", &lines.join("\n"));
    let children: Vec<_> = (0..3)
        .map(|i| {
            Command::new(env!("CARGO_BIN_EXE_sentemb"))
                .current_dir(dir.path())
                .args(["embed", "--input", "in.txt", "--cache-dir", "cache", "-o", &format!("p{i}.bin")])
                .spawn()
                .unwrap()
        })
        .collect();
    for mut c in children {
        assert!(c.wait().unwrap().success());
    }
    let first = std::fs::read(dir.path().join("p0.bin")).unwrap();
    for i in 1..3 {
        assert_eq!(std::fs::read(dir.path().join(format!("p{i}.bin"))).unwrap(), first);
    }
    ok(&sentemb(dir.path(), &["embed", "--input", "in.txt", "--cache-dir", "cache", "-o", "again.bin"]));
    assert_eq!(std::fs::read(dir.path().join("again.bin")).unwrap(), first);
}

#[test]
fn embed_empty_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "empty.txt", "\n  \n");
    let out = sentemb(dir.path(), &["embed", "--input", "empty.txt", "-o", "e.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no sentences"));
    let err: Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "data");
    assert!(!dir.path().join("e.bin").exists());
}

#[test]
fn eval_sts_matches_planted_spearman() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synthetic::sts_pairs(24, 6);
    let n = pairs.len();
    let left: Vec<&str> = pairs.iter().map(|p| p.sentence_a.as_str()).collect();
    let right: Vec<&str> = pairs.iter().map(|p| p.sentence_b.as_str()).collect();
    write(dir.path(), "left.txt", &left.join("\n"));
    write(dir.path(), "right.txt", &right.join("\n"));
    for side in ["left", "right"] {
        ok(&sentemb(
            dir.path(),
            &["embed", "--input", &format!("{side}.txt"), "-o", &format!("{side}.bin"), "--cache-dir", "cache"],
        ));
    }
    let (_, a) = read_embeddings(&std::fs::read(dir.path().join("left.bin")).unwrap()).unwrap();
    let (_, b) = read_embeddings(&std::fs::read(dir.path().join("right.bin")).unwrap()).unwrap();
    let cosines: Vec<f64> = a.iter().zip(&b).map(|(x, y)| oracle_cosine(x, y)).collect();

    // Gold follows the cosine order except that the two lowest-ranked pairs
    // swap places, planting Spearman = 1 - 6·2 / (n(n² - 1)).
    let ranks = order_ranks(&cosines);
    let gold: Vec<f64> = ranks
        .iter()
        .map(|&r| match r {
            0 => 1,
            1 => 0,
            r => r,
        })
        .map(|r| 5.0 * r as f64 / (n - 1) as f64)
        .collect();
    let planted = 1.0 - 12.0 / (n * (n * n - 1)) as f64;
    let rows: Vec<ScoredSentencePair> = pairs
        .iter()
        .zip(&gold)
        .map(|(p, &g)| ScoredSentencePair::new(&p.sentence_a, &p.sentence_b, g))
        .collect();
    write(dir.path(), "planted.tsv", &write_sts_tsv(&rows));

    let out = sentemb(
        dir.path(),
        &["eval-sts", "--sts", "planted=planted.tsv", "--cache-dir", "cache", "-o", "report.json"],
    );
    ok(&out);
    let report = read_json(&dir.path().join("report.json"));
    let raw = report["per_task_scores"]["planted"].as_f64().unwrap();
    assert!((raw - planted).abs() < 1e-9, "{raw} vs planted {planted}");
    let x100 = report["per_task_scores_x100"]["planted"].as_f64().unwrap();
    assert_eq!(x100, (raw * 10000.0).round() / 100.0);
    assert_eq!(report["complete"], true);
    assert_eq!(report["average"].as_f64().unwrap(), raw);
}

#[test]
fn eval_sts_report_is_reproducible_and_embeds_config() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.tsv", &write_sts_tsv(&synthetic::sts_pairs(12, 1)));
    write(dir.path(), "b.tsv", &write_sts_tsv(&synthetic::sts_pairs(12, 2)));
    write(
        dir.path(),
        "cfg.toml",
        "seed = 1\nbatch_size = 4\n[method]\nkind = \"prompt_last\"\n[data.sts]\na = \"a.tsv\"\nb = \"b.tsv\"\n",
    );
    // Flags win over the file.
    let args = ["eval-sts", "-c", "cfg.toml", "--seed", "2", "--method", "prompt_eol", "-o", "r1.json"];
    ok(&sentemb(dir.path(), &args));
    let mut again = args;
    again[8] = "r2.json";
    ok(&sentemb(dir.path(), &again));
    let report = read_json(&dir.path().join("r1.json"));
    let mut second = read_json(&dir.path().join("r2.json"));
    // Only the recorded output path may differ between the two runs.
    assert_eq!(second["config_snapshot"]["output"], "r2.json");
    second["config_snapshot"]["output"] = report["config_snapshot"]["output"].clone();
    assert_eq!(report, second);

    assert_eq!(report["seed"], 2);
    assert_eq!(report["method"], "prompt_eol");
    let snap = &report["config_snapshot"];
    assert_eq!(snap["seed"], 2);
    assert_eq!(snap["batch_size"], 4);
    assert_eq!(snap["train"]["lora"]["rank"], 64);
    assert_eq!(snap["train"]["seed"], 2);
    let scores = report["per_task_scores"].as_object().unwrap();
    let mean = scores.values().map(|v| v.as_f64().unwrap()).sum::<f64>() / scores.len() as f64;
    assert_eq!(report["average"].as_f64().unwrap(), mean);
}

#[test]
fn eval_sts_icl_method_records_demonstration() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.tsv", &write_sts_tsv(&synthetic::sts_pairs(8, 1)));
    let out = sentemb(
        dir.path(),
        &["eval-sts", "--sts", "a=a.tsv", "--demo-sentence", "A dog barks.", "--demo-word", "dog"],
    );
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["method"], "prompt_eol+icl");
    assert_eq!(report["demonstration"]["word"], "dog");

    let half = sentemb(dir.path(), &["eval-sts", "--sts", "a=a.tsv", "--demo-word", "dog"]);
    assert_eq!(half.status.code(), Some(1));
}

#[test]
fn eval_sts_missing_dataset_writes_no_report() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.tsv", &write_sts_tsv(&synthetic::sts_pairs(8, 1)));
    let out = sentemb(
        dir.path(),
        &["eval-sts", "--sts", "a=a.tsv", "--sts", "gone=missing.tsv", "-o", "report.json"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.tsv"));
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn eval_sts_partial_report_is_marked_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.tsv", &write_sts_tsv(&synthetic::sts_pairs(8, 1)));
    // Constant gold scores make Spearman undefined for this dataset.
    write(dir.path(), "flat.tsv", "2.0\tA dog runs.\tA cat runs.\n2.0\tA bird sings.\tA man sings.\n");
    let out = sentemb(
        dir.path(),
        &["eval-sts", "--sts", "a=a.tsv", "--sts", "flat=flat.tsv", "-o", "report.json"],
    );
    assert_eq!(out.status.code(), Some(2));
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["complete"], false);
    assert!(report["failures"]["flat"].is_string());
    assert!(report["per_task_scores"]["a"].is_f64());
    assert!(report["per_task_scores"].get("flat").is_none());
}

#[test]
fn eval_transfer_reports_accuracy_and_chosen_l2() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = |examples: Vec<sentemb::LabeledExample>| {
        examples
            .iter()
            .map(|e| format!("{}\t{}\n", e.label, e.text))
            .collect::<String>()
    };
    write(dir.path(), "train.tsv", &tsv(synthetic::labeled_examples(60, 1)));
    write(dir.path(), "test.tsv", &tsv(synthetic::labeled_examples(40, 2)));
    let out = sentemb(dir.path(), &["eval-transfer", "--task", "swim=train.tsv,test.tsv"]);
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = report["per_task_scores"]["swim"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let l2 = report["extra"]["tasks"]["swim"]["chosen_l2"].as_f64().unwrap();
    assert!([1e-4, 1e-2, 1.0].contains(&l2));
}

fn demo_json(demos: &[(&str, &str)]) -> String {
    let items: Vec<Value> = demos
        .iter()
        .map(|(s, w)| serde_json::json!({ "sentence": s, "word": w, "source": "labeled_pairs" }))
        .collect();
    serde_json::to_string(&items).unwrap()
}

#[test]
fn search_demo_singleton_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "dev.tsv", &write_sts_tsv(&synthetic::sts_pairs(10, 3)));
    write(dir.path(), "one.json", &demo_json(&[("A dog runs in the park.", "dog")]));
    let out = sentemb(dir.path(), &["search-demo", "--demo-set", "one.json", "--dev", "dev.tsv"]);
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["search"]["best_index"], 0);
    assert_eq!(report["search"]["best_demo"]["sentence"], "A dog runs in the park.");
    assert!(report["search"]["baseline_score"].is_f64());

    let demos = [
        ("A dog runs in the park.", "dog"),
        ("The chef cooks in the kitchen.", "cooking"),
        ("A child swims in the river.", "swimming"),
        ("Our farmer waits at the market.", "market"),
        ("A dog runs in the park.", "dog"),
    ];
    write(dir.path(), "set.json", &demo_json(&demos));
    let args = ["search-demo", "--demo-set", "set.json", "--dev", "dev.tsv", "--bins", "3"];
    let first = sentemb(dir.path(), &args);
    let second = sentemb(dir.path(), &args);
    ok(&first);
    assert_eq!(first.stdout, second.stdout);
    let report: Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(report["demo_count"], 4);
    assert_eq!(report["duplicates_dropped"], 1);
    assert_eq!(report["search"]["all_scores"].as_array().unwrap().len(), 4);
    let counts: u64 = report["histogram"]["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, 4);
}

#[test]
fn build_demos_from_dictionary_with_dedup() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "dict.tsv",
        "dog\tA loyal animal that barks.\ncat\tA small animal that purrs.\nriver\tA stream of water.\n\
         storm\tViolent weather.\nbread\tBaked food made of flour.\n",
    );
    let out = sentemb(dir.path(), &["build-demos", "--dictionary", "dict.tsv", "-o", "demos.json"]);
    ok(&out);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["count"], 5);
    assert_eq!(summary["provenance"], serde_json::json!({ "dictionary": 5 }));
    let demos = read_json(&dir.path().join("demos.json"));
    assert_eq!(demos.as_array().unwrap().len(), 5);
    assert_eq!(read_json(&dir.path().join("demos.json.manifest.json"))["seed"], 0);

    write(dir.path(), "dup.tsv", "dog\tA loyal animal that barks.\ndog\tA loyal animal that barks.\ncat\tPurrs.\n");
    let out = sentemb(dir.path(), &["build-demos", "--dictionary", "dup.tsv", "-o", "d2.json"]);
    ok(&out);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["count"], 2);
    assert_eq!(summary["duplicates_removed"], 1);
}

#[test]
fn build_demos_without_labeler_needs_dictionary_only() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "dict.tsv", "dog\tA loyal animal that barks.\n");
    write(dir.path(), "sents.txt", "A man plays guitar.\nThe sun is hot.\n");
    let base = ["build-demos", "--dictionary", "dict.tsv", "--sentences", "sents.txt", "-o", "d.json"];
    let out = sentemb(dir.path(), &base);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("labeler"));
    assert!(!dir.path().join("d.json").exists());

    let mut flagged = base.to_vec();
    flagged.push("--dictionary-only");
    ok(&sentemb(dir.path(), &flagged));
    assert_eq!(read_json(&dir.path().join("d.json")).as_array().unwrap().len(), 1);
}

#[test]
fn build_demos_with_reference_labeler() {
    let dir = tempfile::tempdir().unwrap();
    let sentences: Vec<String> = synthetic::nli_triplets(6, 2).into_iter().map(|t| t.anchor).collect();
    write(dir.path(), "sents.txt", &sentences.join("\n"));
    write(dir.path(), "dict.tsv", "dog\tA loyal animal that barks.\n");
    let args = [
        "build-demos", "--dictionary", "dict.tsv", "--sentences", "sents.txt", "--labeler", "reference", "-o", "d.json",
    ];
    let strict = sentemb(dir.path(), &args);
    let mut partial_args = args.to_vec();
    partial_args.push("--allow-partial");
    let partial = sentemb(dir.path(), &partial_args);
    let manifest = read_json(&dir.path().join("d.json.manifest.json"));
    let skipped = manifest["skipped"].as_array().unwrap().len() + manifest["failed"].as_array().unwrap().len();
    let count = manifest["count"].as_u64().unwrap() as usize;
    if skipped == 0 {
        ok(&strict);
    } else {
        // Without the flag nothing is written and the command fails.
        assert_ne!(strict.status.code(), Some(0));
        assert!(stderr(&strict).contains("--allow-partial"));
    }
    ok(&partial);
    let labeled = manifest["provenance"]["labeled_pairs"].as_u64().unwrap_or(0) as usize;
    assert_eq!(manifest["provenance"]["dictionary"], 1);
    assert_eq!(count, labeled + 1);
    assert!(labeled + skipped <= sentences.len());
}

fn write_training_fixture(dir: &Path, triplets: usize) {
    write(dir, "nli.csv", &write_nli_csv(&synthetic::nli_triplets(triplets, 1)));
    write(dir, "sts.tsv", &write_sts_tsv(&synthetic::sts_pairs(300, 2)));
}

fn spearman_of(report: &Value) -> f64 {
    report["per_task_scores"]["synthetic"].as_f64().unwrap()
}

#[test]
fn train_then_eval_improves_desk_scale_sts() {
    let dir = tempfile::tempdir().unwrap();
    write_training_fixture(dir.path(), 200);
    write(
        dir.path(),
        "train.toml",
        "seed = 0\noutput = \"adapter.json\"\n[data]\nnli = \"nli.csv\"\n[train]\nlearning_rate = 5e-4\nbatch_size = 8\n",
    );
    write(
        dir.path(),
        "eval.toml",
        "[backend]\ncheckpoint = \"adapter.json\"\n[data.sts]\nsynthetic = \"sts.tsv\"\n",
    );
    let before = sentemb(dir.path(), &["eval-sts", "--sts", "synthetic=sts.tsv"]);
    ok(&before);
    let train = sentemb(dir.path(), &["train-cse", "-c", "train.toml"]);
    ok(&train);
    let log = read_json(&dir.path().join("adapter.json.log.json"));
    assert_eq!(log["steps"].as_array().unwrap().len(), 25);
    assert!(log["loss_last_quarter"].as_f64() < log["loss_first_quarter"].as_f64());

    let after = sentemb(dir.path(), &["eval-sts", "-c", "eval.toml"]);
    ok(&after);
    let (pre, post) = (
        spearman_of(&serde_json::from_slice(&before.stdout).unwrap()),
        spearman_of(&serde_json::from_slice(&after.stdout).unwrap()),
    );
    assert!(post >= pre, "Spearman fell from {pre} to {post}");
    let report: Value = serde_json::from_slice(&after.stdout).unwrap();
    assert!(report["notes"][0].as_str().unwrap().contains("adapter.json"));
}

#[test]
fn zero_learning_rate_leaves_adapters_inert() {
    let dir = tempfile::tempdir().unwrap();
    write_training_fixture(dir.path(), 24);
    ok(&sentemb(dir.path(), &["train-cse", "--nli", "nli.csv", "--lr", "0", "--rank", "4", "-o", "ckpt.json"]));
    let ckpt = read_json(&dir.path().join("ckpt.json"));
    assert_eq!(ckpt["format"], "sentemb-lora/1");
    for layer in ckpt["layers"].as_array().unwrap() {
        assert!(layer["b"].as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));
    }
    let plain = sentemb(dir.path(), &["eval-sts", "--sts", "synthetic=sts.tsv"]);
    let adapted = sentemb(dir.path(), &["eval-sts", "--sts", "synthetic=sts.tsv", "--checkpoint", "ckpt.json"]);
    ok(&plain);
    ok(&adapted);
    assert_eq!(
        spearman_of(&serde_json::from_slice(&plain.stdout).unwrap()),
        spearman_of(&serde_json::from_slice(&adapted.stdout).unwrap())
    );
}

#[test]
fn corrupted_checkpoint_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_training_fixture(dir.path(), 16);
    ok(&sentemb(dir.path(), &["train-cse", "--nli", "nli.csv", "--rank", "2", "-o", "ckpt.json"]));
    let mut ckpt = read_json(&dir.path().join("ckpt.json"));
    ckpt["layers"][3]["a"].as_array_mut().unwrap().pop();
    write(dir.path(), "bad.json", &ckpt.to_string());
    let out = sentemb(dir.path(), &["eval-sts", "--sts", "synthetic=sts.tsv", "--checkpoint", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("layers[3].a"), "{}", stderr(&out));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sentemb(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(sentemb(dir.path(), &["--help"]).status.code(), Some(0));
    write(dir.path(), "bad.toml", "sead = 3\n");
    let out = sentemb(dir.path(), &["eval-sts", "-c", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("sead"));
    let out = sentemb(dir.path(), &["eval-sts", "--sts", "a=a.tsv", "--method", "mean_pool"]);
    assert_eq!(out.status.code(), Some(1));
    let out = sentemb(dir.path(), &["eval-sts", "--sts", "a=a.tsv", "--backend", "gpt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn overlong_input_is_a_backend_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "long.txt", &"word ".repeat(200));
    let out = sentemb(dir.path(), &["embed", "--input", "long.txt", "-o", "e.bin"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("512"), "{}", stderr(&out));
}
