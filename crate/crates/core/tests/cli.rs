use std::path::Path;

use lawsim::cli::{dispatch, load_episode_records};
use lawsim::episodes::{load_dataset, save_trajectories, Split, TrajectoryRecord};
use lawsim::metrics::Trajectory;
use lawsim::refpath::densify_to_steps;
use lawsim::worldsim::{ActionType, Pose};

const SMALL: &str = r#"
[generator]
seed = 5
rooms_x = 3
rooms_y = 3
seen_maps = 2
unseen_maps = 1
train_episodes = 12
val_seen_episodes = 0
val_unseen_episodes = 8
"#;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("lawsim").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_audit_eval_score_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let data_path = dir.path().join("data/dataset.json");
    assert_eq!(
        run(&["gen", "--config", s(&cfg), "--out", s(&data_path)]),
        0
    );
    let data = load_dataset(&data_path).unwrap();
    assert_eq!(data.episodes.len(), 20);

    // Audit fraction against a direct count.
    let audit_dir = dir.path().join("audit");
    assert_eq!(
        run(&[
            "audit",
            "--config",
            s(&cfg),
            "--dataset",
            s(&data_path),
            "--threshold",
            "0.8",
            "--out",
            s(&audit_dir)
        ]),
        0
    );
    let audit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(audit_dir.join("audit.json")).unwrap())
            .unwrap();
    let below = data.episodes.iter().filter(|e| e.divergence < 0.8).count();
    assert_eq!(audit["below"].as_u64().unwrap() as usize, below);
    assert_eq!(audit["n"].as_u64().unwrap(), 20);
    let hist_total: u64 = audit["histogram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b[2].as_u64().unwrap())
        .sum();
    assert_eq!(hist_total, 20);

    // The goal oracle reaches every goal.
    let eval_dir = dir.path().join("eval");
    assert_eq!(
        run(&[
            "eval",
            "--config",
            s(&cfg),
            "--dataset",
            s(&data_path),
            "--mode",
            "goal",
            "--out",
            s(&eval_dir)
        ]),
        0
    );
    let evaluated = load_episode_records(&eval_dir.join("episodes.jsonl")).unwrap();
    assert_eq!(evaluated.len(), 8);
    assert!(evaluated
        .iter()
        .all(|r| r.split == Split::ValUnseen && r.metrics.sr == 1.0));
    for f in [
        "summary.json",
        "summary.csv",
        "summary.md",
        "trajectories.jsonl",
    ] {
        assert!(eval_dir.join(f).exists(), "{f}");
    }

    // Scoring eval's own trajectories reproduces its metrics.
    let rescored = dir.path().join("rescored");
    assert_eq!(
        run(&[
            "score",
            "--config",
            s(&cfg),
            "--dataset",
            s(&data_path),
            "--log",
            s(&eval_dir.join("trajectories.jsonl")),
            "--out",
            s(&rescored),
        ]),
        0
    );
    assert_eq!(
        load_episode_records(&rescored.join("episodes.jsonl")).unwrap(),
        evaluated
    );

    // Walking the step reference exactly scores nDTW 1 and WA 1.
    let log: Vec<TrajectoryRecord> = data
        .episodes
        .iter()
        .map(|ep| {
            let step = densify_to_steps(data.map_of(ep), &ep.pano_path).unwrap();
            let mut poses: Vec<Pose> = step
                .points
                .iter()
                .map(|p| Pose::new(p.x, p.y, 0.0))
                .collect();
            poses.push(*poses.last().unwrap());
            let mut actions = vec![ActionType::Forward; poses.len() - 2];
            actions.push(ActionType::Stop);
            TrajectoryRecord::new(
                &ep.id,
                &Trajectory {
                    poses,
                    actions,
                    stopped: true,
                },
            )
        })
        .collect();
    let log_path = dir.path().join("reference.jsonl");
    save_trajectories(&log_path, &log).unwrap();
    let scored = dir.path().join("scored");
    assert_eq!(
        run(&[
            "score",
            "--dataset",
            s(&data_path),
            "--log",
            s(&log_path),
            "--out",
            s(&scored)
        ]),
        0
    );
    let records = load_episode_records(&scored.join("episodes.jsonl")).unwrap();
    assert_eq!(records.len(), 20);
    for r in &records {
        assert!(
            (r.metrics.ndtw - 1.0).abs() < 1e-12,
            "{}: {}",
            r.episode_id,
            r.metrics.ndtw
        );
        assert_eq!(
            (r.metrics.wa_05, r.metrics.sr, r.metrics.ne),
            (1.0, 1.0, 0.0)
        );
        assert!(r.visited.iter().all(|&v| v));
    }

    // Binned analysis plus the sub-instruction report.
    let analysis = dir.path().join("analysis");
    assert_eq!(
        run(&[
            "analyze",
            "--metrics",
            s(&scored.join("episodes.jsonl")),
            "--dataset",
            s(&data_path),
            "--bins",
            "0,0.5,0.8,1",
            "--out",
            s(&analysis),
        ]),
        0
    );
    let bins = std::fs::read_to_string(analysis.join("bins.csv")).unwrap();
    assert_eq!(bins.lines().count(), 4, "{bins}");
    let subs = std::fs::read_to_string(analysis.join("sub_instructions.csv")).unwrap();
    let n_subs: usize = data.episodes.iter().map(|e| e.sub_instructions.len()).sum();
    assert_eq!(subs.lines().count(), n_subs + 1);
    assert!(subs.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn exit_codes_separate_usage_from_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    // Usage and configuration problems exit with 2.
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(
        run(&["audit", "--dataset", s(&missing), "--bins", "0.5,0.2"]),
        2
    );
    assert_eq!(
        run(&[
            "train",
            "--dataset",
            s(&missing),
            "--mode",
            "law-k:0",
            "--out",
            "x"
        ]),
        2
    );
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[generator]\nseed = 1\nbogus = 2\n").unwrap();
    assert_eq!(
        run(&[
            "gen",
            "--config",
            s(&bad),
            "--out",
            s(&dir.path().join("d.json"))
        ]),
        2
    );
    // Unreadable or malformed inputs exit with 1.
    assert_eq!(run(&["audit", "--dataset", s(&missing)]), 1);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("d.json");
    assert_eq!(run(&["gen", "--config", s(&cfg), "--out", s(&data)]), 0);
    let log = dir.path().join("log.jsonl");
    std::fs::write(&log, "{\"episode_id\": \"nope\"\n").unwrap();
    assert_eq!(
        run(&[
            "score",
            "--dataset",
            s(&data),
            "--log",
            s(&log),
            "--out",
            s(&dir.path().join("o"))
        ]),
        1
    );
}
