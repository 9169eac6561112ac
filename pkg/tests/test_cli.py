import json

import pytest

from stepreuse.cli import main


def _write_config(tmp_path, config, **extra):
    data = config.to_dict()
    data.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def cli_env(tiny_rig, tmp_path_factory):
    stack, config, ckpt_dir = tiny_rig
    root = tmp_path_factory.mktemp("cli")
    cfg_path = _write_config(root, config)
    return root, cfg_path, config


def _run(args):
    return main([str(a) for a in args])


def test_missing_config_exits_1(tmp_path, capsys):
    code = _run(["bench", "--config", tmp_path / "missing.json"])
    assert code == 1
    assert "missing.json" in capsys.readouterr().err


def test_unknown_flag_exits_1(capsys):
    code = _run(["bench", "--utterly-unknown-flag"])
    assert code == 1
    err = capsys.readouterr().err
    assert "usage" in err


def test_no_subcommand_exits_1(capsys):
    assert _run([]) == 1


def test_invalid_config_json_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert _run(["bench", "--config", bad]) == 1


def test_unknown_config_key_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"not_a_real_knob": 1}))
    assert _run(["bench", "--config", bad]) == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_missing_checkpoint_exits_1(cli_env, tmp_path, capsys):
    root, cfg_path, config = cli_env
    code = _run(["bench", "--config", cfg_path, "--out", tmp_path,
                 "--diffusion-ckpt", tmp_path / "nothing"])
    assert code == 1


def test_gen_data_outputs(cli_env, tmp_path):
    root, cfg_path, _ = cli_env
    code = _run(["gen-data", "--config", cfg_path, "--out", tmp_path,
                 "--run-id", "g", "--clips", 3, "--seed", 5])
    assert code == 0
    run = tmp_path / "g"
    index = (run / "dataset_index.csv").read_text().strip().splitlines()
    assert index[0] == "clip,sigma,seed,frames,path"
    assert len(index) == 4
    assert (run / "clips" / "clip_0000" / "frames.drt").exists()
    assert (run / "run_manifest.json").exists()
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 5
    assert len(manifest["config_hash"]) == 64


def test_bench_cli_deterministic_csvs(cli_env, tmp_path):
    root, cfg_path, config = cli_env
    base = ["bench", "--config", cfg_path, "--out", tmp_path, "--seed", "7",
            "--force-t", "10"]
    assert _run(base + ["--run-id", "b1"]) == 0
    assert _run(base + ["--run-id", "b2"]) == 0
    for name in ("bench_report.csv", "bench_frames.csv"):
        a = (tmp_path / "b1" / name).read_bytes()
        b = (tmp_path / "b2" / name).read_bytes()
        assert a == b
    timing = json.loads((tmp_path / "b1" / "bench_timing.json").read_text())
    assert timing["wall_baseline_s"] > 0


def test_bench_report_contents(cli_env, tmp_path):
    root, cfg_path, config = cli_env
    assert _run(["bench", "--config", cfg_path, "--out", tmp_path,
                 "--run-id", "br", "--seed", "3", "--force-t", "10"]) == 0
    rows = dict(line.split(",") for line in
                (tmp_path / "br" / "bench_report.csv").read_text()
                .strip().splitlines()[1:])
    assert int(rows["baseline_evals"]) == config.frames * config.T
    assert int(rows["reuse_evals"]) == (config.reference_frames * config.T
                                        + config.horizon * 10)
    assert (tmp_path / "br" / "bench_reuse.png").exists()


def test_ablate_parses_t_values(cli_env, tmp_path):
    root, cfg_path, _ = cli_env
    assert _run(["ablate", "--config", cfg_path, "--out", tmp_path,
                 "--run-id", "a", "--t-values", "25,15,5,1"]) == 0
    lines = (tmp_path / "a" / "ablation.csv").read_text().strip().splitlines()
    steps = [int(line.split(",")[0]) for line in lines[1:]]
    assert steps == [25, 15, 5, 1]
    assert (tmp_path / "a" / "ablation.png").exists()


def test_ablate_bad_t_values_exit_1(cli_env, tmp_path):
    root, cfg_path, _ = cli_env
    assert _run(["ablate", "--config", cfg_path, "--out", tmp_path,
                 "--t-values", "ten"]) == 1
    assert _run(["ablate", "--config", cfg_path, "--out", tmp_path,
                 "--t-values", "500"]) == 1


def test_profile_outputs(cli_env, tmp_path):
    root, cfg_path, config = cli_env
    assert _run(["profile", "--config", cfg_path, "--out", tmp_path,
                 "--run-id", "p", "--per-tap"]) == 0
    lines = (tmp_path / "p" / "profile.csv").read_text().strip().splitlines()
    assert lines[0] == "t,nmi,e_t,nmi_coarse,nmi_fine"
    assert len(lines) == config.T + 1
    # last row has no NMI (there is no step T+1 to compare against)
    assert lines[-1].split(",")[1] == ""
    assert (tmp_path / "p" / "profile.png").exists()


def test_edit_outputs_and_swap(cli_env, tmp_path):
    root, cfg_path, _ = cli_env
    assert _run(["edit", "--config", cfg_path, "--out", tmp_path,
                 "--run-id", "e", "--restyle", "swap", "--force-t", "5"]) == 0
    lines = (tmp_path / "e" / "edit_frames.csv").read_text().strip().splitlines()
    assert lines[0] == "frame,provenance,mean_r,mean_g,mean_b"
    assert (tmp_path / "e" / "edit_result.png").exists()
    assert _run(["edit", "--config", cfg_path, "--out", tmp_path,
                 "--restyle", "never-a-style"]) == 1


def test_consistency_mode_outputs(cli_env, tmp_path):
    root, cfg_path, _ = cli_env
    assert _run(["ablate", "--config", cfg_path, "--out", tmp_path,
                 "--run-id", "c", "--mode", "consistency", "--pairs", "2"]) == 0
    report = (tmp_path / "c" / "consistency_report.csv").read_text()
    assert "high_consistency" in report and "low_consistency" in report
    assert (tmp_path / "c" / "nmi_profiles.csv").exists()


def test_bench_consumes_generated_clip(cli_env, tmp_path):
    root, cfg_path, config = cli_env
    assert _run(["gen-data", "--config", cfg_path, "--out", tmp_path,
                 "--run-id", "gd", "--clips", 1, "--frames",
                 config.frames]) == 0
    data = json.loads(cfg_path.read_text())
    data["clip_dir"] = str(tmp_path / "gd" / "clips" / "clip_0000")
    cfg2 = tmp_path / "cfg2.json"
    cfg2.write_text(json.dumps(data))
    assert _run(["bench", "--config", cfg2, "--out", tmp_path,
                 "--run-id", "bc", "--force-t", "5"]) == 0
    assert (tmp_path / "bc" / "bench_report.csv").exists()
    data["clip_dir"] = str(tmp_path / "nowhere")
    cfg3 = tmp_path / "cfg3.json"
    cfg3.write_text(json.dumps(data))
    assert _run(["bench", "--config", cfg3, "--out", tmp_path]) == 1


def test_run_id_derivation_is_stable(cli_env, tmp_path):
    root, cfg_path, _ = cli_env
    assert _run(["gen-data", "--config", cfg_path, "--out", tmp_path,
                 "--clips", "2", "--seed", "9"]) == 0
    dirs = [p.name for p in tmp_path.iterdir() if p.name.startswith("gen-data-")]
    assert len(dirs) == 1
    assert dirs[0].endswith("-s9")
