"""Integration tests for the command-line surface and its exit codes."""

import json
from pathlib import Path

import pytest

from hiero_lora.cli import main
from hiero_lora.data import parse_dataset, write_dataset
from hiero_lora.hierarchy import read_predictions

TINY_MODEL = {"d_model": 16, "n_heads": 2, "n_layers": 1, "d_ff": 32, "max_seq": 96}


def write_config(path, **overrides):
    cfg = {
        "schema_version": 1,
        "seed": 3,
        "model": TINY_MODEL,
        "lora": {"rank": 2, "alpha": 2.0, "dropout": 0.0},
        "train": {"max_steps": 4, "eval_interval": 2, "batch_size": 4,
                  "grad_accum_steps": 1, "learning_rate": 1e-3, "lam": 0.1},
        "synth": {"n_per_lang": 12, "cue_strength": 1.0,
                  "shared_cue_fraction": 0.5},
    }
    cfg.update(overrides)
    Path(path).write_text(json.dumps(cfg), encoding="utf-8")
    return cfg


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def test_gen_data_writes_splits_and_manifest(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, synth={"n_per_lang": 100})
    out = tmp_path / "corpus"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
    for name in ("train", "dev", "test"):
        assert (out / f"{name}.jsonl").exists()
    assert (out / "manifest.json").exists()
    train = parse_dataset(out / "train.jsonl")
    assert len(train) == 200  # n_per_lang x 2 languages


def test_gen_data_is_byte_deterministic(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path)
    out1, out2 = tmp_path / "c1", tmp_path / "c2"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out1)]) == 0
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out2)]) == 0
    for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_gen_data_invalid_config_exits_2(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, synth={"n_per_lang": 0})
    assert main(["gen-data", "--config", str(cfg_path),
                 "--out", str(tmp_path / "x")]) == 2


def test_missing_config_exits_2(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "x")]) == 2


def test_bad_schema_version_exits_2(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg = write_config(cfg_path)
    cfg["schema_version"] = 99
    cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
    assert main(["gen-data", "--config", str(cfg_path),
                 "--out", str(tmp_path / "x")]) == 2


# ---------------------------------------------------------------------------
# train / predict / evaluate pipeline
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg_path = root / "cfg.json"
    write_config(cfg_path)
    out = root / "out"
    rc = main(["train", "--config", str(cfg_path), "--out", str(out)])
    assert rc == 0
    return root, cfg_path, out


def test_train_writes_expected_artifacts(trained_run):
    _, _, out = trained_run
    for name in ("model.npz", "adapters.npz", "trainlog.jsonl",
                 "manifest.json", "loss_curves.png"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["checkpoint_hashes"]) == {"model", "adapters"}
    events = [json.loads(line) for line in
              (out / "trainlog.jsonl").read_text().splitlines()]
    assert {e["kind"] for e in events} == {"step", "eval", "done"}
    assert {e["level"] for e in events} == {1, 2, 3}


def test_train_missing_dataset_path_exits_2(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg = write_config(cfg_path)
    del cfg["synth"]
    cfg["data"] = {"train": str(tmp_path / "ghost.jsonl"),
                   "dev": str(tmp_path / "ghost.jsonl")}
    cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
    assert main(["train", "--config", str(cfg_path),
                 "--out", str(tmp_path / "o")]) == 2
    assert "ghost.jsonl" in capsys.readouterr().err


def test_rerun_same_seed_gives_identical_checkpoint_hashes(tmp_path, trained_run):
    root, cfg_path, out = trained_run
    out2 = tmp_path / "out2"
    assert main(["train", "--config", str(cfg_path), "--out", str(out2)]) == 0
    m1 = json.loads((out / "manifest.json").read_text())["checkpoint_hashes"]
    m2 = json.loads((out2 / "manifest.json").read_text())["checkpoint_hashes"]
    assert m1 == m2


def test_predict_output_format(trained_run, tmp_path):
    root, cfg_path, out = trained_run
    corpus = tmp_path / "corpus"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(corpus)]) == 0
    preds_path = tmp_path / "preds.jsonl"
    rc = main(["predict", "--checkpoint", str(out),
               "--in", str(corpus / "test.jsonl"), "--out", str(preds_path)])
    assert rc == 0
    records = read_predictions(preds_path)
    gold = parse_dataset(corpus / "test.jsonl")
    assert len(records) == len(gold)
    for rec in records:
        if rec["label_task1"] == "NOT_SEXIST":
            assert rec["label_task2"] == "-" and rec["labels_task3"] == "-"
        else:
            assert rec["label_task2"] != "-" and rec["labels_task3"] != "-"


def test_predict_hash_mismatch_exits_2(trained_run, tmp_path):
    root, cfg_path, out = trained_run
    other = tmp_path / "other"
    assert main(["train", "--config", str(cfg_path), "--seed", "99",
                 "--out", str(other)]) == 0
    mixed = tmp_path / "mixed"
    mixed.mkdir()
    (mixed / "model.npz").write_bytes((out / "model.npz").read_bytes())
    (mixed / "adapters.npz").write_bytes((other / "adapters.npz").read_bytes())
    corpus = tmp_path / "c2"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(corpus)]) == 0
    rc = main(["predict", "--checkpoint", str(mixed),
               "--in", str(corpus / "test.jsonl"), "--out", str(tmp_path / "p.jsonl")])
    assert rc == 2


def test_evaluate_gold_as_predictions_is_perfect(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, synth={"n_per_lang": 30, "cue_strength": 1.0})
    corpus = tmp_path / "corpus"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(corpus)]) == 0
    gold = parse_dataset(corpus / "dev.jsonl")
    preds = [{"id": i.id, "label_task1": i.gold_l1,
              "label_task2": i.gold_l2 or "-",
              "labels_task3": sorted(i.gold_l3) if i.gold_l3 else "-"}
             for i in gold]
    pred_path = tmp_path / "preds.jsonl"
    pred_path.write_text("\n".join(json.dumps(p) for p in preds) + "\n")
    out = tmp_path / "report"
    rc = main(["evaluate", "--pred", str(pred_path), "--gold",
               str(corpus / "dev.jsonl"), "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert report["overall"]["1"]["macro_f1"] == 1.0
    for name in ("report.tsv", "report.txt", "report.png"):
        assert (out / name).exists()


def test_evaluate_is_order_insensitive(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, synth={"n_per_lang": 10})
    corpus = tmp_path / "corpus"
    main(["gen-data", "--config", str(cfg_path), "--out", str(corpus)])
    gold = parse_dataset(corpus / "dev.jsonl")
    preds = [{"id": i.id, "label_task1": "NOT_SEXIST", "label_task2": "-",
              "labels_task3": "-"} for i in gold]
    p1, p2 = tmp_path / "p1.jsonl", tmp_path / "p2.jsonl"
    p1.write_text("\n".join(json.dumps(p) for p in preds) + "\n")
    p2.write_text("\n".join(json.dumps(p) for p in reversed(preds)) + "\n")
    o1, o2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["evaluate", "--pred", str(p1), "--gold",
                 str(corpus / "dev.jsonl"), "--out", str(o1)]) == 0
    assert main(["evaluate", "--pred", str(p2), "--gold",
                 str(corpus / "dev.jsonl"), "--out", str(o2)]) == 0
    assert (o1 / "report.json").read_text() == (o2 / "report.json").read_text()


def test_evaluate_id_mismatch_exits_2(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, synth={"n_per_lang": 5})
    corpus = tmp_path / "corpus"
    main(["gen-data", "--config", str(cfg_path), "--out", str(corpus)])
    pred_path = tmp_path / "p.jsonl"
    pred_path.write_text(json.dumps({"id": "unknown", "label_task1": "NOT_SEXIST",
                                     "label_task2": "-", "labels_task3": "-"}) + "\n")
    assert main(["evaluate", "--pred", str(pred_path),
                 "--gold", str(corpus / "dev.jsonl")]) == 2
    assert "divergence" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def test_ablate_unknown_mode_exits_2(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path)
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--mode", "mystery", "--config", str(cfg_path),
              "--out", str(tmp_path / "o")])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_ablate_rank_emits_four_row_table(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, ablation={"ranks": [8, 16, 32, 64]},
                 train={"max_steps": 2, "eval_interval": 2, "batch_size": 4,
                        "grad_accum_steps": 1, "learning_rate": 1e-3})
    out = tmp_path / "rank"
    assert main(["ablate", "--mode", "rank", "--config", str(cfg_path),
                 "--out", str(out)]) == 0
    rows = (out / "table.tsv").read_text().strip().splitlines()
    assert len(rows) == 5  # header + one row per rank
    report = json.loads((out / "report.json").read_text())
    params = [r["lora_params"] for r in report["rows"]]
    assert [params[0] * 2, params[1] * 2, params[2] * 2] == params[1:]
    assert (out / "rank_ablation.png").exists()


def test_ablate_lambda_emits_rate_comparison(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, ablation={"lams": [0.0, 0.1], "seeds": [3]},
                 train={"max_steps": 2, "eval_interval": 2, "batch_size": 4,
                        "grad_accum_steps": 1, "learning_rate": 1e-3})
    out = tmp_path / "lam"
    assert main(["ablate", "--mode", "lambda", "--config", str(cfg_path),
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert [r["lam"] for r in report["rows"]] == [0.0, 0.1]
    assert all("invalid_rate_mean" in r for r in report["rows"])
    assert (out / "lambda_ablation.png").exists()


def test_ablate_joint_vs_separate_smoke(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, ablation={"seeds": [3], "levels": [1]},
                 train={"max_steps": 3, "eval_interval": 3, "batch_size": 4,
                        "grad_accum_steps": 1, "learning_rate": 1e-3})
    out = tmp_path / "jvs"
    assert main(["ablate", "--mode", "joint-vs-separate", "--config",
                 str(cfg_path), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    row = report["rows"][0]
    for key in ("separate_en", "separate_es", "joint_en", "joint_es",
                "delta_avg"):
        assert key in row
    assert len(report["per_leg"]) == 3
    assert (out / "joint_vs_separate.png").exists()
