import json
from pathlib import Path


from ticketlab import pipeline
from ticketlab.cli import main
from ticketlab.store import load_checkpoint, load_mask
from ticketlab.training import TrainingDiverged

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.json"


def _tiny(tmp_path, **extra):
    cfg = {
        "name": "tiny", "seed": 0, "seeds": [0, 1], "output_dir": "out",
        "model": {"width": 4},
        "pretrain": {"data": {"n": 80, "n_classes": 3, "resolution": 6, "seed": 1},
                     "train": {"epochs": 1, "batch_size": 16}},
        "downstream": {"ds": {"data": {"n": 80, "n_classes": 3, "resolution": 6, "seed": 2,
                                       "variant": "shifted"},
                              "train": {"epochs": 1, "batch_size": 16}}},
        "imp": {"task": "ds", "rounds": 1},
    }
    cfg.update(extra)
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(cfg))
    return p


def _json_tail(out: str):
    return json.loads(out.strip().splitlines()[-1])


def test_smoke_workflow(tmp_path, capsys):
    out = str(tmp_path / "smoke")
    c = ["--config", str(SMOKE), "--out", out]
    assert main(["pretrain", *c]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("epoch=1 loss=")
    ckpts = sorted(p.name for p in (tmp_path / "smoke" / "pretrain").glob("*.ltck"))
    assert ckpts == ["early5.ltck", "final.ltck", "theta0.ltck"]

    assert main(["imp", *c, "--quiet"]) == 0
    rounds = _json_tail(capsys.readouterr().out)
    assert [r["round"] for r in rounds] == [0, 1, 2]
    assert round(rounds[2]["sparsity"], 2) == 0.36

    assert main(["transfer", *c, "--quiet", "--mask", "dense", "--init", "pretrained",
                 "--task", "shifted"]) == 0
    assert main(["transfer", *c, "--quiet", "--mask", "shifted-pretrained/round_2",
                 "--init", "random", "--task", "shifted"]) == 0
    capsys.readouterr()
    rows = (tmp_path / "smoke" / "results.csv").read_text().splitlines()
    assert rows[0] == "arm,task,mask_id,sparsity,init,seed,metric,epochs" and len(rows) == 5
    assert rows[3].startswith("shifted-pretrained:theta_0,shifted,")

    assert main(["perturbation", *c, "--quiet", "--mask", "shifted-pretrained/round_2",
                 "--task", "shifted"]) == 0
    table = _json_tail(capsys.readouterr().out)
    assert [t["arm"].split(":")[1] for t in table] == ["m", "m_c", "m_r", "m_perturbed"]

    assert main(["sweep", *c, "--quiet"]) == 0
    assert _json_tail(capsys.readouterr().out) == {"rows": 8, "executed": 8}
    assert main(["sweep", *c, "--quiet"]) == 0
    assert _json_tail(capsys.readouterr().out) == {"rows": 8, "executed": 0}

    assert main(["report", "--dir", out]) == 0
    files = _json_tail(capsys.readouterr().out)
    assert any(f.endswith("summary.json") for f in files)
    assert any(f.endswith("curve_shifted.csv") for f in files)
    assert any(f.endswith("sweep_summary.csv") for f in files)
    before = {f: Path(f).read_bytes() for f in files}
    main(["report", "--dir", out])
    assert {f: Path(f).read_bytes() for f in files} == before


def test_maskops_commands(tmp_path, capsys):
    cfg = _tiny(tmp_path)
    m = tmp_path / "r.ltmk"
    assert main(["maskops", "random", "--config", str(cfg), "--sparsity", "0.5", "--out",
                 str(m)]) == 0
    r = _json_tail(capsys.readouterr().out)
    assert r["popcount"] == 144  # floor(0.5 * 2*4*4*9)
    assert main(["maskops", "complement", "--mask", str(m), "--out",
                 str(tmp_path / "c.ltmk")]) == 0
    assert _json_tail(capsys.readouterr().out)["popcount"] == 144
    assert main(["maskops", "similarity", str(m), str(tmp_path / "c.ltmk")]) == 0
    assert _json_tail(capsys.readouterr().out) == {"similarity": 0.0, "hamming": 288}
    assert main(["maskops", "perturb", "--mask", str(m), "--out",
                 str(tmp_path / "p.ltmk")]) == 0
    assert _json_tail(capsys.readouterr().out)["hamming"] == 28
    assert main(["maskops", "zerokernels", "--mask", str(tmp_path / "c.ltmk"), "--config",
                 str(cfg), "--out", str(tmp_path / "heat")]) == 0
    res = _json_tail(capsys.readouterr().out)
    assert set(res["counts"]) == {"block1.conv.weight", "block2.conv.weight"}
    assert (tmp_path / "heat" / "counts.csv").exists()
    assert load_mask(tmp_path / "p.ltmk").size == 288


def test_malformed_json_exit2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "seed": 1,\n  "model": {"width": 8,}\n}')
    assert main(["pretrain", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: config:") and "line 3" in err


def test_unknown_field_exit2(tmp_path, capsys):
    p = _tiny(tmp_path, model={"width": 4, "wdith": 8})
    assert main(["pretrain", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert "model.wdith" in err


def test_invalid_value_exit2(tmp_path, capsys):
    p = _tiny(tmp_path, imp={"task": "nope"})
    assert main(["pretrain", "--config", str(p)]) == 2
    assert "imp.task" in capsys.readouterr().err


def test_missing_config_exit4(tmp_path, capsys):
    assert main(["pretrain", "--config", str(tmp_path / "none.json")]) == 4
    assert capsys.readouterr().err.startswith("error: io:")


def test_missing_mask_exit4(tmp_path, capsys):
    cfg = _tiny(tmp_path)
    out = str(tmp_path / "o")
    assert main(["pretrain", "--config", str(cfg), "--out", out, "--quiet"]) == 0
    assert main(["transfer", "--config", str(cfg), "--out", out, "--mask", "x/round_9",
                 "--init", "pretrained", "--task", "ds"]) == 4


def test_layout_mismatch_exit2(tmp_path, capsys):
    cfg = _tiny(tmp_path)
    out = tmp_path / "o"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    wide = tmp_path / "wide.json"
    d = json.loads(cfg.read_text())
    d["model"]["width"] = 8
    wide.write_text(json.dumps(d))
    assert main(["maskops", "random", "--config", str(wide), "--sparsity", "0.2", "--out",
                 str(tmp_path / "w.ltmk")]) == 0
    assert main(["transfer", "--config", str(cfg), "--out", str(out), "--mask",
                 str(tmp_path / "w.ltmk"), "--init", "pretrained", "--task", "ds"]) == 2
    assert "error: config:" in capsys.readouterr().err


def test_numeric_failure_exit3(tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise TrainingDiverged("non-finite loss at epoch 1, step 0", None, 0, 0)
    monkeypatch.setattr(pipeline, "run_pretrain", boom)
    assert main(["pretrain", "--config", str(_tiny(tmp_path))]) == 3
    assert capsys.readouterr().err.startswith("error: numeric:")


def test_env_var_output_root(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("TICKETLAB_OUT", str(tmp_path / "root"))
    assert main(["pretrain", "--config", str(_tiny(tmp_path)), "--quiet"]) == 0
    assert (tmp_path / "root" / "out" / "pretrain" / "final.ltck").exists()


def test_seed_override(tmp_path, capsys):
    cfg = _tiny(tmp_path)
    ids = []
    for seed, sub in ((0, "a"), (5, "b"), (5, "c")):
        assert main(["pretrain", "--config", str(cfg), "--seed", str(seed), "--out",
                     str(tmp_path / sub), "--quiet"]) == 0
        ids.append(load_checkpoint(tmp_path / sub / "pretrain" / "final.ltck").id)
    assert ids[0] != ids[1] and ids[1] == ids[2]


def test_schema_command(capsys):
    assert main(["schema"]) == 0
    sch = json.loads(capsys.readouterr().out)
    assert sch["additionalProperties"] is False
    assert "imp" in sch["properties"]


def test_sweep_without_section(tmp_path, capsys):
    assert main(["sweep", "--config", str(_tiny(tmp_path))]) == 2
