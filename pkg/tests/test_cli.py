import json
import math
import subprocess
import sys

import numpy as np
import pytest

from polyinv.attention import block_to_dict, random_block
from polyinv.cli import main
from polyinv.gpopt import measure_regularizer
from polyinv.invariance import InvarianceElement, element_to_dict
from polyinv.polynet import AffineTerm, PolyLayer, PolyNetwork, from_dict, to_dict

from _nets import random_net, two_layer_unit_net, width_one_net


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


def _dump(path, obj):
    path.write_text(json.dumps(obj))
    return path


def test_eval(tmp_path, capsys):
    ident = PolyNetwork((PolyLayer(((AffineTerm((1, 0, 0)),),), 3),))
    m = _dump(tmp_path / "m.json", to_dict(ident))
    x = _dump(tmp_path / "x.json", [2, 5, 7])
    code, rep, _ = _run(capsys, "eval", m, x)
    assert code == 0 and rep["y"] == [2.0]
    m2 = _dump(tmp_path / "u.json", to_dict(two_layer_unit_net()))
    x2 = _dump(tmp_path / "x2.json", {"x": [[1, 0, 0], [0, 0, 0]]})
    code, rep, _ = _run(capsys, "eval", m2, x2, "-o", tmp_path / "y.json")
    assert rep["y"] == [[72.0], [0.0]]
    assert json.loads((tmp_path / "y.json").read_text()) == rep


def test_parse_errors_name_file_and_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"dims": [3, 1], "layers": [[[{"w": [1, 2, 3]}]]')
    x = _dump(tmp_path / "x.json", [1, 2, 3])
    code, rep, err = _run(capsys, "eval", bad, x)
    assert code == 2 and rep is None and "bad.json" in err and "line 1" in err
    missing = _dump(tmp_path / "missing.json", {"dims": [3, 1], "layers": [[[{"b": 1.0}]]]})
    code, _, err = _run(capsys, "eval", missing, x)
    assert code == 2 and "missing.json" in err and "layers[0][0][0]" in err and "'w'" in err
    short = _dump(tmp_path / "m.json", to_dict(two_layer_unit_net()))
    x2 = _dump(tmp_path / "x2.json", [1, 2])
    code, _, err = _run(capsys, "eval", short, x2)
    assert code == 2 and "x2.json" in err
    code, _, err = _run(capsys, "eval", tmp_path / "nope.json", x)
    assert code == 2 and "nope.json" in err


def test_reparam(tmp_path, capsys):
    net = random_net(3, depth=3)
    m = _dump(tmp_path / "m.json", to_dict(net))
    ident = _dump(tmp_path / "g.json", element_to_dict(InvarianceElement.identity(net.dims)))
    out = tmp_path / "out.json"
    code, rep, _ = _run(capsys, "reparam", m, "--element", ident, "-o", out)
    assert code == 0 and rep["max_rel_err"] == 0.0
    assert from_dict(json.loads(out.read_text())) == net
    code, rep, _ = _run(capsys, "reparam", m, "--random", 5, "--polarity", "--input-kind", "gaussian")
    assert code == 0 and rep["pass"] and rep["max_rel_err"] <= 1e-9


def test_reparam_degree_zero_is_a_clean_error(tmp_path, capsys):
    from polyinv.polynet import build_network
    net = build_network([[[AffineTerm([1.0], 0.0, 0)]], [[AffineTerm([1.0], 0.0, 1)]]], [1.0])
    m = _dump(tmp_path / "m.json", to_dict(net))
    code, _, err = _run(capsys, "reparam", m, "--random", 1)
    assert code == 2 and "degree 0" in err


def test_reparam_requires_seed_or_element(tmp_path, capsys):
    m = _dump(tmp_path / "m.json", to_dict(random_net(1, depth=2)))
    with pytest.raises(SystemExit) as exc:
        main(["reparam", str(m)])
    assert exc.value.code == 2


def test_minreg(tmp_path, capsys):
    m = _dump(tmp_path / "w1.json", to_dict(width_one_net(1.0, 2.0)))
    out = tmp_path / "out.json"
    code, rep, _ = _run(capsys, "minreg", m, "--no-anchors", "-o", out)
    assert code == 0
    assert rep["after"] == pytest.approx(4.0, abs=1e-6)
    assert rep["objective"] == pytest.approx(measure_regularizer(from_dict(json.loads(out.read_text()))), abs=1e-8)
    code, rep2, _ = _run(capsys, "minreg", out, "--no-anchors")
    assert rep2["after"] == pytest.approx(rep2["before"], abs=1e-8)
    code, rep3, _ = _run(capsys, "minreg", _dump(tmp_path / "r.json", to_dict(random_net(4))), "--kind", "l1",
                         "--mu", "0.5", "--verbose")
    assert code == 0 and rep3["after"] <= rep3["before"] and "trace" in rep3


def test_minrange(tmp_path, capsys):
    a, c = 1.0, 2.0
    m = _dump(tmp_path / "w1.json", to_dict(width_one_net(a, c)))
    code, rep, _ = _run(capsys, "minrange", m, "--no-anchors", "--aggregate", "sum")
    assert code == 0 and rep["t_star"] == pytest.approx(2 * math.sqrt(a * c), abs=1e-6)
    code, rep, _ = _run(capsys, "minrange", m, "--no-anchors")
    assert rep["t_star"] == pytest.approx(math.sqrt(a * c), abs=1e-6)
    r = _dump(tmp_path / "r.json", to_dict(random_net(6)))
    code, rep, _ = _run(capsys, "minrange", r, "--keep-layer-spans", "--bits", 8)
    assert code == 0 and rep["value_after"] <= rep["value_before"]
    assert rep["quantization"]["after"]["max_error"] <= rep["quantization"]["before"]["max_error"] * (1 + 1e-6)
    z = _dump(tmp_path / "z.json", to_dict(width_one_net(0.0, 0.0)))
    code, rep, err = _run(capsys, "minrange", z)
    assert code == 0 and not rep["applied"] and "nothing to rescale" in err


def test_protocol_infer_is_reproducible(tmp_path, capsys):
    _dump(tmp_path / "m.json", to_dict(two_layer_unit_net()))
    cfg = _dump(tmp_path / "cfg.json", {"model_path": "m.json", "seed_bob": 1, "seed_alice": 2,
                                        "n_inputs": 20, "input_seed": 3, "linkage_seed": 4})
    main(["protocol", "infer", str(cfg)])
    first = capsys.readouterr().out
    code = main(["protocol", "infer", str(cfg), "-o", str(tmp_path / "t.json")])
    second = capsys.readouterr().out
    assert code == 0 and first == second
    rep = json.loads(first)
    assert rep["check"]["max_rel_err"] <= 1e-9 and rep["linkage"]["pass"]
    nos = _dump(tmp_path / "noseed.json", {"model_path": "m.json", "seed_alice": 2, "n_inputs": 2, "input_seed": 0})
    code, _, err = _run(capsys, "protocol", "infer", nos)
    assert code == 2 and "seed_bob" in err


@pytest.mark.parametrize("task", ["regression", "classification"])
def test_protocol_train(tmp_path, capsys, task):
    cfg = _dump(tmp_path / "cfg.json", {"dims": [4, 8, 3], "model_seed": 1, "seed": 2, "task": task,
                                        "data": {"synthetic": {"n": 200, "seed": 3}},
                                        "sgd": {"lr": 0.02, "epochs": 100, "batch_size": 16, "seed": 5}})
    code, rep, _ = _run(capsys, "protocol", "train", cfg)
    assert code == 0
    assert rep["round_trip_error"] <= 1e-10 and rep["recovered_vs_control"] <= 1e-6


def test_protocol_train_general_secret_reports_only(tmp_path, capsys):
    cfg = _dump(tmp_path / "cfg.json", {"dims": [3, 6, 2], "model_seed": 0, "seed": 1, "secret": "general",
                                        "sgd": {"lr": 0.005, "epochs": 5, "seed": 0}})
    code, rep, _ = _run(capsys, "protocol", "train", cfg)
    assert code == 0 and "matches_control" not in rep["check"] and "note" in rep
    bad = _dump(tmp_path / "bad.json", {"dims": [3, 2], "model_seed": 0, "seed": 1, "sgd": {"lr": -1}})
    code, _, err = _run(capsys, "protocol", "train", bad)
    assert code == 2 and "'sgd'" in err


def test_attn_check(tmp_path, capsys):
    code, rep, _ = _run(capsys, "attn-check", "--random", 0)
    assert code == 0 and max(rep["max_deviation"].values()) <= 1e-10
    assert all(rep["controls_flagged"].values())
    code, rep, _ = _run(capsys, "attn-check", "--random", 0, "--identity")
    assert code == 0 and all(v == 0.0 for v in rep["max_deviation"].values())
    blk = _dump(tmp_path / "b.json", block_to_dict(random_block(6, 8, np.random.default_rng(0))))
    code, rep, _ = _run(capsys, "attn-check", blk, "--seed", 1, "--instances", 5)
    assert code == 0 and rep["pass"]
    att = _dump(tmp_path / "a.json", block_to_dict(random_block(6, 8, np.random.default_rng(1)))["attn"])
    code, rep, _ = _run(capsys, "attn-check", att, "--seed", 1, "--instances", 5)
    assert code == 0 and set(rep["min_control_deviation"]) == {"qk", "vo"}
    # a threshold the broken transforms cannot exceed turns the run red
    code, rep, _ = _run(capsys, "attn-check", "--random", 0, "--control-threshold", 1e6)
    assert code == 1 and not rep["pass"]


def test_console_module_entry(tmp_path):
    m = _dump(tmp_path / "m.json", to_dict(two_layer_unit_net()))
    x = _dump(tmp_path / "x.json", [1, 0, 0])
    proc = subprocess.run([sys.executable, "-m", "polyinv.cli", "eval", str(m), str(x)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and json.loads(proc.stdout)["y"] == [72.0]
    assert "eval:" in proc.stderr
