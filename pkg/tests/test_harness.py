import json
from fractions import Fraction

import numpy as np
import pytest

from l2plab.attacks import FGSMConfig, transfer_eval
from l2plab.harness import checkpoint
from l2plab.harness.cli import main
from l2plab.harness.config import ConfigError, load_config, parse_config, preset_names
from l2plab.harness.report import EvalReport, pm, read_report
from l2plab.harness.runner import run_eval, run_sweep, run_train, run_transfer
from l2plab.nn import build_model, mini_resnet_spec


def smoke(tmp_path, *extra):
    return load_config("smoke", [f"experiment.output_dir={tmp_path}", *extra])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    res = run_train(smoke(out), log=None)
    return out, res


# ------------------------------------------------------------------ config
def test_presets_listed():
    assert {"full-cifar10-l2p", "desk-l2p", "desk-pni", "desk-vanilla", "desk-none", "smoke"} <= set(preset_names())


def test_full_scale_preset_values():
    c = load_config("full-cifar10-l2p")
    t = c.train_config()
    assert (t.epochs, t.milestones, t.batch_size, t.gamma, t.warmup_epochs) == (350, (150, 250), 128, 1e-4, 20)
    assert t.weights == (0.5, 0.5) and t.lr == 0.1 and t.nesterov and t.weight_decay == 1e-4
    assert t.adversarial.eps == 8 / 255 and t.adversarial.steps == 7 and t.adversarial.step_size == 0.01


def test_desk_preset_values():
    c = load_config("desk-l2p")
    t = c.train_config()
    assert (t.epochs, t.milestones, t.warmup_epochs) == (40, (20, 32), 8)
    assert c["data"]["train_subset"] == 5000 and c["data"]["test_subset"] == 1000
    assert t.adversarial.steps == 3
    assert load_config("desk-none").train_config().weights == (1.0, 0.0)
    assert load_config("desk-vanilla").train_config().weights == (0.0, 1.0)


def test_eps_fraction_is_exact():
    c = parse_config("[adversarial]\neps = 8/255\n")
    assert c["adversarial"]["eps"] == float(Fraction(8, 255))


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="colour"):
        parse_config("[model]\ncolour = red\n")
    with pytest.raises(ConfigError, match="nosuch"):
        parse_config("[nosuch]\n")
    with pytest.raises(ConfigError):
        load_config("smoke", ["train.mode=magic"])
    with pytest.raises(ConfigError):
        load_config("smoke", ["trainepochs"])


def test_digest_ignores_output_dir(tmp_path):
    a = smoke(tmp_path / "a")
    b = smoke(tmp_path / "b")
    assert a.digest() == b.digest()
    assert smoke(tmp_path, "train.epochs=5").digest() != a.digest()
    assert parse_config(a.to_ini()).digest() == a.digest()


def test_none_mode_builds_no_perturbation(tmp_path):
    c = smoke(tmp_path, "train.mode=none")
    assert all(s.kind != "perturb" for s in c.model_specs((1, 8, 8), 4))


# -------------------------------------------------------------- checkpoint
def _tiny(seed=0):
    m = build_model(mini_resnet_spec(base=4, blocks=(1, 1), num_classes=3, in_channels=1, input_hw=8), (1, 8, 8),
                    seed=seed)
    m.set_noise(True)
    return m


def test_checkpoint_roundtrip_bitwise(tmp_path, rng):
    m = _tiny()
    m.reseed_noise(11)
    m(rng.random((2, 1, 8, 8)))  # advance the noise stream
    digest = checkpoint.save(tmp_path / "m.ckpt", m, epoch=3)
    x = rng.random((4, 1, 8, 8))
    ck = checkpoint.load(tmp_path / "m.ckpt")
    assert ck.digest == digest and ck.epoch == 3
    m2 = ck.build_model()
    assert np.array_equal(m(x).data, m2(x).data)
    assert m2.params.digest("W") == m.params.digest("W")
    assert m2.params.digest("theta") == m.params.digest("theta")


def test_checkpoint_same_model_same_digest(tmp_path):
    a = checkpoint.save(tmp_path / "a.ckpt", _tiny(3))
    b = checkpoint.save(tmp_path / "b.ckpt", _tiny(3))
    assert a == b


def test_checkpoint_spec_mismatch_rejected(tmp_path):
    checkpoint.save(tmp_path / "m.ckpt", _tiny())
    other = build_model(mini_resnet_spec(base=8, blocks=(1, 1), num_classes=3, in_channels=1, input_hw=8), (1, 8, 8))
    with pytest.raises(checkpoint.CheckpointError, match="spec hash"):
        checkpoint.load_into(other, tmp_path / "m.ckpt")


def test_checkpoint_corruption_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    checkpoint.save(p, _tiny())
    raw = p.read_bytes()
    p.write_bytes(b"X" + raw[1:])
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.load(p)
    p.write_bytes(raw[:-16])
    with pytest.raises(checkpoint.CheckpointError, match="past end"):
        checkpoint.load(p)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "absent.ckpt")


# ----------------------------------------------------------------- report
def test_pm_format():
    assert pm(0.5113, 0.0008) == "51.13±0.08"


def test_deterministic_model_has_zero_std(rng):
    m = _tiny()
    m.set_noise(False)
    x = rng.random((16, 1, 8, 8))
    y = rng.integers(0, 3, 16)
    s = transfer_eval(m, m, x, y, FGSMConfig(eps=8 / 255), repeats=5)
    assert s["std"] == 0.0 and len(set(s["accuracies"])) == 1


def test_self_transfer_equals_whitebox(rng):
    m = _tiny()
    x = rng.random((16, 1, 8, 8))
    y = rng.integers(0, 3, 16)
    a = transfer_eval(m, m, x, y, FGSMConfig(eps=8 / 255), repeats=3, seed=4)
    b = transfer_eval(m, m, x, y, FGSMConfig(eps=8 / 255), repeats=3, seed=4)
    assert a == b


def test_single_repeat_flagged():
    r = EvalReport("t")
    r.add("Clean", {"mean": 0.5, "std": 0.0, "repeats": 1, "single_repeat": True, "accuracies": [0.5]})
    assert "R=1" in r.to_text()


# -------------------------------------------------------------- pipeline
def test_train_outputs(trained):
    out, res = trained
    for name in ("config.ini", "best.ckpt", "final.ckpt", "epochs.csv", "theta.csv", "train.json"):
        assert (out / name).exists(), name
    s = json.loads((out / "train.json").read_text())
    assert len(s["mean_theta"]) == 4 and s["mean_theta"][0] == pytest.approx(0.01)
    assert s["mean_theta"][-1] != s["mean_theta"][1]


def test_eval_report(trained, tmp_path):
    out, _ = trained
    rep = run_eval(out / "final.ckpt", repeats=2, out_dir=tmp_path, log=None)
    labels = [r["label"] for r in rep.rows]
    assert labels[0] == "Clean" and len(labels) == 3
    saved = read_report(tmp_path / "eval.json")
    assert saved["metadata"]["repeats"] == 2 and saved["metadata"]["checkpoint_digest"]
    assert "±" in (tmp_path / "eval.txt").read_text()


def test_kappa_sweep_rows(trained):
    out, _ = trained
    rep = run_sweep(out / "final.ckpt", "kappa", repeats=1, log=None,
                    overrides=["eval.cw_iters=5", "eval.cw_binary_steps=1"])
    assert [r["label"] for r in rep.rows] == ["kappa=0", "kappa=0.1", "kappa=1", "kappa=2", "kappa=5"]


def test_transfer_matrix_shape(trained):
    out, _ = trained
    paths = [str(out / "final.ckpt"), str(out / "best.ckpt")]
    rep, table = run_transfer(paths, paths, ("fgsm", "pgd"), repeats=1, log=None)
    assert len(rep.rows) == 2 * 2 * 2
    assert "fgsm" in table and "pgd" in table


def test_same_seed_same_checkpoint(tmp_path):
    a = run_train(smoke(tmp_path / "a", "train.epochs=3", "data.val_subset=0"), log=None)
    b = run_train(smoke(tmp_path / "b", "train.epochs=3", "data.val_subset=0"), log=None)
    assert a["summary"]["final_checkpoint_digest"] == b["summary"]["final_checkpoint_digest"]


# -------------------------------------------------------------------- cli
def test_cli_subcommands(trained, tmp_path, capsys):
    out, _ = trained
    ck = str(out / "final.ckpt")
    run = str(tmp_path / "cli")
    assert main(["train", "--config", "smoke", "--set", f"experiment.output_dir={run}", "--set", "train.epochs=3"]) == 0
    assert main(["eval", "--ckpt", ck, "--attacks", "clean,fgsm", "--repeats", "1", "--out", str(tmp_path)]) == 0
    assert main(["attack", "--ckpt", ck, "--attack", "pgd", "--steps", "2"]) == 0
    assert main(["transfer", "--source", ck, "--victim", f"{run}/final.ckpt", "--attacks", "fgsm",
                 "--repeats", "1"]) == 0
    assert main(["sweep", "--ckpt", ck, "--param", "eps", "--values", "0,8/255", "--repeats", "1"]) == 0
    assert main(["presets"]) == 0
    text = capsys.readouterr().out
    assert "eps=8/255" in text and "smoke" in text


def test_cli_errors(trained, capsys):
    out, _ = trained
    assert main(["eval", "--ckpt", str(out / "nothing.ckpt")]) == 2
    assert main(["eval", "--ckpt", str(out / "final.ckpt"), "--attacks", "laser"]) == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])


# ------------------------------------------------------------------ trends
def test_theta_trend_rise_then_flat():
    from l2plab.harness.trends import theta_trend

    warm = [0.01] * 8
    rise = list(0.01 + 0.001 * np.arange(1, 13))
    flat = [rise[-1] + 1e-6 * (k % 2) for k in range(1, 21)]
    r = theta_trend(warm + rise + flat, warmup=8)
    assert r["ok"] and r["rise"] >= 12 and r["rise_start_epoch"] == 9
    assert not theta_trend(warm + rise, warmup=8)["ok"]  # never flattens
    assert not theta_trend(warm + rise[:5] + flat, warmup=8)["ok"]  # rise too short


def test_robustness_ordering():
    from l2plab.harness.trends import pni_below, robustness_ordering

    good = robustness_ordering({"pgd": 0.45, "clean": 0.80}, {"pgd": 0.40, "clean": 0.82}, {"pgd": 0.0, "clean": 0.9})
    assert good["ok"]
    assert not robustness_ordering({"pgd": 0.41, "clean": 0.8}, {"pgd": 0.40, "clean": 0.8},
                                   {"pgd": 0.0, "clean": 0.9})["ok"]
    assert pni_below(0.009, 0.05, 0.01) and pni_below(0.011, 0.05, 0.01) and not pni_below(0.02, 0.05, 0.01)
