import csv
import json
import time

import numpy as np
import pytest

from smcsghmc.cli import load_splits, main
from smcsghmc.core import rng_stream
from smcsghmc.data import idx_image_bytes, idx_label_bytes
from smcsghmc.inference import WeightedEnsemble, classification_report
from smcsghmc.io import Checkpoint, load_checkpoint, load_config, load_store, save_checkpoint, save_store
from smcsghmc.model import MlpModel
from smcsghmc.pretrain import evaluate
from smcsghmc.sampler import SampleStore

MOONS = """\
dataset = two_moons
layer_sizes = 2, 32, 32, 2
activation = tanh
pretrain_epochs = 60
pretrain_batch_size = 32
learning_rate = 0.05
batch_size = 100
step_size = 1e-3
"""

BLOBS = """\
dataset = blobs
blob_centers = -4,0; 4,0
blob_sd = 0.5
layer_sizes = 2, 16, 2
pretrain_epochs = 20
pretrain_batch_size = 32
ood_dataset = blob
ood_center = 0, 0
ood_sd = 0.5
n_train = 600
n_val = 200
"""


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def read_json(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def moons(tmp_path_factory):
    root = tmp_path_factory.mktemp("moons")
    cfg = root / "moons.cfg"
    cfg.write_text(MOONS)
    t0 = time.perf_counter()
    code = main(["pretrain", "--config", str(cfg), "--out", str(root / "pre")])
    elapsed = time.perf_counter() - t0
    assert code == 0
    return cfg, root, elapsed


def run_sample(cfg, out, threads=1, *extra):
    args = ["sample", "--config", str(cfg), "--out", str(out), "--init", str(cfg.parent / "pre" / "checkpoint.bin"),
            "--particles", "4", "--epochs", "4", "--warmup", "2", "--threads", str(threads), *extra]
    return main(args)


def test_gmm_demo_small_run(tmp_path):
    out = tmp_path / "gmm"
    assert main(["gmm-demo", "--particles", "10", "--epochs", "3", "--warmup", "2", "--out", str(out)]) == 0
    rows = read_csv(out / "samples.csv")
    assert len(rows) == 10
    assert list(rows[0]) == ["x", "y", "weight"]
    assert sum(float(r["weight"]) for r in rows) == pytest.approx(1.0)
    masses = read_csv(out / "mode_mass.csv")
    assert len(masses) == 25
    assert sum(float(r["mass"]) for r in masses) == pytest.approx(1.0)
    assert len(read_csv(out / "diagnostics.csv")) == 3
    assert read_json(out / "summary.json")["samples"] == 10


def test_malformed_config_key_writes_nothing(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("particles = 10\nstepsize = 0.1\n")
    out = tmp_path / "out"
    assert main(["gmm-demo", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    assert main(["gmm-demo", "--set", "nonsense=1", "--out", str(out)]) == 2
    assert not out.exists()


def test_print_config(capsys):
    assert main(["--print-config"]) == 0
    assert "step_size" in capsys.readouterr().out


def test_missing_checkpoint_is_io_error(tmp_path, moons):
    cfg, _, _ = moons
    assert main(["sample", "--config", str(cfg), "--init", str(tmp_path / "nope.bin"), "--out", str(tmp_path)]) == 4


def test_pretrain_zero_epochs_is_initialization(tmp_path, moons):
    cfg, _, _ = moons
    assert main(["pretrain", "--config", str(cfg), "--epochs", "0", "--seed", "5", "--out", str(tmp_path)]) == 0
    ck = load_checkpoint(tmp_path / "checkpoint.bin")
    model = MlpModel([2, 32, 32, 2], "tanh")
    assert ck.params[0].tobytes() == model.init_params(rng_stream(5, 0)).tobytes()
    assert read_csv(tmp_path / "history.csv") == []


def test_two_moons_pretrain_smoke(moons):
    cfg, root, elapsed = moons
    assert elapsed < 10.0
    summary = read_json(root / "pre" / "pretrain.json")
    assert summary["val_acc"] >= 0.95
    history = read_csv(root / "pre" / "history.csv")
    assert list(history[0]) == ["epoch", "train_loss", "val_loss", "val_acc"]
    assert len(history) == 60


def test_checkpoint_reload_gives_same_loss(moons):
    cfg, root, _ = moons
    ck = load_checkpoint(root / "pre" / "checkpoint.bin")
    _, val, _ = load_splits(load_config(cfg))
    loss, acc = evaluate(ck.model(), ck.params[0], val)
    summary = read_json(root / "pre" / "pretrain.json")
    assert loss == summary["val_loss"] and acc == summary["val_acc"]


def test_sample_outputs_and_determinism(tmp_path, moons):
    cfg, _, _ = moons
    outs = [tmp_path / name for name in ("a", "b", "c")]
    for out, threads in zip(outs, (1, 1, 8)):
        assert run_sample(cfg, out, threads) == 0
    for name in ("samples.store", "particles.bin", "diagnostics.csv"):
        blobs = [(out / name).read_bytes() for out in outs]
        assert blobs[0] == blobs[1] == blobs[2], name
    store, header = load_store(outs[0] / "samples.store")
    assert len(store) == 4 * 2 and header["layer_sizes"] == [2, 32, 32, 2]
    diag = read_csv(outs[0] / "diagnostics.csv")
    assert list(diag[0]) == ["epoch", "ess", "resampled", "mean_loglik", "val_loss"]
    assert all(1.0 <= float(r["ess"]) <= 4.0 + 1e-9 for r in diag)


def test_sample_single_collection_epoch(tmp_path, moons):
    cfg, _, _ = moons
    assert run_sample(cfg, tmp_path, 1, "--epochs", "3", "--warmup", "2") == 0
    store, _ = load_store(tmp_path / "samples.store")
    assert len(store) == 4


def test_sample_from_prior_and_degeneracy_exit(tmp_path, moons):
    cfg, _, _ = moons
    assert main(["sample", "--config", str(cfg), "--particles", "3", "--epochs", "2", "--warmup", "1",
                 "--out", str(tmp_path / "prior")]) == 0
    out = tmp_path / "dead"
    code = main(["sample", "--config", str(cfg), "--set", "activation=relu", "--step-size", "1e300",
                 "--particles", "3", "--epochs", "3", "--warmup", "1", "--out", str(out)])
    assert code == 3
    assert len(read_csv(out / "diagnostics.csv")) >= 1
    assert not (out / "samples.store").exists()


def test_gmm_demo_deterministic_across_threads(tmp_path):
    outs = []
    for i, threads in enumerate((1, 1, 8)):
        out = tmp_path / str(i)
        args = ["gmm-demo", "--particles", "20", "--epochs", "4", "--warmup", "2", "--threads", str(threads), "--out", str(out)]
        assert main(args) == 0
        outs.append((out / "samples.store").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_pretrain_deterministic(tmp_path, moons):
    cfg, _, _ = moons
    for name in ("a", "b"):
        assert main(["pretrain", "--config", str(cfg), "--epochs", "3", "--threads", "8", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()


def test_eval_singleton_and_duplicate(tmp_path, moons):
    cfg, root, _ = moons
    ckpt = root / "pre" / "checkpoint.bin"
    assert main(["eval", "--config", str(cfg), "--store", str(ckpt), "--out", str(tmp_path / "one")]) == 0
    single = read_json(tmp_path / "one" / "eval.json")
    ck = load_checkpoint(ckpt)
    _, _, test = load_splits(load_config(cfg))
    plain = classification_report(WeightedEnsemble.single(ck.model(), ck.params[0]), test)
    for k in ("accuracy", "nll", "ece"):
        assert single[k] == plain[k]

    dup = SampleStore.from_arrays(np.vstack([ck.params, ck.params]), [0.0, 0.0], [1, 1], [0, 1])
    save_store(tmp_path / "dup.store", dup, layer_sizes=ck.layer_sizes, activation=ck.activation)
    assert main(["eval", "--config", str(cfg), "--store", str(tmp_path / "dup.store"), "--out", str(tmp_path / "two")]) == 0
    double = read_json(tmp_path / "two" / "eval.json")
    for k in ("accuracy", "nll", "ece"):
        assert double[k] == pytest.approx(single[k], rel=1e-12, abs=1e-15)


def test_eval_perfect_model_has_zero_ece(tmp_path):
    cfg = tmp_path / "blobs.cfg"
    cfg.write_text(BLOBS + "layer_sizes = 2, 2\n")
    # logit margin 200 * x with |x| > 1.5 for every blob point: softmax saturates to exactly 1
    ck = Checkpoint(np.array([[-100.0, 100.0, 0.0, 0.0, 0.0, 0.0]]), np.zeros(1), [2, 2], "relu")
    save_checkpoint(tmp_path / "perfect.bin", ck)
    assert main(["eval", "--config", str(cfg), "--store", str(tmp_path / "perfect.bin"), "--out", str(tmp_path)]) == 0
    metrics = read_json(tmp_path / "eval.json")
    assert metrics["accuracy"] == 1.0
    assert abs(metrics["ece"]) <= 1e-12


@pytest.fixture(scope="module")
def blobs(tmp_path_factory):
    root = tmp_path_factory.mktemp("blobs")
    cfg = root / "blobs.cfg"
    cfg.write_text(BLOBS)
    assert main(["pretrain", "--config", str(cfg), "--out", str(root)]) == 0
    return cfg, root / "checkpoint.bin"


def test_ood_separated_blobs(tmp_path, blobs):
    cfg, ckpt = blobs
    assert main(["ood", "--config", str(cfg), "--store", str(ckpt), "--out", str(tmp_path)]) == 0
    metrics = read_json(tmp_path / "ood.json")
    assert metrics["auroc"] >= 0.99
    assert metrics["val_specificity"] >= 0.95 - 1e-12
    for key in ("accuracy", "precision", "recall", "f1", "specificity", "tau"):
        assert key in metrics


def test_ood_threshold_ignores_test_set(tmp_path, blobs):
    cfg, ckpt = blobs
    taus, aurocs = [], []
    for n_test in ("50", "190"):
        out = tmp_path / n_test
        assert main(["ood", "--config", str(cfg), "--store", str(ckpt), "--set", f"n_test={n_test}", "--out", str(out)]) == 0
        m = read_json(out / "ood.json")
        taus.append(m["tau"])
        aurocs.append(m["val_auroc"])
    assert taus[0] == taus[1]
    assert aurocs[0] == aurocs[1]


def _write_uniform_idx(path_img, path_lab, n, seed):
    rng = np.random.default_rng(seed)
    path_img.write_bytes(idx_image_bytes(rng.integers(0, 256, (n, 4, 4), dtype=np.uint8)))
    if path_lab is not None:
        path_lab.write_bytes(idx_label_bytes(rng.integers(0, 2, n)))


def test_ood_identical_distributions(tmp_path, monkeypatch):
    data = tmp_path / "data"
    data.mkdir()
    _write_uniform_idx(data / "train-img", data / "train-lab", 1000, 1)
    _write_uniform_idx(data / "test-img", data / "test-lab", 5000, 2)
    _write_uniform_idx(data / "oodv-img", None, 1000, 3)
    _write_uniform_idx(data / "oodt-img", None, 5000, 4)
    monkeypatch.setenv("SMCSGHMC_DATA_DIR", str(data))
    cfg = tmp_path / "idx.cfg"
    cfg.write_text("dataset = idx\ntrain_images = train-img\ntrain_labels = train-lab\n"
                   "test_images = test-img\ntest_labels = test-lab\nn_classes = 2\n"
                   "ood_dataset = idx\nood_val_images = oodv-img\nood_test_images = oodt-img\n"
                   "layer_sizes = 16, 8, 2\n")
    model = MlpModel([16, 8, 2])
    params = model.init_params(np.random.default_rng(5)) * 3
    save_checkpoint(tmp_path / "rand.bin", Checkpoint(params[None, :], np.zeros(1), [16, 8, 2], "relu"))
    assert main(["ood", "--config", str(cfg), "--store", str(tmp_path / "rand.bin"), "--out", str(tmp_path)]) == 0
    assert read_json(tmp_path / "ood.json")["auroc"] == pytest.approx(0.5, abs=0.02)
