"""Run configuration, binary checkpoint / sample-store persistence and CSV output.

Binary layout (all little-endian)::

    magic        9 bytes   b"SMCSGHMC1" (checkpoint) or b"SMCSTORE1" (sample store)
    n_layers     u32       number of layer sizes that follow (0: no network)
    sizes        u32 * n_layers
    activation   u8        0 relu, 1 tanh, 255 none
    dim          u64       D
    rows         u64       J (particles, or stored samples)
    seed         u64
    epoch        i64
    total_bytes  u64       length of the whole file
    params       f64 * rows * dim   (row-major)
    log_weights  f64 * rows
    -- sample store only --
    epochs       i64 * rows
    particle_ids i64 * rows
"""

from __future__ import annotations

import csv
import io as _io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import MlpModel
from .sampler import SampleStore

CHECKPOINT_MAGIC = b"SMCSGHMC1"
STORE_MAGIC = b"SMCSTORE1"
_ACTIVATION_CODES = {"relu": 0, "tanh": 1, None: 255}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATION_CODES.items()}


@dataclass
class Checkpoint:
    params: np.ndarray  # (J, D)
    log_weights: np.ndarray
    layer_sizes: list | None = None
    activation: str | None = None
    seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=np.float64))
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64).reshape(-1)
        if len(self.log_weights) != len(self.params):
            raise FormatError("params and log_weights disagree on the number of rows")

    @property
    def dim(self):
        return self.params.shape[1]

    def model(self):
        if not self.layer_sizes:
            return None
        return MlpModel(self.layer_sizes, self.activation)


def _header(magic, layer_sizes, activation, dim, rows, seed, epoch, payload_bytes):
    sizes = list(layer_sizes or [])
    head = magic + struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)
    head += struct.pack("<B", _ACTIVATION_CODES[activation if sizes else None])
    fixed = struct.calcsize("<QQQqQ")
    total = len(head) + fixed + payload_bytes
    head += struct.pack("<QQQqQ", dim, rows, seed, epoch, total)
    return head


def _parse_header(buf, magic):
    if buf[: len(magic)] != magic:
        raise FormatError(f"bad magic {buf[:len(magic)]!r}, expected {magic!r}")
    off = len(magic)
    try:
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        sizes = list(struct.unpack_from(f"<{n}I", buf, off))
        off += 4 * n
        (act,) = struct.unpack_from("<B", buf, off)
        off += 1
        dim, rows, seed, epoch, total = struct.unpack_from("<QQQqQ", buf, off)
        off += struct.calcsize("<QQQqQ")
    except struct.error as exc:
        raise FormatError(f"truncated header: {exc}") from exc
    if act not in _ACTIVATION_NAMES:
        raise FormatError(f"unknown activation code {act}")
    if total != len(buf):
        raise FormatError(f"header declares {total} bytes, file has {len(buf)}")
    return dict(layer_sizes=sizes or None, activation=_ACTIVATION_NAMES[act] if sizes else None,
                dim=dim, rows=rows, seed=seed, epoch=epoch), off


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _i64(a):
    return np.ascontiguousarray(a, dtype="<i8").tobytes()


def checkpoint_bytes(ckpt):
    payload = _f64(ckpt.params) + _f64(ckpt.log_weights)
    return _header(CHECKPOINT_MAGIC, ckpt.layer_sizes, ckpt.activation, ckpt.dim,
                   len(ckpt.params), ckpt.seed, ckpt.epoch, len(payload)) + payload


def parse_checkpoint(buf):
    h, off = _parse_header(buf, CHECKPOINT_MAGIC)
    rows, dim = h["rows"], h["dim"]
    if len(buf) - off != 8 * rows * (dim + 1):
        raise FormatError("payload size does not match header")
    params = np.frombuffer(buf, "<f8", rows * dim, off).reshape(rows, dim).astype(np.float64)
    log_w = np.frombuffer(buf, "<f8", rows, off + 8 * rows * dim).astype(np.float64)
    return Checkpoint(params, log_w, h["layer_sizes"], h["activation"], h["seed"], h["epoch"])


def store_bytes(store, layer_sizes=None, activation=None, seed=0, epoch=0):
    payload = _f64(store.params) + _f64(store.log_weights) + _i64(store.epochs) + _i64(store.particle_ids)
    return _header(STORE_MAGIC, layer_sizes, activation, store.dim, len(store),
                   seed, epoch, len(payload)) + payload


def parse_store(buf):
    """Return ``(store, header)``."""
    h, off = _parse_header(buf, STORE_MAGIC)
    rows, dim = h["rows"], h["dim"]
    if len(buf) - off != 8 * rows * (dim + 3):
        raise FormatError("payload size does not match header")
    params = np.frombuffer(buf, "<f8", rows * dim, off).reshape(rows, dim)
    off += 8 * rows * dim
    log_w = np.frombuffer(buf, "<f8", rows, off)
    epochs = np.frombuffer(buf, "<i8", rows, off + 8 * rows)
    pids = np.frombuffer(buf, "<i8", rows, off + 16 * rows)
    store = SampleStore.from_arrays(params.astype(np.float64), log_w.astype(np.float64),
                                    epochs.astype(np.int64), pids.astype(np.int64))
    store.dim = dim
    return store, h


def atomic_write(path, data):
    """Write bytes (or text) via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt):
    atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())


def save_store(path, store, **header):
    atomic_write(path, store_bytes(store, **header))


def load_store(path):
    return parse_store(Path(path).read_bytes())


def load_ensemble_source(path):
    """Read either a sample store or a checkpoint; returns ``(store, header)``."""
    buf = Path(path).read_bytes()
    if buf[: len(CHECKPOINT_MAGIC)] == CHECKPOINT_MAGIC:
        ck = parse_checkpoint(buf)
        store = SampleStore.from_arrays(ck.params, ck.log_weights, np.full(len(ck.params), ck.epoch),
                                        np.arange(len(ck.params)))
        return store, dict(layer_sizes=ck.layer_sizes, activation=ck.activation, dim=ck.dim,
                           rows=len(ck.params), seed=ck.seed, epoch=ck.epoch)
    return parse_store(buf)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write(path, csv_text(header, rows))


# ---------------------------------------------------------------------------
# flat key=value run configuration

SCHEMA_VERSION = 1

_AUTO = "auto"


def _bool(s):
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s):
    return [int(x) for x in str(s).replace(" ", "").split(",") if x]


def _float_list(s):
    return [float(x) for x in str(s).replace(" ", "").split(",") if x]


def _points(s):
    return [_float_list(p) for p in str(s).split(";") if p.strip()]


def _temp(s):
    s = str(s).strip().lower()
    return None if s == _AUTO else float(s)


def _opt_path(s):
    s = str(s).strip()
    return s or None


# key -> (parser, default, description). None defaults are filled per command.
CONFIG_KEYS = {
    "schema_version": (int, SCHEMA_VERSION, "config schema version; must be 1"),
    "seed": (int, 0, "master seed for all random streams"),
    "threads": (int, 1, "worker threads for per-particle work"),
    # sampler
    "particles": (int, None, "J, number of particles (gmm-demo 1000, sample 10)"),
    "epochs": (int, None, "K, SMC iterations (gmm-demo 400, sample 50)"),
    "warmup": (int, None, "B, warm-up iterations not collected (gmm-demo 200, sample 25)"),
    "step_size": (float, None, "leapfrog step size h (gmm-demo 0.2, sample 2e-5)"),
    "trajectory_length": (int, 10, "L, leapfrog steps for analytic targets"),
    "batch_size": (int, 500, "mini-batch size M for SGHMC trajectories"),
    "temperature_warmup": (_temp, None, "T_B; 'auto' = training-set size (1 for gmm-demo)"),
    "temperature_sampling": (_temp, None, "T_M; 'auto' = training-set size (1 for gmm-demo)"),
    "resample_threshold": (float, 0.5, "resample when ESS < threshold * J"),
    "resample_scheme": (str, "systematic", "systematic | multinomial"),
    "resample_every_iteration": (_bool, False, "resample at every iteration regardless of ESS"),
    "init_jitter": (float, 0.0, "jitter of replicated checkpoint, in prior standard deviations"),
    "prior_variance": (float, 1.0, "variance of the isotropic Gaussian prior on network weights"),
    "gmm_init_variance": (float, 16.0, "variance of the Gaussian the gmm-demo particles start from"),
    "ensemble_normalization": (str, "global", "global | per_epoch weight normalization of stored samples"),
    "ece_bins": (int, 15, "equal-width bins for ECE"),
    "tpr": (float, 0.95, "ID acceptance rate used to set the energy threshold"),
    # model
    "layer_sizes": (_int_list, [784, 100, 10], "comma-separated MLP layer sizes"),
    "activation": (str, "relu", "relu | tanh"),
    # pretraining
    "learning_rate": (float, 0.05, "SGD learning rate"),
    "momentum": (float, 0.9, "SGD momentum"),
    "weight_decay": (float, 0.0, "L2 coefficient nu"),
    "pretrain_batch_size": (int, 128, "SGD mini-batch size"),
    "pretrain_epochs": (int, 10, "SGD epochs"),
    "lr_decay": (str, "none", "none | cosine"),
    # data
    "dataset": (str, "idx", "idx | two_moons | blobs"),
    "train_images": (_opt_path, None, "IDX training image file"),
    "train_labels": (_opt_path, None, "IDX training label file"),
    "test_images": (_opt_path, None, "IDX test image file (else test comes from the pool)"),
    "test_labels": (_opt_path, None, "IDX test label file"),
    "n_classes": (int, 10, "number of classes for IDX data"),
    "n_train": (int, None, "training examples (idx: pool minus n_val)"),
    "n_val": (int, None, "validation examples"),
    "n_test": (int, None, "test examples taken from the pool when no test files"),
    "split_seed": (int, 0, "seed of the train/val/test permutation"),
    "synthetic_n": (int, 1000, "size of generated two_moons / blobs pools"),
    "two_moons_noise": (float, 0.1, "noise standard deviation of two_moons"),
    "blob_centers": (_points, [[-2.0, 0.0], [2.0, 0.0]], "blob centers 'x,y;x,y'"),
    "blob_sd": (float, 0.5, "blob standard deviation"),
    "ood_dataset": (str, "idx", "idx | blob"),
    "ood_val_images": (_opt_path, None, "IDX images of the OOD validation set"),
    "ood_test_images": (_opt_path, None, "IDX images of the OOD test set"),
    "ood_center": (_float_list, [0.0, 8.0], "center of the synthetic OOD blob"),
    "ood_sd": (float, 0.5, "standard deviation of the synthetic OOD blob"),
    "ood_n": (int, 400, "size of each synthetic OOD split"),
}


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        set_value(out, key, value, f"{source}:{lineno}")
    if out.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"{source}: unsupported schema_version {out['schema_version']}")
    return out


def set_value(cfg, key, value, where="<override>"):
    if key not in CONFIG_KEYS:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    parser = CONFIG_KEYS[key][0]
    try:
        cfg[key] = parser(value) if isinstance(value, str) else value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad value for {key}: {value!r} ({exc})") from None
    return cfg


def load_config(path=None, overrides=None, command_defaults=None):
    """Defaults < command defaults < file < overrides."""
    cfg = {k: v[1] for k, v in CONFIG_KEYS.items()}
    cfg.update(command_defaults or {})
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_config_text(text, str(path)))
    for key, value in (overrides or {}).items():
        set_value(cfg, key, value)
    return cfg


def config_reference():
    """Plain-text table of every key with its default."""
    lines = []
    for key, (_, default, doc) in CONFIG_KEYS.items():
        lines.append(f"{key} = {default!r:<24} # {doc}")
    return "\n".join(lines)
