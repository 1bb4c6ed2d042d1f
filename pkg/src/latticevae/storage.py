"""On-disk formats: checkpoints, latent codes and training history."""

from __future__ import annotations

import csv
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .lattice import lattice_basis
from .priors import ThetaPrior
from .vae import HistoryRow, Mode, ModelParams

CHECKPOINT_VERSION = 1
_CORE = ("enc_A", "enc_b", "dec_W", "dec_c", "log_alpha", "log_delta",
         "log_sigma_ug_sq", "log_sigma_us_sq")


def save_checkpoint(path, params: ModelParams, seed: int, extra: dict | None = None) -> None:
    """``.npz`` container: one array per parameter plus a JSON ``__meta__`` entry."""
    meta = {"version": CHECKPOINT_VERSION, "mode": params.mode.value,
            "lattice": params.lattice, "seed": int(seed), "extra": extra or {}}
    arrays = {n: getattr(params, n) for n in _CORE if getattr(params, n) is not None}
    if params.prior is not None:
        meta["prior"] = {"blocks": params.prior.blocks, "max_norm_sq": params.prior.max_norm_sq,
                         "threshold": params.prior.threshold,
                         "oos_penalty": params.prior.oos_penalty}
        for n in params.prior.param_names():
            arrays["prior." + n] = getattr(params.prior, n)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Inverse of :func:`save_checkpoint`; raises :class:`CheckpointError` on bad input."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k: np.array(z[k]) for k in z.files if k != "__meta__"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
    try:
        prior = None
        if "prior" in meta:
            pm = meta["prior"]
            prior = ThetaPrior(
                base=lattice_basis(meta["lattice"]), blocks=pm["blocks"],
                max_norm_sq=pm["max_norm_sq"], threshold=pm["threshold"],
                psi=arrays["prior.psi"], flag=arrays["prior.flag"],
                small_W=arrays["prior.small_W"], small_b=arrays["prior.small_b"],
                oos_penalty=pm["oos_penalty"],
            )
        core = {n: arrays.get(n) for n in _CORE}
        params = ModelParams(mode=Mode(meta["mode"]), lattice=meta["lattice"], prior=prior, **core)
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {exc}") from exc
    return params, meta


def write_codes(path, coeffs: np.ndarray) -> None:
    """Little-endian int32 ``n``, int32 ``t``, then ``n`` rows of ``t`` int32 coefficients."""
    coeffs = np.asarray(coeffs, dtype=np.int64)
    if coeffs.ndim != 2:
        raise ValueError("codes must be a 2-D array")
    if coeffs.size and np.abs(coeffs).max() >= 2**31:
        raise ValueError("coefficient does not fit in int32")
    n, t = coeffs.shape
    with open(path, "wb") as fh:
        fh.write(np.array([n, t], dtype="<i4").tobytes())
        fh.write(coeffs.astype("<i4").tobytes())


def read_codes(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise CheckpointError("codes file too short")
    n, t = np.frombuffer(buf[:8], dtype="<i4")
    if n < 0 or t < 0 or len(buf) != 8 + 4 * int(n) * int(t):
        raise CheckpointError("codes file size does not match its header")
    return np.frombuffer(buf[8:], dtype="<i4").reshape(int(n), int(t)).astype(np.int64)


def write_history(path, history: list[HistoryRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


def read_history(path) -> list[HistoryRow]:
    with open(path, newline="") as fh:
        return [HistoryRow(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                           float(r["lr"])) for r in csv.DictReader(fh)]
