"""Command-line entry point.

Every command writes its resolved configuration (``config.json``) next to
its outputs. Exit codes: 0 success, 1 failed check or unreadable input,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data, storage, vae, verification
from .errors import CheckpointError, ContractViolation, IdxFormatError, OutOfSupportError
from .lattice import LATTICE_NAMES, cell_constants, lattice_basis, theta_coefficients

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Config handling.


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults < config file < explicitly given flags."""
    cfg = dict(defaults)
    cfg.update(_load_config(getattr(args, "config", None)))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _out_dir(path: str | None) -> Path | None:
    if path is None:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(verification._plain(obj), indent=2, sort_keys=True) + "\n")


def _write_config(out: Path | None, command: str, cfg: dict) -> None:
    if out is not None:
        _dump({"command": command, **cfg}, out / "config.json")


# --------------------------------------------------------------------------
# constants / theta


def cmd_constants(args) -> int:
    cfg = _resolve(args, {"lattice": "E8", "n_samples": 1_000_000, "seed": 0, "out": None})
    if cfg["lattice"] not in LATTICE_NAMES:
        raise UsageError(f"unknown lattice {cfg['lattice']!r}")
    cc = cell_constants(cfg["lattice"], n_samples=int(cfg["n_samples"]), seed=int(cfg["seed"]))
    base = lattice_basis(cfg["lattice"])
    report = {"lattice": cfg["lattice"], "dimension": base.m, "volume": cc.volume,
              "second_moment": cc.second_moment, "second_moment_stderr": cc.stderr,
              "nsm": cc.nsm, "nsm_stderr": cc.nsm_stderr, "exact_nsm": cc.exact_nsm,
              "published_nsm": base.published_nsm, "covering_radius": base.covering_radius,
              "n_samples": cc.n_samples, "seed": int(cfg["seed"])}
    print(f"{'lattice':<8}{'volume':>10}{'sigma^2':>12}{'nsm':>12}{'stderr':>11}{'exact':>12}")
    print(f"{cfg['lattice']:<8}{cc.volume:>10.6f}{cc.second_moment:>12.7f}{cc.nsm:>12.7f}"
          f"{cc.nsm_stderr:>11.2e}{cc.exact_nsm:>12.7f}")
    out = _out_dir(cfg["out"])
    if out is not None:
        _dump(report, out / "constants.json")
    else:
        print(json.dumps(report, sort_keys=True))
    _write_config(out, "constants", cfg)
    return EXIT_OK


def cmd_theta(args) -> int:
    cfg = _resolve(args, {"lattice": "E8", "max_norm": 8, "out": None})
    coeffs = theta_coefficients(cfg["lattice"], int(cfg["max_norm"]))
    for k, v in coeffs.items():
        print(f"{k:>4} {v}")
    out = _out_dir(cfg["out"])
    if out is not None:
        _dump({"lattice": cfg["lattice"], "theta": {str(k): v for k, v in coeffs.items()}},
              out / "theta.json")
    _write_config(out, "theta", cfg)
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def _default_ys(lattice: str, count: int, seed: int) -> list[list[float]]:
    rng = np.random.default_rng([seed, lattice_basis(lattice).m])
    return rng.uniform(-2.0, 2.0, (count, lattice_basis(lattice).m)).tolist()


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _verify_crypto(cfg: dict) -> tuple[list[dict], bool]:
    jobs = []
    for lat in cfg["lattices"]:
        ys = cfg["y"] if cfg["y"] is not None else _default_ys(lat, cfg["n_y"], cfg["seed"])
        for y in ys:
            for s in range(cfg["seeds"]):
                jobs.append((lat, y, cfg["seed"] + s))

    def run(job):
        lat, y, s = job
        pos = verification.crypto_lemma_test(lat, y, n=cfg["n"], seed=s,
                                              n_permutations=cfg["permutations"],
                                              level=cfg["level"])
        rec = pos.to_record()
        if cfg["negative_control"]:
            neg = verification.crypto_lemma_test(lat, y, n=cfg["n"], seed=s,
                                                 n_permutations=cfg["permutations"],
                                                 level=cfg["level"], subtract_dither=False)
            rec["control_statistic"] = neg.statistic
            rec["control_rejected"] = not neg.passed
        return rec

    records = _map(run, jobs, cfg["workers"])
    ok = all(r["passed"] for r in records) and all(r.get("control_rejected", True) for r in records)
    return records, ok


def _verify_theorem1(cfg: dict) -> tuple[list[dict], bool]:
    jobs = [(a, d, e, cfg["seed"] + s) for s in range(cfg["seeds"])
            for a in cfg["alpha"] for d in cfg["delta"] for e in cfg["e_x"]]

    def run(job):
        a, d, e, s = job
        return verification.theorem1_check(verification.LaplaceZModel(a, d), e, n=cfg["n"],
                                           seed=s, paired=cfg["paired"]).to_record()

    records = _map(run, jobs, cfg["workers"])
    return records, all(r["passed"] for r in records)


def _verify_kl(cfg: dict) -> tuple[list[dict], bool]:
    records = [verification.kl_to_gaussian_check(lat, n=cfg["n"], seed=cfg["seed"]).to_record()
               for lat in cfg["lattices"]]
    return records, all(r["passed"] for r in records)


def _verify_covering(cfg: dict) -> tuple[list[dict], bool]:
    a, b = cfg["pair"]
    exact = verification.covering_ratio(a, b)
    published = verification.covering_ratio(a, b, published=True)
    target, tol = cfg["target"], cfg["tolerance"]
    passed = abs(exact - target) <= tol
    print(f"covering ratio {a}/{b}: {exact:.4f} (published constants {published:.4f})")
    return [{"lattice_a": a, "lattice_b": b, "ratio": exact, "ratio_published_nsm": published,
             "target": target, "tolerance": tol, "passed": passed}], passed


_SUITES = {
    "crypto": (_verify_crypto, {"lattices": list(LATTICE_NAMES), "y": None, "n_y": 5,
                                "seeds": 5, "n": 10_000, "permutations": 200, "level": 0.01,
                                "negative_control": True}),
    "theorem1": (_verify_theorem1, {"alpha": [0.5, 1.0, 2.0], "delta": [0.5, 1.0, 2.0],
                                    "e_x": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5], "seeds": 1,
                                    "n": 100_000, "paired": True}),
    "kl": (_verify_kl, {"lattices": ["Z", "A2", "E8"], "n": 100_000}),
    "covering": (_verify_covering, {"pair": ["Z2", "A2"], "target": 0.963, "tolerance": 0.002}),
}


def cmd_verify(args) -> int:
    fn, extra = _SUITES[args.suite]
    defaults = {"seed": 0, "workers": 1, "out": None, **extra}
    cfg = _resolve(args, defaults)
    if args.lattice:
        cfg["lattices"] = args.lattice
    for name in ("lattices",):
        for lat in cfg.get(name, []):
            if lat not in LATTICE_NAMES:
                raise UsageError(f"unknown lattice {lat!r}")
    records, ok = fn(cfg)
    n_pass = sum(bool(r["passed"]) for r in records)
    print(f"verify {args.suite}: {n_pass}/{len(records)} checks passed"
          + ("" if ok else " (FAILED)"))
    failing = [r for r in records if not r["passed"] or not r.get("control_rejected", True)]
    for r in failing[:20]:
        print("  failing:", json.dumps(verification._plain(r), sort_keys=True))
    out = _out_dir(cfg["out"])
    if out is not None:
        with open(out / f"verify_{args.suite}.jsonl", "w") as fh:
            for r in records:
                fh.write(json.dumps(verification._plain(r), sort_keys=True) + "\n")
        with open(out / f"verify_{args.suite}_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["suite", "checks", "passed", "all_passed"])
            w.writerow([args.suite, len(records), n_pass, ok])
    _write_config(out, f"verify {args.suite}", cfg)
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------
# synth / train / eval / quantize


def cmd_synth(args) -> int:
    cfg = _resolve(args, {"n": 512, "d": 64, "k_clusters": 4, "seed": 0, "out": None})
    if cfg["out"] is None:
        raise UsageError("synth needs --out")
    ds = data.synth_dataset(int(cfg["n"]), int(cfg["d"]), int(cfg["k_clusters"]),
                            int(cfg["seed"]))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_dataset(out, ds)
    print(f"wrote {ds.n} images of {ds.height}x{ds.width} to {out} ({ds.sizes()})")
    return EXIT_OK


def _load_data(path: str | None, cfg: dict) -> data.Dataset:
    if not path:
        raise UsageError("a dataset path is required (--data)")
    if not Path(path).exists():
        raise UsageError(f"dataset {path} does not exist")
    return data.load_dataset(path, cfg.get("binarize", "threshold_half"),
                             seed=cfg.get("binarize_seed"), split_seed=cfg.get("split_seed", 0))


_TRAIN_KEYS = ("latent_dim", "mode", "lattice", "batch_size", "learning_rate", "max_epochs",
               "patience", "anneal", "seed", "stop_patience", "max_norm_sq", "threshold",
               "shared_scale", "init_scale")


def cmd_train(args) -> int:
    defaults = {**vae.TrainConfig().to_dict(), "data": None, "out": None,
                "binarize": "threshold_half", "binarize_seed": None, "split_seed": 0}
    cfg = _resolve(args, defaults)
    if cfg["out"] is None:
        raise UsageError("train needs --out")
    ds = _load_data(cfg["data"], cfg)
    try:
        config = vae.TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS})
    except (ContractViolation, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    cfg.update(config.to_dict())
    params, history = vae.train(None, config, ds)
    out = _out_dir(cfg["out"])
    storage.save_checkpoint(out / "checkpoint.npz", params, config.seed,
                            extra={"train_config": config.to_dict(), "data": cfg["data"]})
    storage.write_history(out / "history.csv", history)
    _write_config(out, "train", cfg)
    last = history[-1]
    print(f"trained {len(history)} epochs: train {last.train_loss:.4f} "
          f"val {last.val_loss:.4f} nats/example")
    return EXIT_OK


def _load_ckpt(path: str | None):
    if not path:
        raise UsageError("a checkpoint path is required (--checkpoint)")
    return storage.load_checkpoint(path)


def cmd_eval(args) -> int:
    cfg = _resolve(args, {"checkpoint": None, "data": None, "k": 1, "split": "test", "seed": 0,
                          "zero_dither": False, "out": None, "binarize": "threshold_half",
                          "binarize_seed": None, "split_seed": 0})
    params, _ = _load_ckpt(cfg["checkpoint"])
    ds = _load_data(cfg["data"], cfg)
    x = ds.subset(cfg["split"])
    report = vae.infer_nll(params, x, int(cfg["k"]), np.random.default_rng(int(cfg["seed"])),
                           split=cfg["split"], seed=int(cfg["seed"]),
                           zero_dither=bool(cfg["zero_dither"]))
    rec = report.to_record()
    print(json.dumps(verification._plain(rec), sort_keys=True))
    out = _out_dir(cfg["out"])
    if out is not None:
        _dump(rec, out / "eval.json")
    _write_config(out, "eval", cfg)
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _resolve(args, {"checkpoint": None, "data": None, "split": "test", "seed": 0,
                          "out": None, "binarize": "threshold_half", "binarize_seed": None,
                          "split_seed": 0})
    if cfg["out"] is None:
        raise UsageError("quantize needs --out")
    params, _ = _load_ckpt(cfg["checkpoint"])
    ds = _load_data(cfg["data"], cfg)
    x = ds.subset(cfg["split"])
    codes, dither, rep, _ = quantize_dataset(params, x, int(cfg["seed"]))
    out = _out_dir(cfg["out"])
    storage.write_codes(out / "codes.bin", codes)
    side = {"seed": int(cfg["seed"]), "n": len(codes), "t": params.t,
            "lattice": params.lattice, "deltas": params.deltas().tolist(),
            "code_length_nats": rep.tolist(),
            "mean_code_length_nats": float(rep.mean()) if len(rep) else None}
    _dump(side, out / "codes.json")
    _write_config(out, "quantize", cfg)
    print(f"wrote {len(codes)} codes to {out / 'codes.bin'}")
    return EXIT_OK


def quantize_dataset(params: vae.ModelParams, x: np.ndarray, seed: int):
    """Codes, de-scaled dithers, code lengths and decoder inputs for each row of ``x``.

    The dither for row ``i`` is row ``i`` of one draw of ``n`` dithers from
    ``default_rng(seed)``, so ``(codes, seed)`` reproduce the decoder inputs.
    """
    n = len(x)
    if n == 0:
        return (np.zeros((0, params.t), dtype=np.int64), np.zeros((0, params.t)),
                np.zeros(0), np.zeros((0, params.t)))
    dither = vae._unit_dither(params, (n,), np.random.default_rng(seed))
    rep, _, codes, dec_in = vae.quantized_costs(params, x, dither)
    return codes, dither, rep, dec_in


def decoder_inputs(params: vae.ModelParams, codes: np.ndarray, seed: int) -> np.ndarray:
    """Rebuild ``z - u`` from emitted codes and the dither seed."""
    n = len(codes)
    if n == 0:
        return np.zeros((0, params.t))
    lat = params.quant_lattice()
    dither = vae._unit_dither(params, (n,), np.random.default_rng(seed))
    u = (lat.to_blocks(dither) * lat.deltas[:, None]).reshape(dither.shape)
    return lat.embed(codes) - u


# --------------------------------------------------------------------------
# Parser.


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latticevae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON config file; flags override its values")
        if out:
            sp.add_argument("--out", help="output directory (or file for synth)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("constants", help="Monte-Carlo cell constants of a lattice")
    sp.add_argument("--lattice", choices=LATTICE_NAMES)
    sp.add_argument("--n-samples", dest="n_samples", type=int)
    common(sp)
    sp.set_defaults(func=cmd_constants)

    sp = sub.add_parser("theta", help="theta-series coefficients")
    sp.add_argument("--lattice", choices=LATTICE_NAMES)
    sp.add_argument("--max-norm", dest="max_norm", type=int)
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_theta)

    sp = sub.add_parser("verify", help="numerical verification suites")
    sp.add_argument("suite", choices=sorted(_SUITES))
    sp.add_argument("--lattice", action="append", choices=LATTICE_NAMES,
                    help="lattice to include (repeatable)")
    sp.add_argument("--y", type=lambda s: [[float(v) for v in s.split(",")]],
                    help="comma-separated shift vector for the crypto suite")
    sp.add_argument("--seeds", type=int, help="number of seeds per configuration")
    sp.add_argument("--n", type=int, help="Monte-Carlo sample count")
    sp.add_argument("--alpha", type=float, nargs="+")
    sp.add_argument("--delta", type=float, nargs="+")
    sp.add_argument("--e-x", dest="e_x", type=float, nargs="+")
    sp.add_argument("--permutations", type=int)
    sp.add_argument("--workers", type=int)
    common(sp)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("synth", help="write a synthetic binary dataset (.npz)")
    sp.add_argument("--n", type=int)
    sp.add_argument("--d", type=int)
    sp.add_argument("--k-clusters", dest="k_clusters", type=int)
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--data")
    sp.add_argument("--mode", choices=["direct", "proxy"])
    sp.add_argument("--lattice", choices=LATTICE_NAMES)
    sp.add_argument("--latent-dim", dest="latent_dim", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--lr", dest="learning_rate", type=float)
    sp.add_argument("--epochs", dest="max_epochs", type=int)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--max-norm-sq", dest="max_norm_sq", type=int)
    common(sp)
    sp.set_defaults(func=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "quantized-inference NLL"),
                               ("quantize", cmd_quantize, "emit latent codes")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--checkpoint")
        sp.add_argument("--data")
        sp.add_argument("--split", choices=list(data.SPLITS) + ["all"])
        if name == "eval":
            sp.add_argument("--k", type=int)
            sp.add_argument("--zero-dither", dest="zero_dither", action="store_const", const=True)
        common(sp)
        sp.set_defaults(func=fn)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, IdxFormatError, OutOfSupportError, ContractViolation,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
