"""``zno`` command-line interface."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import datagen, evalkit, oracle
from .network import count_params, load_checkpoint
from .seqcore import ConfigError, save_dataset
from .trainer import ExperimentConfig, output_root, run_one, write_csv, write_pole_csv
from .zlayer import BackwardMode, PoleMode, layer_forward, new_layer

log = logging.getLogger("zno")

EXIT_USAGE = 2
EXIT_DIVERGED = 2
EXIT_CHECK_FAILED = 1


class CliUsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def packaged_configs() -> list[str]:
    root = resources.files("zno") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_config(name: str) -> ExperimentConfig:
    """A JSON path, or the name of a packaged profile."""
    path = Path(name)
    try:
        if path.is_file():
            return ExperimentConfig.load(path)
        res = resources.files("zno") / "configs" / f"{name}.json"
        if res.is_file():
            with resources.as_file(res) as p:
                return ExperimentConfig.load(p)
    except ConfigError as e:
        raise CliUsageError(f"{name}: {e}") from None
    raise CliUsageError(f"config {name!r} not found (packaged: {', '.join(packaged_configs())})")


def parse_seeds(text: str) -> list[int]:
    """``0..4`` (inclusive), ``0,2,5`` or a single integer."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CliUsageError(f"cannot parse seeds {text!r}") from None


def parse_bins(text: str) -> list[int]:
    n = len(datagen.difficulty_bins())
    if text == "all":
        return list(range(n))
    bins = parse_seeds(text)
    if any(not 0 <= b < n for b in bins):
        raise CliUsageError(f"bins must lie in 0..{n - 1}")
    return bins


def parse_lengths(text: str, train_T: int) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        try:
            out.append(int(float(part[:-1]) * train_T) if part.endswith("x") else int(part))
        except ValueError:
            raise CliUsageError(f"cannot parse length {part!r}") from None
    return out


def _out(args) -> Path:
    return Path(args.out) if args.out else output_root()


def _checkpoint(path):
    if not path or not Path(path).is_file():
        raise CliUsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except ConfigError as e:
        raise CliUsageError(str(e)) from None


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    model_kw = {}
    if getattr(args, "pole_mode", None):
        model_kw["pole_mode"] = PoleMode(args.pole_mode)
    if getattr(args, "backward_mode", None):
        model_kw["backward_mode"] = BackwardMode(args.backward_mode)
    if model_kw:
        cfg = cfg.with_overrides(**model_kw)
        if cfg.model.pole_mode is PoleMode.SPlaneIso and not cfg.tag.endswith("-siso"):
            cfg = replace(cfg, tag=cfg.tag + "-siso")
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, optim=replace(cfg.optim, epochs=args.epochs))
    if getattr(args, "data", None):
        cfg = replace(cfg, data=replace(cfg.data, path=args.data))
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    fam = datagen.Family(args.task)
    if args.bin is not None and fam is not datagen.Family.ResonantArma:
        raise CliUsageError("--bin applies to the arma task only")
    if args.bin is not None and not 0 <= args.bin < len(datagen.difficulty_bins()):
        raise CliUsageError(f"--bin must lie in 0..{len(datagen.difficulty_bins()) - 1}")
    if fam is datagen.Family.ResonantArma:
        spec = datagen.arma_spec(args.n, args.T, seed=args.seed, bin=args.bin)
    else:
        spec = datagen.TaskSpec(fam, n_traj=args.n, T=args.T, seed=args.seed)
    batch = datagen.generate(spec)
    suffix = f"_bin{args.bin}" if args.bin is not None else ""
    path = _out(args) / f"{fam.value}{suffix}_n{args.n}_T{args.T}_s{args.seed}.zds"
    data_path, meta_path = save_dataset(path, batch, {"task_spec": spec.to_dict()})
    print(f"task={fam.value} d_u={batch.d_u} d_y={batch.d_y} rho_range={tuple(spec.rho_range)}")
    print(f"data: {data_path}")
    print(f"meta: {meta_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(resolve_config(args.config), args)
    print(f"config={cfg.tag} params={count_params(cfg.model)}")
    rec = run_one(cfg, args.seed, out_dir=_out(args))
    run_dir = _out(args) / cfg.tag / str(args.seed)
    if rec.divergent:
        print(f"DIVERGED: {rec.divergence_reason}; record: {run_dir / 'record.json'}")
        return EXIT_DIVERGED
    print(f"best_val_epoch={rec.best_val_epoch} val_rel_l2={rec.best_val:.6g} "
          f"test_rel_l2={rec.test_rel_l2:.6g} wall_clock_s={rec.wall_clock_s:.1f}")
    print(f"record: {run_dir / 'record.json'}")
    return 0


def cmd_eval(args) -> int:
    model, extra = _checkpoint(args.checkpoint)
    cfg = _apply_overrides(resolve_config(args.config), args)
    _, _, test = cfg.data.load()
    score = evalkit.evaluate(model, test)
    rows = [{"task": cfg.task, "model_tag": cfg.tag, "protocol": cfg.protocol,
             "seed": extra.get("seed", ""), "params": len(model), "test_rel_l2": score,
             "zero_predictor": evalkit.baseline_zero(test)}]
    path = write_csv(_out(args) / cfg.tag / "eval.csv", rows, list(rows[0]))
    print(f"test_rel_l2={score:.6g}  ({path})")
    return 0


def cmd_extrapolate(args) -> int:
    model, extra = _checkpoint(args.checkpoint)
    cfg = resolve_config(args.config)
    spec = evalkit.ExtrapSpec(cfg.data.T, parse_lengths(args.lengths, cfg.data.T))
    task = cfg.data.task_spec(n_traj=cfg.data.n_test)
    rows = evalkit.extrapolate(model, task, spec)
    full = [{"task": cfg.task, "model_tag": cfg.tag, "protocol": cfg.protocol,
             "seed": extra.get("seed", ""), "params": len(model), **r} for r in rows]
    path = write_csv(_out(args) / cfg.tag / "extrapolation.csv", full, evalkit.EXTRAP_COLUMNS)
    for r in rows:
        print(f"T={r['eval_T']:>6d}  rel_l2={r['test_rel_l2']:.6g}  ratio={r['ratio']:.4f}")
    print(f"table: {path}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(resolve_config(args.config), args)
    rows = evalkit.difficulty_sweep(cfg, parse_bins(args.bins), parse_seeds(args.seeds),
                                    out_dir=_out(args), jobs=args.jobs)
    for r in rows:
        print(f"bin {r['bin']} rho=[{r['rho_low']}, {r['rho_high']}]  "
              f"mean={r['mean']:.4f} std={r['std']:.4f} (n={r['n_seeds']})")
    print(f"table: {_out(args) / cfg.tag / 'sweep.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    g = np.random.default_rng(args.seed)
    rows, ok = [], True
    for i in range(args.n):
        mode = PoleMode.SPlaneIso if args.pole_mode == "s-iso" else PoleMode.ZPlane
        cfg = oracle.random_tiny_config(g, mode, args.backward_mode or "save_history")
        err = oracle.objective_gradcheck(cfg, seed=args.seed + i, T=args.T, B=args.B,
                                         step=args.step, order=args.order)
        passed = err < args.tol
        ok &= passed
        rows.append({"case": i, "w": cfg.w, "K": cfg.K, "F": cfg.F, "max_rel_err": err, "passed": passed})
        print(f"{'PASS' if passed else 'FAIL'} case {i} (w={cfg.w} K={cfg.K} F={cfg.F}) max rel err {err:.3e}")
    if args.out:
        write_csv(Path(args.out) / "gradcheck.csv", rows, list(rows[0]))
    return 0 if ok else EXIT_CHECK_FAILED


def cmd_oracle(args) -> int:
    g = np.random.default_rng(args.seed)
    rows, ok = [], True
    for i in range(args.n):
        w, r = int(g.integers(2, 7)), int(g.integers(1, 4))
        K, F = int(g.integers(1, 9)), int(g.integers(0, 4))
        _, params, _ = new_layer(w, r, K, F, seed=int(g.integers(1 << 31)))
        h = g.normal(size=(2, args.T, w))
        conv_err = float(np.abs(layer_forward(h, params)[0] - oracle.conv_oracle(params, h)).max())
        fft = oracle.fft_oracle(params, args.T)
        passed = conv_err < 1e-10 and fft.passed
        ok &= passed
        rows.append({"case": i, "w": w, "r": r, "K": K, "F": F, "conv_max_abs": conv_err,
                     "fft_max_err": fft.max_err, "fft_tail_bound": fft.tail_bound, "passed": passed})
        print(f"{'PASS' if passed else 'FAIL'} layer {i} (w={w} r={r} K={K} F={F}) "
              f"conv {conv_err:.2e}  fft {fft.max_err:.2e} <= {fft.tail_bound:.2e} + {fft.atol:.0e}")
    if args.out:
        write_csv(Path(args.out) / "oracle.csv", rows, list(rows[0]))
    return 0 if ok else EXIT_CHECK_FAILED


def cmd_polemap(args) -> int:
    model, _ = _checkpoint(args.checkpoint)
    path = write_pole_csv(_out(args) / "polemap.csv", model)
    print(f"{sum(1 for _ in open(path)) - 1} poles, max |p| = {model.max_pole_modulus():.6f}: {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="zno", description="Z-domain neural operator experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--out", help="output directory (default: $ZNO_OUT or ./runs)")
        return p

    def modes(p):
        p.add_argument("--pole-mode", choices=[m.value for m in PoleMode])
        p.add_argument("--backward-mode", choices=[m.value for m in BackwardMode])

    p = add("generate", cmd_generate, "write a synthetic dataset")
    p.add_argument("--task", required=True, choices=[f.value for f in datagen.Family])
    p.add_argument("--bin", type=int)
    p.add_argument("--n", type=int, default=1536)
    p.add_argument("--T", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train, "train one seed of a config")
    p.add_argument("--config", required=True, help="JSON file or packaged profile name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--data", help="dataset file overriding the config's synthetic data")
    modes(p)

    p = add("eval", cmd_eval, "evaluate a checkpoint on its config's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data")

    p = add("extrapolate", cmd_extrapolate, "evaluate a checkpoint at longer horizons")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--lengths", default="2x,4x", help="comma list of lengths, or multiples like 4x")

    p = add("sweep", cmd_sweep, "pole-radius difficulty sweep on the arma task")
    p.add_argument("--config", required=True)
    p.add_argument("--bins", default="all")
    p.add_argument("--seeds", default="0..4")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--epochs", type=int)
    modes(p)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the full objective")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=16)
    p.add_argument("--B", type=int, default=2)
    p.add_argument("--step", type=float, default=4e-3)
    p.add_argument("--order", type=int, default=6, choices=[2, 4, 6])
    p.add_argument("--tol", type=float, default=1e-6)
    modes(p)

    p = add("oracle", cmd_oracle, "compare the layer against the convolution and DFT oracles")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--T", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)

    p = add("polemap", cmd_polemap, "export learned poles to CSV")
    p.add_argument("--checkpoint", required=True)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CliUsageError, ConfigError) as e:
        print(f"zno {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
