"""``dlnet`` command line: gen, degrade, train, eval, restore, selftest.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O
failure.  Errors are reported as one ``key=value`` line on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data
from . import degrade as dg
from . import metrics
from . import net as netmod
from . import refine
from . import train as tr

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("dlnet")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "data": {"source": "synthetic", "n": "2000", "size": "32", "seed": "1", "dir": "", "val_testset": ""},
    "net": {"arch": "autoencoder", "base_ch": "8", "depth": "6", "ch": "16", "seed": "0",
            "zero_head": "false"},
    "degrade": {"task": "inpaint", "s_min": "1", "s_max": "30", "max_shift": "10", "r_min": "0",
                "r_max": "0.75", "u_min": "0", "u_max": "3", "t": "1", "sigma": "0", "ref_spec": ""},
    "train": {"name": "", "runs_dir": "runs", "strategy": "joint", "lam": "1.0", "lr": "1e-3",
              "weight_decay": "1e-4", "batch": "25", "epochs": "10", "lr_drop_every": "0",
              "lr_drop_factor": "10", "clip_norm": "0", "seed": "0", "save_every": "0"},
    "dlnet": {"k": "5", "gamma": "1e-3", "beta1": "0.9", "beta2": "0.999", "eps": "1e-8",
              "bias_correction": refine.CONSTANT_CORRECTION},
    "eval": {"testset": "", "batch": "100", "grid": "8"},
}


# ---------------------------------------------------------------------------
# configuration

def load_config(path: str | None, overrides: list[str] = ()) -> configparser.ConfigParser:
    """Defaults, then the INI file, then ``section.key=value`` overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                user = configparser.ConfigParser(interpolation=None)
                user.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in user.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in user.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                cp.set(section, key, value)
    for item in overrides:
        try:
            lhs, value = item.split("=", 1)
            section, key = lhs.split(".", 1)
        except ValueError:
            raise ConfigError(f"override {item!r} is not section.key=value") from None
        key = key.lower()
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown override {lhs!r}")
        cp.set(section, key, value)
    return cp


def _get(cp, section, key, conv):
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}={raw!r}: {exc}") from None


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def inner_hyper(cp) -> refine.InnerHyper:
    try:
        return refine.InnerHyper(
            K=_get(cp, "dlnet", "k", int), gamma=_get(cp, "dlnet", "gamma", float),
            beta1=_get(cp, "dlnet", "beta1", float), beta2=_get(cp, "dlnet", "beta2", float),
            eps=_get(cp, "dlnet", "eps", float), bias_correction=cp.get("dlnet", "bias_correction"),
        )
    except ValueError as exc:
        raise ConfigError(f"[dlnet] {exc}") from None


def spec_ranges(cp) -> dg.SpecRanges:
    return dg.SpecRanges(
        s_min=_get(cp, "degrade", "s_min", int), s_max=_get(cp, "degrade", "s_max", int),
        max_shift=_get(cp, "degrade", "max_shift", int),
        r_min=_get(cp, "degrade", "r_min", float), r_max=_get(cp, "degrade", "r_max", float),
        u_min=_get(cp, "degrade", "u_min", float), u_max=_get(cp, "degrade", "u_max", float),
        t=_get(cp, "degrade", "t", int), sigma=_get(cp, "degrade", "sigma", float),
    )


def train_cfg(cp) -> tr.TrainCfg:
    def opt(section, key, conv):
        v = _get(cp, section, key, conv)
        return v or None

    try:
        return tr.TrainCfg(
            strategy=cp.get("train", "strategy"), task=cp.get("degrade", "task"),
            lam=_get(cp, "train", "lam", float), hyper=inner_hyper(cp), ranges=spec_ranges(cp),
            ref_spec=cp.get("degrade", "ref_spec") or None,
            lr=_get(cp, "train", "lr", float), weight_decay=_get(cp, "train", "weight_decay", float),
            batch=_get(cp, "train", "batch", int), epochs=_get(cp, "train", "epochs", int),
            lr_drop_every=opt("train", "lr_drop_every", int),
            lr_drop_factor=_get(cp, "train", "lr_drop_factor", float),
            clip_norm=opt("train", "clip_norm", float), seed=_get(cp, "train", "seed", int),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def arch_from(cp, size: int) -> dict:
    kind = cp.get("net", "arch")
    seed = _get(cp, "net", "seed", int)
    if kind == "autoencoder":
        if size < 16 or size & (size - 1):
            raise ConfigError(f"autoencoder needs a power-of-two image side >= 16, got {size}")
        return {"type": kind, "img": size, "base_ch": _get(cp, "net", "base_ch", int), "seed": seed}
    if kind == "sisr":
        depth = _get(cp, "net", "depth", int)
        if depth < 3:
            raise ConfigError(f"[net] depth must be >= 3, got {depth}")
        return {"type": kind, "depth": depth, "ch": _get(cp, "net", "ch", int), "seed": seed,
                "zero_head": _get(cp, "net", "zero_head", _bool)}
    raise ConfigError(f"[net] unknown arch {kind!r}")


def validate(cp) -> tuple[tr.TrainCfg, dict]:
    """Check every setting before any work starts."""
    cfg = train_cfg(cp)
    source = cp.get("data", "source")
    if source == "synthetic":
        size = _get(cp, "data", "size", int)
        if size not in (16, 32, 64):
            raise ConfigError(f"[data] size must be 16, 32 or 64, got {size}")
        if _get(cp, "data", "n", int) < 1:
            raise ConfigError("[data] n must be >= 1")
    elif source == "dir":
        if not cp.get("data", "dir"):
            raise ConfigError("[data] source=dir needs dir")
        size = 0
    else:
        raise ConfigError(f"[data] unknown source {source!r}")
    if size:
        try:
            cfg.ranges.check((size, size), cfg.task)
        except dg.SpecError as exc:
            raise ConfigError(f"[degrade] {exc}") from None
        if cfg.ref_spec:
            dg.parse_spec(cfg.ref_spec)
    arch = arch_from(cp, size) if size else {}
    for key in ("batch", "grid"):
        if _get(cp, "eval", key, int) < 1:
            raise ConfigError(f"[eval] {key} must be >= 1")
    return cfg, arch


def echo_config(cp, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        cp.write(fh)


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    ds = data.gen_synthetic(args.n, args.size, args.seed)
    ds.source.update(type="synthetic", n=args.n, size=args.size, seed=args.seed)
    out = data.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} images to {out}")
    return EXIT_OK


def _spec_for(args, shape, seed) -> dg.DegradationSpec:
    if args.spec:
        sp = dg.parse_spec(args.spec)
        if sp.shape != shape:
            raise ConfigError(f"spec shape {sp.shape} does not match image shape {shape}")
        return sp
    if args.task == dg.INPAINT:
        if args.s is None:
            raise ConfigError("inpaint needs --s")
        off = tuple(int(v) for v in args.offset.split(","))
        return dg.DegradationSpec(dg.INPAINT, shape, {"s": args.s, "offset": off}, seed=seed)
    if args.task == dg.INTERPOLATE:
        if args.r is None:
            raise ConfigError("interpolate needs --r")
        return dg.DegradationSpec(dg.INTERPOLATE, shape, {"r": args.r}, seed=seed)
    if args.task == dg.BLUR_DOWNSAMPLE:
        if args.u is None:
            raise ConfigError("blur_downsample needs --u")
        return dg.DegradationSpec(dg.BLUR_DOWNSAMPLE, shape, {"u": args.u}, t=args.t, sigma=args.sigma, seed=seed)
    raise ConfigError("give --task or --spec")


def cmd_degrade(args) -> int:
    src = Path(args.inp)
    files = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not files:
        raise FileNotFoundError(f"no PNG files in {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, f in enumerate(files):
        x = data.load_png(f)
        seed = args.seed + i if args.task == dg.INTERPOLATE or args.sigma > 0 else args.seed
        sp = _spec_for(args, x.shape[1:], seed)
        y = dg.apply_degradation(x[None], sp).data[0]
        name = f"{f.stem}_deg.png"
        data.save_png(np.clip(y, -1.0, 1.0), out / name)
        lines.append(f"file={name} source={f.name} {dg.serialize_spec(sp)}")
    (out / "specs.txt").write_text("\n".join(lines) + "\n")
    print(f"degraded {len(files)} images into {out}")
    return EXIT_OK


def _run_dir(cp, config_path, strategy) -> Path:
    name = cp.get("train", "name") or (Path(config_path).stem if config_path else strategy)
    return Path(cp.get("train", "runs_dir")) / name


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.strategy:
        overrides.append(f"train.strategy={args.strategy}")
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.name:
        overrides.append(f"train.name={args.name}")
    if args.runs_dir:
        overrides.append(f"train.runs_dir={args.runs_dir}")
    cp = load_config(args.config, overrides)
    cfg, arch = validate(cp)
    run = _run_dir(cp, args.config, cfg.strategy)
    echo_config(cp, run / "config.echo")

    if cp.get("data", "source") == "synthetic":
        ds = data.gen_synthetic(_get(cp, "data", "n", int), _get(cp, "data", "size", int),
                                _get(cp, "data", "seed", int))
    else:
        ds = data.load_dir(cp.get("data", "dir"))
        arch = arch_from(cp, ds.shape[0])
        cfg.ranges.check(ds.shape, cfg.task)
    arch["in_ch"] = int(ds.images.shape[1])

    if args.resume:
        net, _ = netmod.load_checkpoint(args.resume)
        log.info("initialised from %s", args.resume)
    else:
        net = netmod.build_from_arch(arch)
    val = None
    if cp.get("data", "val_testset"):
        val = _open_testset(cp.get("data", "val_testset"))

    csv_path = run / "logs" / "epochs.csv"
    logs: list[tr.EpochLog] = []
    save_every = _get(cp, "train", "save_every", int)

    def on_epoch(entry):
        logs.append(entry)
        tr.write_epoch_csv(logs, csv_path)
        if save_every and entry.epoch % save_every == 0:
            netmod.save_checkpoint(net, run / "ckpt" / f"epoch_{entry.epoch:04d}.ckpt", _meta(cfg, entry.epoch))
        print(f"epoch {entry.epoch} loss {entry.train_loss:.6g}"
              + (f" val_psnr {entry.val_psnr:.3f}" if entry.val_psnr is not None else ""))

    tr.train(net, ds, cfg, val=val, record_time=args.record_time, on_epoch=on_epoch)
    tr.write_epoch_csv(logs, csv_path)
    ckpt = netmod.save_checkpoint(net, run / "ckpt" / "final.ckpt", _meta(cfg, cfg.epochs))
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def _meta(cfg: tr.TrainCfg, epoch: int) -> dict:
    return {"strategy": cfg.strategy, "task": cfg.task, "epoch": epoch, "seed": cfg.seed,
            "lam": cfg.lam, "inner": asdict(cfg.hyper)}


def _open_testset(path) -> data.TestSet:
    root = Path(path)
    if not (root / "manifest.txt").exists():
        subs = [d for d in root.iterdir() if (d / "manifest.txt").exists()] if root.is_dir() else []
        if len(subs) != 1:
            raise FileNotFoundError(f"no test manifest under {root}")
        root = subs[0]
    if (root / "pairs.npz").exists():
        return data.load_cached_testset(root)
    return data.load_testset(root)


def _hyper_for(meta: dict, K: int | None, gamma: float | None) -> refine.InnerHyper:
    base = dict(meta.get("inner") or {})
    if meta.get("strategy") != "dlnet":
        base["K"] = 0
    if K is not None:
        base["K"] = K
    if gamma is not None:
        base["gamma"] = gamma
    try:
        return refine.InnerHyper(**base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"inner settings: {exc}") from None


def _eval_dir(ckpt: Path, out) -> Path:
    if out:
        return Path(out)
    if ckpt.parent.name == "ckpt":
        return ckpt.parent.parent / "eval"
    return ckpt.parent / "eval"


def sample_grid(ts: data.TestSet, x_hat: np.ndarray, n: int) -> np.ndarray:
    """Rows of (network input | restored | ground truth), 2-pixel gutters."""
    n = min(n, len(ts))
    inp = ts.network_input(slice(0, n))
    c, h, w = ts.x.shape[1:]
    gap = 2
    grid = np.full((c, n * (h + gap) - gap, 3 * (w + gap) - gap), 1.0)
    for i in range(n):
        top = i * (h + gap)
        for j, img in enumerate((inp[i], x_hat[i], ts.x[i])):
            left = j * (w + gap)
            grid[:, top:top + h, left:left + w] = np.clip(img, -1.0, 1.0)
    return grid


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    net, meta = netmod.load_checkpoint(ckpt)
    hyper = _hyper_for(meta, args.K, args.gamma)
    ts = _open_testset(args.testset)
    if ts.x.shape[1:] != (net.layers[0].in_ch, *ts.x.shape[2:]):
        raise ConfigError(f"test images {ts.x.shape[1:]} do not fit the network input channels")
    out = _eval_dir(ckpt, args.out)
    strategy = "dlnet" if hyper.K > 0 else "reference"
    reports = {}
    for name, strat, hp in (("reference", "reference", refine.InnerHyper(K=0)), ("dlnet", strategy, hyper)):
        best = None
        for _ in range(args.repeats):
            rep = metrics.evaluate(net, ts, hp, strat, batch=args.batch)
            if best is None or rep.total.runtime_s < best.total.runtime_s:
                best = rep
        reports[name] = best
    main = reports["dlnet"]
    main.write_csv(out / "report.csv", timing=args.record_time)
    ref_t, dl_t = reports["reference"].total.runtime_s, main.total.runtime_s
    ratio = dl_t / ref_t if ref_t > 0 else float("inf")
    out.mkdir(parents=True, exist_ok=True)
    (out / "overhead.csv").write_text(
        "strategy,K,n,runtime_s,ratio\n"
        f"reference,0,{len(ts)},{ref_t:.6f},1.000000\n"
        f"dlnet,{hyper.K},{len(ts)},{dl_t:.6f},{ratio:.6f}\n"
    )
    with ad.no_grad():
        x_hat = tr.forward_output(net, ts.network_input(slice(0, args.grid)), ts.y[:args.grid],
                                  dg.BatchDegradation(ts.specs[:args.grid]), strategy, hyper, training=False)
    data.save_png(sample_grid(ts, x_hat.data, args.grid), out / "samples.png")
    print(f"psnr {main.total.psnr:.4f} l1 {main.total.l1:.6f} l2 {main.total.l2:.6f} "
          f"K {hyper.K} overhead {ratio:.3f}x -> {out}")
    return EXIT_OK


def cmd_restore(args) -> int:
    net, meta = netmod.load_checkpoint(args.checkpoint)
    hyper = _hyper_for(meta, args.K, args.gamma)
    img = data.load_png(args.image)[None]
    sp = dg.parse_spec(args.spec)
    if args.clean:
        if img.shape[2:] != sp.shape:
            raise ConfigError(f"image {img.shape[2:]} does not match spec shape {sp.shape}")
        y = dg.apply_degradation(img, sp).data
    else:
        y = img
        if y.shape[2:] != sp.obs_shape:
            raise ConfigError(f"observation {y.shape[2:]} does not match spec {sp.obs_shape}")
    y_in = tr.network_input(y, sp.t)
    strategy = "dlnet" if hyper.K > 0 else "reference"
    x_hat = tr.forward_output(net, y_in, y, sp, strategy, hyper, training=False)
    data.save_png(x_hat.data[0], args.out)
    print(f"restored {args.image} -> {args.out} (K={hyper.K})")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest

    return EXIT_OK if selftest.run() else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlnet", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic PNG dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    d = sub.add_parser("degrade", help="degrade a PNG or a directory of PNGs")
    d.add_argument("--task", choices=dg.KINDS)
    d.add_argument("--spec", help="serialized spec record (overrides --task and its parameters)")
    d.add_argument("--s", type=int)
    d.add_argument("--r", type=float)
    d.add_argument("--u", type=float)
    d.add_argument("--t", type=int, default=1)
    d.add_argument("--sigma", type=float, default=0.0)
    d.add_argument("--offset", default="0,0")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", help="train a network from an INI config")
    t.add_argument("--config")
    t.add_argument("--strategy", choices=tr.STRATEGIES)
    t.add_argument("--resume", help="checkpoint to initialise the weights from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--name")
    t.add_argument("--runs-dir")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.add_argument("--record-time", action="store_true", help="log wall-clock seconds per epoch")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a fixed test set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--testset", required=True)
    e.add_argument("--K", type=int)
    e.add_argument("--gamma", type=float)
    e.add_argument("--batch", type=int, default=100)
    e.add_argument("--grid", type=int, default=8)
    e.add_argument("--repeats", type=int, default=1, help="timing repeats; the fastest is kept")
    e.add_argument("--out")
    e.add_argument("--record-time", action="store_true", help="fill the runtime column of report.csv")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("restore", help="restore one degraded image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--spec", required=True)
    r.add_argument("--K", type=int)
    r.add_argument("--gamma", type=float)
    r.add_argument("--clean", action="store_true", help="the image is clean; degrade it with --spec first")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_restore)

    s = sub.add_parser("selftest", help="run the built-in oracle checks")
    s.set_defaults(func=cmd_selftest)
    return p


def _origin(exc: BaseException) -> str:
    tb = exc.__traceback__
    origin = "dlnet.cli"
    for frame, _ in traceback.walk_tb(tb):
        origin = frame.f_globals.get("__name__", origin)
    return origin


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ").replace('"', "'")
    print(f'dlnet: error code={code} kind={kind} origin={_origin(exc)} '
          f'type={type(exc).__name__} message="{msg}"', file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            return _fail(EXIT_CONFIG, "config", ConfigError("--threads must be >= 1"))
        from threadpoolctl import threadpool_limits

        threadpool_limits(args.threads)
    try:
        return args.func(args)
    except (tr.TrainingError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    except (ValueError, KeyError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
