"""Command-line interface: ``lhsp <command> [flags]``.

Every command also accepts ``--config FILE`` (UTF-8 ``key = value`` lines,
``#`` comments; command-line flags win) and ``--dump-config``, which prints
the effective settings in the same format and exits. ``LHSP_THREADS`` caps
the BLAS thread count when set before the first numpy import.
"""

from __future__ import annotations

import os

if os.environ.get("LHSP_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["LHSP_THREADS"])

import argparse  # noqa: E402
import hashlib  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import corpus, data, imaging, lsp, metrics, network, serialization, training  # noqa: E402

BENCHMARK_ENV = "LHSP_BENCHMARKS"
_INTERNAL = {"command", "config", "dump_config", "handler"}


class CliError(Exception):
    pass


# --- config files ------------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror}") from exc
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise CliError(f"not a boolean: {text!r}")


def _convert(action: argparse.Action, text: str):
    if text == "":
        return None
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        return _parse_bool(text)
    conv = action.type or str
    try:
        if action.nargs in ("+", "*"):
            return [conv(t) for t in text.split()]
        value = conv(text)
    except (TypeError, ValueError) as exc:
        raise CliError(f"config key {action.dest}: bad value {text!r}") from exc
    if action.choices is not None and value not in action.choices:
        raise CliError(f"config key {action.dest}: {value!r} not one of {list(action.choices)}")
    return value


def _settable(sub: argparse.ArgumentParser) -> dict[str, argparse.Action]:
    return {a.dest: a for a in sub._actions
            if a.dest not in _INTERNAL and a.dest != "help"}


def dump_config(args: argparse.Namespace, sub: argparse.ArgumentParser) -> str:
    lines = [f"# lhsp {args.command}"]
    for dest in _settable(sub):
        v = getattr(args, dest)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif v is None:
            v = ""
        elif isinstance(v, list):
            v = " ".join(str(x) for x in v)
        lines.append(f"{dest} = {v}".rstrip())
    return "\n".join(lines) + "\n"


# --- helpers -------------------------------------------------------------------------


def _info(msg: str) -> None:
    print(msg, flush=True)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_test_set(test_dir, name):
    """Image paths for ``eval``: an explicit directory, the bundled held-out
    images, or ``$LHSP_BENCHMARKS/<name>``."""
    if test_dir:
        return metrics.list_images(test_dir), name or Path(test_dir).name
    if name is None:
        raise CliError("give a test directory or --set")
    if name == "bundled":
        return corpus.bundled_images("validation"), name
    root = os.environ.get(BENCHMARK_ENV)
    if not root:
        raise CliError(f"test set {name!r} needs a directory argument or ${BENCHMARK_ENV}")
    path = Path(root) / name
    if not path.is_dir():
        raise CliError(f"test set {name!r} not found at {path}")
    return metrics.list_images(path), name


def load_kernel(path):
    scale, tensors, extra = serialization.read_blob(path)
    if "lsp.deconv.kernel" not in tensors:
        raise CliError(f"{path}: no deconvolution kernel inside")
    return scale, tensors["lsp.deconv.kernel"]


def kernel_model(path, lam: float = 0.0) -> network.Model:
    """A pure interpolator around a fitted kernel: no features, identity head."""
    scale, kernel = load_kernel(path)
    config = network.NetConfig(scale=scale, deconv_size=kernel.shape[2], use_conv1=False,
                               boundary_head=False, hsp_size=1, lam=lam)
    model = network.init_model(config)
    model.lsp.deconv.kernel[...] = kernel
    return model


def _upscaler(args):
    """``(upscale(lr, scale) -> hr, method label)`` for eval and sr."""
    method = args.method if hasattr(args, "method") else None
    if getattr(args, "baseline", None):
        method = args.baseline
    if getattr(args, "fixed_kernel", None):
        model = kernel_model(args.fixed_kernel)
        return (lambda lr, s: network.predict(model, lr, s)[0]), "kernel", model
    if method in ("bicubic", "bilinear"):
        return metrics.classical_upscaler(method), method, None
    if method == "oracle":
        return None, "oracle", None
    if not getattr(args, "model", None):
        raise CliError("--model is required unless a baseline or --fixed-kernel is given")
    model, _ = serialization.load_model(args.model)
    return (lambda lr, s: network.predict(model, lr, s)[0]), "model", model


# --- commands -------------------------------------------------------------------


def cmd_corpus(args) -> int:
    root = corpus.write_corpus(args.out, args.split)
    n = len(list((root / "hr").iterdir()))
    _info(f"wrote {n} images to {root / 'hr'}")
    return 0


def cmd_prepare(args) -> int:
    if not Path(args.corpus).is_dir():
        raise CliError(f"corpus directory not found: {args.corpus}")
    manifest = data.DatasetManifest(
        scale=args.scale, patch_size=args.patch, stride=args.stride, blur=args.blur,
        blur_sigma=args.blur_sigma, blur_radius=args.blur_radius, quantize=not args.no_quantize,
        max_triplets=args.max_triplets, seed=args.seed,
    )
    data.build_dataset(args.corpus, args.out, manifest)
    _info(manifest.summary())
    _info(f"sha256 {_sha256(args.out)}  {args.out}")
    return 0


def _train_config(args, scale: int) -> training.TrainConfig:
    return training.TrainConfig(
        scale=scale, batch_size=args.batch_size, learning_rate=args.lr,
        max_iterations=args.iters, alpha=args.alpha, lam=args.lam, max_disp=args.max_disp,
        disp_sigma=args.disp_sigma, eval_every=args.eval_every, seed=args.seed,
        checkpoint=args.out, checkpoint_every=args.checkpoint_every, init=args.init,
        freeze_boundary=args.freeze_boundary, single_task=args.single_task,
        reduction=args.reduction, features=args.features, conv1_size=args.conv1_size,
        deconv_size=args.deconv_size, hsp_size=args.hsp_size, use_conv1=not args.no_conv1,
    )


def _load_training_inputs(args):
    ds = data.load_dataset(args.dataset)
    if args.toy:
        ds = ds.subset(1000, args.seed)
    val = None
    if args.val:
        paths, _ = resolve_test_set(None if args.val == "bundled" else args.val,
                                    "bundled" if args.val == "bundled" else None)
        val = training.validation_pairs(paths, ds.scale)
    return ds, val


def _progress(every: int):
    def show(row):
        if row.val_psnr is not None:
            _info(f"iter {row.iteration:7d}  loss {row.loss:.6g}  "
                  f"val psnr {row.val_psnr:.3f}  ssim {row.val_ssim:.4f}")
        elif every and row.iteration % every == 0:
            _info(f"iter {row.iteration:7d}  loss {row.loss:.6g}")
    return show


def _write_log(path, log: training.TrainLog) -> None:
    serialization.atomic_write(path, log.to_csv().encode("utf-8"))


def cmd_train(args) -> int:
    ds, val = _load_training_inputs(args)
    log_path = args.log or f"{args.out}.log.csv"
    try:
        if args.resume:
            model, log = training.resume(args.resume, ds, val, args.iters, _progress(args.print_every),
                                         checkpoint=args.out)
        else:
            config = _train_config(args, ds.scale)
            if args.range_test:
                rt = training.lr_range_test(ds, config)
                _info(rt.report())
                config.learning_rate = rt.suggested
            t0 = time.perf_counter()
            model, log = training.train(ds, config, val, progress=_progress(args.print_every),
                                        time_budget=args.time_budget)
            _info(f"trained {log.rows[-1].iteration if log.rows else 0} iterations "
                  f"in {time.perf_counter() - t0:.1f} s")
    except training.TrainingError as exc:
        if exc.log is not None:
            _write_log(log_path, exc.log)
        raise
    _write_log(log_path, log)
    _info(f"checkpoint {args.out}\nlog {log_path}")
    return 0


def cmd_ablate(args) -> int:
    ds, val = _load_training_inputs(args)
    config = _train_config(args, ds.scale)
    result = training.ablate_hsp(ds, config, val, _progress(args.print_every))
    prefix = args.out
    _write_log(f"{prefix}.hsp.csv", result.with_hsp)
    _write_log(f"{prefix}.single.csv", result.without_hsp)
    report = result.report()
    serialization.atomic_write(f"{prefix}.report.txt", report.encode("utf-8"))
    _info(report)
    return 0


def cmd_sr(args) -> int:
    img = imaging.load_image(args.input)
    upscale, label, model = _upscaler(args)
    if upscale is None:
        raise CliError("the oracle method needs ground truth; use eval")
    scale = args.scale or (model.config.scale if model is not None else None)
    if scale is None:
        raise CliError("--scale is required for classical baselines")
    if model is not None and scale != model.config.scale:
        raise CliError(f"model is for scale {model.config.scale}, asked for {scale}")
    boundary = None
    if label == "model":
        hr, boundary = network.predict(model, img.y, scale)
    else:
        hr = np.clip(upscale(img.y, scale), 0.0, 1.0)
    if img.is_color:
        cb = imaging.classical_upscale(img.cb, scale, "bicubic")
        cr = imaging.classical_upscale(img.cr, scale, "bicubic")
        imaging.save_image(args.out, hr, cb, cr)
    else:
        imaging.save_image(args.out, hr)
    if args.emit_boundary:
        if boundary is None:
            raise CliError("--emit-boundary needs a model with a boundary head")
        peak = boundary.max()
        imaging.save_image(args.emit_boundary, np.clip(boundary / peak if peak > 0 else boundary, 0, 1))
    _info(f"{args.input} -> {args.out} ({hr.shape[1]}x{hr.shape[0]}, {label})")
    return 0


def cmd_eval(args) -> int:
    paths, name = resolve_test_set(args.test_dir, args.set)
    upscale, label, model = _upscaler(args)
    report = metrics.EvalReport()
    for s in args.scale:
        if model is not None and s != model.config.scale:
            raise CliError(f"model is for scale {model.config.scale}, asked for {s}")
        report.extend(metrics.evaluate_method(
            paths, upscale, s, label, args.border, quantize=not args.no_quantize, luma=args.luma,
            blur_sigma=args.blur_sigma))
    if args.csv:
        serialization.atomic_write(args.csv, report.to_csv().encode("utf-8"))
    _info(report.table(name))
    return 0


def cmd_kernelfit(args) -> int:
    paths = metrics.list_images(args.corpus)
    if not paths:
        raise CliError(f"no images in {args.corpus}")
    s = args.scale
    pairs = []
    for p in paths:
        hr = imaging.quantize(imaging.load_image(p).y)
        if args.crop:
            h, w = hr.shape
            c = min(args.crop, h, w)
            hr = hr[(h - c) // 2 : (h - c) // 2 + c, (w - c) // 2 : (w - c) // 2 + c]
        hr = imaging.modcrop(hr, s)
        pairs.append((imaging.quantize(imaging.degrade(hr, s)), hr))
    t0 = time.perf_counter()
    fit = lsp.fit_interpolation_kernel(pairs, s, args.size, args.init, args.max_iter)
    elapsed = time.perf_counter() - t0
    params = lsp.LspParams(s, lsp.deconv_spec(fit.kernel, s))

    def score(up):
        outs = [imaging.quantize(np.clip(up(lr), 0, 1)) for lr, _ in pairs]
        return (np.mean([metrics.psnr(o, hr, s) for o, (_, hr) in zip(outs, pairs)]),
                np.mean([metrics.ssim(o, hr, s) for o, (_, hr) in zip(outs, pairs)]))

    bic = score(lambda lr: imaging.classical_upscale(lr, s, "bicubic"))
    learned = score(lambda lr: lsp.lsp_forward(lr[None, None], params)[0][0, 0])
    serialization.write_blob(args.out, s, {"lsp.deconv.kernel": fit.kernel},
                             {"kind": "interpolation-kernel", "iterations": fit.iterations,
                              "loss": fit.loss})
    lines = [
        f"kernel fit: {len(pairs)} images, scale {s}, {fit.kernel.shape[2]}x{fit.kernel.shape[3]} taps, "
        f"{fit.iterations} iterations, {elapsed:.1f} s",
        f"{'method':<10}{'PSNR':>9}{'SSIM':>9}",
        f"{'bicubic':<10}{bic[0]:9.3f}{bic[1]:9.4f}",
        f"{'learned':<10}{learned[0]:9.3f}{learned[1]:9.4f}",
        f"difference {learned[0] - bic[0]:+.3f} dB",
    ]
    report = "\n".join(lines) + "\n"
    if args.report:
        serialization.atomic_write(args.report, report.encode("utf-8"))
    _info(report + f"kernel {args.out}")
    return 0


# --- parser ---------------------------------------------------------------------------


def _training_flags(p):
    p.add_argument("dataset", help="dataset file from 'prepare'")
    p.add_argument("--out", required=True, help="checkpoint path (or output prefix for ablate)")
    p.add_argument("--iters", type=int, default=1000, help="SGD iterations")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=training.TrainConfig.learning_rate,
                   help="learning rate")
    p.add_argument("--range-test", action="store_true",
                   help="pick the learning rate with the built-in range test")
    p.add_argument("--alpha", type=float, default=0.1, help="boundary target weight")
    p.add_argument("--lambda", dest="lam", type=float, default=training.TrainConfig.lam,
                   help="pixel placement strength (0 disables placement)")
    p.add_argument("--max-disp", type=float, default=None,
                   help="displacement bound in HR cells (default 0.45*scale)")
    p.add_argument("--disp-sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=["interpolation-identity", "random"],
                   default="interpolation-identity")
    p.add_argument("--freeze-boundary", action="store_true",
                   help="hold the boundary head at zero")
    p.add_argument("--single-task", action="store_true", help="train without a boundary head")
    p.add_argument("--reduction", choices=["mean", "sum"], default="mean")
    p.add_argument("--features", type=int, default=32)
    p.add_argument("--conv1-size", type=int, default=5)
    p.add_argument("--deconv-size", type=int, default=None)
    p.add_argument("--hsp-size", type=int, default=5)
    p.add_argument("--no-conv1", action="store_true", help="place the LR image directly")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--val", default=None,
                   help="validation images: a directory or 'bundled'")
    p.add_argument("--toy", action="store_true", help="train on 1000 triplets only")
    p.add_argument("--print-every", type=int, default=100)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="lhsp", description="Structure-preserving image super-resolution.")
    subs = parser.add_subparsers(dest="command", required=True, metavar="command")
    table = {}

    def add(name, handler, help_text):
        p = subs.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value settings file (flags override it)")
        p.add_argument("--dump-config", action="store_true", help="print effective settings and exit")
        p.set_defaults(handler=handler)
        table[name] = p
        return p

    p = add("corpus", cmd_corpus, "write the bundled sample photographs as a corpus directory")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "validation"], default="train")

    p = add("prepare", cmd_prepare, "build a training dataset from a corpus directory")
    p.add_argument("corpus", help="directory with hr/ and optional boundary/")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, choices=[2, 3, 4], default=2)
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--stride", type=int, default=12)
    p.add_argument("--blur", choices=list(data.BLUR_MODES), default="none")
    p.add_argument("--blur-sigma", type=float, default=None)
    p.add_argument("--blur-radius", type=int, default=None)
    p.add_argument("--max-triplets", type=int, default=None)
    p.add_argument("--no-quantize", action="store_true", help="keep LR/HR patches unquantized")
    p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train, "train the network")
    _training_flags(p)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--time-budget", type=float, default=None, help="stop after this many seconds")
    p.add_argument("--log", default=None, help="training log CSV (default <out>.log.csv)")

    p = add("ablate", cmd_ablate, "train with and without the boundary objective")
    _training_flags(p)
    p.add_argument("--checkpoint-every", type=int, default=1000)

    p = add("sr", cmd_sr, "super-resolve one image")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--model", default=None)
    p.add_argument("--baseline", choices=["bicubic", "bilinear"], default=None)
    p.add_argument("--fixed-kernel", default=None, help="kernel file from 'kernelfit'")
    p.add_argument("--scale", type=int, choices=[2, 3, 4], default=None)
    p.add_argument("--emit-boundary", default=None, help="write the boundary head to this image")

    p = add("eval", cmd_eval, "PSNR/SSIM of a method on a test set")
    p.add_argument("test_dir", nargs="?", default=None)
    p.add_argument("--set", default=None,
                   help="test set label; 'bundled' or a subdirectory of $" + BENCHMARK_ENV)
    p.add_argument("--method", choices=["bicubic", "bilinear", "oracle", "model"], default="bicubic")
    p.add_argument("--model", default=None)
    p.add_argument("--fixed-kernel", default=None)
    p.add_argument("--scale", type=int, nargs="+", choices=[2, 3, 4], default=[2])
    p.add_argument("--border", type=int, default=None, help="crop (default: scale)")
    p.add_argument("--luma", choices=["full", "studio"], default="full")
    p.add_argument("--blur-sigma", type=float, default=0.0)
    p.add_argument("--no-quantize", action="store_true")
    p.add_argument("--csv", default=None)

    p = add("kernelfit", cmd_kernelfit, "fit a single interpolation kernel and compare with bicubic")
    p.add_argument("corpus", help="image directory (or corpus with hr/)")
    p.add_argument("--out", required=True, help="kernel file")
    p.add_argument("--scale", type=int, choices=[2, 3, 4], default=2)
    p.add_argument("--size", type=int, default=None, help="kernel side (default 4*scale+1)")
    p.add_argument("--init", choices=["bilinear", "bicubic"], default="bilinear")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--crop", type=int, default=192, help="centre crop per image (0 = whole)")
    p.add_argument("--report", default=None)
    return parser, table


def parse(argv):
    """Parse ``argv``, with values from ``--config`` applied as defaults first."""
    parser, table = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command in table:
        sub = table[known.command]
        settable = _settable(sub)
        overrides = {}
        for key, text in read_config_file(known.config).items():
            if key not in settable:
                raise CliError(f"{known.config}: unknown key {key!r} for {known.command}")
            overrides[key] = _convert(settable[key], text)
        sub.set_defaults(**overrides)
        for a in sub._actions:
            if a.dest in overrides and overrides[a.dest] is not None:
                a.required = False
                if not a.option_strings and a.nargs is None:
                    a.nargs = "?"  # positional supplied by the file
    args = parser.parse_args(argv)
    return args, table[args.command]


def main(argv=None) -> int:
    try:
        args, sub = parse(sys.argv[1:] if argv is None else argv)
        if args.dump_config:
            sys.stdout.write(dump_config(args, sub))
            return 0
        return args.handler(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except KeyboardInterrupt:
        print("lhsp: interrupted", file=sys.stderr)
        return 130
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"lhsp: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
