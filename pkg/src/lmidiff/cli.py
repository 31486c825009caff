"""Command-line pipeline: gen-data, train, translate, segment, eval, verify, bench.

Every subcommand reads an optional ``--config`` file of ``key=value`` lines,
applies ``--set key=value`` overrides, and writes the fully resolved
configuration as ``config.txt`` next to its outputs, so that
``--config <out>/config.txt`` repeats the run exactly.

Exit codes: 0 success, 1 usage, 2 data/format/configuration, 3 numerical
divergence, 4 a verification suite failed.
"""

import argparse
import csv
import logging
import math
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from .errors import (ConfigurationError, DegenerateInputError, FormatError,
                     NumericalDivergenceError)
from .image import load_image, load_mask, save_image, save_mask
from .lmi import LMIConfig, lmi_map, set_threads
from .score_model import (ArchSpec, ScoreModel, TrainConfig, load_checkpoint, save_checkpoint,
                          train)
from .sde import NoiseSchedule, SamplerConfig, em_translate, sdedit_translate
from .seeding import derive_seed
from .segmetrics import evaluate, kmeans_assign, kmeans_fit
from .synth import gen_dataset, load_dataset

log = logging.getLogger("lmidiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_VERIFY_FAILED = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # data
    size: int = 32
    n_train: int = 64
    n_test: int = 16
    k_tissue: int = 5
    # lmi
    levels: int = 16
    radius: int = 3
    search_radius: int = 3
    value_only: bool = False
    # schedule
    sigma_min: float = 0.01
    sigma_max: float = 1.0
    # architecture
    width: int = 16
    depth: int = 2
    time_dim: int = 32
    sigma_data: float = 0.25
    # optimizer / training
    iterations: int = 5000
    batch_size: int = 16
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t_eps: float = 1e-3
    weighting: str = "sigma2"
    # sampler
    steps: int = 200
    t_start: float = 0.5
    # segmentation
    kmeans_k: int = 5
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-6

    def lmi(self):
        return LMIConfig(self.levels, self.radius, self.search_radius, self.value_only)

    def schedule(self):
        return NoiseSchedule(self.sigma_min, self.sigma_max)

    def arch(self):
        return ArchSpec(cond_channels=self.lmi().cond_channels, width=self.width, depth=self.depth,
                        time_dim=self.time_dim, sigma_data=self.sigma_data)

    def train_config(self):
        return TrainConfig(iterations=self.iterations, batch_size=self.batch_size, lr=self.lr,
                           beta1=self.beta1, beta2=self.beta2, eps=self.eps, t_eps=self.t_eps,
                           weighting=self.weighting, seed=derive_seed(self.seed, "train"))

    def sampler(self, guidance):
        return SamplerConfig(steps=self.steps, seed=derive_seed(self.seed, "sample"),
                             lmi=self.lmi(), guidance=guidance, t_start=self.t_start)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"

    def write(self, directory):
        Path(directory).mkdir(parents=True, exist_ok=True)
        (Path(directory) / "config.txt").write_text(self.to_text(), encoding="utf-8")


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, raw, where):
    if key not in _TYPES:
        raise ConfigurationError(f"{where}: unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        return kind(raw)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot read {key}={raw!r} as {kind.__name__}") from None


def parse_config_text(text, where="config"):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{where}:{n}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = _convert(key.strip(), value, f"{where}:{n}")
    return out


def resolve_config(path=None, overrides=()):
    """Defaults, then the config file, then ``--set`` overrides, in that order."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        values[key.strip()] = _convert(key.strip(), value, "--set")
    return values, RunConfig(**values)


# -- image directories ------------------------------------------------------

def _image_files(directory, suffix=".lmif"):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"input directory not found: {directory}")
    files = sorted(directory.glob(f"*{suffix}"))
    if not files:
        raise FileNotFoundError(f"no {suffix} files in {directory}")
    return files


def _require_dataset(root):
    if not (Path(root) / "manifest.txt").is_file():
        raise FileNotFoundError(f"{root} is not a dataset (manifest.txt missing); run gen-data first")
    return load_dataset(root)


def _test_names(ds):
    return [f"{i:04d}" for i in range(len(ds.source))]


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args, cfg, explicit):
    gen_dataset(args.out, seed=cfg.seed, n_train=cfg.n_train, n_test=cfg.n_test,
                size=cfg.size, k_tissue=cfg.k_tissue)
    cfg.write(args.out)
    print(f"dataset written to {args.out}")


def cmd_train(args, cfg, explicit):
    ds = _require_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lmi_cfg = cfg.lmi()
    train_cfg = cfg.train_config()
    if args.resume:
        ck = load_checkpoint(args.resume)
        cfg = _merge_checkpoint(cfg, explicit, ck)
        lmi_cfg, model, state = ck.lmi, ck.model, ck.state
        train_cfg = replace(ck.train or train_cfg, iterations=cfg.iterations)
    else:
        model = ScoreModel(cfg.arch(), cfg.schedule(), seed=derive_seed(cfg.seed, "init"))
        state = None
    state, losses = train(model, ds.train, train_cfg, lmi_cfg, state=state,
                          loss_log=out / "loss.csv")
    save_checkpoint(model, state, out / "model.lmck", lmi_cfg, train_cfg)
    cfg.write(out)
    last = f"{losses[-1]:.5f}" if losses else "n/a"
    print(f"trained to step {state.step}; last loss {last}; checkpoint {out / 'model.lmck'}")


_CHECKPOINT_KEYS = {
    "levels": lambda ck: ck.lmi.levels,
    "radius": lambda ck: ck.lmi.radius,
    "search_radius": lambda ck: ck.lmi.search_radius,
    "value_only": lambda ck: ck.lmi.value_only,
    "sigma_min": lambda ck: ck.model.schedule.sigma_min,
    "sigma_max": lambda ck: ck.model.schedule.sigma_max,
    "width": lambda ck: ck.model.arch.width,
    "depth": lambda ck: ck.model.arch.depth,
    "time_dim": lambda ck: ck.model.arch.time_dim,
    "sigma_data": lambda ck: ck.model.arch.sigma_data,
}


def _merge_checkpoint(cfg, explicit, ck):
    """Take model-defining keys from the checkpoint; explicit conflicting values are an error."""
    updates = {}
    for key, getter in _CHECKPOINT_KEYS.items():
        stored = getter(ck)
        if key in explicit and explicit[key] != stored:
            raise ConfigurationError(
                f"config sets {key}={explicit[key]!r} but the checkpoint was trained with "
                f"{key}={stored!r}; drop the override or retrain")
        updates[key] = stored
    return replace(cfg, **updates)


def cmd_translate(args, cfg, explicit):
    ck = load_checkpoint(args.checkpoint)
    cfg = _merge_checkpoint(cfg, explicit, ck)
    if args.data:
        ds = _require_dataset(args.data)
        names, sources = _test_names(ds), ds.source
    else:
        files = _image_files(args.input)
        names = [f.stem for f in files]
        sources = np.stack([load_image(f) for f in files])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sampler = cfg.sampler(args.guidance)
    callback = None
    if args.dump_every:
        dump = out / "trajectory"
        dump.mkdir(exist_ok=True)

        def callback(step, x):
            if (step + 1) % args.dump_every == 0:
                for name, img in zip(names, x):
                    save_image(img, dump / f"{name}_step{step + 1:04d}.lmif")
    run = sdedit_translate if args.guidance == "perturb" else em_translate
    result = run(ck.model, sources, sampler, callback=callback)
    for name, img in zip(names, result):
        save_image(img, out / f"{name}.{args.format}")
    cfg.write(out)
    print(f"translated {len(names)} images with guidance={args.guidance} into {out}")


def cmd_segment(args, cfg, explicit):
    ds = _require_dataset(args.data)
    model = kmeans_fit(ds.train, cfg.kmeans_k, derive_seed(cfg.seed, "kmeans"),
                       cfg.kmeans_max_iter, cfg.kmeans_tol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _image_files(args.input, f".{args.format}")
    for f in files:
        save_mask(kmeans_assign(model, load_image(f)), out / f"{f.stem}.pgm")
    (out / "centroids.txt").write_text("\n".join(repr(float(c)) for c in model.centroids) + "\n")
    cfg.write(out)
    print(f"segmented {len(files)} images into {out} (centroids {np.round(model.centroids, 3).tolist()})")


def cmd_eval(args, cfg, explicit):
    ds = _require_dataset(args.data)
    names = _test_names(ds)
    tr = Path(args.translations)
    seg = Path(args.segmentations)
    missing = [n for n in names if not (tr / f"{n}.{args.format}").is_file()
               or not (seg / f"{n}.pgm").is_file()]
    if missing:
        raise FileNotFoundError(f"missing translation or segmentation for test images {missing}")
    translations = [load_image(tr / f"{n}.{args.format}") for n in names]
    segs = [load_mask(seg / f"{n}.pgm") for n in names]
    report = evaluate(translations, ds.target, segs, ds.masks, names)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    cfg.write(out.parent)
    print(f"dice {report.dice_mean:.4f}±{report.dice_std:.4f}  "
          f"psnr {report.psnr_mean:.2f}±{report.psnr_std:.2f}  "
          f"ssim {report.ssim_mean:.4f}±{report.ssim_std:.4f}")


VERIFY_SUITES = ("mi", "p1", "p2", "grad")


def cmd_verify(args, cfg, explicit):
    from . import verify
    from .lmi import joint_histogram, mutual_information
    from .synth import gen_phantom

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suites = VERIFY_SUITES if args.suite == "all" else (args.suite,)
    rng = np.random.default_rng(derive_seed(cfg.seed, "verify"))
    ok = True
    lmi_cfg = cfg.lmi()
    if "mi" in suites:
        worst = 0.0
        for _ in range(args.mi_pairs):
            a, b = rng.integers(0, cfg.levels, (2, (2 * cfg.radius + 1) ** 2))
            worst = max(worst, abs(mutual_information(joint_histogram(a, b, cfg.levels))
                                   - verify.mi_bruteforce(a, b)))
        passed = worst < 1e-10
        with open(out / "mi_oracle.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pairs", "max_abs_diff"])
            w.writerow([args.mi_pairs, repr(worst)])
            w.writerow(["summary", "PASS" if passed else "FAIL"])
        ok &= passed
        print(f"mi oracle: max diff {worst:.3e} {'PASS' if passed else 'FAIL'}")
    if "p1" in suites:
        pairs = [(rng.random((cfg.size, cfg.size)), rng.random((cfg.size, cfg.size)))
                 for _ in range(args.p1_pairs)]
        phantoms = [gen_phantom(derive_seed(cfg.seed, "verify-phantom", i), cfg.size).modality_b
                    for i in range(args.p1_phantoms)]
        rep = verify.property1_suite(pairs, phantoms, lmi_cfg, seed=derive_seed(cfg.seed, "p1"))
        rep.write_csv(out / "property1.csv")
        ok &= rep.passed
        print(f"property 1: {rep.violations} violations over {rep.pixels_checked} pixels "
              f"{'PASS' if rep.passed else 'FAIL'}")
    if "p2" in suites:
        rep = verify.property2_harness(steps=args.p2_steps, schedule=cfg.schedule())
        rep.write_csv(out / "property2.csv")
        ok &= rep.passed
        print(f"property 2: R^2 {rep.r_squared:.6f} intercept {rep.intercept:.2e} "
              f"closed-form rel {rep.max_rel_closed_form:.2e} {'PASS' if rep.passed else 'FAIL'}")
    if "grad" in suites:
        results = verify.gradient_suite(n_archs=5, seed=derive_seed(cfg.seed, "grad") % (1 << 32))
        worst = max(err for _, err in results)
        passed = worst < 1e-3
        with open(out / "gradient.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["width", "depth", "time_dim", "max_rel_error"])
            for arch, err in results:
                w.writerow([arch.width, arch.depth, arch.time_dim, repr(err)])
            w.writerow(["summary", "PASS" if passed else "FAIL", "", ""])
        ok &= passed
        print(f"gradient check: max rel error {worst:.2e} {'PASS' if passed else 'FAIL'}")
    cfg.write(out)
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


def bench_lmi(thread_counts, size=64, repeats=3, seed=0, cfg=None):
    """Best-of-``repeats`` lmi_map throughput per thread count: list of (threads, pixels/s)."""
    cfg = cfg or LMIConfig()
    rng = np.random.default_rng(seed)
    a, b = rng.random((size, size)), rng.random((size, size))
    lmi_map(a, b, cfg, threads=1)  # compile outside the timing
    rows = []
    for n in thread_counts:
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            lmi_map(a, b, cfg, threads=n)
            best = min(best, time.perf_counter() - t0)
        rows.append((n, size * size / best))
    return rows


def cmd_bench(args, cfg, explicit):
    counts = [int(v) for v in args.thread_counts.split(",")]
    rows = bench_lmi(counts, args.size, args.repeats, derive_seed(cfg.seed, "bench"), cfg.lmi())
    base = rows[0][1]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threads", "pixels_per_second", "speedup"])
        for n, rate in rows:
            w.writerow([n, f"{rate:.1f}", f"{rate / base:.3f}"])
    cfg.write(out)
    print("threads  pixels/s  speedup")
    for n, rate in rows:
        print(f"{n:7d}  {rate:8.0f}  {rate / base:7.2f}")


# -- argument parsing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for lmi_map and the score network")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = _Parser(prog="lmidiff", description="LMI-guided score diffusion for zero-shot "
                "cross-modality translation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic phantom dataset")
    s.add_argument("--out", required=True, help="dataset root directory")

    s = sub.add_parser("train", parents=[common], help="train the score model on target images")
    s.add_argument("--data", required=True, help="dataset root from gen-data")
    s.add_argument("--out", required=True, help="directory for model.lmck and loss.csv")
    s.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("translate", parents=[common], help="translate source images")
    s.add_argument("--checkpoint", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset root; translates its test sources")
    src.add_argument("--input", help="directory of .lmif source images")
    s.add_argument("--out", required=True)
    s.add_argument("--guidance", choices=("lmi", "perturb", "none"), default="lmi")
    s.add_argument("--dump-every", type=int, default=0, metavar="K",
                   help="save the sampler state every K steps under <out>/trajectory")
    s.add_argument("--format", choices=("lmif", "pgm"), default="lmif")

    s = sub.add_parser("segment", parents=[common],
                       help="K-Means fitted on the dataset's target training images")
    s.add_argument("--data", required=True)
    s.add_argument("--input", required=True, help="directory of images to segment")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("lmif", "pgm"), default="lmif")

    s = sub.add_parser("eval", parents=[common], help="Dice/PSNR/SSIM report as CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--translations", required=True)
    s.add_argument("--segmentations", required=True)
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--format", choices=("lmif", "pgm"), default="lmif")

    s = sub.add_parser("verify", parents=[common], help="run the property and oracle suites")
    s.add_argument("--out", required=True)
    s.add_argument("--suite", choices=VERIFY_SUITES + ("all",), default="all")
    s.add_argument("--mi-pairs", type=int, default=1000)
    s.add_argument("--p1-pairs", type=int, default=100)
    s.add_argument("--p1-phantoms", type=int, default=16)
    s.add_argument("--p2-steps", type=int, default=10000)

    s = sub.add_parser("bench", parents=[common], help="lmi_map throughput versus threads")
    s.add_argument("--out", required=True)
    s.add_argument("--thread-counts", default="1,2,4")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--repeats", type=int, default=3)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "translate": cmd_translate,
            "segment": cmd_segment, "eval": cmd_eval, "verify": cmd_verify, "bench": cmd_bench}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        explicit, cfg = resolve_config(args.config, args.set)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_threads(args.threads)
    torch.set_num_threads(args.threads)
    try:
        code = COMMANDS[args.command](args, cfg, explicit)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalDivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, ConfigurationError, DegenerateInputError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
