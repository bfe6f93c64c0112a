"""Command-line entry point: train, eval, gradcam, bench, synth, selftest.

Configuration is flat `key = value` text with `#` comments; precedence is
command-line flags over config file over defaults. Exit codes: 0 success,
1 usage error, 2 validation or data error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .data import (
    Checkpoint,
    DataError,
    load_checkpoint,
    load_manifest,
    load_pgm,
    resize_bilinear,
    rng_state_token,
    save_checkpoint,
    synth_dataset,
    write_pgm,
)
from .evaluation import (
    BBox,
    EvalError,
    auc,
    auc_per_class,
    grad_cam,
    heatmap_to_box,
    iobb,
    localization_accuracy,
)
from .model import ConfigError, Network, NetworkConfig, baseline_variant, build_network
from .routing import (
    Conv1x1CapsuleParams,
    RoutingError,
    frozen_routing,
    gram,
    route_conv1x1_kernel,
    route_conv1x1_naive,
)
from .tensor import Tensor, finite_diff_check
from .training import (
    AdamState,
    AugmentConfig,
    CurriculumSchedule,
    LossConfig,
    TrainingError,
    standardize,
    train_epoch,
)

# ---------------------------------------------------------------------------
# Flat key=value configuration
# ---------------------------------------------------------------------------


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text

    return parse


def _ranged(kind, lo, hi):
    def parse(text):
        v = kind(text)
        if not (lo <= v <= hi):
            raise ValueError(f"value {v} outside [{lo}, {hi}]")
        return v

    return parse


# key -> (parser, default); the registry is the single source of truth for
# what may appear in config files, --set overrides, and checkpoint echoes
CONFIG_REGISTRY: dict = {
    # architecture
    "input_size": (_ranged(int, 24, 4096), 64),
    "down_c1": (_ranged(int, 1, 1024), 16),
    "down_c2": (_ranged(int, 1, 1024), 16),
    "n_dense_blocks": (_ranged(int, 1, 16), 1),
    "layers_per_block": (_ranged(int, 1, 64), 4),
    "growth_rate": (_ranged(int, 1, 256), 8),
    "bottleneck_width": (_ranged(int, 1, 16), 4),
    "head_channels": (_ranged(int, 8, 1024), 32),
    "routing_iters": (_ranged(int, 1, 16), 3),
    "caps_dim_class": (_ranged(int, 1, 64), 16),
    "n_classes": (_ranged(int, 1, 64), 4),
    "grad_mode": (_choice("none", "last"), "last"),
    "dtype": (_choice("f32", "f64"), "f32"),
    # optimization
    "alpha": (_ranged(float, 0.0, 1.0), 0.001),
    "beta1": (_ranged(float, 0.0, 1.0), 0.9),
    "beta2": (_ranged(float, 0.0, 1.0), 0.999),
    "eps": (_ranged(float, 0.0, 1.0), 1e-8),
    "batch_size": (_ranged(int, 1, 4096), 16),
    # loss and curriculum
    "m_plus": (_ranged(float, 0.0, 1.0), 0.9),
    "m_minus": (_ranged(float, 0.0, 1.0), 0.1),
    "switch_epoch": (_ranged(int, 0, 10**6), 50),
    # augmentation
    "augment": (_bool, True),
    "flip_p": (_ranged(float, 0.0, 1.0), 0.5),
    "brightness_lo": (_ranged(float, -1.0, 1.0), -0.2),
    "brightness_hi": (_ranged(float, -1.0, 1.0), 0.2),
    "contrast_lo": (_ranged(float, 0.0, 10.0), 0.8),
    "contrast_hi": (_ranged(float, 0.0, 10.0), 1.25),
}


class RunConfig:
    """Validated key=value configuration over CONFIG_REGISTRY."""

    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default) in CONFIG_REGISTRY.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, text: str) -> None:
        if key not in CONFIG_REGISTRY:
            raise DataError(f"unknown config key {key!r}")
        parser, _ = CONFIG_REGISTRY[key]
        try:
            self.values[key] = parser(str(text))
        except ValueError as e:
            raise DataError(f"config key {key}: {e}")

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, _, value = line.partition("=")
            cfg.set(key.strip(), value.strip())
        return cfg

    def network_config(self) -> NetworkConfig:
        v = self.values
        return NetworkConfig(
            input_size=v["input_size"],
            down_channels=(v["down_c1"], v["down_c2"]),
            n_dense_blocks=v["n_dense_blocks"],
            layers_per_block=v["layers_per_block"],
            growth_rate=v["growth_rate"],
            bottleneck_width=v["bottleneck_width"],
            head_channels=v["head_channels"],
            routing_iters=v["routing_iters"],
            caps_dim_class=v["caps_dim_class"],
            n_classes=v["n_classes"],
            grad_mode=v["grad_mode"],
            dtype=v["dtype"],
        )

    def echo(self) -> dict[str, str]:
        return {k: str(v) for k, v in self.values.items()}


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _num(x) -> str:
    """Full-precision, numpy-free decimal rendering for CSV cells."""
    return repr(float(x))


def _load_split(manifest_path, images_root, input_size: int, n_classes: int):
    """Images in [0, 1] at network size, (N, C) labels, manifest entries."""
    entries = load_manifest(manifest_path)
    root = Path(images_root)
    images, labels = [], np.zeros((len(entries), n_classes))
    resized = 0
    for i, e in enumerate(entries):
        img = load_pgm(root / e.path)
        if img.shape != (input_size, input_size):
            img = np.clip(resize_bilinear(img, (input_size, input_size)), 0.0, 1.0)
            resized += 1
        images.append(img)
        for c in e.labels:
            if not 0 <= c < n_classes:
                raise DataError(f"{e.path}: label {c} out of range for {n_classes} classes")
            labels[i, c] = 1.0
    if resized:
        print(f"note: resized {resized} image(s) to {input_size}x{input_size}", file=sys.stderr)
    return images, labels, entries


def _build_from_config(cfg: RunConfig, seed: int, baseline: bool) -> Network:
    builder = baseline_variant if baseline else build_network
    return builder(cfg.network_config(), seed)


def _checkpoint_from(net: Network, cfg: RunConfig, baseline: bool, adam: AdamState, rng) -> Checkpoint:
    tensors = dict(net.state_arrays())
    for name, m in adam.m.items():
        tensors[f"adam.m.{name}"] = m
        tensors[f"adam.v.{name}"] = adam.v[name]
    tensors["adam.t"] = np.array(float(adam.t))
    config = cfg.echo()
    config["baseline"] = "1" if baseline else "0"
    return Checkpoint(config=config, tensors=tensors, rng_state=rng_state_token(rng))


def _restore_network(ckpt: Checkpoint):
    """Rebuild the architecture from the config echo and load its state."""
    echoed = dict(ckpt.config)
    baseline = echoed.pop("baseline", "0") == "1"
    try:
        cfg = RunConfig(echoed)
    except DataError as e:
        raise DataError(f"checkpoint config echo rejected: {e}")
    net = _build_from_config(cfg, seed=0, baseline=baseline)
    state = {k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")}
    net.load_state_arrays(state)
    return net, cfg, baseline


def _prepare_dataset(images, labels):
    return [(img, labels[i]) for i, img in enumerate(images)]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.set or []:
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    net = _build_from_config(cfg, args.seed, args.baseline)
    images, labels, _ = _load_split(args.manifest, args.images_root, cfg["input_size"], cfg["n_classes"])
    dataset = _prepare_dataset(images, labels)

    schedule = CurriculumSchedule.from_labels(labels, switch_epoch=cfg["switch_epoch"])
    loss_cfg = LossConfig(m_plus=cfg["m_plus"], m_minus=cfg["m_minus"])
    adam = AdamState(alpha=cfg["alpha"], beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps"])
    aug = (
        AugmentConfig(
            flip_p=cfg["flip_p"],
            brightness=(cfg["brightness_lo"], cfg["brightness_hi"]),
            contrast=(cfg["contrast_lo"], cfg["contrast_hi"]),
        )
        if cfg["augment"]
        else None
    )
    rng = np.random.default_rng(args.seed)

    rows = ["epoch,lambda_plus,lambda_minus,mean_loss"]
    for epoch in range(args.epochs):
        m = train_epoch(net, dataset, loss_cfg, schedule, adam, epoch, cfg["batch_size"], rng, aug)
        rows.append(f"{m.epoch},{_num(m.lambda_plus)},{_num(m.lambda_minus)},{_num(m.mean_loss)}")
        print(
            f"epoch {epoch}: loss {m.mean_loss:.5f} "
            f"(pos {m.pos_score_mean:.3f}, neg {m.neg_score_mean:.3f})"
        )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, _checkpoint_from(net, cfg, args.baseline, adam, rng))
    metrics_path = out.with_suffix(out.suffix + ".metrics.csv")
    metrics_path.write_text("\n".join(rows) + "\n")
    print(f"wrote {out} and {metrics_path}")
    return 0


def cmd_eval(args) -> int:
    net, cfg, _ = _restore_network(load_checkpoint(args.ckpt))
    images, labels, entries = _load_split(args.manifest, args.images_root, cfg["input_size"], cfg["n_classes"])
    prepared = np.stack([standardize(img) for img in images])[:, None]
    scores = net.predict(prepared, batch_size=cfg["batch_size"])

    per_class, macro = auc_per_class(scores, labels)
    rows = ["class,auc,n_pos,n_neg"]
    for c, a in enumerate(per_class):
        n_pos = int(labels[:, c].sum())
        rows.append(f"{c},{'' if a is None else _num(a)},{n_pos},{labels.shape[0] - n_pos}")
    rows.append(f"macro,{'' if macro is None else _num(macro)},,")
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text("\n".join(rows) + "\n")
    print(f"macro AUC: {'n/a' if macro is None else f'{macro:.4f}'} -> {report}")

    boxed = [(i, e) for i, e in enumerate(entries) if e.boxes]
    if boxed:
        cases = []
        size = cfg["input_size"]
        for i, e in boxed:
            src_h, src_w = images[i].shape
            sy, sx = size / src_h, size / src_w
            for cls, x, y, w, h in e.boxes:
                heat = grad_cam(net, prepared[i, 0], cls)
                _, up = heatmap_to_box(heat, (size, size), tau=args.tau)
                gt = BBox(
                    x=int(round(x * sx)),
                    y=int(round(y * sy)),
                    w=max(1, int(round(w * sx))),
                    h=max(1, int(round(h * sy))),
                )
                cases.append((up, gt, cls))
        rep = localization_accuracy(cases, tau=args.tau)
        loc_rows = ["class,t_iobb,accuracy,n_cases"]
        for cls, t, acc, n in rep.rows():
            loc_rows.append(f"{cls},{_num(t)},{_num(acc)},{n}")
        loc_path = report.with_suffix(report.suffix + ".loc.csv")
        loc_path.write_text("\n".join(loc_rows) + "\n")
        print(f"localization report ({len(cases)} cases) -> {loc_path}")
    return 0


def cmd_gradcam(args) -> int:
    net, cfg, _ = _restore_network(load_checkpoint(args.ckpt))
    if not 0 <= args.class_idx < cfg["n_classes"]:
        raise EvalError(f"class index {args.class_idx} out of range for {cfg['n_classes']} classes")
    img = load_pgm(args.image)
    size = cfg["input_size"]
    if img.shape != (size, size):
        print(f"note: resizing {img.shape[1]}x{img.shape[0]} image to {size}x{size}", file=sys.stderr)
        img = np.clip(resize_bilinear(img, (size, size)), 0.0, 1.0)
    heat = grad_cam(net, standardize(img), args.class_idx)
    box, up = heatmap_to_box(heat, (size, size), tau=args.tau)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(up, out)
    box_path = out.with_suffix(out.suffix + ".box.txt")
    if box is None:
        box_path.write_text("no detection\n")
        print("no detection")
    else:
        box_path.write_text(f"{box.x} {box.y} {box.w} {box.h}\n")
        print(f"detected box: {box.x} {box.y} {box.w} {box.h}")
    print(f"wrote {out} and {box_path}")
    return 0


def bench_routing(spatial: int, in_maps: int, out_maps: int, iters: int, repeat: int, seed: int = 0):
    """Median wall time (ns) per mode for one routed-layer forward.

    plain: one unrouted 1x1 combination. naive: full-map routing. kernel:
    Gram build + iterations + a single final combination. Feature maps are
    scaled to unit norm like the batch-normalized inputs the layer sees in
    practice; unnormalized maps at large S saturate the coupling softmax
    into subnormal territory and time the FPU's slow path instead of the
    algorithm.
    """
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((in_maps, spatial)) / np.sqrt(spatial)
    W = rng.standard_normal((in_maps, out_maps))
    params = Conv1x1CapsuleParams(W, iterations=iters)

    def run_plain():
        W.T @ F

    def run_naive():
        route_conv1x1_naive(F, params)

    def run_kernel():
        G = gram(F)
        c, _ = route_conv1x1_kernel(G, params)
        (W * c).T @ F

    results = {}
    for mode, fn in (("plain", run_plain), ("naive", run_naive), ("kernel", run_kernel)):
        fn()  # warm caches before timing
        times = []
        for _ in range(repeat):
            t0 = time.perf_counter_ns()
            fn()
            times.append(time.perf_counter_ns() - t0)
        results[mode] = int(np.median(times))
    return results


def cmd_bench(args) -> int:
    results = bench_routing(args.spatial, args.in_maps, args.out_maps, args.iters, args.repeat)
    lines = ["mode,S,I,J,r,median_ns"]
    for mode in ("plain", "naive", "kernel"):
        lines.append(f"{mode},{args.spatial},{args.in_maps},{args.out_maps},{args.iters},{results[mode]}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_synth(args) -> int:
    train_m, test_m = synth_dataset(
        args.out_dir, args.n_train, args.n_test, args.size, n_classes=args.n_classes, seed=args.seed
    )
    print(f"wrote {args.n_train + args.n_test} images, manifests {train_m} and {test_m}")
    return 0


# ---------------------------------------------------------------------------
# Self test
# ---------------------------------------------------------------------------


def _selftest_routing_equivalence(failures):
    count = 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        I, J = int(rng.integers(1, 16)), int(rng.integers(1, 9))
        S, r = int(rng.integers(1, 128)), int(rng.integers(1, 6))
        F = rng.standard_normal((I, S))
        params = Conv1x1CapsuleParams(rng.standard_normal((I, J)), r)
        g, c_naive = route_conv1x1_naive(F, params)
        c_kernel, norms = route_conv1x1_kernel(gram(F), params)
        if np.abs(c_kernel - c_naive).max() > 1e-9:
            failures.append(f"routing-equivalence: couplings diverged at seed {seed}")
        elif np.abs(norms - np.linalg.norm(g, axis=-1)).max() > 1e-9:
            failures.append(f"routing-equivalence: norms diverged at seed {seed}")
        else:
            count += 1
    return count, 40


def _selftest_gradients(failures):
    from .conv import conv2d, pool2d
    from .routing import conv1x1_capsule_forward

    checks = 0
    total = 9
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))
        k = Tensor(rng.standard_normal((3, 2, 3, 3)))
        if finite_diff_check(lambda t: conv2d(t, k, padding="same").sum(), x) <= 1e-4:
            checks += 1
        else:
            failures.append(f"gradient: conv2d input check failed at seed {100 + seed}")

        def pooled(t):
            y = pool2d(t, "max", 2, 2)
            return (y * y).sum()

        if finite_diff_check(pooled, Tensor(rng.standard_normal((1, 2, 6, 6)))) <= 1e-4:
            checks += 1
        else:
            failures.append(f"gradient: pool2d check failed at seed {100 + seed}")

        feats = Tensor(rng.standard_normal((1, 4, 9)))
        w = Tensor(rng.standard_normal((4, 3)) * 0.5)
        probe = Tensor(rng.standard_normal((1, 3, 9)))

        def routed(t):
            out = conv1x1_capsule_forward(feats, Conv1x1CapsuleParams(t, 3), "last", freeze_key="st")
            return (out * probe).sum()

        with frozen_routing():
            err = finite_diff_check(routed, w)
        if err <= 1e-4:
            checks += 1
        else:
            failures.append(f"gradient: routed layer check failed at seed {100 + seed}")
    return checks, total


def _selftest_auc(failures):
    count = 0
    for seed in range(50):
        rng = np.random.default_rng(200 + seed)
        n = int(rng.integers(2, 40))
        scores = np.round(rng.random(n), 1)
        labels = (rng.random(n) < 0.5).astype(float)
        got = auc(scores, labels)
        pos = scores[labels > 0.5]
        neg = scores[labels <= 0.5]
        if len(pos) == 0 or len(neg) == 0:
            want = None
        else:
            wins = sum(1.0 if p > nn else (0.5 if p == nn else 0.0) for p in pos for nn in neg)
            want = wins / (len(pos) * len(neg))
        if got != want:
            failures.append(f"auc: rank sum != pair counting at seed {200 + seed}")
        else:
            count += 1
    return count, 50


def _selftest_iobb(failures):
    cases = [
        (BBox(0, 0, 10, 10), BBox(0, 0, 10, 10), 1.0),
        (BBox(0, 0, 5, 5), BBox(20, 20, 5, 5), 0.0),
        (BBox(0, 0, 10, 10), BBox(0, 0, 5, 10), 0.5),
        (BBox(2, 2, 3, 3), BBox(0, 0, 10, 10), 1.0),
    ]
    count = 0
    for i, (det, gt, want) in enumerate(cases):
        if iobb(det, gt) == want:
            count += 1
        else:
            failures.append(f"iobb: geometry case {i} failed")
    return count, len(cases)


def cmd_selftest(args) -> int:
    failures: list[str] = []
    suites = [
        ("routing-equivalence", _selftest_routing_equivalence),
        ("gradient-checks", _selftest_gradients),
        ("auc-oracle", _selftest_auc),
        ("iobb-geometry", _selftest_iobb),
    ]
    for name, fn in suites:
        passed, total = fn(failures)
        print(f"{name}: {passed}/{total} passed")
    if failures:
        for f in failures:
            print(f"FAIL {f}", file=sys.stderr)
        return 2
    print("selftest: all suites passed")
    return 0


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="capsroute", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint + metrics CSV")
    t.add_argument("--manifest", required=True)
    t.add_argument("--images-root", required=True)
    t.add_argument("--config", default=None, help="flat key=value config file")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--baseline", action="store_true", help="plain 1x1 convolutions instead of routing")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="report per-class AUC (and localization when boxes exist)")
    e.add_argument("--manifest", required=True)
    e.add_argument("--images-root", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True, help="output CSV path")
    e.add_argument("--tau", type=float, default=0.1)
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcam", help="write a heatmap PGM and detected box for one image")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--image", required=True)
    g.add_argument("--class", dest="class_idx", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--tau", type=float, default=0.1)
    g.set_defaults(fn=cmd_gradcam)

    b = sub.add_parser("bench", help="time plain vs naive vs kernel routing")
    b.add_argument("--spatial", type=int, default=4096, help="feature map length S")
    b.add_argument("--in-maps", type=int, default=32)
    b.add_argument("--out-maps", type=int, default=32)
    b.add_argument("--iters", type=int, default=3)
    b.add_argument("--repeat", type=int, default=9)
    b.add_argument("--out", default=None)
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("synth", help="generate the synthetic multi-label glyph dataset")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--n-test", type=int, default=500)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--n-classes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    st = sub.add_parser("selftest", help="run built-in consistency suites")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (DataError, ConfigError, TrainingError, EvalError, RoutingError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
