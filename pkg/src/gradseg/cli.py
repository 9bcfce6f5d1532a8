"""``gradseg`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation error (bad flags, bad inputs),
2 runtime failure (I/O, divergence).  Diagnostics go to stderr; data goes
to files or stdout.  Every command writes a run manifest (JSON) recording
the command, the resolved configuration, the seed, the tool version and
SHA-256 hashes of its inputs and outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys

import numpy as np

from . import __version__
from . import losses
from .metrics import DEFAULT_BINS, stratified_metrics, tree_metrics, voxel_metrics
from .phantom import PhantomSpec, make_dataset, write_dataset
from .skeleton import branch_diameters, distance_weights, parse_tree, read_graph, thin, write_graph
from .volume import Volume, read_volume, write_volume


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def default_seed() -> int:
    raw = os.environ.get("GRADSEG_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"GRADSEG_SEED must be an integer, got {raw!r}") from None


# manifests -------------------------------------------------------------------


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashes(paths):
    out = {}
    for p in paths:
        if p and os.path.isfile(p):
            out[os.path.basename(p) if os.path.dirname(p) else p] = sha256(p)
    return out


def write_manifest(args, inputs, outputs, path=None) -> str:
    """RunManifest: command, config echo, seed, version, input/output hashes."""
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "manifest")}
    man = {
        "command": args.command + (f" {args.action}" if getattr(args, "action", None) else ""),
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
    }
    if path is None:
        path = args.manifest or _manifest_path(args.command, outputs)
    with open(path, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _manifest_path(command, outputs):
    for p in outputs:
        if p:
            if os.path.isdir(p):
                return os.path.join(p, "run_manifest.json")
            return p + ".manifest.json"
    return f"gradseg-{command}.manifest.json"


# shared option groups ----------------------------------------------------------


def _loss_flags(p, kind=True):
    if kind:
        p.add_argument("--kind", choices=losses.LOSS_KINDS, default="general_union", help="loss function")
    p.add_argument("--alpha", type=float, default=0.1, help="false-positive weight alpha (beta = 1 - alpha)")
    p.add_argument("--root", "-r_l", dest="root", type=float, default=0.7, help="root r of the union term")
    p.add_argument("--distance-root", "-r_d", dest="distance_root", type=float, default=0.5,
                   help="root r_d of the centerline distance")
    p.add_argument("--epsilon", type=float, default=1e-4, help="gradient stabiliser epsilon")
    p.add_argument("--m", type=float, default=None, help="weight magnitude m (default derived from alpha)")
    p.add_argument("--m-formula", choices=("main", "alt"), default="main", help="formula deriving m from alpha")
    p.add_argument("--bce-weight", type=float, default=1.0, help="BCE term weight for dice_wbce")
    p.add_argument("--fg-weight", type=float, default=5.0, help="foreground weight (weighted_dice, dice_wbce)")


def _loss_cfg(a) -> losses.LossConfig:
    return losses.LossConfig(a.alpha, a.root, a.distance_root, a.epsilon, a.m, a.m_formula, a.bce_weight, a.fg_weight)


def _triple(text, kind=int):
    parts = [kind(t) for t in str(text).replace("x", ",").split(",") if t != ""]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected N or X,Y,Z, got {text!r}")
    return tuple(parts)


def _emit(text, path):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _weights_for(kind, gt: Volume, cfg, weights_path):
    if weights_path:
        return np.asarray(read_volume(weights_path), dtype=np.float64)
    if kind in ("general_union", "prior_tversky"):
        return np.asarray(distance_weights(gt, thin(gt), cfg.magnitude, cfg.distance_root))
    if kind == "weighted_dice":
        return np.where(np.asarray(gt) > 0, cfg.fg_weight, 1.0)
    return None


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _random_field(rng, size):
    p = rng.uniform(0.001, 0.999, size)
    g = np.zeros(size)
    n = int(rng.integers(1, g.size))
    g.ravel()[rng.choice(g.size, n, replace=False)] = 1
    return p, g


def _random_weights(rng, g, m):
    return np.where(g > 0, 1.0 - m * rng.uniform(0, 1, g.shape), 1.0)


# subcommands -----------------------------------------------------------------


def cmd_phantom(a):
    spec = PhantomSpec(
        depth=a.depth, root_radius=a.root_radius, radius_decay=a.radius_decay,
        segment_length=a.segment_length, length_decay=a.length_decay, branch_angle=a.branch_angle,
        dims=a.dims, spacing=a.spacing, noise_sigma=a.noise_sigma, blur_sigma=a.blur_sigma, seed=a.seed,
    )
    phantoms = make_dataset(spec, a.n, check_topology=not a.no_topology_check)
    manifest = write_dataset(phantoms, spec, a.out)
    print(f"wrote {len(phantoms)} phantoms to {a.out}", file=sys.stderr)
    outs = sorted(os.path.join(a.out, f) for f in os.listdir(a.out) if not f.endswith("manifest.json"))
    write_manifest(a, [], outs, a.manifest or os.path.join(a.out, "run_manifest.json"))
    return manifest


def cmd_skeletonize(a):
    mask = read_volume(a.mask)
    sk = thin(mask, prune=not a.no_prune)
    graph = branch_diameters(parse_tree(sk), mask)
    write_graph(graph, a.out)
    outs = [a.out]
    if a.skeleton_out:
        write_volume(Volume(sk.as_mask().astype(np.uint8), mask.spacing, "binary"), a.skeleton_out)
        outs.append(a.skeleton_out)
    c = graph.counts()
    print(f"branches={c['branches']} endpoints={c['endpoints']} bifurcations={c['bifurcations']}", file=sys.stderr)
    write_manifest(a, [a.mask], outs)


def cmd_weights(a):
    mask = read_volume(a.mask)
    cfg = _loss_cfg(a)
    wm = distance_weights(mask, thin(mask), cfg.magnitude, cfg.distance_root, per_component=a.per_component)
    write_volume(Volume(wm.weights.astype(np.float32), mask.spacing, "intensity"), a.out)
    print(f"m={wm.m:g} r_d={wm.distance_root:g}", file=sys.stderr)
    write_manifest(a, [a.mask], [a.out])


def cmd_loss(a):
    pred, gt = read_volume(a.pred), read_volume(a.gt)
    cfg = _loss_cfg(a)
    w = _weights_for(a.kind, gt, cfg, a.weights)
    res = losses.evaluate(a.kind, np.asarray(pred, dtype=np.float64), np.asarray(gt), w, cfg)
    print(repr(res.value))
    if a.grad_out:
        write_volume(Volume(res.gradient.astype(np.float32), pred.spacing, "intensity"), a.grad_out)
    write_manifest(a, [a.pred, a.gt, a.weights], [a.grad_out])


def cmd_ratio(a):
    cfg = _loss_cfg(a)
    rows = []
    if a.pred or a.gt:
        if not (a.pred and a.gt):
            raise UsageError("--pred and --gt go together")
        gt = read_volume(a.gt)
        w = _weights_for(a.kind, gt, cfg, a.weights)
        rep = losses.gradient_ratio(a.kind, np.asarray(read_volume(a.pred), dtype=np.float64), np.asarray(gt), w, cfg)
        rows.append((0, rep.empirical_ratio, rep.closed_form_ratio, rep.lower_bound))
    else:
        rng = np.random.default_rng(a.seed)
        for t in range(a.trials):
            p, g = _random_field(rng, a.size)
            w = None
            if a.kind in ("general_union", "prior_tversky"):
                w = _random_weights(rng, g, cfg.magnitude)
            elif a.kind == "weighted_dice":
                w = np.where(g > 0, cfg.fg_weight, 1.0)
            rep = losses.gradient_ratio(a.kind, p, g, w, cfg)
            rows.append((t, rep.empirical_ratio, rep.closed_form_ratio, rep.lower_bound))
    _emit(_csv_text(["trial", "empirical", "closed_form", "lower_bound"], [(t, repr(e), repr(c), repr(b)) for t, e, c, b in rows]), a.out)
    write_manifest(a, [a.pred, a.gt, a.weights], [a.out])


def cmd_gradcheck(a):
    rng = np.random.default_rng(a.seed)
    rows = []
    if a.kind == "net":
        from .net import BlockSpec, Net, NetSpec, Sample, SupervisionScheme, net_gradient_check

        blocks = (
            BlockSpec(1, 2, 1, 0, "encoder"),
            BlockSpec(2, 4, 2, 1, "bottleneck"),
            BlockSpec(6, 2, 2, 0, "decoder", skip=0),
            BlockSpec(2, 2, 1, 0, "decoder"),
        )
        net = Net(NetSpec(blocks, (0, 0, 1, 1)), seed=a.seed)
        n = a.size[0]
        x = rng.random((1, n, n, n))
        gt = (rng.random((n, n, n)) < 0.2).astype(np.uint8)
        res = net_gradient_check(net, SupervisionScheme("groups", 2), Sample(x, gt), "tversky",
                                 losses.LossConfig(alpha=a.alpha), n_params=a.trials, seed=a.seed)
        rows = [(name, repr(float(x1)), repr(float(x2)), repr(float(e))) for name, x1, x2, e in
                zip(res.names, res.analytic, res.numeric, res.rel_error)]
        header = ["parameter", "analytic", "numeric", "rel_error"]
        worst = res.max_rel_error
    else:
        cfg = _loss_cfg(a)
        header = ["trial", "max_rel_error"]
        worst = 0.0
        for t in range(a.trials):
            p = rng.uniform(0.05, 0.95, a.size)
            g = (rng.random(a.size) < 0.5).astype(float)
            if g.all() or not g.any():
                g.ravel()[0] = 1 - g.ravel()[0]
            w = None
            if a.kind in ("general_union", "prior_tversky"):
                w = _random_weights(rng, g, cfg.magnitude)
            elif a.kind == "weighted_dice":
                w = np.where(g > 0, cfg.fg_weight, 1.0)
            err = losses.finite_difference_check(a.kind, p, g, w, cfg, h=a.step)
            worst = max(worst, err)
            rows.append((t, repr(err)))
    _emit(_csv_text(header, rows), a.out)
    print(f"max_rel_error={worst:.3e}", file=sys.stderr)
    write_manifest(a, [], [a.out])


def _load_items(data_dir):
    """TrainItems for every phantom listed in a ``phantom gen`` manifest."""
    from .pipeline import prepare_item

    with open(os.path.join(data_dir, "manifest.csv")) as fh:
        names = [row["name"] for row in csv.DictReader(fh)]
    items, files = [], []
    for name in names:
        base = os.path.join(data_dir, name)
        paths = [base + "_image.avol", base + "_mask.avol", base + "_graph.txt"]
        graph = read_graph(paths[2]) if os.path.exists(paths[2]) else None
        items.append(prepare_item(read_volume(paths[0]), read_volume(paths[1]), graph, name))
        files.extend(p for p in paths if os.path.exists(p))
    return items, files


def cmd_train(a):
    from .net import SupervisionScheme, unet
    from .pipeline import SamplerConfig, StageConfig, TrainConfig, desk_schedule, paper_schedule, train

    items, files = _load_items(a.data)
    if a.n_test >= len(items):
        raise UsageError(f"--n-test {a.n_test} leaves no training volumes out of {len(items)}")
    split = len(items) - a.n_test
    train_items, test_items = items[:split], items[split:]
    sampler = SamplerConfig(a.patch, a.p_s, a.patches_per_volume, a.seed)
    common = dict(momentum=a.momentum, weight_decay=a.weight_decay, batch_size=a.batch_size, sampler=sampler,
                  hard_refresh_every=a.hard_refresh_every, eval_every=a.eval_every)
    custom = [f for f in ("epochs", "lr", "drops") if getattr(a, f) is not None]
    schedule = a.schedule or ("custom" if custom else "desk")
    if schedule != "custom" and custom:
        raise UsageError(f"--{custom[0]} only applies to --schedule custom")
    if schedule == "paper":
        cfg = paper_schedule(a.seed, **common)
    elif schedule == "desk":
        cfg = desk_schedule(a.seed, **common)
    else:
        epochs = 30 if a.epochs is None else a.epochs
        if a.drops is None:
            drops = tuple(sorted({d for d in (int(0.6 * epochs), int(0.9 * epochs)) if 0 < d < epochs}))
        else:
            drops = tuple(int(d) for d in a.drops.split(",") if d)
        lr = 0.01 if a.lr is None else a.lr
        stage = StageConfig(epochs, lr, drops, a.kind, _loss_cfg(a), a.threshold, not a.no_rotate)
        cfg = TrainConfig((stage,), seed=a.seed, **common)
    scheme = SupervisionScheme(a.scheme, a.k, a.group_mode, a.alpha_e, a.alpha_d)
    spec = unet(tuple(a.channels), a.blocks_per_level, dropout=a.p_d, upsample=a.upsample)
    res = train(spec, scheme, train_items, cfg, test_items, a.out,
                log=None if a.quiet else (lambda line: print(line, file=sys.stderr)))
    outs = [os.path.join(a.out, f) for f in ("model.ckpt", "trace.csv", "manifest.json")]
    write_manifest(a, files, outs, a.manifest or os.path.join(a.out, "run_manifest.json"))
    return res


def cmd_predict(a):
    from .pipeline import predict, segment

    vol = read_volume(a.volume)
    x = vol
    if a.preprocess:
        from .volume import preprocess_ct

        x = Volume(np.asarray(preprocess_ct(vol), dtype=np.float32) / 255.0, vol.spacing)
    prob = predict(a.checkpoint, x, a.patch, a.stride, a.aggregate, a.margin)
    write_volume(prob, a.out)
    outs = [a.out]
    if a.mask_out:
        seg = segment(prob, a.threshold, not a.keep_all)
        write_volume(Volume(np.asarray(seg).astype(np.uint8), vol.spacing, "binary"), a.mask_out)
        outs.append(a.mask_out)
    write_manifest(a, [a.checkpoint, a.volume], outs)


def cmd_metrics(a):
    pred, gt = read_volume(a.pred), read_volume(a.gt)
    graph = read_graph(a.graph) if a.graph else branch_diameters(parse_tree(thin(gt)), gt)
    if a.stratified:
        bins = tuple(float(b) for b in a.bins.split(",")) if a.bins else DEFAULT_BINS
        rep = stratified_metrics(pred, gt, graph, bins, a.alpha, a.tau_b, a.tolerance)
        text = rep.to_json() + "\n" if a.format == "json" else rep.to_csv()
    else:
        dsc, prec = voxel_metrics(pred, gt)
        length, branch = tree_metrics(pred, graph, a.tau_b, a.tolerance)
        row = [dsc, prec, length, branch]
        if a.format == "json":
            text = json.dumps(dict(zip(("dsc", "precision", "length_detected", "branch_detected"), row))) + "\n"
        else:
            text = _csv_text(["dsc", "precision", "length_detected", "branch_detected"],
                             [["" if v is None else repr(v) for v in row]])
    _emit(text, a.out)
    write_manifest(a, [a.pred, a.gt, a.graph], [a.out])


def cmd_probe(a):
    from .net import averaging_kernels, erosion_dilation_probe, seed_gradient

    if a.grad_attention:
        rows = _attention_rows(a)
        header = ["layer", "output_fg_bg", "gradient_fg_bg", "output_max", "gradient_max"]
        inputs = [a.checkpoint, a.volume, a.mask]
    else:
        n = a.size
        fg = np.zeros((n, n, n), bool)
        c = n // 2
        r = a.fg_radius
        fg[c - r:c + r + 1, c - r:c + r + 1, c - r:c + r + 1] = True
        trace = erosion_dilation_probe(averaging_kernels(a.depth, a.kernel), seed_gradient(fg, a.ratio), fg)
        rows = [(k, repr(r1), repr(r2), repr(r3)) for k, (r1, r2, r3) in
                enumerate(zip(trace.ratio, trace.abs_ratio, trace.shell_ratio))]
        header = ["layer", "ratio", "abs_ratio", "shell_ratio"]
        inputs = []
    _emit(_csv_text(header, rows), a.out)
    write_manifest(a, inputs, [a.out])


def _attention_rows(a):
    from .net import Net, Sample, SupervisionScheme, attention_probe, forward_backward, read_checkpoint, unet

    if not (a.volume and a.mask):
        raise UsageError("--grad-attention needs --volume and --mask")
    x = np.asarray(read_volume(a.volume), dtype=np.float32)
    gt = np.asarray(read_volume(a.mask)) > 0
    if a.checkpoint:
        net, _ = read_checkpoint(a.checkpoint)
    else:
        net = Net(unet(scheme=SupervisionScheme("final")), seed=a.seed)
    scheme = SupervisionScheme("final") if net.spec.n_groups == 1 else SupervisionScheme("groups", net.spec.n_groups)
    cfg = _loss_cfg(a)
    dist = None
    if a.kind in ("general_union", "prior_tversky"):
        from .pipeline import prepare_item

        dist = prepare_item(Volume(x), Volume(gt.astype(np.uint8), kind="binary")).dist
    net.zero_grad()
    forward_backward(net, scheme, [Sample(x[None], gt.astype(np.uint8), dist)], a.kind, cfg, training=False)
    outs, grads = attention_probe(net)
    rows = []
    for i, (o, g) in enumerate(zip(outs, grads)):
        fgm = gt
        if o.shape != gt.shape:  # deeper levels run at reduced resolution
            f = gt.shape[0] // o.shape[0]
            fgm = gt.reshape(o.shape[0], f, o.shape[1], f, o.shape[2], f).any(axis=(1, 3, 5))

        def ratio(m):
            bg = m[~fgm].mean()
            return repr(float(m[fgm].mean() / bg)) if bg > 0 else ""

        rows.append((i, ratio(o), ratio(g), repr(float(o.max())), repr(float(g.max()))))
    return rows


def cmd_sample(a):
    from .pipeline import SamplerConfig, refresh_hard_set, sample_patch

    items, files = _load_items(a.data)
    cfg = SamplerConfig(a.patch, a.p_s, a.n, a.seed)
    hard = [None] * len(items)
    if a.checkpoint:
        from .net import read_checkpoint

        net, _ = read_checkpoint(a.checkpoint)
        hard = refresh_hard_set(net, items)
        files.append(a.checkpoint)
    rows = []
    for vid, it in enumerate(items):
        rng = np.random.default_rng([a.seed, vid])
        for k in range(a.n):
            _, pm, prov, _ = sample_patch(it.image, it.mask, it.skeleton, hard[vid], cfg, rng)
            rows.append((it.name, k, *prov.center, prov.mode, int(pm.sum())))
    _emit(_csv_text(["volume", "patch", "x", "y", "z", "mode", "foreground_voxels"], rows), a.out)
    write_manifest(a, files, [a.out])


# parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    seed = default_seed()
    common = Parser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; explicit flags override it")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1 for reproducibility)")
    common.add_argument("--seed", type=int, default=seed, help="random seed (default $GRADSEG_SEED or 0)")
    common.add_argument("--manifest", help="run manifest path (default derived from the output)")

    p = Parser(prog="gradseg", description="Loss, thinning, metrics and training tools for tubular segmentation.")
    p.add_argument("--version", action="version", version=f"gradseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("phantom", parents=[common], help="synthetic airway-tree phantoms")
    s.add_argument("action", choices=["gen"], help="'gen' writes a phantom dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, default=1, help="number of phantoms (consecutive seeds)")
    s.add_argument("--depth", type=int, default=5, help="bifurcation generations")
    s.add_argument("--root-radius", type=float, default=3.5, help="trachea radius (mm)")
    s.add_argument("--radius-decay", type=float, default=0.68, help="child/parent radius ratio")
    s.add_argument("--segment-length", type=float, default=16.0, help="root segment length (mm)")
    s.add_argument("--length-decay", type=float, default=0.78, help="child/parent length ratio")
    s.add_argument("--branch-angle", type=float, default=38.0, help="half angle between children (deg)")
    s.add_argument("--dims", type=_triple, default=(64, 64, 64), help="volume dims N or X,Y,Z")
    s.add_argument("--spacing", type=lambda t: _triple(t, float), default=(1.0, 1.0, 1.0), help="voxel spacing (mm)")
    s.add_argument("--noise-sigma", type=float, default=60.0, help="Gaussian noise (HU)")
    s.add_argument("--blur-sigma", type=float, default=0.6, help="Gaussian blur (voxels)")
    s.add_argument("--no-topology-check", action="store_true", help="keep seeds whose thinning loses a branch")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("skeletonize", parents=[common], help="thin a mask and write its centerline graph")
    s.add_argument("--mask", required=True, help="binary mask volume")
    s.add_argument("--out", required=True, help="graph text file")
    s.add_argument("--skeleton-out", help="also write the skeleton as a binary volume")
    s.add_argument("--no-prune", action="store_true", help="keep short terminal spurs")
    s.set_defaults(func=cmd_skeletonize)

    s = sub.add_parser("weights", parents=[common], help="centerline distance weight map")
    s.add_argument("--mask", required=True, help="binary mask volume")
    s.add_argument("--out", required=True, help="weight volume")
    s.add_argument("--per-component", action="store_true", help="normalise distances per component")
    _loss_flags(s, kind=False)
    s.set_defaults(func=cmd_weights)

    s = sub.add_parser("loss", parents=[common], help="evaluate a loss and its gradient")
    s.add_argument("--pred", required=True, help="probability volume")
    s.add_argument("--gt", required=True, help="binary ground-truth volume")
    s.add_argument("--weights", help="weight volume (default: derived from --gt)")
    s.add_argument("--grad-out", help="write dL/dp as a volume")
    _loss_flags(s)
    s.set_defaults(func=cmd_loss)

    s = sub.add_parser("ratio", parents=[common], help="foreground/background gradient ratio vs closed form")
    s.add_argument("--pred", help="probability volume (default: random fields)")
    s.add_argument("--gt", help="binary ground-truth volume")
    s.add_argument("--weights", help="weight volume")
    s.add_argument("--trials", type=int, default=1000, help="random fields when no volumes are given")
    s.add_argument("--size", type=_triple, default=(4, 4, 4), help="random field dims")
    s.add_argument("--out", help="CSV output (default stdout)")
    _loss_flags(s)
    s.set_defaults(func=cmd_ratio)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--kind", choices=(*losses.LOSS_KINDS, "net"), default="general_union",
                   help="loss kind, or 'net' for the whole-network spot check")
    s.add_argument("--trials", type=int, default=50, help="random fields (or probed parameters for 'net')")
    s.add_argument("--size", type=_triple, default=(4, 4, 4), help="field dims (input dims for 'net')")
    s.add_argument("--step", type=float, default=1e-5, help="central difference step h")
    s.add_argument("--out", help="CSV output (default stdout)")
    _loss_flags(s, kind=False)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train", parents=[common], help="train a group-supervised net on a phantom dataset")
    s.add_argument("--data", required=True, help="directory written by 'phantom gen'")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n-test", type=int, default=4, help="last N volumes held out for evaluation")
    s.add_argument("--schedule", choices=("custom", "desk", "paper"),
                   help="training schedule (default: custom when --epochs/--lr/--drops is given, else desk)")
    s.add_argument("--epochs", type=int, help="epochs (custom schedule, default 30)")
    s.add_argument("--lr", type=float, help="initial learning rate (custom schedule, default 0.01)")
    s.add_argument("--drops", help="comma-separated LR drop epochs (custom schedule, default 60%% and 90%% of epochs)")
    s.add_argument("--threshold", type=float, default=0.7, help="augmentation mask threshold t")
    s.add_argument("--no-rotate", action="store_true", help="disable rotation augmentation")
    s.add_argument("--scheme", choices=("final", "deep", "per_block", "groups", "encoder_decoder"),
                   default="groups", help="supervision scheme")
    s.add_argument("--k", type=int, default=2, help="number of groups")
    s.add_argument("--group-mode", choices=("successive", "cross"), default="successive", help="group layout")
    s.add_argument("--alpha-e", type=float, default=None, help="alpha of encoding-side groups")
    s.add_argument("--alpha-d", type=float, default=None, help="alpha of decoding-side groups")
    s.add_argument("--channels", type=lambda t: [int(v) for v in t.split(",")], default=[4, 8, 16],
                   help="channels per level")
    s.add_argument("--blocks-per-level", type=int, default=2, help="ConvBlocks per level and path")
    s.add_argument("--upsample", choices=("nearest", "trilinear"), default="nearest", help="pyramid upsampling")
    s.add_argument("--p-d", type=float, default=0.0, help="spatial dropout probability p_d")
    s.add_argument("--p-s", type=float, default=0.5, help="hard skeleton sampling probability p_s")
    s.add_argument("--patch", type=_triple, default=(32, 32, 32), help="patch dims")
    s.add_argument("--patches-per-volume", type=int, default=8, help="patches per volume per epoch")
    s.add_argument("--batch-size", type=int, default=2, help="patches per SGD step")
    s.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    s.add_argument("--weight-decay", type=float, default=1e-4, help="L2 weight decay")
    s.add_argument("--hard-refresh-every", type=int, default=10, help="epochs between hard-set refreshes")
    s.add_argument("--eval-every", type=int, default=0, help="evaluate every N epochs (0: last only)")
    s.add_argument("--quiet", action="store_true", help="no per-epoch log")
    _loss_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="sliding-window inference")
    s.add_argument("--checkpoint", required=True, help="model checkpoint")
    s.add_argument("--volume", required=True, help="input volume (network scale unless --preprocess)")
    s.add_argument("--out", required=True, help="probability volume")
    s.add_argument("--preprocess", action="store_true", help="apply CT clamping and scale to [0, 1] first")
    s.add_argument("--patch", type=_triple, default=None, help="window dims (default: one full pass)")
    s.add_argument("--stride", type=_triple, default=None, help="window stride (default: patch)")
    s.add_argument("--aggregate", choices=("mean", "max"), default="mean", help="overlap aggregation")
    s.add_argument("--margin", type=int, default=0, help="voxels discarded at interior window faces")
    s.add_argument("--mask-out", help="also write the thresholded mask")
    s.add_argument("--threshold", type=float, default=0.5, help="mask threshold")
    s.add_argument("--keep-all", action="store_true", help="keep every component, not only the largest")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("metrics", parents=[common], help="voxel and tree metrics")
    s.add_argument("--pred", required=True, help="binary prediction volume")
    s.add_argument("--gt", required=True, help="binary ground-truth volume")
    s.add_argument("--graph", help="centerline graph with diameters (default: derived from --gt)")
    s.add_argument("--stratified", action="store_true", help="break metrics down by branch diameter")
    s.add_argument("--bins", help="comma-separated diameter edges in mm")
    s.add_argument("--alpha", type=float, default=0.5, help="alpha of the reported Tversky index")
    s.add_argument("--tau-b", type=float, default=0.8, help="branch detection coverage threshold tau_b")
    s.add_argument("--tolerance", type=float, default=0.0, help="centerline detection tolerance (mm)")
    s.add_argument("--format", choices=("csv", "json"), default="csv", help="output format")
    s.add_argument("--out", help="output file (default stdout)")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("probe", parents=[common], help="gradient erosion/dilation and attention probes")
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--erosion", action="store_true", help="linear erosion/dilation probe (default)")
    mode.add_argument("--grad-attention", action="store_true", help="per-layer output/gradient attention")
    s.add_argument("--depth", type=int, default=5, help="number of averaging layers K")
    s.add_argument("--kernel", type=int, default=3, help="averaging kernel size")
    s.add_argument("--ratio", type=float, default=1.0, help="seed foreground/background gradient ratio")
    s.add_argument("--size", type=int, default=15, help="probe volume size")
    s.add_argument("--fg-radius", type=int, default=0, help="half width of the foreground cube")
    s.add_argument("--checkpoint", help="trained model (default: fresh desk net)")
    s.add_argument("--volume", help="input volume at network scale")
    s.add_argument("--mask", help="binary mask of the input")
    s.add_argument("--kind", choices=losses.LOSS_KINDS, default="tversky", help="loss driving the gradient")
    s.add_argument("--alpha", type=float, default=0.1, help="false-positive weight alpha")
    s.add_argument("--root", "-r_l", dest="root", type=float, default=0.7, help="root r")
    s.add_argument("--distance-root", "-r_d", dest="distance_root", type=float, default=0.5, help="root r_d")
    s.add_argument("--epsilon", type=float, default=1e-4, help="gradient stabiliser epsilon")
    s.add_argument("--m", type=float, default=None, help="weight magnitude m")
    s.add_argument("--out", help="CSV output (default stdout)")
    s.set_defaults(func=cmd_probe, m_formula="main", bce_weight=1.0, fg_weight=5.0)

    s = sub.add_parser("sample", parents=[common], help="draw training patches and report provenance")
    s.add_argument("--data", required=True, help="directory written by 'phantom gen'")
    s.add_argument("--n", type=int, default=8, help="patches per volume")
    s.add_argument("--p-s", type=float, default=0.5, help="hard sampling probability p_s")
    s.add_argument("--patch", type=_triple, default=(32, 32, 32), help="patch dims")
    s.add_argument("--checkpoint", help="model used to compute the hard set (default: none)")
    s.add_argument("--out", help="CSV output (default stdout)")
    s.set_defaults(func=cmd_sample)
    return p


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise UsageError("--config must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions} - {"help", "config"}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        # JSON lists stand for the X,Y,Z triples; channels stays a list
        sub.set_defaults(**{k: tuple(v) if isinstance(v, list) and k != "channels" else v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


def _set_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
        return None
    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except (UsageError, json.JSONDecodeError) as e:
        print(f"gradseg: error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"gradseg: error: {e}", file=sys.stderr)
        return 2
    _set_threads(args.threads)
    try:
        args.func(args)
    except UsageError as e:
        print(f"gradseg {args.command}: error: {e}", file=sys.stderr)
        return 1
    except FloatingPointError as e:
        print(f"gradseg {args.command}: runtime failure: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"gradseg {args.command}: invalid input: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"gradseg {args.command}: I/O failure: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
