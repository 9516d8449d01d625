"""Command-line pipeline: gen | rank | support | compare | lds.

Every command resolves its configuration, writes its artifacts atomically,
and drops a JSON manifest (<output>.manifest.json) recording the resolved
argv, seeds, input digests, and output digests. Re-running the argv stored
in a manifest reproduces byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import (
    CandidateFilter,
    Method,
    RankedIndices,
    ScoreVector,
    cosine_scores,
    esvm_scores,
    gradcos_scores,
    l2_scores,
    rank,
    signed_sparse_scores,
    write_ranking_csv,
)
from .brittleness import (
    ModKind,
    cdf_and_auc,
    cdf_svg,
    read_support_csv,
    support_sweep,
    win_rate,
    write_report_csv,
    write_support_csv,
)
from .esvm import EsvmParams
from .lds import evaluate_lds, sample_subsets, write_lds_csv, write_masks_binary
from .oracle import TrainConfig, train
from .store import (
    StoreError,
    SyntheticConfig,
    generate_synthetic,
    iter_targets,
    load_embeddings,
    save_embeddings,
    unit_normalized,
)

_METHOD_CHOICES = [m.value for m in Method]


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _atomic_write(path: Path, writer) -> None:
    """Run ``writer(tmp_path)`` then rename, so outputs appear only complete."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_manifest(manifest_path: Path, command: str, argv, config: dict,
                    inputs: dict[str, Path], outputs: list[Path]) -> None:
    payload = {
        "command": command,
        "tool_version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "argv": list(argv),
        "config": config,
        "inputs": {name: _sha256(path) for name, path in inputs.items()},
        "outputs": {path.name: _sha256(path) for path in outputs},
    }
    _atomic_write(
        manifest_path,
        lambda tmp: tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n"),
    )


def _config_dict(args) -> dict:
    """JSON-safe view of the resolved arguments."""
    config = {}
    for key, value in vars(args).items():
        if key == "func":
            continue
        config[key] = value if isinstance(value, (int, float, bool, str, type(None))) else str(value)
    return config


def _out_path(args, name: str) -> Path:
    return Path(args.out_dir) / name


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        seed=args.seed,
    )


def _add_oracle_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("oracle training")
    group.add_argument("--epochs", type=int, default=50)
    group.add_argument("--lr", type=float, default=0.1)
    group.add_argument("--weight-decay", type=float, default=1e-4)
    group.add_argument("--batch-size", type=int, default=512)


def _add_scoring_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--train", required=True, help="training store (.atrb)")
    parser.add_argument("--targets", required=True, help="target store (.atrb)")
    parser.add_argument("--method", required=True, choices=_METHOD_CHOICES)
    parser.add_argument(
        "--filter",
        choices=[f.value for f in CandidateFilter],
        default=None,
        help="candidate filter; defaults to same-class (all for gradcos)",
    )
    parser.add_argument("--normalize", action="store_true",
                        help="unit-normalize embeddings before scoring")
    parser.add_argument("--c-pos", type=float, default=0.5, help="esvm positive penalty")
    parser.add_argument("--c-neg", type=float, default=0.01, help="esvm negative penalty")
    parser.add_argument("--keep-fraction", type=float, default=0.05,
                        help="signed-sparse retention fraction")


def _load_pair(args):
    train_set = load_embeddings(args.train)
    target_set = load_embeddings(args.targets)
    if train_set.d != target_set.d:
        raise ValueError(
            f"dimension mismatch: train d={train_set.d}, targets d={target_set.d}"
        )
    if args.normalize:
        train_set = unit_normalized(train_set)
        target_set = unit_normalized(target_set)
    return train_set, target_set


def _score_targets(args, train_set, targets) -> list[ScoreVector]:
    method = Method(args.method)
    if method is Method.ESVM:
        params = EsvmParams(c_pos=args.c_pos, c_neg=args.c_neg)
        return [esvm_scores(train_set, t, params) for t in targets]
    if method is Method.L2:
        return [l2_scores(train_set, t) for t in targets]
    if method is Method.COSINE:
        return [cosine_scores(train_set, t) for t in targets]
    if method is Method.GRADCOS:
        model = train(train_set, None, _train_config(args))
        return [gradcos_scores(model, train_set, t) for t in targets]
    return [
        signed_sparse_scores(train_set, t, l2_scores(train_set, t), args.keep_fraction)
        for t in targets
    ]


def _candidate_filter(args) -> CandidateFilter:
    if args.filter is not None:
        return CandidateFilter(args.filter)
    # Grad-Cos ranks across all classes; every other method is same-class.
    return CandidateFilter.ALL if Method(args.method) is Method.GRADCOS else CandidateFilter.SAME_CLASS


def cmd_gen(args, argv) -> int:
    cfg = SyntheticConfig(
        num_classes=args.classes,
        samples_per_class=args.per_class,
        d=args.dim,
        cluster_spread=args.spread,
        inter_class_distance=args.distance,
        seed=args.seed,
    )
    dataset = generate_synthetic(cfg)
    out = _out_path(args, args.output)
    _atomic_write(out, lambda tmp: save_embeddings(dataset, tmp))
    manifest = out.with_name(out.name + ".manifest.json")
    _write_manifest(manifest, "gen", argv, _config_dict(args) | {"n": dataset.n}, {}, [out])
    print(f"wrote {out} (n={dataset.n}, d={dataset.d}, classes={dataset.num_classes})")
    return 0


def cmd_rank(args, argv) -> int:
    train_set, target_set = _load_pair(args)
    targets = iter_targets(target_set)
    scores = _score_targets(args, train_set, targets)
    cand_filter = _candidate_filter(args)
    blocks = []
    for target, vector in zip(targets, scores):
        ranked = rank(vector, train_set, target, cand_filter, args.k)
        blocks.append((target.id, ranked, vector))
    out = _out_path(args, args.output)
    manifest = out.with_name(out.name + ".manifest.json")
    _atomic_write(
        out, lambda tmp: write_ranking_csv(tmp, blocks, train_set, f"manifest: {manifest.name}")
    )
    _write_manifest(
        manifest, "rank", argv, _config_dict(args),
        {"train": Path(args.train), "targets": Path(args.targets)}, [out],
    )
    print(f"wrote {out} ({len(blocks)} targets, k={args.k})")
    return 0


def _read_ranking_csv(path, train_set, targets) -> list[RankedIndices]:
    """Rebuild per-target rankings from a rank CSV, aligned to ``targets``."""
    per_target: dict[int, list[int]] = {}
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    for record in csv.DictReader(rows):
        per_target.setdefault(int(record["target_id"]), []).append(int(record["train_index"]))
    rankings = []
    for target in targets:
        if target.id not in per_target:
            raise ValueError(f"ranking CSV has no rows for target id {target.id}")
        idx = np.asarray(per_target[target.id], dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= train_set.n):
            raise ValueError("ranking CSV references rows outside the train store")
        rankings.append(RankedIndices(indices=idx, k=idx.size, filter=CandidateFilter.ALL))
    return rankings


def cmd_support(args, argv) -> int:
    if (args.ranking is None) == (args.method is None):
        raise ValueError("provide exactly one of --ranking or --method")
    train_set, target_set = _load_pair(args)
    targets = iter_targets(target_set)
    if args.ranking is not None:
        rankings = _read_ranking_csv(args.ranking, train_set, targets)
        rankings = [
            RankedIndices(indices=r.indices[: args.k], k=min(args.k, r.k), filter=r.filter)
            for r in rankings
        ]
    else:
        scores = _score_targets(args, train_set, targets)
        cand_filter = _candidate_filter(args)
        rankings = [
            rank(vector, train_set, target, cand_filter, args.k)
            for target, vector in zip(targets, scores)
        ]
    cfg = _train_config(args)
    results = support_sweep(
        train_set,
        targets,
        rankings,
        ModKind(args.mode),
        cfg,
        budget=args.budget,
        n_test=args.n_test,
        n_jobs=args.jobs,
        fail_fast=False,
    )
    clean = [r for r in results if r.error is None]
    report = cdf_and_auc(clean, max(r.k for r in rankings)) if clean else None

    prefix = args.out_prefix
    manifest = _out_path(args, f"{prefix}.manifest.json")
    support_out = _out_path(args, f"{prefix}_support.csv")
    outputs = [support_out]
    _atomic_write(
        support_out,
        lambda tmp: write_support_csv(tmp, results, f"manifest: {manifest.name}"),
    )
    if report is not None:
        report_out = _out_path(args, f"{prefix}_cdf.csv")
        _atomic_write(
            report_out,
            lambda tmp: write_report_csv(tmp, report, f"manifest: {manifest.name}"),
        )
        outputs.append(report_out)
        if args.svg:
            svg_out = _out_path(args, f"{prefix}_cdf.svg")
            svg_text = cdf_svg(
                report, title=f"{args.mode} support CDF", comment=f"manifest: {manifest.name}"
            )
            _atomic_write(svg_out, lambda tmp: tmp.write_text(svg_text))
            outputs.append(svg_out)
    inputs = {"train": Path(args.train), "targets": Path(args.targets)}
    if args.ranking is not None:
        inputs["ranking"] = Path(args.ranking)
    _write_manifest(manifest, "support", argv, _config_dict(args), inputs, outputs)
    failed = sum(1 for r in results if r.error is not None)
    auc_text = f"auc={report.auc:.6f}" if report is not None else "auc=n/a"
    print(f"wrote {support_out} ({len(results)} targets, {failed} failed, {auc_text})")
    return 0


def cmd_compare(args, argv) -> int:
    results_a = read_support_csv(args.a)
    results_b = read_support_csv(args.b)
    smaller, equal, larger = win_rate(results_a, results_b)
    out = _out_path(args, args.output)
    manifest = out.with_name(out.name + ".manifest.json")

    def writer(tmp: Path) -> None:
        with open(tmp, "w", newline="") as fh:
            fh.write(f"# manifest: {manifest.name}\n")
            w = csv.writer(fh)
            w.writerow(["smaller", "equal", "larger"])
            w.writerow([smaller, equal, larger])

    _atomic_write(out, writer)
    _write_manifest(
        manifest, "compare", argv, _config_dict(args), {"a": Path(args.a), "b": Path(args.b)}, [out]
    )
    print(f"a vs b: smaller={smaller} equal={equal} larger={larger}")
    return 0


def cmd_lds(args, argv) -> int:
    train_set, target_set = _load_pair(args)
    targets = iter_targets(target_set)
    taus = _score_targets(args, train_set, targets)
    result = evaluate_lds(
        train_set,
        targets,
        taus,
        _train_config(args),
        alpha=args.alpha,
        m=args.m,
        seed=args.seed,
        n_jobs=args.jobs,
    )
    out = _out_path(args, args.output)
    manifest = out.with_name(out.name + ".manifest.json")
    _atomic_write(
        out, lambda tmp: write_lds_csv(tmp, targets, result, f"manifest: {manifest.name}")
    )
    outputs = [out]
    if args.masks_out:
        masks_out = _out_path(args, args.masks_out)
        # sampling is a pure function of (n, alpha, m, seed), so this
        # reproduces exactly the masks the evaluation used
        masks = sample_subsets(train_set.n, args.alpha, args.m, args.seed)
        _atomic_write(masks_out, lambda tmp: write_masks_binary(tmp, masks))
        outputs.append(masks_out)
    _write_manifest(
        manifest, "lds", argv, _config_dict(args),
        {"train": Path(args.train), "targets": Path(args.targets)}, outputs,
    )
    print(f"wrote {out} (mean rho={result.mean_rho:.6f} over {len(targets)} targets)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atrb",
        description="Embedding-similarity data attribution and counterfactual brittleness",
    )
    parser.add_argument("--seed", type=int, default=0, help="base seed for all randomness")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers for sweeps")
    parser.add_argument("--out-dir", default=".", help="directory for outputs and manifests")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic Gaussian-mixture store")
    p_gen.add_argument("--classes", type=int, required=True)
    p_gen.add_argument("--per-class", type=int, required=True)
    p_gen.add_argument("--dim", type=int, required=True)
    p_gen.add_argument("--spread", type=float, default=1.0)
    p_gen.add_argument("--distance", type=float, default=5.0)
    p_gen.add_argument("-o", "--output", required=True)
    p_gen.set_defaults(func=cmd_gen)

    p_rank = sub.add_parser("rank", help="score and rank training samples per target")
    _add_scoring_flags(p_rank)
    _add_oracle_flags(p_rank)
    p_rank.add_argument("-k", type=int, default=1280, help="ranking cutoff")
    p_rank.add_argument("-o", "--output", required=True)
    p_rank.set_defaults(func=cmd_rank)

    p_support = sub.add_parser(
        "support",
        help="estimate per-target data support by budgeted bisection",
        epilog="protocol defaults: --budget 7 --n-test 5 -k 1280; "
        "imagenet-style profile: --n-test 1 -k 1000",
    )
    _add_scoring_flags(p_support)
    _add_oracle_flags(p_support)
    p_support.add_argument("--ranking", default=None, help="precomputed ranking CSV")
    p_support.add_argument("--mode", required=True, choices=[m.value for m in ModKind])
    p_support.add_argument("--budget", type=int, default=7)
    p_support.add_argument("--n-test", type=int, default=5)
    p_support.add_argument("-k", type=int, default=1280)
    p_support.add_argument("--out-prefix", required=True)
    p_support.add_argument("--svg", action="store_true", help="also plot the CDF")
    # --method comes from the scoring flags but is optional here.
    for action in p_support._actions:
        if action.dest == "method":
            action.required = False
            action.default = None
    p_support.set_defaults(func=cmd_support)

    p_compare = sub.add_parser("compare", help="win-rate between two support CSVs")
    p_compare.add_argument("--a", required=True)
    p_compare.add_argument("--b", required=True)
    p_compare.add_argument("-o", "--output", required=True)
    p_compare.set_defaults(func=cmd_compare)

    p_lds = sub.add_parser("lds", help="linear datamodeling score over random subsets")
    _add_scoring_flags(p_lds)
    _add_oracle_flags(p_lds)
    p_lds.add_argument("--alpha", type=float, default=0.5)
    p_lds.add_argument("-m", type=int, default=64, help="number of random subsets")
    p_lds.add_argument("--masks-out", default=None,
                       help="also export the subset masks (bit-packed binary)")
    p_lds.add_argument("-o", "--output", required=True)
    p_lds.set_defaults(func=cmd_lds)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except (StoreError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def replay_manifest(manifest_path, out_dir=None) -> dict[str, str]:
    """Re-run the argv stored in a manifest; returns the new output digests.

    ``out_dir`` overrides the recorded --out-dir so a replay can land in a
    scratch directory and still be compared digest-for-digest.
    """
    payload = json.loads(Path(manifest_path).read_text())
    argv = list(payload["argv"])
    if out_dir is not None:
        if "--out-dir" in argv:
            where = argv.index("--out-dir")
            argv[where + 1] = str(out_dir)
        else:
            argv = ["--out-dir", str(out_dir)] + argv
    code = main(argv)
    if code != 0:
        raise RuntimeError(f"replay of {manifest_path} exited with {code}")
    return {
        name: _sha256(Path(out_dir if out_dir is not None else ".") / name)
        for name in payload["outputs"]
    }


if __name__ == "__main__":
    sys.exit(main())
