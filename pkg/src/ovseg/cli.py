"""Command-line front end.

Subcommands map one-to-one onto experiment rows:

  evaluate       standard inference (optionally with the classification oracle)
  oracle-select  Hungarian mask-selection oracle, keep/strip no-object policy,
                 optionally stacked with segmentation/classification oracles
  zeroshot       classify ground-truth masks from pooled dense features
  diff           hard-class table between an open-vocabulary and a reference run
  synth          write a deterministic synthetic dump + ground truth

Configuration precedence: command-line flags > --config JSON file > defaults.
The resolved configuration (minus output paths and --jobs) is embedded in
every report, so reports are byte-identical for any --jobs value.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import FormatError, InvariantViolation, OvsegError, PanopticMap, Taxonomy, ValidationError, taxonomy_split
from .formats import read_texts, write_features, write_panoptic, write_texts
from .metrics import MatchReport, accumulate, evaluate_image
from .oracles import (
    AssignmentCostParams,
    classification_oracle,
    classification_oracle_on_selection,
    segmentation_oracle_on_selection,
    selection_oracle,
)
from .proposals import (
    CandidateSet,
    FusionParams,
    drop_no_object,
    ensemble_candidates,
    panoptic_fusion,
    use_clip_posteriors,
)
from .reporting import (
    RunReport,
    build_run_report,
    canonical_json,
    diff_to_csv,
    gt_path,
    hard_class_diff,
    load_dump,
    load_gt,
    load_taxonomy,
    read_report,
    save_dump,
    write_report,
)
from .testkit import SceneSpec, gen_features, gen_scene, random_text_embeddings, synthetic_taxonomy
from .zeroshot import segmentation_oracle_image

log = logging.getLogger("ovseg")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3
SUBCOMMANDS = ("evaluate", "oracle-select", "zeroshot", "diff", "synth")
CLASSIFIERS = ("auto", "in", "ensemble", "clip")


class ConfigError(ValidationError):
    """Invalid flag combination or missing input."""


@dataclass
class RunConfig:
    subcommand: str
    # inputs
    dump: str | None = None
    gt: str | None = None
    taxonomy: str | None = None
    train_taxonomy: str | None = None
    texts: str | None = None
    openvocab: str | None = None
    reference: str | None = None
    # outputs (not part of the report snapshot)
    out: str | None = None
    csv: str | None = None
    audit: str | None = None
    jobs: int = 1
    # fusion
    object_score_threshold: float = 0.8
    overlap_keep_ratio: float = 0.8
    sigma_threshold: float = 0.5
    merge_stuff: bool = True
    void_overlap_threshold: float = 0.5
    # classification
    classifier: str = "auto"
    alpha: float = 0.4
    beta: float = 0.8
    tau: float = 0.01
    # oracles
    oracle_cls: bool = False
    no_object_policy: str = "keep"
    oracle_seg_on_selection: bool = False
    oracle_cls_on_selection: bool = False
    bce_weight: float = 5.0
    dice_weight: float = 5.0
    prob_clamp: float = 1e-7
    # diff
    recall_threshold: float = 0.1
    # synth
    seed: int = 0
    images: int = 4
    width: int = 32
    height: int = 32
    min_segments: int = 2
    max_segments: int = 6
    classes: int = 8
    morph_radius: int = 1
    morph_mode: str = "both"
    class_flip_prob: float = 0.0
    no_object_flip_prob: float = 0.0
    spurious_count: int = 0
    void_prob: float = 0.0
    clip_flip_prob: float = 0.0
    features: bool = False
    feature_dim: int = 16
    stride: int = 2
    feature_noise: float = 0.0

    @property
    def oracle_select(self) -> bool:
        return self.subcommand == "oracle-select"

    @property
    def fusion(self) -> FusionParams:
        return FusionParams(
            self.object_score_threshold, self.overlap_keep_ratio, self.sigma_threshold, self.merge_stuff
        )

    @property
    def cost(self) -> AssignmentCostParams:
        return AssignmentCostParams(self.bce_weight, self.dice_weight, self.prob_clamp)

    def validate(self) -> None:
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        if (self.oracle_seg_on_selection or self.oracle_cls_on_selection) and not self.oracle_select:
            raise ConfigError(
                "--oracle-seg-on-selection/--oracle-cls-on-selection require oracle mask selection; "
                "run the 'oracle-select' subcommand instead"
            )
        if self.no_object_policy not in ("keep", "strip"):
            raise ConfigError(f"--no-object-policy must be 'keep' or 'strip', got {self.no_object_policy!r}")
        if self.classifier not in CLASSIFIERS:
            raise ConfigError(f"--classifier must be one of {', '.join(CLASSIFIERS)}")
        if self.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        for name in ("alpha", "beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"--{name} must be in [0, 1]")
        if not self.tau > 0:
            raise ConfigError("--tau must be positive")
        # constructing the parameter objects runs their range checks
        FusionParams(self.object_score_threshold, self.overlap_keep_ratio, self.sigma_threshold, self.merge_stuff)
        AssignmentCostParams(self.bce_weight, self.dice_weight, self.prob_clamp)
        need = {
            "evaluate": ("dump", "gt"),
            "oracle-select": ("dump", "gt"),
            "zeroshot": ("dump", "gt"),
            "diff": ("openvocab", "reference"),
            "synth": ("out",),
        }[self.subcommand]
        missing = [n for n in need if getattr(self, n) is None]
        if missing:
            flags = ", ".join("--" + m.replace("_", "-") for m in missing)
            raise ConfigError(f"{self.subcommand} requires {flags}")
        if self.subcommand == "synth":
            SceneSpec(**self.scene_kwargs(0))

    def scene_kwargs(self, seed: int) -> dict:
        return dict(
            width=self.width,
            height=self.height,
            min_segments=self.min_segments,
            max_segments=self.max_segments,
            num_classes=self.classes,
            morph_radius=self.morph_radius,
            morph_mode=self.morph_mode,
            class_flip_prob=self.class_flip_prob,
            no_object_flip_prob=self.no_object_flip_prob,
            spurious_count=self.spurious_count,
            void_prob=self.void_prob,
            clip_flip_prob=self.clip_flip_prob,
            seed=seed,
        )

    def snapshot(self) -> dict:
        """Settings that influence results; excludes output locations and --jobs."""
        skip = {"out", "csv", "audit", "jobs"}
        relevant = {
            "evaluate": _EVAL_KEYS,
            "oracle-select": _EVAL_KEYS | _SELECT_KEYS,
            "zeroshot": {"dump", "gt", "taxonomy", "train_taxonomy", "texts", "tau", "void_overlap_threshold"},
            "diff": {"openvocab", "reference", "recall_threshold"},
            "synth": set(_SYNTH_KEYS) | {"seed"},
        }[self.subcommand]
        data = {k: v for k, v in asdict(self).items() if k in relevant and k not in skip}
        data["subcommand"] = self.subcommand
        return data


_EVAL_KEYS = {
    "dump",
    "gt",
    "taxonomy",
    "train_taxonomy",
    "object_score_threshold",
    "overlap_keep_ratio",
    "sigma_threshold",
    "merge_stuff",
    "void_overlap_threshold",
    "classifier",
    "alpha",
    "beta",
    "oracle_cls",
}
_SELECT_KEYS = {
    "no_object_policy",
    "oracle_seg_on_selection",
    "oracle_cls_on_selection",
    "bce_weight",
    "dice_weight",
    "prob_clamp",
}
_SYNTH_KEYS = (
    "images",
    "width",
    "height",
    "min_segments",
    "max_segments",
    "classes",
    "morph_radius",
    "morph_mode",
    "class_flip_prob",
    "no_object_flip_prob",
    "spurious_count",
    "void_prob",
    "clip_flip_prob",
    "features",
    "feature_dim",
    "stride",
    "feature_noise",
)
_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def resolve_config(subcommand: str, cli_values: dict, config_file: str | None = None) -> RunConfig:
    values: dict = {}
    if config_file is not None:
        try:
            data = json.loads(Path(config_file).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{config_file}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{config_file}: config must be a JSON object")
        data = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = sorted(set(data) - _FIELD_NAMES - {"subcommand"})
        if unknown:
            raise ConfigError(f"{config_file}: unknown config keys {unknown}")
        data.pop("subcommand", None)
        values.update(data)
    values.update(cli_values)
    if "jobs" not in values and os.environ.get("OVSEG_JOBS"):
        try:
            values["jobs"] = int(os.environ["OVSEG_JOBS"])
        except ValueError:
            raise ConfigError(f"OVSEG_JOBS must be an integer, got {os.environ['OVSEG_JOBS']!r}") from None
    config = RunConfig(subcommand=subcommand, **values)
    config.validate()
    return config


# ---------------------------------------------------------------------------
# execution helpers


def _parallel_map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _taxonomy_for(config: RunConfig, dump_taxonomy: Taxonomy) -> Taxonomy:
    taxonomy = load_taxonomy(config.taxonomy) if config.taxonomy else dump_taxonomy
    if taxonomy.seen is None and config.train_taxonomy:
        seen, _ = taxonomy_split(load_taxonomy(config.train_taxonomy), taxonomy)
        taxonomy = taxonomy.with_split(seen)
    return taxonomy


def classify(cands: CandidateSet, config: RunConfig, taxonomy: Taxonomy) -> CandidateSet:
    """Apply the configured classifier to posteriors over C."""
    mode = config.classifier
    if mode == "auto":
        mode = "ensemble" if cands.clip_posteriors is not None else "in"
    if mode == "in":
        return cands
    if cands.clip_posteriors is None:
        raise ConfigError(f"--classifier {mode} needs CLIP posteriors in the dump")
    if mode == "clip":
        return use_clip_posteriors(cands)
    return ensemble_candidates(cands, taxonomy.seen_vector(), config.alpha, config.beta)


def _score(pred: PanopticMap, gt: PanopticMap, config: RunConfig, taxonomy: Taxonomy) -> MatchReport:
    if config.oracle_cls:
        pred = classification_oracle(pred, gt)
    return evaluate_image(pred, gt, config.void_overlap_threshold, len(taxonomy))


def _evaluate_one(task) -> MatchReport:
    config, taxonomy, dump_root, image_id = task
    dump = load_dump(dump_root, eager=False)
    gt = load_gt(config.gt, image_id)
    cands = dump.load_candidates(image_id)
    kept = classify(drop_no_object(cands), config, taxonomy)
    pred = panoptic_fusion(kept, taxonomy, config.fusion)
    return _score(pred, gt, config, taxonomy)


def _oracle_select_one(task) -> tuple[MatchReport, dict]:
    config, taxonomy, dump_root, image_id = task
    dump = load_dump(dump_root, eager=False)
    gt = load_gt(config.gt, image_id)
    cands = dump.load_candidates(image_id)
    audit: dict = {"image_id": image_id}
    if not gt.segments:
        pred = PanopticMap.void_map(*gt.shape)
        audit.update(pairs=[], no_object_matched=[], guaranteed_fn_seg=0)
        return _score(pred, gt, config, taxonomy), audit
    sel = selection_oracle(cands, gt, config.cost, config.no_object_policy)
    if config.oracle_seg_on_selection:
        sel = segmentation_oracle_on_selection(sel, gt)
    if config.oracle_cls_on_selection:
        sel = classification_oracle_on_selection(sel, gt)
    selected = sel.candidates
    if selected.has_no_object:
        selected = drop_no_object(selected)
    if not config.oracle_cls_on_selection:
        selected = classify(selected, config, taxonomy)
    pred = panoptic_fusion(selected, taxonomy, config.fusion)
    audit.update(
        pairs=[
            {
                "gt_segment_id": gt.segments[g][0],
                "candidate": int(cands.source_index[c]),
                "cost": float(sel.cost[g, c]),
                "no_object_argmax": int(cands.source_index[c]) in sel.no_object_matched,
            }
            for g, c in sel.assignment.pairs
        ],
        no_object_matched=list(sel.no_object_matched),
        guaranteed_fn_seg=sel.shortfall,
    )
    return _score(pred, gt, config, taxonomy), audit


def _zeroshot_one(task) -> MatchReport:
    config, taxonomy, dump_root, image_id = task
    dump = load_dump(dump_root, eager=False)
    texts = _load_texts(config, dump)
    return segmentation_oracle_image(dump.features(image_id), load_gt(config.gt, image_id), texts, taxonomy)


def _load_texts(config: RunConfig, dump):
    return read_texts(config.texts) if config.texts else dump.texts()


def _check_reports(reports: Sequence[MatchReport]) -> None:
    for r in reports:
        for s in r.per_class.values():
            if s.tp and not 0.0 <= s.sq <= 1.0 + 1e-12:
                raise InvariantViolation(f"sq out of range: {s.sq}")


def _run_images(config: RunConfig, worker: Callable):
    dump = load_dump(config.dump, eager=True)
    taxonomy = _taxonomy_for(config, dump.taxonomy)
    if len(taxonomy) != len(dump.taxonomy):
        raise ConfigError(f"--taxonomy has {len(taxonomy)} classes but the dump was written for {len(dump.taxonomy)}")
    for image_id in dump.image_ids:
        path = gt_path(config.gt, image_id)
        if not path.is_file():
            raise FormatError(f"ground truth for image {image_id!r} not found at {path}")
    tasks = [(config, taxonomy, str(dump.root), image_id) for image_id in dump.image_ids]
    return dump, taxonomy, _parallel_map(worker, tasks, config.jobs)


def _finish(config: RunConfig, reports: list[MatchReport], taxonomy: Taxonomy, metadata: dict) -> RunReport:
    _check_reports(reports)
    metadata = dict(metadata, images=len(reports))
    report = build_run_report(accumulate(reports), taxonomy, config.snapshot(), metadata)
    if config.out:
        write_report(report, "json", config.out)
    if config.csv:
        write_report(report, "csv", config.csv)
    return report


def cmd_evaluate(config: RunConfig) -> RunReport:
    _, taxonomy, reports = _run_images(config, _evaluate_one)
    return _finish(config, reports, taxonomy, {})


def cmd_oracle_select(config: RunConfig) -> RunReport:
    _, taxonomy, results = _run_images(config, _oracle_select_one)
    reports = [r for r, _ in results]
    audits = [a for _, a in results]
    metadata = {
        "guaranteed_fn_seg": sum(a["guaranteed_fn_seg"] for a in audits),
        "no_object_matched": sum(len(a["no_object_matched"]) for a in audits),
    }
    if config.audit:
        Path(config.audit).write_text(canonical_json({"images": audits, "config": config.snapshot()}))
    return _finish(config, reports, taxonomy, metadata)


def cmd_zeroshot(config: RunConfig) -> RunReport:
    dump = load_dump(config.dump, eager=False)
    missing = [i for i in dump.image_ids if dump.entry(i).features is None]
    if missing:
        raise FormatError(f"images without feature grids in {config.dump}: {missing}")
    texts = _load_texts(config, dump)
    taxonomy = _taxonomy_for(config, dump.taxonomy)
    if len(texts) != len(taxonomy):
        raise ConfigError(f"{len(texts)} text embeddings for a taxonomy of {len(taxonomy)} classes")
    _, taxonomy, reports = _run_images(config, _zeroshot_one)
    metadata = {"empty_mask_skips": sum(r.empty_mask_skips for r in reports)}
    return _finish(config, reports, taxonomy, metadata)


def cmd_diff(config: RunConfig):
    rows = hard_class_diff(read_report(config.openvocab), read_report(config.reference), config.recall_threshold)
    text = diff_to_csv(rows)
    if config.out:
        Path(config.out).write_text(text)
    return rows


def cmd_synth(config: RunConfig) -> Path:
    """Write ``<out>/dump`` and ``<out>/gt``; every byte depends only on the configuration."""
    root = Path(config.out)
    gt_dir = root / "gt"
    dump_dir = root / "dump"
    gt_dir.mkdir(parents=True, exist_ok=True)
    (dump_dir / "features").mkdir(parents=True, exist_ok=True)
    taxonomy = synthetic_taxonomy(config.classes)
    seeds = np.random.SeedSequence(config.seed).generate_state(config.images)
    texts = random_text_embeddings(config.classes, config.feature_dim, config.seed) if config.features else None
    candidates, features = {}, {}
    for i, seed in enumerate(seeds):
        image_id = f"img_{i:04d}"
        gt, cands = gen_scene(SceneSpec(**config.scene_kwargs(int(seed))), taxonomy)
        write_panoptic(gt_path(gt_dir, image_id), gt)
        candidates[image_id] = cands
        if texts is not None:
            rel = f"features/{image_id}.ovft"
            write_features(dump_dir / rel, gen_features(gt, texts, config.stride, config.feature_noise, int(seed)))
            features[image_id] = rel
    if texts is not None:
        write_texts(dump_dir / "texts.ovte", texts)
    save_dump(
        dump_dir,
        taxonomy,
        candidates,
        features=features,
        texts="texts.ovte" if texts is not None else None,
        resolution={"height": config.height, "width": config.width, "stride": config.stride},
    )
    (root / "synth_config.json").write_text(canonical_json(config.snapshot()))
    return root


COMMANDS = {
    "evaluate": cmd_evaluate,
    "oracle-select": cmd_oracle_select,
    "zeroshot": cmd_zeroshot,
    "diff": cmd_diff,
    "synth": cmd_synth,
}


# ---------------------------------------------------------------------------
# argument parsing


def _bool_flag(parser, name: str, help: str) -> None:
    dest = name.replace("-", "_")
    parser.add_argument(f"--{name}", dest=dest, action="store_true", default=argparse.SUPPRESS, help=help)
    parser.add_argument(f"--no-{name}", dest=dest, action="store_false", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovseg", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, inputs=True):
        S = argparse.SUPPRESS
        p.add_argument("--config", default=None, help="JSON config file (flags override it)")
        p.add_argument("--jobs", type=int, default=S, help="worker processes (env OVSEG_JOBS)")
        p.add_argument("--out", default=S, help="output path")
        if inputs:
            p.add_argument("--dump", default=S, help="dump directory (manifest.json)")
            p.add_argument("--gt", default=S, help="directory of <image_id>.ovpm ground-truth maps")
            p.add_argument("--taxonomy", default=S, help="taxonomy JSON overriding the dump's")
            p.add_argument("--train-taxonomy", default=S, help="training taxonomy for a string-match seen split")
            p.add_argument("--csv", default=S, help="also write the report as CSV")
            p.add_argument("--void-overlap-threshold", type=float, default=S)

    def fusion(p):
        S = argparse.SUPPRESS
        p.add_argument("--object-score-threshold", type=float, default=S)
        p.add_argument("--overlap-keep-ratio", type=float, default=S)
        p.add_argument("--sigma-threshold", type=float, default=S)
        _bool_flag(p, "merge-stuff", "merge stuff segments of the same class")
        p.add_argument("--classifier", choices=CLASSIFIERS, default=S)
        p.add_argument("--alpha", type=float, default=S, help="CLIP weight for seen classes")
        p.add_argument("--beta", type=float, default=S, help="CLIP weight for unseen classes")
        _bool_flag(p, "oracle-cls", "apply the classification oracle to the final panoptic map")

    p = sub.add_parser("evaluate", help="standard inference and PQ")
    common(p)
    fusion(p)

    p = sub.add_parser("oracle-select", help="oracle mask selection")
    common(p)
    fusion(p)
    S = argparse.SUPPRESS
    p.add_argument("--no-object-policy", choices=("keep", "strip"), default=S)
    _bool_flag(p, "oracle-seg-on-selection", "replace matched masks by their gt masks")
    _bool_flag(p, "oracle-cls-on-selection", "one-hot gt classes for matched masks")
    p.add_argument("--bce-weight", type=float, default=S)
    p.add_argument("--dice-weight", type=float, default=S)
    p.add_argument("--prob-clamp", type=float, default=S)
    p.add_argument("--audit", default=S, help="write per-image assignments as JSON")

    p = sub.add_parser("zeroshot", help="classify gt masks from pooled features")
    common(p)
    p.add_argument("--texts", default=S, help="OVTE text embeddings (default: from the manifest)")
    p.add_argument("--tau", type=float, default=S)

    p = sub.add_parser("diff", help="hard-class table")
    common(p, inputs=False)
    p.add_argument("--openvocab", default=S, help="report of the open-vocabulary run")
    p.add_argument("--reference", default=S, help="report of the in-domain reference run")
    p.add_argument("--recall-threshold", type=float, default=S)

    p = sub.add_parser("synth", help="write a synthetic dump and ground truth")
    common(p, inputs=False)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--images", type=int, default=S)
    p.add_argument("--width", type=int, default=S)
    p.add_argument("--height", type=int, default=S)
    p.add_argument("--min-segments", type=int, default=S)
    p.add_argument("--max-segments", type=int, default=S)
    p.add_argument("--classes", type=int, default=S)
    p.add_argument("--morph-radius", type=int, default=S)
    p.add_argument("--morph-mode", choices=("both", "erode", "dilate"), default=S)
    p.add_argument("--class-flip-prob", type=float, default=S)
    p.add_argument("--no-object-flip-prob", type=float, default=S)
    p.add_argument("--spurious-count", type=int, default=S)
    p.add_argument("--void-prob", type=float, default=S)
    p.add_argument("--clip-flip-prob", type=float, default=S)
    _bool_flag(p, "features", "also write feature grids and text embeddings")
    p.add_argument("--feature-dim", type=int, default=S)
    p.add_argument("--stride", type=int, default=S)
    p.add_argument("--feature-noise", type=float, default=S)
    return parser


def _summary(result) -> str:
    if isinstance(result, RunReport):
        parts = [f"pq_all={result.pq_all}"]
        if result.pq_seen is not None or result.pq_unseen is not None:
            parts += [f"pq_seen={result.pq_seen}", f"pq_unseen={result.pq_unseen}"]
        return " ".join(parts)
    if isinstance(result, Path):
        return f"wrote {result}"
    return diff_to_csv(result).rstrip("\n")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; bad flags are validation errors here
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.pop("verbose") else logging.WARNING, format="%(message)s")
    subcommand = args.pop("subcommand")
    config_file = args.pop("config", None)
    try:
        config = resolve_config(subcommand, args, config_file)
        result = COMMANDS[subcommand](config)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvariantViolation as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (OvsegError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    print(_summary(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
