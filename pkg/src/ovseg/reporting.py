"""Prediction dumps, run reports (canonical JSON / CSV), and the hard-class diff."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .core import FormatError, OvsegError, PanopticMap, Taxonomy, ValidationError
from .formats import read_candidates, read_features, read_panoptic, read_texts, write_candidates
from .metrics import ClassStats, Scores
from .proposals import CandidateSet
from .zeroshot import DenseFeatureGrid, TextEmbeddings

DUMP_FORMAT = "ovseg-dump"
DUMP_VERSION = 1
REPORT_FORMAT = "ovseg-report"
SELF_CONSISTENCY_ATOL = 1e-5


# ---------------------------------------------------------------------------
# dumps


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    candidates: str
    features: str | None = None


@dataclass
class PredictionDump:
    """A dump directory: manifest, taxonomy, and per-image candidate records.

    ``candidates`` is filled eagerly by :func:`load_dump`; feature grids stay
    on disk and are read through :meth:`features`.
    """

    root: Path
    taxonomy: Taxonomy
    images: list[ImageEntry]
    candidates: dict[str, CandidateSet] = field(default_factory=dict)
    resolution: dict = field(default_factory=dict)
    texts_path: str | None = None

    @property
    def image_ids(self) -> list[str]:
        return [e.image_id for e in self.images]

    def entry(self, image_id: str) -> ImageEntry:
        for e in self.images:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)

    def load_candidates(self, image_id: str) -> CandidateSet:
        if image_id in self.candidates:
            return self.candidates[image_id]
        return _read_image_candidates(self.root, self.entry(image_id), len(self.taxonomy))

    def features(self, image_id: str) -> DenseFeatureGrid:
        entry = self.entry(image_id)
        if entry.features is None:
            raise FormatError(f"image {image_id!r} has no feature grid in the dump manifest")
        return read_features(self.root / entry.features)

    def texts(self) -> TextEmbeddings:
        if self.texts_path is None:
            raise FormatError(f"{self.root}: manifest names no text embeddings")
        return read_texts(self.root / self.texts_path)


def load_taxonomy(path) -> Taxonomy:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    try:
        return Taxonomy.from_json(data)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def save_taxonomy(path, taxonomy: Taxonomy) -> None:
    Path(path).write_text(canonical_json(taxonomy.to_json()))


def _read_image_candidates(root: Path, entry: ImageEntry, num_classes: int) -> CandidateSet:
    try:
        cands = read_candidates(root / entry.candidates)
    except (FormatError, ValidationError) as exc:
        raise type(exc)(f"image {entry.image_id!r}: {exc}") from None
    if cands.num_classes != num_classes:
        raise ValidationError(
            f"image {entry.image_id!r}: candidates cover {cands.num_classes} classes, taxonomy has {num_classes}"
        )
    return cands


def read_manifest(root) -> tuple[dict, Taxonomy, list[ImageEntry]]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON: {exc}") from None
    if manifest.get("format") != DUMP_FORMAT or manifest.get("version") != DUMP_VERSION:
        raise FormatError(
            f"{manifest_path}: expected format {DUMP_FORMAT!r} version {DUMP_VERSION}, "
            f"got {manifest.get('format')!r} version {manifest.get('version')!r}"
        )
    taxonomy = load_taxonomy(root / manifest["taxonomy"])
    images = []
    seen = set()
    for item in manifest.get("images", []):
        entry = ImageEntry(str(item["id"]), str(item["candidates"]), item.get("features"))
        if entry.image_id in seen:
            raise ValidationError(f"{manifest_path}: duplicate image id {entry.image_id!r}")
        seen.add(entry.image_id)
        images.append(entry)
    images.sort(key=lambda e: e.image_id)
    return manifest, taxonomy, images


def load_dump(path, eager: bool = True) -> PredictionDump:
    root = Path(path)
    manifest, taxonomy, images = read_manifest(root)
    dump = PredictionDump(
        root=root,
        taxonomy=taxonomy,
        images=images,
        resolution=dict(manifest.get("resolution", {})),
        texts_path=manifest.get("texts"),
    )
    for entry in images:
        if not (root / entry.candidates).is_file():
            raise FormatError(f"image {entry.image_id!r}: payload {root / entry.candidates} does not exist")
        if entry.features is not None and not (root / entry.features).is_file():
            raise FormatError(f"image {entry.image_id!r}: feature grid {root / entry.features} does not exist")
        if eager:
            dump.candidates[entry.image_id] = _read_image_candidates(root, entry, len(taxonomy))
    return dump


def save_dump(
    path,
    taxonomy: Taxonomy,
    candidates: Mapping[str, CandidateSet],
    features: Mapping[str, str] | None = None,
    texts: str | None = None,
    resolution: dict | None = None,
) -> Path:
    """Write a dump directory; ``features``/``texts`` are paths relative to it, already written."""
    root = Path(path)
    (root / "candidates").mkdir(parents=True, exist_ok=True)
    save_taxonomy(root / "taxonomy.json", taxonomy)
    images = []
    for image_id in sorted(candidates):
        rel = f"candidates/{image_id}.ovcd"
        write_candidates(root / rel, candidates[image_id])
        item: dict[str, Any] = {"id": image_id, "candidates": rel}
        if features and image_id in features:
            item["features"] = features[image_id]
        images.append(item)
    manifest: dict[str, Any] = {
        "format": DUMP_FORMAT,
        "version": DUMP_VERSION,
        "taxonomy": "taxonomy.json",
        "images": images,
        "resolution": resolution or {},
    }
    if texts:
        manifest["texts"] = texts
    (root / "manifest.json").write_text(canonical_json(manifest))
    return root


def gt_path(gt_dir, image_id: str) -> Path:
    return Path(gt_dir) / f"{image_id}.ovpm"


def load_gt(gt_dir, image_id: str) -> PanopticMap:
    path = gt_path(gt_dir, image_id)
    if not path.is_file():
        raise FormatError(f"ground truth for image {image_id!r} not found at {path}")
    return read_panoptic(path)


# ---------------------------------------------------------------------------
# canonical JSON


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValidationError(f"cannot serialize non-finite float {x}")
    return format(x, ".6g")


def round_sig(x: float | None) -> float | None:
    return None if x is None else float(format_float(float(x)))


def _emit(obj, indent: int, level: int, out: list[str]) -> None:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None or isinstance(obj, bool):
        out.append(json.dumps(obj))
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(format_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, Mapping):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = sorted(obj.items(), key=lambda kv: str(kv[0]))
        for i, (k, v) in enumerate(items):
            out.append(f"{pad}{json.dumps(str(k), ensure_ascii=False)}: ")
            _emit(v, indent, level + 1, out)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(end + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        out.append("[\n")
        for i, v in enumerate(obj):
            out.append(pad)
            _emit(v, indent, level + 1, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(end + "]")
    else:
        raise ValidationError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj, indent: int = 2) -> str:
    """Sorted keys, floats at 6 significant digits, trailing newline."""
    out: list[str] = []
    _emit(obj, indent, 0, out)
    return "".join(out) + "\n"


# ---------------------------------------------------------------------------
# run reports


@dataclass(frozen=True)
class ClassRow:
    class_id: int
    name: str
    present: bool
    seen: bool | None
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn_seg: int
    fn_cls: int
    recall: float

    @property
    def fn(self) -> int:
        return self.fn_seg + self.fn_cls


FLOAT_FIELDS = ("pq", "sq", "rq", "recall")
INT_FIELDS = ("class_id", "tp", "fp", "fn_seg", "fn_cls")
AGGREGATES = ("pq_all", "sq_all", "rq_all", "pq_seen", "pq_unseen")


class ReportError(OvsegError, ValueError):
    """A report fails its self-consistency check."""


@dataclass(frozen=True)
class RunReport:
    config: dict
    rows: tuple[ClassRow, ...]
    pq_all: float | None
    sq_all: float | None
    rq_all: float | None
    pq_seen: float | None = None
    pq_unseen: float | None = None
    metadata: dict = field(default_factory=dict)

    def row(self, class_id: int) -> ClassRow:
        for r in self.rows:
            if r.class_id == class_id:
                return r
        raise KeyError(class_id)

    def to_json(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "config": self.config,
            "metadata": self.metadata,
            "aggregates": {k: getattr(self, k) for k in AGGREGATES},
            "classes": [asdict(r) for r in self.rows],
        }

    @classmethod
    def from_json(cls, data: dict) -> "RunReport":
        if data.get("format") != REPORT_FORMAT:
            raise FormatError(f"not a run report (format={data.get('format')!r})")
        rows = tuple(_row_from_mapping(r) for r in data["classes"])
        agg = data["aggregates"]
        return cls(
            config=data.get("config", {}),
            rows=rows,
            metadata=data.get("metadata", {}),
            **{k: None if agg.get(k) is None else float(agg[k]) for k in AGGREGATES},
        )


def _row_from_mapping(r: Mapping[str, Any]) -> ClassRow:
    def flag(v):
        if v is None or v == "":
            return None
        if isinstance(v, str):
            return v.lower() == "true"
        return bool(v)

    return ClassRow(
        class_id=int(r["class_id"]),
        name=str(r["name"]),
        present=bool(flag(r["present"])),
        seen=flag(r.get("seen")),
        **{k: float(r[k]) for k in FLOAT_FIELDS},
        **{k: int(r[k]) for k in INT_FIELDS if k != "class_id"},
    )


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def _normalized(obj: dict) -> dict:
    """What a mapping looks like after a canonical JSON round trip (6-digit floats, lists for tuples)."""
    return json.loads(canonical_json(obj))


def build_run_report(
    stats: Mapping[int, ClassStats] | Scores,
    taxonomy: Taxonomy,
    config: dict,
    metadata: dict | None = None,
) -> RunReport:
    """One row per taxonomy class; aggregates average PQ over present classes only."""
    if isinstance(stats, Scores):
        stats = stats.per_class
    rows = []
    for cid, info in enumerate(taxonomy.classes):
        s = stats.get(cid, ClassStats())
        rows.append(
            ClassRow(
                class_id=cid,
                name=info.name,
                present=s.present,
                seen=None if taxonomy.seen is None else cid in taxonomy.seen,
                pq=round_sig(s.pq),
                sq=round_sig(s.sq),
                rq=round_sig(s.rq),
                tp=s.tp,
                fp=s.fp,
                fn_seg=s.fn_seg,
                fn_cls=s.fn_cls,
                recall=round_sig(s.recall),
            )
        )
    unknown = sorted(c for c in stats if not 0 <= c < len(taxonomy))
    if unknown:
        raise ValidationError(f"class ids out of range for taxonomy of size {len(taxonomy)}: {unknown}")
    present = [cid for cid in sorted(stats) if stats[cid].present]
    agg = {
        "pq_all": _mean([stats[c].pq for c in present]),
        "sq_all": _mean([stats[c].sq for c in present]),
        "rq_all": _mean([stats[c].rq for c in present]),
        "pq_seen": None,
        "pq_unseen": None,
    }
    if taxonomy.seen is not None:
        agg["pq_seen"] = _mean([stats[c].pq for c in present if c in taxonomy.seen])
        agg["pq_unseen"] = _mean([stats[c].pq for c in present if c not in taxonomy.seen])
    meta = {"class_averaging": "present-classes"}
    meta.update(metadata or {})
    return RunReport(
        config=_normalized(config),
        rows=tuple(rows),
        metadata=_normalized(meta),
        **{k: round_sig(v) for k, v in agg.items()},
    )


def check_report(report: RunReport) -> None:
    """Recompute recall and aggregates from rows; raise ReportError on disagreement."""
    for r in report.rows:
        denom = r.tp + r.fn
        recall = r.tp / denom if denom else 0.0
        if abs(recall - r.recall) > SELF_CONSISTENCY_ATOL:
            raise ReportError(f"class {r.class_id}: recall {r.recall} but tp/(tp+fn) = {recall:.6g}")
        for k in FLOAT_FIELDS:
            if not 0.0 <= getattr(r, k) <= 1.0:
                raise ReportError(f"class {r.class_id}: {k} = {getattr(r, k)} outside [0, 1]")
        if r.present != (r.tp + r.fp + r.fn > 0):
            raise ReportError(f"class {r.class_id}: present flag disagrees with counts")
    present = [r for r in report.rows if r.present]
    expected = {
        "pq_all": _mean([r.pq for r in present]),
        "sq_all": _mean([r.sq for r in present]),
        "rq_all": _mean([r.rq for r in present]),
    }
    if any(r.seen is not None for r in report.rows):
        expected["pq_seen"] = _mean([r.pq for r in present if r.seen])
        expected["pq_unseen"] = _mean([r.pq for r in present if not r.seen])
    for k, v in expected.items():
        got = getattr(report, k)
        if (v is None) != (got is None) or (v is not None and abs(v - got) > SELF_CONSISTENCY_ATOL):
            raise ReportError(f"aggregate {k} = {got} but rows give {v}")


CSV_COLUMNS = ("kind", "class_id", "name", "present", "seen") + FLOAT_FIELDS[:3] + (
    "tp",
    "fp",
    "fn_seg",
    "fn_cls",
    "recall",
)


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format_float(v)
    return str(v)


def report_to_csv(report: RunReport) -> str:
    buf = io.StringIO()
    buf.write("# config: " + canonical_json(report.config, indent=0).replace("\n", "") + "\n")
    buf.write("# metadata: " + canonical_json(report.metadata, indent=0).replace("\n", "") + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.rows:
        d = asdict(r)
        writer.writerow(["class"] + [_csv_value(d[c]) for c in CSV_COLUMNS[1:]])
    if report.rows:
        for k in AGGREGATES:
            writer.writerow(["aggregate", "", k, "", "", _csv_value(getattr(report, k))] + [""] * 6)
    return buf.getvalue()


def report_from_csv(text: str) -> RunReport:
    config: dict = {}
    metadata: dict = {}
    lines = []
    for line in text.splitlines():
        if line.startswith("# config: "):
            config = json.loads(line[len("# config: ") :])
        elif line.startswith("# metadata: "):
            metadata = json.loads(line[len("# metadata: ") :])
        else:
            lines.append(line)
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise FormatError(f"unexpected CSV header {reader.fieldnames}")
    rows, agg = [], {k: None for k in AGGREGATES}
    for rec in reader:
        if rec["kind"] == "class":
            rows.append(_row_from_mapping(rec))
        elif rec["kind"] == "aggregate":
            agg[rec["name"]] = float(rec["pq"]) if rec["pq"] else None
        else:
            raise FormatError(f"unknown CSV row kind {rec['kind']!r}")
    return RunReport(config=config, rows=tuple(rows), metadata=metadata, **agg)


def write_report(report: RunReport, fmt: str, path) -> None:
    path = Path(path)
    if fmt == "json":
        text = canonical_json(report.to_json())
    elif fmt == "csv":
        text = report_to_csv(report)
    else:
        raise ValidationError(f"unknown report format {fmt!r}; use 'json' or 'csv'")
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc


def read_report(path, fmt: str | None = None, check: bool = True) -> RunReport:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "json")
    text = path.read_text()
    if fmt == "json":
        try:
            report = RunReport.from_json(json.loads(text))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from None
    elif fmt == "csv":
        report = report_from_csv(text)
    else:
        raise ValidationError(f"unknown report format {fmt!r}")
    if check:
        check_report(report)
    return report


# ---------------------------------------------------------------------------
# hard-class diff


@dataclass(frozen=True)
class HardClassRow:
    class_id: int
    name: str
    fn_seg: int
    fn_cls: int
    tp: int
    tp_reference: int
    tp_drop: int
    recall: float


def hard_class_diff(
    run_openvocab: RunReport, run_reference: RunReport, recall_threshold: float = 0.1
) -> list[HardClassRow]:
    """Classes the open-vocabulary run recalls below the threshold, ranked by lost true positives."""
    ov = {r.class_id: r for r in run_openvocab.rows}
    ref = {r.class_id: r for r in run_reference.rows}
    ov_names = {(r.class_id, r.name) for r in run_openvocab.rows}
    ref_names = {(r.class_id, r.name) for r in run_reference.rows}
    if ov_names != ref_names:
        unmatched = sorted(ov_names ^ ref_names)
        raise ValidationError(f"reports use different taxonomies; unmatched classes: {unmatched}")
    table = []
    for cid, row in ov.items():
        drop = ref[cid].tp - row.tp
        if row.recall < recall_threshold and drop > 0:
            table.append(HardClassRow(cid, row.name, row.fn_seg, row.fn_cls, row.tp, ref[cid].tp, drop, row.recall))
    table.sort(key=lambda r: (-r.tp_drop, r.class_id))
    return table


def diff_to_csv(rows: Iterable[HardClassRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    columns = ("class_id", "name", "fn_seg", "fn_cls", "tp", "tp_reference", "tp_drop", "recall")
    writer.writerow(columns)
    for r in rows:
        d = asdict(r)
        writer.writerow([_csv_value(d[c]) for c in columns])
    return buf.getvalue()
