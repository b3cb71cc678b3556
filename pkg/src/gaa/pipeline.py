"""End-to-end orchestration: features, clustering, enhancement, placement,
image generation, filter training, scoring and top-k filtering.

Every stage writes its artifacts under the output directory and records a
content key (config section, upstream key and dataset fingerprint) plus output
hashes in ``state/<stage>.json``; a stage whose key and outputs are unchanged
is skipped unless forced.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import yaml
from filelock import FileLock, Timeout

from gaa import __version__
from gaa.clustering import ClusterConfig, multi_round_cluster
from gaa.dataset_io import (
    LAYOUTS,
    ManifestEntry,
    area,
    load_feature_file,
    load_image,
    load_mask,
    read_manifest,
    save_feature_file,
    save_image,
    save_mask,
    scan_dataset,
    write_manifest,
)
from gaa.errors import ConfigError, DegenerateEnhancementError, StageError
from gaa.features import DEFAULT_WEIGHTS, FeatureBlock, anomaly_descriptors, fuse_features
from gaa.filtering import (
    LOSSES,
    TrainConfig,
    ars,
    extract_local_features,
    load_model,
    save_model,
    score_image,
    select_top,
    train_filter,
)
from gaa.mask_enhance import SHAPES, EnhanceConfig, StructuringElement, enhance
from gaa.placement import read_plan, synthesize_aligned

logger = logging.getLogger(__name__)

STAGES = ("features", "cluster", "enhance", "place", "generate", "train", "score", "filter")
GENERATORS = ("paste", "none", "external")

_SE = {
    "type": "object",
    "properties": {"shape": {"enum": list(SHAPES)}, "radius": {"type": "integer", "minimum": 1}},
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["dataset", "seed", "output", "place"],
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "required": ["root"],
            "additionalProperties": False,
            "properties": {
                "root": {"type": "string"},
                "layout": {"enum": list(LAYOUTS)},
                "category": {"type": "string"},
                "regions": {"type": "string"},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
        "features": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "weights": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k: {"type": "number", "minimum": 0} for k in DEFAULT_WEIGHTS},
                },
                "deep_features": {"type": "string"},
            },
        },
        "cluster": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k_min": {"type": "integer", "minimum": 2},
                "k_max": {"type": "integer", "minimum": 2},
                "w1": {"type": "number", "minimum": 0},
                "w2": {"type": "number", "minimum": 0},
                "max_rounds": {"type": "integer", "minimum": 1},
                "restarts": {"type": "integer", "minimum": 1},
                "log_base": {"type": ["number", "null"], "exclusiveMinimum": 1},
                "eq2_literal": {"type": "boolean"},
                "per_label": {"type": "boolean"},
            },
        },
        "enhance": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "close": _SE,
                "erode": _SE,
                "delta": {"type": "number", "minimum": 0},
                "sigma": {"type": "number", "minimum": 0},
                "alpha": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "place": {
            "type": "object",
            "required": ["plan"],
            "additionalProperties": False,
            "properties": {"plan": {"type": "string"}},
        },
        "generate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"method": {"enum": list(GENERATORS)}, "dir": {"type": "string"}},
        },
        "filter": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "batch": {"type": "integer", "minimum": 1},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "lr_disc": {"type": "number", "exclusiveMinimum": 0},
                "lr_adaptor": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "hidden": {"type": "integer", "minimum": 1},
                "loss": {"enum": list(LOSSES)},
                "patch": {"type": "integer", "minimum": 1},
                "stride": {"type": "integer", "minimum": 1},
                "top_k": {"type": "integer", "minimum": 0},
            },
        },
    },
}


@dataclass(frozen=True)
class PipelineConfig:
    dataset_root: Path
    output: Path
    plan_path: Path
    seed: int
    layout: str = "mvtec_ad"
    category: Optional[str] = None
    regions_dir: Optional[Path] = None
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    deep_features: Optional[Path] = None
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    per_label: bool = True
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    generator: str = "paste"
    generated_dir: Optional[Path] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    patch: int = 16
    stride: int = 8
    top_k: int = 500

    def section(self, stage: str) -> dict:
        """The part of the config a stage depends on, for content keys."""
        if stage == "features":
            return {"layout": self.layout, "weights": self.weights, "deep": self.deep_features is not None}
        if stage == "cluster":
            return {"cluster": asdict(replace(self.cluster, jobs=1)), "per_label": self.per_label}
        if stage == "enhance":
            return {"enhance": asdict(self.enhance)}
        if stage == "place":
            return {"seed": self.seed}
        if stage == "generate":
            return {"seed": self.seed, "method": self.generator}
        if stage == "train":
            return {"train": asdict(self.train), "patch": self.patch, "stride": self.stride}
        if stage == "score":
            return {"patch": self.patch, "stride": self.stride}
        if stage == "filter":
            return {"top_k": self.top_k}
        raise KeyError(stage)


def _path(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def config_from_dict(data: dict, base_dir=".", seed: Optional[int] = None, jobs: int = 1) -> PipelineConfig:
    """Validate a parsed config document and resolve its paths against ``base_dir``."""
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    base = Path(base_dir)
    seed = int(data["seed"]) if seed is None else int(seed)
    ds = data["dataset"]
    root = _path(base, ds["root"])
    if not root.is_dir():
        raise ConfigError(f"dataset root does not exist: {root}")
    regions = _path(base, ds["regions"]) if "regions" in ds else None
    if regions is not None and not regions.is_dir():
        raise ConfigError(f"regions directory does not exist: {regions}")
    plan = _path(base, data["place"]["plan"])
    if not plan.is_file():
        raise ConfigError(f"placement plan does not exist: {plan}")
    try:
        read_plan(plan)
    except ValueError as exc:
        raise ConfigError(f"invalid placement plan: {exc}") from None

    feat = data.get("features", {})
    weights = dict(DEFAULT_WEIGHTS)
    weights.update(feat.get("weights", {}))
    deep = _path(base, feat["deep_features"]) if "deep_features" in feat else None
    if deep is not None and not deep.is_file():
        raise ConfigError(f"deep feature file does not exist: {deep}")

    cl = dict(data.get("cluster", {}))
    per_label = cl.pop("per_label", True)
    en = data.get("enhance", {})
    gen = data.get("generate", {})
    method = gen.get("method", "paste")
    gen_dir = _path(base, gen["dir"]) if "dir" in gen else None
    if method == "external" and (gen_dir is None or not gen_dir.is_dir()):
        raise ConfigError("generate.method 'external' needs an existing generate.dir")
    fl = data.get("filter", {})
    try:
        cluster = ClusterConfig(seed=seed, jobs=jobs, **cl)
        enhance_cfg = EnhanceConfig(
            close_b1=StructuringElement(**en.get("close", {})),
            erode_b2=StructuringElement(**en.get("erode", {})),
            delta=float(en.get("delta", 2.0)),
            perturb_sigma=float(en.get("sigma", 1.5)),
            alpha=float(en.get("alpha", 0.5)),
            seed=seed,
        )
        train = TrainConfig(
            epochs=fl.get("epochs", 160),
            batch=fl.get("batch", 4),
            noise_sigma=float(fl.get("sigma", 0.015)),
            lr_disc=float(fl.get("lr_disc", 2e-4)),
            lr_adaptor=float(fl.get("lr_adaptor", 1e-4)),
            weight_decay=float(fl.get("weight_decay", 1e-5)),
            hidden=fl.get("hidden", 64),
            loss=fl.get("loss", "hinge"),
            seed=seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config error: {exc}") from None
    return PipelineConfig(
        dataset_root=root,
        output=_path(base, data["output"]),
        plan_path=plan,
        seed=seed,
        layout=ds.get("layout", "mvtec_ad"),
        category=ds.get("category"),
        regions_dir=regions,
        weights=weights,
        deep_features=deep,
        cluster=cluster,
        per_label=per_label,
        enhance=enhance_cfg,
        generator=method,
        generated_dir=gen_dir,
        train=train,
        patch=fl.get("patch", 16),
        stride=fl.get("stride", 8),
        top_k=fl.get("top_k", 500),
    )


def load_config(path, seed: Optional[int] = None, jobs: int = 1) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data, path.parent, seed=seed, jobs=jobs)


# --------------------------------------------------------------------------
# hashing and state
# --------------------------------------------------------------------------

def _file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fp:
        for chunk in iter(lambda: fp.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _tree_fingerprint(h, root: Path, label: str) -> None:
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(f"{label}:{p.relative_to(root).as_posix()}\0".encode())
            h.update(_file_hash(p).encode())


def dataset_fingerprint(cfg: PipelineConfig) -> str:
    h = hashlib.sha256()
    _tree_fingerprint(h, cfg.dataset_root, "dataset")
    if cfg.regions_dir is not None:
        _tree_fingerprint(h, cfg.regions_dir, "regions")
    h.update(b"plan:" + _file_hash(cfg.plan_path).encode())
    if cfg.deep_features is not None:
        h.update(b"deep:" + _file_hash(cfg.deep_features).encode())
    if cfg.generated_dir is not None and cfg.generator == "external":
        _tree_fingerprint(h, cfg.generated_dir, "generated")
    return h.hexdigest()


def _stage_key(stage: str, cfg: PipelineConfig, upstream: str, fingerprint: str) -> str:
    doc = {"stage": stage, "config": cfg.section(stage), "upstream": upstream, "data": fingerprint,
           "version": __version__}
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def _up_to_date(state_file: Path, key: str, out: Path) -> bool:
    if not state_file.is_file():
        return False
    try:
        state = json.loads(state_file.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return False
    if state.get("key") != key:
        return False
    for rel, digest in state.get("outputs", {}).items():
        p = out / rel
        if not p.is_file() or _file_hash(p) != digest:
            return False
    return True


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

@dataclass
class _Context:
    cfg: PipelineConfig
    out: Path
    index: object = None


@dataclass
class _StageResult:
    outputs: list
    counts: dict
    warnings: list = field(default_factory=list)


def _rel_to(path: Path, base: Path) -> str:
    return Path(os.path.relpath(Path(path).resolve(), base.resolve())).as_posix()


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _read_tsv(path: Path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fp:
        return [line.rstrip("\n").split("\t") for line in fp if line.strip()]


def _write_tsv(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        fp.writelines("\t".join(str(v) for v in r) + "\n" for r in rows)


def _stage_features(ctx: _Context) -> _StageResult:
    cfg, out, index = ctx.cfg, ctx.out, ctx.index
    records = index.anomaly_records
    if not records:
        raise StageError("features", str(cfg.dataset_root), "dataset has no anomaly records")
    lab, lbp = [], []
    for rec in records:
        try:
            l_, b_ = anomaly_descriptors(load_image(rec.image), rec.load_mask())
        except (OSError, ValueError) as exc:
            raise StageError("features", str(rec.image), exc) from exc
        lab.append(l_)
        lbp.append(b_)
    blocks = [FeatureBlock("lab", np.array(lab), cfg.weights["lab"]),
              FeatureBlock("lbp", np.array(lbp), cfg.weights["lbp"])]
    if cfg.deep_features is not None:
        deep = load_feature_file(cfg.deep_features)
        if len(deep) != len(records):
            raise StageError("features", str(cfg.deep_features),
                             f"{len(deep)} rows for {len(records)} anomaly records")
        blocks.insert(0, FeatureBlock("deep", deep, cfg.weights["deep"]))
    fused = fuse_features(blocks)
    save_feature_file(out / "features" / "fused.gaat", fused)
    rows = [(i, rec.label, _rel_to(rec.image, cfg.dataset_root), _rel_to(rec.mask, cfg.dataset_root))
            for i, rec in enumerate(records)]
    _write_tsv(out / "features" / "records.tsv", rows)
    return _StageResult(["features/fused.gaat", "features/records.tsv"],
                        {"records": len(records), "dim": int(fused.shape[1])}, list(index.warnings))


def _stage_cluster(ctx: _Context) -> _StageResult:
    cfg, out = ctx.cfg, ctx.out
    x = load_feature_file(out / "features" / "fused.gaat")
    labels = [r[1] for r in _read_tsv(out / "features" / "records.tsv")]
    groups = sorted(set(labels)) if cfg.per_label else ["*"]
    assignment = np.empty(len(labels), dtype=np.int64)
    trees = {}
    offset = 0
    for g in groups:
        rows = np.array([i for i, lab in enumerate(labels) if g == "*" or lab == g])
        try:
            tree = multi_round_cluster(x[rows], cfg.cluster)
        except ValueError as exc:
            raise StageError("cluster", f"label {g!r}", exc) from exc
        assignment[rows] = tree.leaf_labels + offset
        doc = tree.to_dict()
        doc["rows"] = [int(r) for r in rows]
        doc["cluster_offset"] = offset
        trees[g] = doc
        offset += tree.n_leaves
    _write_json(out / "cluster" / "tree.json", {"per_label": cfg.per_label, "n_clusters": offset, "trees": trees})
    _write_tsv(out / "cluster" / "assignments.tsv", [(i, labels[i], int(c)) for i, c in enumerate(assignment)])
    return _StageResult(["cluster/tree.json", "cluster/assignments.tsv"],
                        {"clusters": offset, "groups": len(groups)})


def _stage_enhance(ctx: _Context) -> _StageResult:
    cfg, out, index = ctx.cfg, ctx.out, ctx.index
    rows = _read_tsv(out / "cluster" / "assignments.tsv")
    records = index.anomaly_records
    masks = [rec.load_mask() for rec in records]
    by_cluster: dict = {}
    for r, _, c in rows:
        by_cluster.setdefault(int(c), []).append(int(r))
    outputs, listing, warnings = [], [], []
    for cid in sorted(by_cluster):
        members = by_cluster[cid]
        a_avg = float(np.mean([area(masks[i]) for i in members]))
        for i in members:
            try:
                mg = enhance(masks[i], cfg.enhance, a_avg, seed=(cfg.seed, i))
            except DegenerateEnhancementError as exc:
                msg = f"enhancement of {records[i].mask} skipped: {exc}"
                logger.warning(msg)
                warnings.append(msg)
                continue
            except ValueError as exc:
                raise StageError("enhance", str(records[i].mask), exc) from exc
            rel = f"pool/{cid:03d}/{i:04d}.png"
            save_mask(out / rel, mg)
            outputs.append(rel)
            listing.append((cid, rel, _rel_to(records[i].mask, cfg.dataset_root), repr(a_avg)))
    if not outputs:
        raise StageError("enhance", "mask pool", "every enhancement was degenerate")
    _write_tsv(out / "pool" / "pool.tsv", listing)
    return _StageResult(outputs + ["pool/pool.tsv"], {"masks": len(outputs), "clusters": len(by_cluster)}, warnings)


def _load_pool(out: Path):
    pool: dict = {}
    names: dict = {}
    for cid, rel, *_ in _read_tsv(out / "pool" / "pool.tsv"):
        pool.setdefault(int(cid), []).append(load_mask(out / rel))
        names.setdefault(int(cid), []).append(rel)
    return pool, names


def _stage_place(ctx: _Context) -> _StageResult:
    cfg, out, index = ctx.cfg, ctx.out, ctx.index
    pool, names = _load_pool(out)
    n_clusters = json.loads((out / "cluster" / "tree.json").read_text(encoding="utf-8"))["n_clusters"]
    plan = read_plan(cfg.plan_path)
    try:
        entries, warnings = synthesize_aligned(index, set(range(n_clusters)), pool, plan, cfg.seed, names)
    except (KeyError, ValueError) as exc:
        raise StageError("place", str(cfg.plan_path), exc) from exc
    outputs, skeleton, prov = [], [], []
    for e in entries:
        rel = f"masks/r{e.row:02d}_{e.index:04d}.png"
        save_mask(out / rel, e.placed.mask)
        outputs.append(rel)
        skeleton.append((rel, _rel_to(e.image_path, out), e.cluster_id, e.kind))
        doc = e.provenance()
        doc["image"] = _rel_to(e.image_path, out)
        doc["mask"] = rel
        # members of combined masks are kept so overlap can be audited later
        for j, (member, m_doc) in enumerate(zip(e.placed.members, doc["members"])):
            m_rel = f"masks/r{e.row:02d}_{e.index:04d}_m{j}.png"
            save_mask(out / m_rel, member.mask)
            outputs.append(m_rel)
            m_doc["mask"] = m_rel
        prov.append(json.dumps(doc, sort_keys=True))
    _write_tsv(out / "masks" / "placed.tsv", skeleton)
    (out / "masks" / "provenance.jsonl").write_text("".join(p + "\n" for p in prov), encoding="utf-8")
    kinds = {k: sum(1 for e in entries if e.kind == k) for k in ("structural", "logical", "combined")}
    return _StageResult(outputs + ["masks/placed.tsv", "masks/provenance.jsonl"],
                        {"masks": len(entries), **kinds}, warnings)


def _cluster_colors(ctx: _Context) -> dict:
    """Mean RGB of the real anomaly pixels of each cluster."""
    records = ctx.index.anomaly_records
    sums: dict = {}
    for r, _, c in _read_tsv(ctx.out / "cluster" / "assignments.tsv"):
        rec = records[int(r)]
        px = load_image(rec.image)[rec.load_mask()].astype(np.float64)
        s = sums.setdefault(int(c), [np.zeros(3), 0])
        s[0] += px.sum(axis=0)
        s[1] += len(px)
    return {c: s / n for c, (s, n) in sums.items()}


def paste_anomaly(image: np.ndarray, mask: np.ndarray, color, seed, noise: float = 8.0) -> np.ndarray:
    """Stand-in generator: fill the mask with a noisy anomaly color."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = image.copy()
    n = int(np.count_nonzero(mask))
    fill = np.asarray(color, dtype=np.float64) + rng.normal(0.0, noise, size=(n, 3))
    out[mask] = np.clip(np.rint(fill), 0, 255).astype(np.uint8)
    return out


def _stage_generate(ctx: _Context) -> _StageResult:
    cfg, out = ctx.cfg, ctx.out
    placed = _read_tsv(out / "masks" / "placed.tsv")
    colors = _cluster_colors(ctx) if cfg.generator == "paste" else {}
    entries, outputs = [], []
    for n, (mask_rel, image_rel, cid, kind) in enumerate(placed):
        mask_path = out / mask_rel
        if cfg.generator == "none":
            image_path = out / image_rel
        elif cfg.generator == "external":
            image_path = cfg.generated_dir / Path(mask_rel).name
            if not image_path.is_file():
                raise StageError("generate", str(image_path), "external generator output missing")
        else:
            try:
                img = load_image(out / image_rel)
                mask = load_mask(mask_path)
                gen = paste_anomaly(img, mask, colors[int(cid)], seed=(cfg.seed, n))
            except (OSError, ValueError, KeyError) as exc:
                raise StageError("generate", mask_rel, exc) from exc
            rel = f"generated/{Path(mask_rel).name}"
            save_image(out / rel, gen)
            outputs.append(rel)
            image_path = out / rel
        entries.append(ManifestEntry(image_path.resolve(), mask_path.resolve(), int(cid), kind))
    write_manifest(out / "manifest.tsv", entries)
    return _StageResult(outputs + ["manifest.tsv"], {"pairs": len(entries)})


def _stage_train(ctx: _Context) -> _StageResult:
    cfg, out, index = ctx.cfg, ctx.out, ctx.index
    if not index.normal_images:
        raise StageError("train", str(cfg.dataset_root), "no normal images")
    maps = []
    for p in index.normal_images:
        try:
            maps.append(extract_local_features(load_image(p), cfg.patch, cfg.stride))
        except (OSError, ValueError) as exc:
            raise StageError("train", str(p), exc) from exc
    try:
        model = train_filter(maps, cfg.train)
    except (ValueError, FloatingPointError) as exc:
        raise StageError("train", "filter model", exc) from exc
    model.meta.update({"patch": cfg.patch, "stride": cfg.stride})
    save_model(out / "filter" / "filter.model", model)
    return _StageResult(["filter/filter.model"], {"images": len(maps), "final_loss": model.meta["final_epoch_loss"]})


def score_manifest(model, entries, patch: int, stride: int) -> list[ManifestEntry]:
    scored = []
    for e in entries:
        img = load_image(e.image_path)
        mask = load_mask(e.mask_path)
        if img.shape[:2] != mask.shape:
            raise ValueError(f"image {e.image_path} and mask {e.mask_path} differ in size")
        sm = score_image(model, extract_local_features(img, patch, stride), *mask.shape)
        scored.append(e.with_ars(ars(sm, mask)))
    return scored


def _stage_score(ctx: _Context) -> _StageResult:
    cfg, out = ctx.cfg, ctx.out
    model = load_model(out / "filter" / "filter.model")
    entries = read_manifest(out / "manifest.tsv")
    try:
        scored = score_manifest(model, entries, cfg.patch, cfg.stride)
    except (OSError, ValueError) as exc:
        raise StageError("score", str(out / "manifest.tsv"), exc) from exc
    write_manifest(out / "scored.tsv", scored)
    return _StageResult(["scored.tsv"], {"pairs": len(scored)})


def _stage_filter(ctx: _Context) -> _StageResult:
    cfg, out = ctx.cfg, ctx.out
    entries = read_manifest(out / "scored.tsv")
    kept = select_top(entries, cfg.top_k)
    write_manifest(out / "final.tsv", kept)
    return _StageResult(["final.tsv"], {"kept": len(kept), "discarded": len(entries) - len(kept)})


_STAGE_FUNCS = {
    "features": _stage_features,
    "cluster": _stage_cluster,
    "enhance": _stage_enhance,
    "place": _stage_place,
    "generate": _stage_generate,
    "train": _stage_train,
    "score": _stage_score,
    "filter": _stage_filter,
}
# upstream stage whose key a stage's key chains to
_UPSTREAM = {"features": None, "cluster": "features", "enhance": "cluster", "place": "enhance",
             "generate": "place", "train": None, "score": "generate", "filter": "score"}


@dataclass
class RunResult:
    manifest: list
    report: dict


def run_pipeline(cfg: PipelineConfig, force: bool = False) -> RunResult:
    """Run every stage in order, skipping those whose outputs are current."""
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".gaa.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"output directory {out} is locked by another run") from None
    try:
        return _run_locked(cfg, out, force)
    finally:
        lock.release()


def _run_locked(cfg: PipelineConfig, out: Path, force: bool) -> RunResult:
    started = datetime.now(timezone.utc).isoformat()
    fingerprint = dataset_fingerprint(cfg)
    ctx = _Context(cfg, out)
    try:
        ctx.index = scan_dataset(cfg.dataset_root, cfg.layout, cfg.regions_dir)
    except (OSError, ValueError) as exc:
        raise StageError("scan", str(cfg.dataset_root), exc) from exc
    keys: dict = {}
    report_stages = []
    for stage in STAGES:
        up = _UPSTREAM[stage]
        upstream = keys[up] if up else ""
        if stage == "score":
            upstream += keys["train"]
        key = keys[stage] = _stage_key(stage, cfg, upstream, fingerprint)
        state_file = out / "state" / f"{stage}.json"
        t0 = time.perf_counter()
        if not force and _up_to_date(state_file, key, out):
            state = json.loads(state_file.read_text(encoding="utf-8"))
            report_stages.append({"stage": stage, "status": "skipped", "duration_s": 0.0,
                                  "counts": state.get("counts", {}), "warnings": []})
            logger.info("stage %s up to date, skipped", stage)
            continue
        logger.info("stage %s running", stage)
        try:
            result = _STAGE_FUNCS[stage](ctx)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - any failure is reported against the stage
            raise StageError(stage, "-", exc) from exc
        outputs = {rel: _file_hash(out / rel) for rel in result.outputs}
        _write_json(state_file, {"key": key, "outputs": outputs, "counts": result.counts})
        report_stages.append({"stage": stage, "status": "ran", "duration_s": round(time.perf_counter() - t0, 3),
                              "counts": result.counts, "warnings": result.warnings})
    report = {
        "version": __version__,
        "seed": cfg.seed,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "stages": report_stages,
    }
    _write_json(out / "report.json", report)
    return RunResult(read_manifest(out / "final.tsv"), report)


# --------------------------------------------------------------------------
# inspection
# --------------------------------------------------------------------------

def render_overlay(image: np.ndarray, mask: np.ndarray, score_map=None, alpha: float = 0.5,
                   color=(255, 0, 0), heat_color=(255, 255, 0)) -> np.ndarray:
    """Tint mask pixels toward ``color``; optionally tint every pixel toward
    ``heat_color`` in proportion to its score first."""
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} dimensions differ")
    out = image.astype(np.float64)
    if score_map is not None:
        values = getattr(score_map, "values", score_map)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != mask.shape:
            raise ValueError(f"score map {values.shape} and mask {mask.shape} dimensions differ")
        w = alpha * np.clip(values, 0.0, 1.0)[..., None]
        out = (1.0 - w) * out + w * np.asarray(heat_color, dtype=np.float64)
    out[mask] = (1.0 - alpha) * out[mask] + alpha * np.asarray(color, dtype=np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
